"""Dual-teacher training loop and the baseline / ablation method matrix.

One iteration draws a batch from every stream a method uses (labeled source
``d_s``, labeled target ``d_t``, unlabeled target ``d_u``). For the full
method the iteration runs three phases in order:

1. the inter-domain teacher takes an optimizer step on translated source
   images with their labels;
2. the intra-domain teacher is blended towards the current student weights;
3. the student takes an optimizer step on its supervised loss plus
   distillation from the (now frozen) inter-domain teacher on the same
   translated images and consistency with the intra-domain teacher on
   independently perturbed unlabeled images.

The other methods switch components on and off via ``METHODS``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .align import Translator, fit_translator, translate
from .ema import EmaState, ema_init, ema_update
from .errors import ConfigurationError, InputError, StateError, TrainingDivergenceError
from .losses import (LossWeights, consistency_loss, kd_loss, lambda_con, seg_loss,
                     student_total_loss)
from .metrics import evaluate_model
from .segnet import NetworkConfig, augment_pair, build_network, forward, perturb, softmax

log = logging.getLogger(__name__)

STREAMS = ("d_s", "d_t", "d_u")


@dataclass(frozen=True)
class MethodSpec:
    streams: tuple
    translate_source: bool = False
    joint_source: bool = False  # source images enter the student's supervised loss
    inter_teacher: bool = False
    intra_teacher: bool = False
    pseudo_labels: bool = False


METHODS = {
    "supervised_only": MethodSpec(("d_t",)),
    "joint_training": MethodSpec(("d_s", "d_t"), joint_source=True),
    "pseudo_label_baseline": MethodSpec(STREAMS, joint_source=True, pseudo_labels=True),
    "gan_baseline": MethodSpec(STREAMS, translate_source=True, joint_source=True, pseudo_labels=True),
    "mean_teacher": MethodSpec(("d_t", "d_u"), intra_teacher=True),
    "no_inter_teacher": MethodSpec(STREAMS, translate_source=True, joint_source=True, intra_teacher=True),
    "no_intra_teacher": MethodSpec(STREAMS, translate_source=True, inter_teacher=True, pseudo_labels=True),
    "dual_teacher": MethodSpec(STREAMS, translate_source=True, inter_teacher=True, intra_teacher=True),
}


@dataclass
class TrainConfig:
    method: str = "dual_teacher"
    epochs: int = 50
    batch_size_s: int = 4
    batch_size_t: int = 4
    batch_size_u: int = 4
    learning_rate: float = 1e-4
    betas: tuple = (0.9, 0.999)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    noise_sigma: float = 0.1
    ema_alpha: float = 0.99
    ema_after_student: bool = False
    ema_per_iteration: bool = True
    pseudo_label_threshold: float = 0.0
    pseudo_label_weight: float = 1.0
    pseudo_label_warmup: float = 0.5
    include_background: bool = True
    augment: bool = True
    translator: str = "histogram_match"
    base_channels: int = 8
    depth: int = 2
    norm: str = "group"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.betas = tuple(self.betas)
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; choose from {sorted(METHODS)}")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if min(self.batch_size_s, self.batch_size_t, self.batch_size_u) < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        if not 0.0 <= self.pseudo_label_threshold <= 1.0:
            raise ConfigurationError("pseudo_label_threshold must lie in [0, 1]")
        if not 0.0 <= self.ema_alpha < 1.0:
            raise ConfigurationError("ema_alpha must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be nonnegative")
        # the ramp-up horizon is the last training epoch
        if self.loss_weights.t_max != self.epochs:
            self.loss_weights = dataclasses.replace(self.loss_weights, t_max=self.epochs)

    @property
    def spec(self) -> MethodSpec:
        return METHODS[self.method]

    def batch_size(self, stream):
        return {"d_s": self.batch_size_s, "d_t": self.batch_size_t, "d_u": self.batch_size_u}[stream]

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def hash(self):
        return ckpt.config_hash(self.to_dict())


class StreamSampler:
    """Cycles through a stream in freshly shuffled passes, carrying leftovers over."""

    def __init__(self, n, batch_size):
        self.n = n
        self.batch_size = batch_size
        self.queue = []

    def next_batch(self, rng):
        out = []
        while len(out) < self.batch_size:
            if not self.queue:
                self.queue = rng.permutation(self.n).tolist()
            out.append(self.queue.pop(0))
        return out


@dataclass
class TrainState:
    config: TrainConfig
    net_cfg: NetworkConfig
    student: torch.nn.Module
    student_opt: torch.optim.Optimizer
    data: dict
    inter_teacher: torch.nn.Module | None = None
    inter_opt: torch.optim.Optimizer | None = None
    ema_state: EmaState | None = None
    translator: Translator | None = None
    epoch: int = 0
    iteration: int = 0
    metrics_log: list = field(default_factory=list)
    rngs: dict = field(default_factory=dict)
    samplers: dict = field(default_factory=dict)
    pseudo: tuple | None = None
    best_mean_dice: float = -1.0
    best_epoch: int = 0
    fold_index: int = 0


def _stack(samples):
    x = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))[:, None]
    y = None
    if samples[0].label is not None:
        y = torch.from_numpy(np.stack([s.label for s in samples]).astype(np.int64))
    return x, y


def _adam(net, cfg):
    return torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=cfg.betas)


def make_method_state(config: TrainConfig, bundle) -> TrainState:
    """Wire the components a method needs and check its data streams."""
    spec = config.spec
    missing = [s for s in spec.streams if not getattr(bundle, s)]
    if missing:
        raise ConfigurationError(f"method {config.method} needs nonempty streams: {', '.join(missing)}")
    if not bundle.val:
        raise ConfigurationError("validation set is empty")
    unused = [s for s in STREAMS if s not in spec.streams and getattr(bundle, s)]
    if unused:
        log.warning("method %s ignores streams: %s", config.method, ", ".join(unused))

    image_size = bundle.image_size
    net_cfg = NetworkConfig(num_classes=bundle.num_classes, base_channels=config.base_channels,
                            depth=config.depth, norm=config.norm, seed=config.seed)
    student = build_network(net_cfg, image_size)
    data = {s: _stack(getattr(bundle, s)) for s in spec.streams}
    ss = np.random.SeedSequence(config.seed).spawn(3)
    state = TrainState(
        config=config,
        net_cfg=net_cfg,
        student=student,
        student_opt=_adam(student, config),
        data=data,
        rngs={name: np.random.default_rng(s) for name, s in zip(("order", "noise", "augment"), ss)},
        samplers={s: StreamSampler(len(data[s][0]), config.batch_size(s)) for s in spec.streams},
        fold_index=bundle.fold_index,
    )
    if spec.translate_source:
        state.translator = fit_translator(
            [s.image for s in bundle.d_t] + [s.image for s in bundle.d_u], kind=config.translator
        )
    if spec.inter_teacher:
        state.inter_teacher = build_network(dataclasses.replace(net_cfg, seed=config.seed + 1), image_size)
        state.inter_opt = _adam(state.inter_teacher, config)
    if spec.intra_teacher:
        state.ema_state = ema_init(student, config.ema_alpha)
    return state


def generate_pseudo_labels(model, images, threshold=0.0):
    """Argmax pseudo-labels and a confidence mask (max prob >= threshold).

    ``images`` is a list of ``(H, W)`` arrays or an ``(N, 1, H, W)`` tensor.
    Returns a list of ``(image, label, mask)`` triples.
    """
    if isinstance(images, torch.Tensor):
        x = images
        images = list(images[:, 0].numpy())
    else:
        x = torch.from_numpy(np.stack(images).astype(np.float32))[:, None]
    labels, masks = _pseudo_tensors(model, x, threshold)
    return [(img, lab.numpy(), m.numpy()) for img, lab, m in zip(images, labels, masks)]


@torch.no_grad()
def _pseudo_tensors(model, x, threshold):
    was_training = model.training
    model.eval()
    prob = softmax(forward(model, x))
    model.train(was_training)
    conf, labels = prob.max(dim=1)
    return labels, conf >= threshold


def _check_finite(value, phase):
    if not torch.isfinite(value).all():
        raise TrainingDivergenceError(f"non-finite loss in {phase} phase", term=phase)


def _probs(net, x, phase):
    logits = forward(net, x)
    if not torch.isfinite(logits).all():
        raise TrainingDivergenceError(f"non-finite logits in {phase} phase", term=phase)
    return softmax(logits)


def _check_params(net, phase):
    for name, p in net.named_parameters():
        if not torch.isfinite(p).all():
            raise TrainingDivergenceError(f"non-finite parameter {name} after {phase} step", term=phase)


def train_step(state: TrainState, batch_s, batch_t, batch_u, t, on_phase=None):
    """One iteration of the configured method; returns the step's loss components.

    ``batch_s``/``batch_t`` are ``(images, labels)``; ``batch_u`` is
    ``(images, pseudo_labels, mask)`` with the last two possibly ``None``.
    ``on_phase(name)`` is called after each of the three phases.
    """
    cfg, spec = state.config, state.config.spec
    notify = on_phase or (lambda name: None)
    out = {}

    x_s = y_s = None
    if batch_s is not None:
        x_s, y_s = batch_s
        if spec.translate_source:
            if state.translator is None:
                raise StateError("method translates source images but no translator is fitted")
            x_s = translate(state.translator, x_s)

    if spec.inter_teacher:
        if state.inter_teacher is None or x_s is None:
            raise StateError("inter-domain teacher step needs the teacher and a source batch")
        teacher, opt = state.inter_teacher, state.inter_opt
        teacher.train()
        opt.zero_grad(set_to_none=True)
        tea_seg = seg_loss(_probs(teacher, x_s, "inter_teacher"), y_s, include_background=cfg.include_background)
        _check_finite(tea_seg, "inter_teacher")
        tea_seg.backward()
        opt.step()
        opt.zero_grad(set_to_none=True)
        _check_params(teacher, "inter_teacher")
        out["tea_seg"] = tea_seg.item()
    notify("inter_teacher")

    if spec.intra_teacher:
        if state.ema_state is None:
            raise StateError("intra-domain teacher missing")
        if cfg.ema_per_iteration and not cfg.ema_after_student:
            ema_update(state.ema_state, state.student)
    notify("intra_teacher")

    student, opt = state.student, state.student_opt
    student.train()
    opt.zero_grad(set_to_none=True)
    x_t, y_t = batch_t
    if spec.joint_source:
        x_lab, y_lab = torch.cat([x_s, x_t]), torch.cat([y_s, y_t])
    else:
        x_lab, y_lab = x_t, y_t
    seg = seg_loss(_probs(student, x_lab, "student"), y_lab, include_background=cfg.include_background)
    zero = torch.zeros(())
    kd = con = pseudo = zero

    if spec.inter_teacher:
        with torch.no_grad():
            p_tea = _probs(state.inter_teacher, x_s, "student")
        kd = kd_loss(p_tea, _probs(student, x_s, "student"))

    if spec.intra_teacher:
        x_u = batch_u[0]
        noise = state.rngs["noise"]
        x_stu = perturb(x_u, cfg.noise_sigma, noise)
        x_tea = perturb(x_u, cfg.noise_sigma, noise)
        with torch.no_grad():
            p_ema = _probs(state.ema_state.teacher, x_tea, "intra_teacher")
        con = consistency_loss(_probs(student, x_stu, "student"), p_ema)

    if spec.pseudo_labels and batch_u is not None and batch_u[1] is not None:
        x_u, y_u, m_u = batch_u
        pseudo = seg_loss(_probs(student, x_u, "student"), y_u, mask=m_u,
                          include_background=cfg.include_background)

    total = student_total_loss(seg, kd, con, t, cfg.loss_weights)
    if spec.pseudo_labels:
        _check_finite(pseudo, "pseudo_label")
        total = total + cfg.pseudo_label_weight * pseudo
    _check_finite(total, "student")
    total.backward()
    opt.step()
    opt.zero_grad(set_to_none=True)
    _check_params(student, "student")
    notify("student")

    if spec.intra_teacher and cfg.ema_per_iteration and cfg.ema_after_student:
        ema_update(state.ema_state, student)

    state.iteration += 1
    out.update(seg=seg.item(), kd=kd.item(), con=con.item(), pseudo=pseudo.item(),
               lambda_con=lambda_con(t, cfg.loss_weights), total=total.item())
    return out


def train_step_dual_teacher(state, batch_s, batch_t, batch_u, t, on_phase=None):
    if state.config.method != "dual_teacher":
        raise StateError(f"state is configured for {state.config.method}, not dual_teacher")
    if batch_s is None or batch_t is None or batch_u is None:
        raise StateError("dual-teacher step needs source, labeled target and unlabeled batches")
    return train_step(state, batch_s, batch_t, batch_u, t, on_phase)


def _anchor(state):
    """Stream that defines the epoch length (most batches per pass)."""
    spec = state.config.spec
    return max(spec.streams, key=lambda s: math.ceil(len(state.data[s][0]) / state.config.batch_size(s)))


def steps_per_epoch(state):
    s = _anchor(state)
    return math.ceil(len(state.data[s][0]) / state.config.batch_size(s))


def _warmup_epochs(cfg):
    return int(cfg.epochs * cfg.pseudo_label_warmup)


def _gather(state, stream, idx, augment):
    x, y = state.data[stream]
    idx_t = torch.as_tensor(idx)
    xb = x[idx_t]
    yb = None if y is None else y[idx_t]
    if augment and yb is not None:
        xb, yb = augment_pair(xb, yb, state.rngs["augment"])
    return xb, yb


def run_epoch(state: TrainState, epoch: int):
    """Train one epoch (1-based ``epoch``); returns mean loss components."""
    cfg, spec = state.config, state.config.spec
    order = state.rngs["order"]
    if spec.pseudo_labels and epoch > _warmup_epochs(cfg):
        state.pseudo = _pseudo_tensors(state.student, state.data["d_u"][0], cfg.pseudo_label_threshold)
    anchor = _anchor(state)
    bs = cfg.batch_size(anchor)
    perm = order.permutation(len(state.data[anchor][0])).tolist()
    n_steps = math.ceil(len(perm) / bs)
    sums = {}
    for step in range(n_steps):
        idx = {}
        for s in spec.streams:
            idx[s] = perm[step * bs:(step + 1) * bs] if s == anchor else state.samplers[s].next_batch(order)
        batch_s = _gather(state, "d_s", idx["d_s"], cfg.augment) if "d_s" in idx else None
        batch_t = _gather(state, "d_t", idx["d_t"], cfg.augment)
        batch_u = None
        if "d_u" in idx:
            iu = torch.as_tensor(idx["d_u"])
            x_u = state.data["d_u"][0][iu]
            if state.pseudo is not None:
                batch_u = (x_u, state.pseudo[0][iu], state.pseudo[1][iu])
            else:
                batch_u = (x_u, None, None)
        losses = train_step(state, batch_s, batch_t, batch_u, epoch)
        for k, v in losses.items():
            sums[k] = sums.get(k, 0.0) + v
    if spec.intra_teacher and not cfg.ema_per_iteration:
        ema_update(state.ema_state, state.student)
    return {k: v / n_steps for k, v in sums.items()}


def _metrics_line(state, epoch, losses, record):
    cfg = state.config
    return {
        "epoch": epoch,
        "method": cfg.method,
        "seed": cfg.seed,
        "fold": state.fold_index,
        "lambda_con": lambda_con(epoch, cfg.loss_weights),
        "loss": {k: losses[k] for k in sorted(losses)},
        "val_dice": {str(c): v for c, v in record.per_class_dice.items()},
        "mean_dice": record.mean_dice,
        "n_degenerate": record.n_degenerate,
        "n_images": record.n_images,
    }


def dumps_line(line):
    return json.dumps(line, sort_keys=True)


def state_payload(state: TrainState) -> dict:
    p = {
        "config": state.config.to_dict(),
        "config_hash": state.config.hash(),
        "network": dataclasses.asdict(state.net_cfg),
        "epoch": state.epoch,
        "iteration": state.iteration,
        "fold_index": state.fold_index,
        "student": state.student.state_dict(),
        "student_opt": state.student_opt.state_dict(),
        "rng": {k: g.bit_generator.state for k, g in state.rngs.items()},
        "samplers": {k: list(s.queue) for k, s in state.samplers.items()},
        "metrics_log": state.metrics_log,
        "best_mean_dice": state.best_mean_dice,
        "best_epoch": state.best_epoch,
        "translator": state.translator.to_json() if state.translator is not None else None,
    }
    if state.inter_teacher is not None:
        p["inter_teacher"] = state.inter_teacher.state_dict()
        p["inter_opt"] = state.inter_opt.state_dict()
    if state.ema_state is not None:
        p["ema"] = {"alpha": state.ema_state.alpha, "step": state.ema_state.step,
                    "teacher": state.ema_state.teacher.state_dict()}
    return p


def restore_state(state: TrainState, payload: dict) -> TrainState:
    """Load a checkpoint payload into a freshly made state for the same config."""
    if payload["config_hash"] != state.config.hash():
        raise ConfigurationError("checkpoint config hash does not match the current TrainConfig")
    state.student.load_state_dict(payload["student"])
    state.student_opt.load_state_dict(payload["student_opt"])
    if state.inter_teacher is not None:
        state.inter_teacher.load_state_dict(payload["inter_teacher"])
        state.inter_opt.load_state_dict(payload["inter_opt"])
    if state.ema_state is not None:
        state.ema_state.teacher.load_state_dict(payload["ema"]["teacher"])
        state.ema_state.alpha = payload["ema"]["alpha"]
        state.ema_state.step = payload["ema"]["step"]
    for k, g in state.rngs.items():
        g.bit_generator.state = payload["rng"][k]
    for k, q in payload["samplers"].items():
        state.samplers[k].queue = list(q)
    if payload.get("translator"):
        state.translator = Translator.from_json(payload["translator"])
    state.epoch = payload["epoch"]
    state.iteration = payload["iteration"]
    state.metrics_log = list(payload["metrics_log"])
    state.best_mean_dice = payload["best_mean_dice"]
    state.best_epoch = payload["best_epoch"]
    return state


METRICS_FILE = "metrics.jsonl"
LAST_CKPT = "checkpoint_last.json"
BEST_CKPT = "checkpoint_best.json"
FINAL_CKPT = "checkpoint_final.json"


def train(config: TrainConfig, bundle, out_dir=None, resume=False, stop_after=None,
          on_epoch=None) -> TrainState:
    """Train ``config.method`` on ``bundle``.

    With ``out_dir`` set, metrics go to ``metrics.jsonl`` (one JSON object per
    epoch) and checkpoints are written each epoch (last), on improvement
    (best) and at the end (final). ``resume`` continues from the last
    checkpoint in ``out_dir``; ``stop_after`` ends early after that epoch as if
    interrupted.
    """
    state = make_method_state(config, bundle)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if state.translator is not None:
            (out / "translator.json").write_text(state.translator.to_json() + "\n")
    if resume:
        if out is None or not (out / LAST_CKPT).exists():
            raise StateError("resume requested but no checkpoint found")
        restore_state(state, ckpt.load_checkpoint(out / LAST_CKPT, expected_hash=config.hash()))
    if out is not None:
        # drop lines written after the checkpoint we resumed from
        (out / METRICS_FILE).write_text("".join(dumps_line(l) + "\n" for l in state.metrics_log))

    for epoch in range(state.epoch + 1, config.epochs + 1):
        if stop_after is not None and epoch > stop_after:
            break
        losses = run_epoch(state, epoch)
        try:
            record = evaluate_model(state.student, bundle.val, state.net_cfg.num_classes,
                                    fold_index=state.fold_index, method=config.method, seed=config.seed)
        except InputError as exc:
            # validation images are finite, so this is the network blowing up
            raise TrainingDivergenceError(f"validation after epoch {epoch}: {exc}", term="validation") from exc
        line = _metrics_line(state, epoch, losses, record)
        state.metrics_log.append(line)
        state.epoch = epoch
        improved = record.mean_dice > state.best_mean_dice
        if improved:
            state.best_mean_dice, state.best_epoch = record.mean_dice, epoch
        log.info("%s seed=%d epoch %d/%d loss=%.4f val_dice=%.4f", config.method, config.seed,
                 epoch, config.epochs, losses["total"], record.mean_dice)
        if out is not None:
            with open(out / METRICS_FILE, "a") as f:
                f.write(dumps_line(line) + "\n")
            payload = state_payload(state)
            ckpt.save_checkpoint(payload, out / LAST_CKPT)
            if improved:
                ckpt.save_checkpoint(payload, out / BEST_CKPT)
        if on_epoch is not None:
            on_epoch(state, line)
    if out is not None and state.epoch == config.epochs:
        ckpt.save_checkpoint(state_payload(state), out / FINAL_CKPT)
    return state
