import dataclasses
import json
import math

import numpy as np
import pytest
import torch

from dualteacher.errors import ConfigurationError, StateError
from dualteacher.losses import lambda_con
from dualteacher.phantomgen import PhantomSpec, generate_dataset, make_folds
from dualteacher.segnet import snapshot
from dualteacher.trainer import (METHODS, METRICS_FILE, StreamSampler, TrainConfig,
                                 generate_pseudo_labels, make_method_state, steps_per_epoch, train,
                                 train_step, train_step_dual_teacher)


@pytest.fixture(scope="module")
def bundle():
    spec = PhantomSpec(image_size=32, seed=4)
    return make_folds(generate_dataset(spec, 8, 12), 4, 1 / 3, seed=0, spec=spec)[0]


def batches(state, bundle, n=2):
    def stack(samples):
        x = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))[:, None]
        y = None if samples[0].label is None else torch.from_numpy(
            np.stack([s.label for s in samples]).astype(np.int64))
        return x, y
    xs, ys = stack(bundle.d_s[:n])
    xt, yt = stack(bundle.d_t[:n])
    xu, _ = stack(bundle.d_u[:n])
    return (xs, ys), (xt, yt), (xu, None, None)


def cfg(method="dual_teacher", **kw):
    kw.setdefault("epochs", 4)
    return TrainConfig(method=method, **kw)


@pytest.mark.parametrize("method, inter, intra, translator", [
    ("dual_teacher", True, True, True),
    ("supervised_only", False, False, False),
    ("joint_training", False, False, False),
    ("gan_baseline", False, False, True),
    ("pseudo_label_baseline", False, False, False),
    ("mean_teacher", False, True, False),
    ("no_inter_teacher", False, True, True),
    ("no_intra_teacher", True, False, True),
])
def test_method_wiring(bundle, method, inter, intra, translator):
    st = make_method_state(cfg(method), bundle)
    assert (st.inter_teacher is not None) == inter
    assert (st.ema_state is not None) == intra
    assert (st.translator is not None) == translator
    assert set(st.data) == set(METHODS[method].streams)


def test_mean_teacher_ignores_source_with_warning(bundle, caplog):
    with caplog.at_level("WARNING"):
        st = make_method_state(cfg("mean_teacher"), bundle)
    assert "d_s" not in st.data
    assert "ignores" in caplog.text and "d_s" in caplog.text


def test_missing_stream_names_it(bundle):
    empty_u = dataclasses.replace(bundle, d_u=[])
    with pytest.raises(ConfigurationError, match="d_u"):
        make_method_state(cfg("mean_teacher"), empty_u)
    empty_t = dataclasses.replace(bundle, d_t=[])
    with pytest.raises(ConfigurationError, match="d_t"):
        train(cfg("supervised_only"), empty_t)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(method="nope")
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=0)
    c = TrainConfig(epochs=7)
    assert c.loss_weights.t_max == 7
    assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


def test_step_losses_recompose(bundle):
    st = make_method_state(cfg(), bundle)
    b_s, b_t, b_u = batches(st, bundle)
    out = train_step_dual_teacher(st, b_s, b_t, b_u, t=2)
    lam = lambda_con(2, st.config.loss_weights)
    assert out["lambda_con"] == lam
    assert abs(out["total"] - (out["seg"] + 0.1 * out["kd"] + lam * out["con"])) < 1e-6
    assert out["kd"] > 0 and out["con"] > 0 and out["tea_seg"] > 0


def test_zero_weights_match_supervised_step(bundle):
    weights = dict(lambda_kd=0.0, lambda_con_max=0.0)
    from dualteacher.losses import LossWeights
    dual = make_method_state(cfg(loss_weights=LossWeights(**weights)), bundle)
    sup = make_method_state(cfg("supervised_only"), bundle)
    b_s, b_t, b_u = batches(dual, bundle)
    train_step(dual, b_s, b_t, b_u, t=1)
    train_step(sup, None, b_t, None, t=1)
    for (name, a), b in zip(snapshot(dual.student).items(), snapshot(sup.student).values()):
        assert torch.equal(a, b), name


def test_dual_step_requires_batches(bundle):
    st = make_method_state(cfg(), bundle)
    b_s, b_t, b_u = batches(st, bundle)
    with pytest.raises(StateError):
        train_step_dual_teacher(st, None, b_t, b_u, t=1)
    other = make_method_state(cfg("mean_teacher"), bundle)
    with pytest.raises(StateError):
        train_step_dual_teacher(other, b_s, b_t, b_u, t=1)


def test_phase_order_and_ema_replay(bundle):
    st = make_method_state(cfg(), bundle)
    b_s, b_t, b_u = batches(st, bundle)
    train_step(st, b_s, b_t, b_u, t=1)  # move off the identical-copy start
    snaps = {}

    def take(label):
        snaps[label] = (snapshot(st.inter_teacher), snapshot(st.ema_state.teacher), snapshot(st.student))

    take("start")
    train_step(st, b_s, b_t, b_u, t=2, on_phase=take)
    changed = lambda a, b: any(not torch.equal(x, y) for x, y in zip(a.values(), b.values()))
    order = ["start", "inter_teacher", "intra_teacher", "student"]
    owner = {"inter_teacher": 0, "intra_teacher": 1, "student": 2}
    for prev, cur in zip(order, order[1:]):
        for k in range(3):
            assert changed(snaps[prev][k], snaps[cur][k]) == (owner[cur] == k), (cur, k)
    alpha = st.config.ema_alpha
    for name, old in snaps["start"][1].items():
        expected = old.clone().mul_(alpha).add_(snaps["start"][2][name], alpha=1 - alpha)
        assert torch.equal(snaps["intra_teacher"][1][name], expected)
    assert st.ema_state.step == 2


def test_ema_after_student_flag(bundle):
    st = make_method_state(cfg(ema_after_student=True), bundle)
    b_s, b_t, b_u = batches(st, bundle)
    before = snapshot(st.ema_state.teacher)
    train_step(st, b_s, b_t, b_u, t=1)
    alpha = st.config.ema_alpha
    for name, old in before.items():
        expected = old.clone().mul_(alpha).add_(st.student.state_dict()[name], alpha=1 - alpha)
        assert torch.equal(st.ema_state.teacher.state_dict()[name], expected)


def test_gradient_isolation(bundle):
    st = make_method_state(cfg(), bundle)
    b_s, b_t, b_u = batches(st, bundle)
    train_step(st, b_s, b_t, b_u, t=1)
    for p in list(st.inter_teacher.parameters()) + list(st.ema_state.teacher.parameters()):
        assert p.grad is None or torch.count_nonzero(p.grad) == 0
    student_ids = {id(p) for g in st.student_opt.param_groups for p in g["params"]}
    inter_ids = {id(p) for g in st.inter_opt.param_groups for p in g["params"]}
    ema_ids = {id(p) for p in st.ema_state.teacher.parameters()}
    assert not student_ids & inter_ids and not student_ids & ema_ids and not inter_ids & ema_ids


def test_pseudo_labels_threshold_logic():
    class Uniform(torch.nn.Module):
        def forward(self, x):
            return torch.zeros(x.shape[0], 5, *x.shape[2:])
    imgs = [np.zeros((4, 4)), np.ones((4, 4))]
    out = generate_pseudo_labels(Uniform(), imgs, threshold=0.5)
    assert all(not m.any() for _, _, m in out)
    out = generate_pseudo_labels(Uniform(), imgs, threshold=0.0)
    assert all(m.all() for _, _, m in out)


def test_pseudo_label_argmax_brute_force():
    torch.manual_seed(0)
    logits = torch.randn(3, 5, 8, 8)

    class Fixed(torch.nn.Module):
        def forward(self, x):
            return logits

    out = generate_pseudo_labels(Fixed(), torch.zeros(3, 1, 8, 8), threshold=0.3)
    probs = torch.softmax(logits, dim=1).numpy()
    for n, (_, lab, mask) in enumerate(out):
        for i in range(8):
            for j in range(8):
                col = list(probs[n, :, i, j])
                best = max(range(5), key=lambda c: col[c])
                assert lab[i, j] == best
                assert mask[i, j] == (col[best] >= 0.3)


def test_stream_sampler_cycles_uniformly():
    rng = np.random.default_rng(0)
    s = StreamSampler(5, 4)
    drawn = [i for _ in range(5) for i in s.next_batch(rng)]
    assert np.bincount(drawn, minlength=5).tolist() == [4] * 5


def test_epoch_visits_longest_stream_once(bundle, monkeypatch):
    st = make_method_state(cfg(batch_size_s=3), bundle)
    assert steps_per_epoch(st) == math.ceil(len(bundle.d_s) / 3)
    seen = []
    import dualteacher.trainer as tr
    real = tr._gather

    def spy(state, stream, idx, augment):
        if stream == "d_s":
            seen.extend(idx)
        return real(state, stream, idx, augment)

    monkeypatch.setattr(tr, "_gather", spy)
    tr.run_epoch(st, 1)
    assert sorted(seen) == list(range(len(bundle.d_s)))


def test_train_deterministic(bundle, tmp_path):
    c = cfg("dual_teacher", epochs=2)
    a = train(c, bundle, tmp_path / "a")
    b = train(c, bundle, tmp_path / "b")
    assert a.metrics_log == b.metrics_log
    assert (tmp_path / "a" / METRICS_FILE).read_bytes() == (tmp_path / "b" / METRICS_FILE).read_bytes()
    assert len(a.metrics_log) == 2
    for name in ("checkpoint_last.json", "checkpoint_best.json", "checkpoint_final.json", "translator.json"):
        assert (tmp_path / "a" / name).exists()


@pytest.mark.parametrize("method", ["dual_teacher", "gan_baseline", "mean_teacher"])
def test_resume_equals_uninterrupted(bundle, tmp_path, method):
    c = cfg(method, epochs=4, pseudo_label_warmup=0.25)
    full = train(c, bundle, tmp_path / "full")
    train(c, bundle, tmp_path / "part", stop_after=2)
    lines = (tmp_path / "part" / METRICS_FILE).read_text().splitlines()
    assert [json.loads(s)["epoch"] for s in lines] == [1, 2]
    resumed = train(c, bundle, tmp_path / "part", resume=True)
    assert resumed.metrics_log == full.metrics_log
    assert (tmp_path / "full" / METRICS_FILE).read_bytes() == (tmp_path / "part" / METRICS_FILE).read_bytes()
    for a, b in zip(snapshot(full.student).values(), snapshot(resumed.student).values()):
        assert torch.equal(a, b)


def test_resume_rejects_other_config(bundle, tmp_path):
    train(cfg("supervised_only", epochs=2), bundle, tmp_path, stop_after=1)
    with pytest.raises(ConfigurationError, match="hash"):
        train(cfg("supervised_only", epochs=2, learning_rate=1e-3), bundle, tmp_path, resume=True)


def test_supervised_only_learns(bundle):
    state = train(cfg("supervised_only", epochs=50, learning_rate=1e-3), bundle)
    first, last = state.metrics_log[0]["loss"]["total"], state.metrics_log[-1]["loss"]["total"]
    assert last < first
