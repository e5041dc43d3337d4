"""Segmentation, distillation and consistency objectives.

All loss functions take probability maps shaped ``(N, C, H, W)`` (any number
of trailing spatial dims works) and integer label maps shaped ``(N, H, W)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch

from .errors import ConfigurationError, DimensionError, TrainingDivergenceError

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
DICE_EPS = 1e-5


@dataclass(frozen=True)
class LossWeights:
    lambda_kd: float = 0.1
    lambda_con_max: float = 0.1
    ramp_exponent_scale: float = 5.0
    t_max: int = 50

    def __post_init__(self):
        if min(self.lambda_kd, self.lambda_con_max, self.ramp_exponent_scale) < 0:
            raise ConfigurationError("loss weights must be nonnegative")
        if self.t_max < 1:
            raise ConfigurationError("t_max must be >= 1")


def _check_label_shape(prob, target, mask=None):
    if prob.dim() != target.dim() + 1 or prob.shape[0] != target.shape[0] \
            or prob.shape[2:] != target.shape[1:]:
        raise DimensionError(
            f"probabilities {tuple(prob.shape)} do not match labels {tuple(target.shape)}"
        )
    if target.numel() and (int(target.max()) >= prob.shape[1] or int(target.min()) < 0):
        raise DimensionError(f"label values must lie in [0, {prob.shape[1] - 1}]")
    if mask is not None and mask.shape != target.shape:
        raise DimensionError(f"mask {tuple(mask.shape)} does not match labels {tuple(target.shape)}")


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def cross_entropy(prob, target, mask=None):
    """Mean of ``-log prob[target]`` over (masked) pixels."""
    _check_label_shape(prob, target, mask)
    picked = prob.gather(1, target.long().unsqueeze(1)).squeeze(1)
    nll = -torch.log(picked.clamp_min(LOG_CLAMP))
    if mask is None:
        return nll.mean()
    m = mask.to(nll.dtype)
    return (nll * m).sum() / m.sum().clamp_min(1.0)


def dice_loss(prob, target, eps=DICE_EPS, include_background=True, mask=None):
    """Soft multi-class Dice loss, ``1 - mean_c d_c``.

    Sums run over the batch and all pixels. A class absent from both the
    prediction mass and the target scores ``eps / eps = 1``.
    """
    _check_label_shape(prob, target, mask)
    num_classes = prob.shape[1]
    onehot = torch.nn.functional.one_hot(target.long(), num_classes).movedim(-1, 1).to(prob.dtype)
    if mask is not None:
        m = mask.to(prob.dtype).unsqueeze(1)
        prob, onehot = prob * m, onehot * m
    dims = [0] + list(range(2, prob.dim()))
    inter = (prob * onehot).sum(dim=dims)
    denom = prob.sum(dim=dims) + onehot.sum(dim=dims)
    dice = (2.0 * inter + eps) / (denom + eps)
    if not include_background:
        dice = dice[1:]
    return 1.0 - dice.mean()


def seg_loss(prob, target, mask=None, include_background=True):
    """Cross-entropy plus soft Dice."""
    return cross_entropy(prob, target, mask) + dice_loss(
        prob, target, include_background=include_background, mask=mask
    )


def kd_loss(p_teacher, p_student):
    """Soft-target cross-entropy ``-sum_c p_teacher log p_student``, pixel mean.

    The teacher distribution is detached; only the student receives gradient.
    """
    _check_same_shape(p_teacher, p_student)
    target = p_teacher.detach()
    return -(target * torch.log(p_student.clamp_min(LOG_CLAMP))).sum(dim=1).mean()


def consistency_loss(out_student, out_teacher):
    """Mean squared difference of two probability maps; teacher side detached."""
    _check_same_shape(out_student, out_teacher)
    return ((out_student - out_teacher.detach()) ** 2).mean()


def entropy(p):
    return -(p * torch.log(p.clamp_min(LOG_CLAMP))).sum(dim=1).mean()


def lambda_con(t, w: LossWeights = LossWeights()):
    """Consistency weight ramp ``lambda_con_max * exp(-scale * (1 - t/t_max)^2)``."""
    if t < 0 or t > w.t_max:
        clamped = min(max(t, 0), w.t_max)
        log.warning("lambda_con: epoch %s outside [0, %s], clamped to %s", t, w.t_max, clamped)
        t = clamped
    phase = 1.0 - t / w.t_max
    return w.lambda_con_max * math.exp(-w.ramp_exponent_scale * phase * phase)


def _finite(value):
    if isinstance(value, torch.Tensor):
        return bool(torch.isfinite(value).all())
    return math.isfinite(value)


def student_total_loss(seg, kd, con, t, w: LossWeights = LossWeights()):
    """``seg + lambda_kd * kd + lambda_con(t) * con``."""
    for name, value in (("seg", seg), ("kd", kd), ("con", con)):
        if not _finite(value):
            raise TrainingDivergenceError(f"non-finite {name} loss term: {float(value)}", term=name)
    return seg + w.lambda_kd * kd + lambda_con(t, w) * con
