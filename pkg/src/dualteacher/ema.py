"""Intra-domain teacher kept as an exponential moving average of the student."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigurationError, DimensionError, TrainingDivergenceError
from .segnet import param_vector


@dataclass
class EmaState:
    alpha: float
    step: int
    teacher: nn.Module

    @property
    def teacher_params(self):
        return param_vector(self.teacher)


def _check_alpha(alpha):
    if not 0.0 <= alpha < 1.0:
        raise ConfigurationError(f"EMA decay alpha must lie in [0, 1), got {alpha}")


def ema_init(student: nn.Module, alpha: float = 0.99) -> EmaState:
    """Copy the student into a frozen teacher network."""
    _check_alpha(alpha)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
        p.grad = None
    return EmaState(alpha=float(alpha), step=0, teacher=teacher)


def _as_params(obj):
    if isinstance(obj, nn.Module):
        return param_vector(obj)
    return obj


@torch.no_grad()
def ema_blend(teacher_params, student_params, alpha):
    """In place: ``teacher <- alpha * teacher + (1 - alpha) * student`` per tensor."""
    if list(teacher_params) != list(student_params):
        raise DimensionError("teacher and student parameter names differ")
    for name, t in teacher_params.items():
        s = student_params[name]
        if t.shape != s.shape:
            raise DimensionError(f"{name}: teacher shape {tuple(t.shape)} vs student {tuple(s.shape)}")
        if not torch.isfinite(s).all():
            raise TrainingDivergenceError(f"non-finite student parameter {name}", term=name)
    for name, t in teacher_params.items():
        t.mul_(alpha).add_(student_params[name].detach(), alpha=1.0 - alpha)


@torch.no_grad()
def ema_update(state: EmaState, student) -> EmaState:
    """One EMA step from the student's current weights; the student is not modified."""
    ema_blend(state.teacher_params, _as_params(student), state.alpha)
    if isinstance(student, nn.Module):
        # running statistics of batch norm follow the same average
        t_buffers = dict(state.teacher.named_buffers())
        for name, buf in student.named_buffers():
            if buf.is_floating_point():
                t_buffers[name].mul_(state.alpha).add_(buf, alpha=1.0 - state.alpha)
            else:
                t_buffers[name].copy_(buf)
    state.step += 1
    return state
