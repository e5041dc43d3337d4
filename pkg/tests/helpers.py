import numpy as np
import torch

# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES = {}


def central_diff_grad(fn, x, step=1e-4):
    """Central finite-difference gradient of scalar ``fn`` at tensor ``x`` (float64)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = float(fn(x))
        flat[i] = orig - step
        lo = float(fn(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def autograd_grad(fn, x):
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def max_rel_error(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def random_simplex(rng, shape, dtype=torch.float64):
    """Random per-pixel distributions over dim 1, bounded away from 0."""
    raw = rng.uniform(0.05, 1.0, size=shape)
    raw /= raw.sum(axis=1, keepdims=True)
    return torch.tensor(raw, dtype=dtype)
