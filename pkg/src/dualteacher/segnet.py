"""Small U-Net style segmentation backbone, parameter access and input noise."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DimensionError, InputError


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 1
    num_classes: int = 5
    base_channels: int = 8
    depth: int = 2
    norm: str = "group"
    activation: str = "silu"
    seed: int = 0

    def validate(self, image_size=None):
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1")
        if self.base_channels < 2:
            raise ConfigurationError("base_channels must be >= 2")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.norm not in ("group", "batch"):
            raise ConfigurationError(f"norm must be 'group' or 'batch', got {self.norm!r}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {sorted(_ACTIVATIONS)}")
        if image_size is not None and image_size % (2 ** self.depth):
            raise ConfigurationError(
                f"image size {image_size} is not divisible by 2**depth = {2 ** self.depth}"
            )


# smooth by default so finite-difference gradient checks do not straddle kinks
_ACTIVATIONS = {"silu": nn.SiLU, "relu": nn.ReLU}


def _norm(kind, channels):
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    groups = 4 if channels % 4 == 0 else (2 if channels % 2 == 0 else 1)
    return nn.GroupNorm(groups, channels)


class ConvBlock(nn.Sequential):
    def __init__(self, in_ch, out_ch, norm, act="silu"):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            _norm(norm, out_ch),
            _ACTIVATIONS[act](),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            _norm(norm, out_ch),
            _ACTIVATIONS[act](),
        )


class UpBlock(nn.Module):
    """Nearest upsampling, 3x3 conv, skip concatenation, then a ConvBlock."""

    def __init__(self, in_ch, out_ch, norm, act="silu"):
        super().__init__()
        self.up_conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.block = ConvBlock(2 * out_ch, out_ch, norm, act)

    def forward(self, x, skip):
        x = self.up_conv(F.interpolate(x, scale_factor=2, mode="nearest"))
        return self.block(torch.cat([skip, x], dim=1))


class UNet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.base_channels * 2 ** k for k in range(cfg.depth + 1)]
        self.encoders = nn.ModuleList()
        in_ch = cfg.in_channels
        for k in range(cfg.depth):
            self.encoders.append(ConvBlock(in_ch, chans[k], cfg.norm, cfg.activation))
            in_ch = chans[k]
        self.bottleneck = ConvBlock(chans[cfg.depth - 1], chans[cfg.depth], cfg.norm, cfg.activation)
        self.decoders = nn.ModuleList(
            UpBlock(chans[k + 1], chans[k], cfg.norm, cfg.activation) for k in reversed(range(cfg.depth))
        )
        self.head = nn.Conv2d(chans[0], cfg.num_classes, 1)

    def forward(self, x):
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = dec(x, skip)
        return self.head(x)


def build_network(cfg: NetworkConfig, image_size=None) -> UNet:
    """Build a UNet whose initial weights depend only on ``cfg.seed``."""
    cfg.validate(image_size)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        net = UNet(cfg)
    return net


def forward(net: nn.Module, images: torch.Tensor) -> torch.Tensor:
    """Logits ``(N, C, H, W)`` for images ``(N, 1, H, W)`` or a single ``(H, W)`` image."""
    if images.dim() == 2:
        images = images[None, None]
    elif images.dim() == 3:
        images = images[:, None]
    if images.dim() != 4:
        raise DimensionError(f"expected (N, 1, H, W) images, got shape {tuple(images.shape)}")
    if not torch.isfinite(images).all():
        raise InputError("non-finite input image")
    depth = getattr(getattr(net, "cfg", None), "depth", 0)
    for size in images.shape[-2:]:
        if size % (2 ** depth):
            raise DimensionError(f"image size {size} is not divisible by 2**depth = {2 ** depth}")
    return net(images)


def softmax(logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel class probabilities along dim 1 (max-shifted internally)."""
    if not torch.isfinite(logits).all():
        raise InputError("non-finite logits")
    return torch.softmax(logits, dim=1)


def param_vector(net: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    """Named trainable parameters in registration order (a live view, not a copy)."""
    return OrderedDict((name, p) for name, p in net.named_parameters())


def snapshot(net: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((name, p.detach().clone()) for name, p in net.named_parameters())


def total_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def flatten(params) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in params.values()])


def perturb(images, sigma: float, rng: np.random.Generator):
    """Add i.i.d. Gaussian noise from ``rng`` and clamp to [0, 1].

    Accepts a numpy array or a torch tensor and returns the same kind.
    """
    if sigma < 0:
        raise ConfigurationError("noise sigma must be nonnegative")
    if isinstance(images, torch.Tensor):
        if sigma == 0:
            return images.clone()
        noise = torch.from_numpy(rng.normal(0.0, sigma, size=tuple(images.shape))).to(images.dtype)
        return (images + noise).clamp_(0.0, 1.0)
    images = np.asarray(images, dtype=np.float64)
    if sigma == 0:
        return images.copy()
    return np.clip(images + rng.normal(0.0, sigma, size=images.shape), 0.0, 1.0)


def augment_pair(images: torch.Tensor, labels: torch.Tensor, rng: np.random.Generator,
                 max_rotation=15.0, scale_range=(0.9, 1.1), max_shift=4.0):
    """Random affine transform per image (rotation, isotropic scale, shift).

    Images are resampled bilinearly and labels with nearest neighbour. Borders
    replicate the edge so no artificial zero intensity leaks in.
    """
    n, _, h, w = images.shape
    angles = np.deg2rad(rng.uniform(-max_rotation, max_rotation, size=n))
    scales = rng.uniform(scale_range[0], scale_range[1], size=n)
    shifts = rng.uniform(-max_shift, max_shift, size=(n, 2))
    theta = np.zeros((n, 2, 3))
    cos, sin = np.cos(angles) / scales, np.sin(angles) / scales
    theta[:, 0, 0], theta[:, 0, 1] = cos, -sin
    theta[:, 1, 0], theta[:, 1, 1] = sin, cos
    # affine_grid works in normalized coordinates: one pixel = 2 / size
    theta[:, 0, 2] = shifts[:, 0] * 2.0 / w
    theta[:, 1, 2] = shifts[:, 1] * 2.0 / h
    grid = F.affine_grid(torch.from_numpy(theta).to(images.dtype), list(images.shape), align_corners=False)
    out = F.grid_sample(images, grid, mode="bilinear", padding_mode="border", align_corners=False)
    lab = F.grid_sample(labels[:, None].to(images.dtype), grid, mode="nearest",
                        padding_mode="border", align_corners=False)
    return out, lab[:, 0].round().long()
