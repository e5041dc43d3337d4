"""Appearance alignment: source-to-target image translators.

The default translator is classical histogram matching against the pooled
intensity histogram of target-domain images. Anything exposing ``translate``
over ``[0, 1]`` images can stand in for it (a learned image-to-image model,
for instance).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, StateError

N_BINS = 256
KINDS = ("identity", "histogram_match")


def _bin_index(image):
    return np.minimum((np.clip(image, 0.0, 1.0) * N_BINS).astype(np.int64), N_BINS - 1)


def intensity_histogram(image):
    return np.bincount(_bin_index(np.asarray(image)).ravel(), minlength=N_BINS).astype(np.int64)


def bin_centers():
    return (np.arange(N_BINS) + 0.5) / N_BINS


@dataclass(frozen=True)
class Translator:
    kind: str
    histogram: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown translator kind {self.kind!r}")
        if self.kind == "identity" and self.histogram is not None:
            raise ConfigurationError("identity translator carries no reference histogram")

    @property
    def fitted(self):
        return self.kind == "identity" or self.histogram is not None

    @property
    def cdf(self):
        if self.histogram is None:
            raise StateError("translator has no reference histogram")
        cum = np.cumsum(self.histogram)
        return cum / cum[-1]

    def translate(self, image):
        return translate(self, image)

    def to_json(self):
        return json.dumps({
            "kind": self.kind,
            "bins": N_BINS,
            "histogram": None if self.histogram is None else self.histogram.tolist(),
        })

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        hist = d.get("histogram")
        return cls(d["kind"], None if hist is None else np.asarray(hist, dtype=np.int64))


def fit_translator(target_images, kind="histogram_match") -> Translator:
    """Pool the intensity histogram of ``target_images`` (unpaired, no labels)."""
    if kind == "identity":
        return Translator("identity")
    if kind not in KINDS:
        raise ConfigurationError(f"unknown translator kind {kind!r}")
    target_images = list(target_images)
    if not target_images:
        raise ConfigurationError("histogram matching needs at least one target image")
    hist = np.zeros(N_BINS, dtype=np.int64)
    for img in target_images:
        hist += intensity_histogram(img)
    return Translator(kind, hist)


def translate(tr: Translator, image):
    """Map an image into the target appearance.

    Each source intensity goes to the centre of the lowest reference bin whose
    CDF reaches the source image's own empirical CDF at that intensity. The
    comparison is done on integer counts so equal CDFs match exactly.
    """
    if isinstance(image, torch.Tensor):
        out = translate(tr, image.detach().cpu().numpy())
        return torch.from_numpy(out).to(image.dtype)
    image = np.asarray(image)
    if tr.kind == "identity":
        return image.copy()
    if tr.histogram is None:
        raise StateError("histogram_match translator used before fit_translator")
    if image.ndim > 2:
        return np.stack([translate(tr, im) for im in image])
    bins = _bin_index(image)
    src_cum = np.cumsum(np.bincount(bins.ravel(), minlength=N_BINS)).astype(np.int64)
    ref_cum = np.cumsum(tr.histogram).astype(np.int64)
    # ref_cum[j] / R >= src_cum[b] / S  <=>  ref_cum[j] * S >= src_cum[b] * R
    mapping = np.searchsorted(ref_cum * src_cum[-1], src_cum * ref_cum[-1], side="left")
    mapping = np.minimum(mapping, N_BINS - 1)
    return bin_centers()[mapping][bins].astype(image.dtype if image.dtype.kind == "f" else np.float64)
