"""Dice evaluation and cross-fold report tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DimensionError, InputError, ReportError
from .segnet import forward, softmax


def _np(a):
    if isinstance(a, torch.Tensor):
        return a.detach().cpu().numpy()
    return np.asarray(a)


def dice_with_flag(pred, truth, class_id):
    """Return ``(dice, degenerate)``; degenerate means the class is absent from both maps."""
    pred, truth = _np(pred), _np(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} vs truth {truth.shape}")
    p = pred == class_id
    t = truth == class_id
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0, True
    return 2.0 * int(np.logical_and(p, t).sum()) / denom, False


def dice_coefficient(pred, truth, class_id) -> float:
    return dice_with_flag(pred, truth, class_id)[0]


@dataclass
class MetricsRecord:
    per_class_dice: dict
    mean_dice: float
    n_images: int
    fold_index: int = 0
    method: str = ""
    seed: int = 0
    n_degenerate: int = 0

    def to_dict(self):
        return {
            "method": self.method,
            "seed": self.seed,
            "fold": self.fold_index,
            "n_images": self.n_images,
            "n_degenerate": self.n_degenerate,
            "per_class_dice": {str(k): v for k, v in self.per_class_dice.items()},
            "mean_dice": self.mean_dice,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            per_class_dice={int(k): float(v) for k, v in d["per_class_dice"].items()},
            mean_dice=float(d["mean_dice"]),
            n_images=int(d.get("n_images", 0)),
            fold_index=int(d.get("fold", 0)),
            method=d.get("method", ""),
            seed=int(d.get("seed", 0)),
            n_degenerate=int(d.get("n_degenerate", 0)),
        )


def evaluate_predictions(preds, truths, num_classes, **meta) -> MetricsRecord:
    """Per-image Dice for every foreground class, averaged over images."""
    preds, truths = list(preds), list(truths)
    if not preds:
        raise InputError("nothing to evaluate")
    sums = np.zeros(num_classes)
    degenerate = 0
    for pred, truth in zip(preds, truths):
        flagged = False
        for c in range(1, num_classes):
            d, empty = dice_with_flag(pred, truth, c)
            sums[c] += d
            flagged |= empty
        degenerate += flagged
    per_class = {c: float(sums[c] / len(preds)) for c in range(1, num_classes)}
    mean = float(np.mean(list(per_class.values())))
    return MetricsRecord(per_class, mean, len(preds), n_degenerate=degenerate, **meta)


@torch.no_grad()
def predict(net, images, batch_size=16):
    net.eval()
    out = []
    for i in range(0, len(images), batch_size):
        x = torch.as_tensor(np.stack(images[i:i + batch_size]), dtype=torch.float32)[:, None]
        out.extend(softmax(forward(net, x)).argmax(dim=1).numpy())
    return out


def evaluate_model(net, samples, num_classes=None, **meta) -> MetricsRecord:
    """Evaluate ``net`` on labeled samples (argmax of the softmax per pixel)."""
    for s in samples:
        if s.label is None:
            raise InputError(f"sample {s.id} has no label")
    num_classes = num_classes or net.cfg.num_classes
    preds = predict(net, [s.image for s in samples])
    return evaluate_predictions(preds, [s.label for s in samples], num_classes, **meta)


@dataclass
class Report:
    methods: list
    class_names: list
    mean: dict = field(default_factory=dict)  # method -> [avg, class...]
    std: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    @property
    def columns(self):
        return ["Avg"] + list(self.class_names)

    def to_text(self):
        width = max(12, max(len(m) for m in self.methods) + 2)
        head = "Method".ljust(width) + "".join(c.rjust(17) for c in self.columns)
        lines = [head, "-" * len(head)]
        for m in self.methods:
            cells = "".join(f"{mu:.4f} ± {sd:.4f}".rjust(17) for mu, sd in zip(self.mean[m], self.std[m]))
            lines.append(m.ljust(width) + cells)
        return "\n".join(lines) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "n"] + [f"{c}_{s}" for c in self.columns for s in ("mean", "std")])
        for m in self.methods:
            row = [m, self.counts[m]]
            for mu, sd in zip(self.mean[m], self.std[m]):
                row += [repr(float(mu)), repr(float(sd))]
            w.writerow(row)
        return buf.getvalue()


def aggregate_folds(records, class_names=None, methods=None) -> Report:
    """Mean and (population) std of per-class and mean Dice per method."""
    records = list(records)
    if not records:
        raise ReportError("no metrics records to aggregate")
    classes = sorted(records[0].per_class_dice)
    if class_names is None:
        class_names = [f"class{c}" for c in classes]
    if len(class_names) != len(classes):
        raise ReportError(f"{len(class_names)} class names for {len(classes)} classes")
    if methods is None:
        methods = list(dict.fromkeys(r.method for r in records))
    report = Report(list(methods), list(class_names))
    for m in methods:
        rows = [[r.mean_dice] + [r.per_class_dice[c] for c in classes] for r in records if r.method == m]
        if not rows:
            raise ReportError(f"no records for method {m!r}")
        arr = np.asarray(rows)
        report.mean[m] = arr.mean(axis=0).tolist()
        report.std[m] = arr.std(axis=0).tolist()
        report.counts[m] = len(rows)
    return report


def records_to_csv(records):
    """Long format: ``method, seed, fold, class, dice`` (class ``mean`` carries the average)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "seed", "fold", "class", "dice"])
    for r in records:
        for c, d in r.per_class_dice.items():
            w.writerow([r.method, r.seed, r.fold_index, c, repr(d)])
        w.writerow([r.method, r.seed, r.fold_index, "mean", repr(r.mean_dice)])
    return buf.getvalue()
