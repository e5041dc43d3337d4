"""Synthetic two-domain phantom datasets.

Every image holds one ellipse per foreground class, drawn in class order so
that later classes occlude earlier ones. Both domains share this geometry
process and differ only in the intensity assigned to each class, which gives
a pure appearance gap between a labeled source modality and the target
modality of interest.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import ConfigurationError, DatasetFormatError

MANIFEST_FORMAT = 1
ROLES = ("d_s", "d_t", "d_u", "val")
DOMAINS = ("source", "target")
_MIN_SEPARATION = 0.1
_TOL = 1e-9


def default_target_table(num_classes):
    return tuple(float(v) for v in np.round(np.linspace(0.1, 0.9, num_classes), 6))


def default_source_table(num_classes):
    """Target table shifted up by one class slot and capped at 1.

    The shift makes a source class land on the intensity of a different target
    class, so training on raw source images teaches a wrong intensity-to-class
    map. The remap stays monotone, which is what a histogram-matching
    translator can undo.
    """
    target = default_target_table(num_classes)
    step = target[1] - target[0] if num_classes > 1 else 0.2
    return tuple(float(min(round(v + step, 6), 1.0)) for v in target)


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 64
    num_classes: int = 5
    intensity_table_target: tuple = None
    intensity_table_source: tuple = None
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.intensity_table_target is None:
            object.__setattr__(self, "intensity_table_target", default_target_table(self.num_classes))
        if self.intensity_table_source is None:
            object.__setattr__(self, "intensity_table_source", default_source_table(self.num_classes))
        object.__setattr__(self, "intensity_table_target", tuple(float(v) for v in self.intensity_table_target))
        object.__setattr__(self, "intensity_table_source", tuple(float(v) for v in self.intensity_table_source))

    @property
    def structures_per_image(self):
        return self.num_classes - 1

    def table(self, domain):
        return self.intensity_table_source if domain == "source" else self.intensity_table_target

    def validate(self):
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2 (background plus one structure)")
        if self.image_size < 8:
            raise ConfigurationError("image_size must be >= 8")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be nonnegative")
        for name in ("intensity_table_target", "intensity_table_source"):
            table = getattr(self, name)
            if len(table) != self.num_classes:
                raise ConfigurationError(f"{name} needs {self.num_classes} entries, got {len(table)}")
            if any(not 0.0 <= v <= 1.0 for v in table):
                raise ConfigurationError(f"{name}: all mean intensities must lie in [0, 1]")
            ordered = sorted(table)
            gaps = [b - a for a, b in zip(ordered, ordered[1:])]
            if gaps and min(gaps) < _MIN_SEPARATION - _TOL:
                raise ConfigurationError(
                    f"{name}: class means must be pairwise separated by >= {_MIN_SEPARATION}"
                )
        if self.intensity_table_target == self.intensity_table_source:
            raise ConfigurationError(
                "intensity_table_target must differ from intensity_table_source (no domain gap)"
            )

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["intensity_table_target"] = list(self.intensity_table_target)
        d["intensity_table_source"] = list(self.intensity_table_source)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class DomainSample:
    image: np.ndarray
    label: np.ndarray | None
    domain: str
    id: str

    @property
    def labeled(self):
        return self.label is not None


@dataclass
class DatasetBundle:
    d_s: list
    d_t: list
    d_u: list
    val: list
    fold_index: int = 0
    spec: PhantomSpec | None = None

    def __post_init__(self):
        seen = {}
        for role in ROLES:
            for s in getattr(self, role):
                if s.id in seen:
                    raise DatasetFormatError(f"sample id {s.id!r} appears in both {seen[s.id]} and {role}")
                seen[s.id] = role
                if role == "d_s" and s.domain != "source":
                    raise DatasetFormatError(f"{s.id}: d_s holds source samples only")
                if role != "d_s" and s.domain != "target":
                    raise DatasetFormatError(f"{s.id}: {role} holds target samples only")
                if role == "d_u" and s.labeled:
                    raise DatasetFormatError(f"{s.id}: d_u samples must be unlabeled")
                if role != "d_u" and not s.labeled:
                    raise DatasetFormatError(f"{s.id}: {role} samples must be labeled")

    @property
    def num_classes(self):
        if self.spec is not None:
            return self.spec.num_classes
        labels = [s.label for role in ("d_s", "d_t", "val") for s in getattr(self, role)]
        return int(max(int(l.max()) for l in labels)) + 1

    @property
    def image_size(self):
        for role in ROLES:
            for s in getattr(self, role):
                return s.image.shape[0]
        raise DatasetFormatError("empty bundle")


def _sample_geometry(spec, rng):
    """Label map of num_classes-1 randomly placed, rotated ellipses."""
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    label = np.zeros((n, n), dtype=np.uint8)
    lo, hi = n / 10.0, n / 4.0
    for cls in range(1, spec.num_classes):
        a, b = rng.uniform(lo, hi, size=2)
        cy, cx = rng.uniform(n * 0.25, n * 0.75, size=2)
        theta = rng.uniform(0.0, math.pi)
        c, s = math.cos(theta), math.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        label[(u / a) ** 2 + (v / b) ** 2 <= 1.0] = cls
    return label


def _render(label, table, noise_sigma, rng):
    means = np.asarray(table, dtype=np.float64)[label]
    if noise_sigma > 0:
        means = means + rng.normal(0.0, noise_sigma, size=label.shape)
    return np.clip(means, 0.0, 1.0)


def generate_dataset(spec: PhantomSpec, n_source: int, n_target: int) -> list[DomainSample]:
    """Generate ``n_source`` source and ``n_target`` target labeled samples."""
    spec.validate()
    if n_source < 1:
        raise ConfigurationError("n_source must be >= 1")
    if n_target < 4:
        raise ConfigurationError("n_target must be >= 4")
    geo_seq, app_seq = np.random.SeedSequence(spec.seed).spawn(2)
    geo_rng = np.random.default_rng(geo_seq)
    app_rng = np.random.default_rng(app_seq)
    out = []
    for domain, count, prefix in (("source", n_source, "src"), ("target", n_target, "tgt")):
        for i in range(count):
            label = _sample_geometry(spec, geo_rng)
            image = _render(label, spec.table(domain), spec.noise_sigma, app_rng)
            out.append(DomainSample(image=image, label=label, domain=domain, id=f"{prefix}-{i:04d}"))
    return out


def generate_paired(spec: PhantomSpec, geometry_seed: int) -> tuple[DomainSample, DomainSample]:
    """Render one geometry in both domains (debugging and gap measurement)."""
    spec.validate()
    label = _sample_geometry(spec, np.random.default_rng(geometry_seed))
    app_rng = np.random.default_rng([spec.seed, geometry_seed])
    src = DomainSample(_render(label, spec.intensity_table_source, spec.noise_sigma, app_rng),
                       label.copy(), "source", f"pair-src-{geometry_seed}")
    tgt = DomainSample(_render(label, spec.intensity_table_target, spec.noise_sigma, app_rng),
                       label.copy(), "target", f"pair-tgt-{geometry_seed}")
    return src, tgt


def make_folds(samples, n_folds: int, labeled_frac: float, seed: int, spec=None) -> list[DatasetBundle]:
    """Split target samples into cross-validation folds.

    Each fold validates on one target group; the remaining targets are split
    into a small labeled set and a larger unlabeled set (labels stripped).
    Every fold reuses all source samples as the labeled source set.
    """
    if n_folds < 2:
        raise ConfigurationError("n_folds must be >= 2")
    if not 0.0 < labeled_frac < 1.0:
        raise ConfigurationError("labeled_frac must lie strictly between 0 and 1")
    source = [s for s in samples if s.domain == "source"]
    target = [s for s in samples if s.domain == "target"]
    if len(target) % n_folds:
        raise ConfigurationError(
            f"number of target samples ({len(target)}) must be divisible by n_folds ({n_folds})"
        )
    group = len(target) // n_folds
    order = np.random.default_rng(seed).permutation(len(target))
    groups = [[target[j] for j in order[k * group:(k + 1) * group]] for k in range(n_folds)]
    bundles = []
    for k in range(n_folds):
        rest = [s for g, grp in enumerate(groups) if g != k for s in grp]
        n_t = int(round(labeled_frac * len(rest)))
        n_u = len(rest) - n_t
        if n_t < 1 or n_t > n_u / 2:
            raise ConfigurationError(
                f"fold {k}: labeled target count {n_t} must satisfy 1 <= m_t <= m_u/2 (m_u={n_u})"
            )
        perm = np.random.default_rng([seed, k]).permutation(len(rest))
        d_t = [rest[j] for j in perm[:n_t]]
        d_u = [dataclasses.replace(rest[j], label=None) for j in perm[n_t:]]
        bundles.append(DatasetBundle(d_s=list(source), d_t=d_t, d_u=d_u, val=groups[k],
                                     fold_index=k, spec=spec))
    return bundles


def _to_png8(image):
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_dataset(bundle: DatasetBundle, directory) -> Path:
    """Write PNG images/labels plus ``manifest.json``; return the manifest path."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for role in ROLES:
        for s in getattr(bundle, role):
            entry = {"id": s.id, "role": role, "domain": s.domain, "image": f"images/{s.id}.png"}
            PILImage.fromarray(_to_png8(s.image), mode="L").save(root / entry["image"])
            if s.label is not None:
                entry["label"] = f"labels/{s.id}.png"
                PILImage.fromarray(s.label.astype(np.uint8), mode="L").save(root / entry["label"])
            entries.append(entry)
    manifest = {
        "format": MANIFEST_FORMAT,
        "fold_index": bundle.fold_index,
        "phantom_spec": bundle.spec.to_dict() if bundle.spec is not None else None,
        "samples": entries,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_dataset(directory) -> DatasetBundle:
    root = Path(directory)
    path = root / "manifest.json" if root.is_dir() else root
    root = path.parent
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"no manifest at {path}") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DatasetFormatError(f"unsupported manifest format {manifest.get('format')!r}")
    roles = {r: [] for r in ROLES}
    for entry in manifest["samples"]:
        sid, role = entry["id"], entry["role"]
        if role not in ROLES:
            raise DatasetFormatError(f"{sid}: unknown role {role!r}; expected one of {ROLES}")
        if entry.get("domain") not in DOMAINS:
            raise DatasetFormatError(f"{sid}: unknown domain {entry.get('domain')!r}")
        if role == "d_u" and entry.get("label"):
            raise DatasetFormatError(f"{sid}: d_u entry must not carry a label")
        if role != "d_u" and not entry.get("label"):
            raise DatasetFormatError(f"{sid}: {role} entry requires a label")
        image = _read_png(root / entry["image"], sid)
        label = _read_png(root / entry["label"], sid) if entry.get("label") else None
        roles[role].append(DomainSample(image=image.astype(np.float64) / 255.0, label=label,
                                        domain=entry["domain"], id=sid))
    spec = manifest.get("phantom_spec")
    return DatasetBundle(**roles, fold_index=int(manifest.get("fold_index", 0)),
                         spec=PhantomSpec.from_dict(spec) if spec else None)


def _read_png(path, sid):
    if not path.exists():
        raise DatasetFormatError(f"{sid}: missing file {path}")
    with PILImage.open(path) as im:
        return np.asarray(im, dtype=np.uint8).copy()
