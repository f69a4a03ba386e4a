"""Synthetic Gaussian-mixture classification data and parametric corruptions."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

CORRUPTIONS = ("additive-gaussian", "feature-mask", "linear-mix", "contrast-scale")

# intensity per severity 1..5
SEVERITY_SCHEDULE = {
    "additive-gaussian": (0.4, 0.8, 1.2, 1.6, 2.0),   # noise std, in units of the data std
    "feature-mask": (0.15, 0.3, 0.4, 0.5, 0.6),        # fraction of features zeroed per sample
    "linear-mix": (0.2, 0.35, 0.5, 0.65, 0.8),         # weight of the mixed-in projection
    "contrast-scale": (0.7, 0.5, 0.35, 0.25, 0.15),    # contrast factor (with a fixed offset)
}
NOISE_LIGHT, NOISE_HEAVY = 0.3, 3.0


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 10
    input_dim: int = 32
    n_train: int = 500           # per class
    n_test: int = 100            # per class, shared by every corruption domain
    n_probe: int = 100           # per class, clean in-distribution probe
    n_fisher: int = 50           # per class, unlabeled pool for importance estimation
    components: int = 1          # Gaussian components per class
    separation: float = 8.0      # scale of the component means
    spread: float = 1.0          # within-component standard deviation
    informative_dims: int = 8    # class structure lives in this many directions
    nuisance_scale: float = 0.03 # std of the remaining (uninformative) directions
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.input_dim < 1:
            raise ValueError("degenerate dataset: need num_classes >= 2 and input_dim >= 1")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError("label_noise must lie in [0, 1)")
        if min(self.n_train, self.n_test, self.n_probe, self.n_fisher, self.components) < 1:
            raise ValueError("split sizes and component count must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption kind {self.kind!r} (expected one of {CORRUPTIONS})")
        if self.severity not in (1, 2, 3, 4, 5):
            raise ValueError("severity must be an integer in 1..5")

    @property
    def name(self) -> str:
        return f"{self.kind}-{self.severity}"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray              # observed labels (after label noise)
    clean_y: np.ndarray        # latent class before label noise
    index: np.ndarray          # global sample ids


@dataclass
class Dataset:
    spec: DatasetSpec
    train: Split
    test: Split
    probe: Split
    fisher: Split
    scale: float               # global feature std of the clean training data

    def splits(self) -> dict[str, Split]:
        return {"train": self.train, "test": self.test, "probe": self.probe, "fisher": self.fisher}

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"scale": np.array(self.scale)}
        for name, s in self.splits().items():
            out.update({f"{name}_x": s.x, f"{name}_y": s.y, f"{name}_clean_y": s.clean_y,
                        f"{name}_index": s.index})
        return out


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Class-conditional Gaussian mixtures, split into disjoint train/test/probe/fisher sets."""
    rng = np.random.default_rng(spec.seed)
    c, d, k = spec.num_classes, spec.input_dim, spec.components
    r = min(spec.informative_dims, d)
    means = rng.normal(size=(c, k, r)) * spec.separation / np.sqrt(r)
    per_class = spec.n_train + spec.n_test + spec.n_probe + spec.n_fisher
    n = c * per_class
    labels = np.repeat(np.arange(c), per_class)
    comp = rng.integers(0, k, size=n)
    latent = np.empty((n, d))
    latent[:, :r] = means[labels, comp] + spec.spread * rng.normal(size=(n, r))
    latent[:, r:] = spec.nuisance_scale * rng.normal(size=(n, d - r))
    rotation, _ = np.linalg.qr(rng.normal(size=(d, d)))
    x = latent @ rotation
    observed = labels.copy()
    flip = rng.random(n) < spec.label_noise
    observed[flip] = rng.integers(0, c, size=int(flip.sum()))

    order = rng.permutation(n)
    bounds = np.cumsum([spec.n_train, spec.n_test, spec.n_probe, spec.n_fisher]) * c
    parts = np.split(order, bounds[:-1])

    def split(idx):
        idx = np.sort(idx)
        return Split(x[idx], observed[idx], labels[idx], idx)

    train = split(parts[0])
    scale = float(train.x.std())
    return Dataset(spec, train, split(parts[1]), split(parts[2]), split(parts[3]), scale)


def corrupt(x: np.ndarray, spec: CorruptionSpec, scale: float = 1.0) -> np.ndarray:
    """Apply one corruption at its severity; deterministic given ``spec.seed``."""
    rng = np.random.default_rng([spec.seed, CORRUPTIONS.index(spec.kind), spec.severity])
    level = SEVERITY_SCHEDULE[spec.kind][spec.severity - 1]
    n, d = x.shape
    if spec.kind == "additive-gaussian":
        # sensor-style noise: a fixed quarter of the features is hit ten times harder
        profile = np.full(d, NOISE_LIGHT)
        heavy = np.random.default_rng([spec.seed, 3]).permutation(d)[:max(1, d // 4)]
        profile[heavy] = NOISE_HEAVY
        return x + level * scale * profile * rng.normal(size=x.shape)
    if spec.kind == "feature-mask":
        keep = rng.random(x.shape) >= level
        return x * keep
    if spec.kind == "linear-mix":
        # domain-level mixing matrix: the same distortion for every sample
        mixer = np.random.default_rng([spec.seed, 7]).normal(size=(d, d)) / np.sqrt(d)
        return (1.0 - level) * x + level * (x @ mixer)
    # contrast-scale
    offset = np.random.default_rng([spec.seed, 11]).normal(size=d) * scale * 0.5
    return level * x + (1.0 - level) * offset


def domain_stream(x: np.ndarray, y: np.ndarray, spec: CorruptionSpec, scale: float,
                  batch_size: int = 64) -> list[tuple[np.ndarray, np.ndarray]]:
    """Corrupted copy of ``(x, y)`` in a seeded shuffled order, cut into batches."""
    xc = corrupt(x, spec, scale)
    order = np.random.default_rng([spec.seed, 99, CORRUPTIONS.index(spec.kind)]).permutation(len(x))
    xc, yc = xc[order], y[order]
    return [(xc[i:i + batch_size], yc[i:i + batch_size]) for i in range(0, len(x), batch_size)]
