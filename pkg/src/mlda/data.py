"""Seeded synthetic source/target domains.

All randomness comes from numpy's PCG64 generator, so a (spec, seed) pair
gives the same bytes on every platform.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensorio import load_tensors, save_tensors

BLOB_RADIUS = 4.0
BLOB_SIGMA = 0.5


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray | None = None
    domain: int = 0
    seed: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if len(self.samples) < 1:
            raise ValueError("dataset must hold at least one sample")
        if self.labels is not None:
            self.labels = np.asarray(self.labels).astype(np.int64)
            if self.labels.shape != (len(self.samples),):
                raise ValueError(f"{len(self.labels)} labels for {len(self.samples)} samples")
            if self.labels.min() < 0:
                raise ValueError("labels must be non-negative class indices")

    def __len__(self):
        return len(self.samples)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.samples.shape[1:]

    def subset(self, idx) -> Dataset:
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.samples[idx], labels, self.domain, self.seed)

    def unlabeled(self) -> Dataset:
        return Dataset(self.samples, None, self.domain, self.seed)

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {"samples": self.samples, "domain": np.array([float(self.domain)]),
               "seed": np.array([float(self.seed)])}
        if self.labels is not None:
            out["labels"] = self.labels.astype(np.float64)
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> Dataset:
        labels = tensors.get("labels")
        return cls(tensors["samples"], None if labels is None else labels.astype(np.int64),
                   int(tensors.get("domain", [0])[0]), int(tensors.get("seed", [0])[0]))

    def save(self, path) -> None:
        save_tensors(path, self.to_tensors())

    @classmethod
    def load(cls, path) -> Dataset:
        return cls.from_tensors(load_tensors(path))


def class_means(n_classes: int, d: int) -> np.ndarray:
    """Evenly spaced points on a circle of radius 4 in the first two coordinates."""
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    means = np.zeros((n_classes, d))
    means[:, 0] = BLOB_RADIUS * np.cos(angles)
    means[:, 1] = BLOB_RADIUS * np.sin(angles)
    return means


def gen_blobs(n: int, n_classes: int, d: int, seed: int) -> Dataset:
    """Balanced Gaussian clusters (sigma 0.5) around :func:`class_means`."""
    if n_classes < 2 or d < 2 or n < n_classes or n % n_classes:
        raise ValueError(f"gen_blobs: need n_classes >= 2, d >= 2 and n divisible by "
                         f"n_classes, got n={n}, n_classes={n_classes}, d={d}")
    rng = rng_for(seed)
    labels = np.repeat(np.arange(n_classes), n // n_classes)
    samples = class_means(n_classes, d)[labels] + BLOB_SIGMA * rng.standard_normal((n, d))
    order = rng.permutation(n)
    return Dataset(samples[order], labels[order], domain=0, seed=seed)


def gen_blob_images(n: int, n_classes: int, seed: int, size: int = 8,
                    channels: int = 3) -> Dataset:
    """Blob points rendered as Gaussian bumps on a size x size x channels grid."""
    points = gen_blobs(n, n_classes, 2, seed)
    rng = rng_for(seed + 1)
    coords = np.arange(size) - (size - 1) / 2
    # map radius-4 circle to roughly 3/8 of the image width
    centers = points.samples * (0.375 * size / BLOB_RADIUS)
    dy = coords[None, :, None] - centers[:, 1, None, None]
    dx = coords[None, None, :] - centers[:, 0, None, None]
    bump = np.exp(-(dx ** 2 + dy ** 2) / 2.0)
    images = np.repeat(bump[..., None], channels, axis=-1)
    images += 0.05 * rng.standard_normal(images.shape)
    return Dataset(images, points.labels, domain=0, seed=seed)


@dataclass(frozen=True)
class ShiftSpec:
    """Label-preserving covariate shift. Every field is optional."""

    rotation: float = 0.0                 # degrees
    bias: float | tuple[float, ...] = 0.0  # per channel (images) or per feature
    noise: float = 0.0
    displacement: tuple[float, ...] | None = None  # added to every sample

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise sigma must be non-negative")

    @property
    def is_identity(self) -> bool:
        return (self.rotation % 360 == 0 and not np.any(self.bias) and self.noise == 0
                and (self.displacement is None or not np.any(self.displacement)))


def apply_shift(dataset: Dataset, shift: ShiftSpec, seed: int, domain: int = 1) -> Dataset:
    x = dataset.samples.copy()
    rank = x.ndim - 1
    if shift.rotation % 360:
        if rank == 1:
            t = np.deg2rad(shift.rotation)
            c, s = np.cos(t), np.sin(t)
            x0, x1 = x[:, 0].copy(), x[:, 1].copy()
            x[:, 0] = c * x0 - s * x1
            x[:, 1] = s * x0 + c * x1
        elif rank == 3:
            if shift.rotation % 90:
                raise ValueError("image rotation must be a multiple of 90 degrees")
            x = np.rot90(x, k=int(shift.rotation // 90) % 4, axes=(1, 2)).copy()
        else:
            raise ValueError(f"cannot rotate samples of shape {dataset.sample_shape}")
    if np.any(shift.bias):
        bias = np.broadcast_to(np.asarray(shift.bias, dtype=np.float64), (x.shape[-1],))
        x = x + bias
    if shift.displacement is not None:
        disp = np.asarray(shift.displacement, dtype=np.float64)
        if disp.shape != dataset.sample_shape:
            raise ValueError(f"displacement shape {disp.shape} != sample shape {dataset.sample_shape}")
        x = x + disp
    if shift.noise > 0:
        x = x + shift.noise * rng_for(seed).standard_normal(x.shape)
    labels = None if dataset.labels is None else dataset.labels.copy()
    return Dataset(x, labels, domain=domain, seed=seed)


def split(dataset: Dataset, fractions, seed: int) -> list[Dataset]:
    """Disjoint, exhaustive, label-stratified partition."""
    return [dataset.subset(idx) for idx in split_indices(dataset, fractions, seed)]


def split_indices(dataset: Dataset, fractions, seed: int) -> list[np.ndarray]:
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.ndim != 1 or len(fractions) == 0 or np.any(fractions <= 0) \
            or abs(fractions.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must be positive and sum to 1")
    rng = rng_for(seed)
    labels = dataset.labels if dataset.labels is not None else np.zeros(len(dataset), np.int64)
    parts: list[list[np.ndarray]] = [[] for _ in fractions]
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        counts = _apportion(len(idx), fractions)
        if np.any(counts == 0):
            raise ValueError(f"split: class {cls} with {len(idx)} samples leaves an empty part")
        for part, chunk in zip(parts, np.split(idx, np.cumsum(counts)[:-1])):
            part.append(chunk)
    return [np.sort(np.concatenate(p)) for p in parts]


def _apportion(n: int, fractions: np.ndarray) -> np.ndarray:
    """Largest-remainder rounding of ``n * fractions``."""
    exact = n * fractions
    counts = np.floor(exact + 1e-9).astype(np.int64)
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return counts


@dataclass
class DomainPair:
    """Labelled source plus a shifted target (labels kept for diagnostics only)."""

    source: Dataset
    target: Dataset
    shift: ShiftSpec = field(default_factory=ShiftSpec)


def make_domains(kind: str = "vector", n: int = 600, n_classes: int = 3, dim: int = 2,
                 shift: ShiftSpec | None = None, seed: int = 0) -> DomainPair:
    """Source and target drawn independently, target shifted."""
    shift = ShiftSpec(rotation=45.0, bias=1.0) if shift is None else shift
    if kind == "vector":
        source = gen_blobs(n, n_classes, dim, seed)
        raw = gen_blobs(n, n_classes, dim, seed + 10_000)
    elif kind == "image":
        source = gen_blob_images(n, n_classes, seed)
        raw = gen_blob_images(n, n_classes, seed + 10_000)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    target = apply_shift(raw, shift, seed + 20_000)
    return DomainPair(source, target, shift)

