"""Labeled datasets, Gaussian-mixture ground truth, IDX/CSV I/O and client partitioning."""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .seeding import derive_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    """Malformed input file; the message names the byte offset."""


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not self.class_names:
            self.class_names = tuple(f"class-{c}" for c in range(self.num_classes))
        if len(self.class_names) != self.num_classes:
            raise ValueError("class_names length must equal num_classes")

    def __len__(self) -> int:
        return self.labels.size

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[indices], self.labels[indices], self.num_classes,
                              self.class_names)


@dataclass
class ClassMixture:
    """Diagonal Gaussian mixture for one class."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        k = self.weights.size
        if k == 0:
            raise ValueError("mixture has no components")
        if self.means.shape[0] != k or self.variances.shape != self.means.shape:
            raise ValueError("weights, means and variances disagree on component count/dim")
        if (self.weights < 0).any() or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if (self.variances < 0).any():
            raise ValueError("variances must be nonnegative")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.weights.size, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp]) * noise

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def variance(self) -> np.ndarray:
        m = self.mean()
        return self.weights @ (self.variances + self.means**2) - m**2


@dataclass
class GmmSpec:
    classes: list[ClassMixture]
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.classes:
            raise ValueError("GMM spec has no classes")
        dims = {c.dim for c in self.classes}
        if len(dims) != 1:
            raise ValueError("all classes must share a feature dimension")
        # ground-truth mixtures need strictly positive variances
        for c in self.classes:
            if (c.variances <= 0).any():
                raise ValueError("GMM variances must be positive")
        if not self.class_names:
            self.class_names = tuple(f"class-{c}" for c in range(len(self.classes)))

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def dim(self) -> int:
        return self.classes[0].dim


def default_gmm(classes: int = 10, radius: float = 5.0, variance: float = 0.25) -> GmmSpec:
    """One isotropic component per class, means evenly spaced on a circle."""
    angles = 2 * np.pi * np.arange(classes) / classes
    mixtures = [
        ClassMixture([1.0], [[radius * np.cos(a), radius * np.sin(a)]], [[variance, variance]])
        for a in angles
    ]
    return GmmSpec(mixtures)


def gen_gmm(spec: GmmSpec, n: int, seed: int, class_counts: Optional[Sequence[int]] = None
            ) -> LabeledDataset:
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    rng = derive_rng(seed, "gmm")
    C = spec.num_classes
    if class_counts is None:
        labels = rng.integers(0, C, size=n)
    else:
        class_counts = np.asarray(class_counts, dtype=np.int64)
        if class_counts.shape != (C,) or class_counts.sum() != n or (class_counts < 0).any():
            raise ValueError("class_counts must be nonnegative, one per class, summing to n")
        labels = rng.permutation(np.repeat(np.arange(C), class_counts))
    features = np.empty((n, spec.dim))
    for c in range(C):
        idx = np.flatnonzero(labels == c)
        features[idx] = spec.classes[c].sample(idx.size, rng)
    return LabeledDataset(features, labels, C, spec.class_names)


def gen_client_shifted(spec: GmmSpec, clients: int, n_per_client: int, shift_scale: float,
                       seed: int, n_test: int = 2000):
    """Pooled dataset where each client sees its own per-class mean shift.

    Client k draws class c from the class mixture translated by
    delta[k, c] ~ N(0, shift_scale^2 I). Returns (train, shards, test); the
    test set is drawn from the pooled per-client distributions, so a model
    trained only on the unshifted ``spec`` sees a domain gap.
    """
    rng = derive_rng(seed, "shifted")
    C, d = spec.num_classes, spec.dim
    shifts = shift_scale * rng.standard_normal((clients, C, d))

    def draw(n, owners):
        labels = rng.integers(0, C, size=n)
        feats = np.empty((n, d))
        for k in range(clients):
            for c in range(C):
                idx = np.flatnonzero((owners == k) & (labels == c))
                feats[idx] = spec.classes[c].sample(idx.size, rng) + shifts[k, c]
        return feats, labels

    owners = np.repeat(np.arange(clients), n_per_client)
    feats, labels = draw(owners.size, owners)
    train = LabeledDataset(feats, labels, C, spec.class_names)
    shards = [ClientShard(k, np.flatnonzero(owners == k)) for k in range(clients)]
    test_owners = rng.integers(0, clients, size=n_test)
    tf, tl = draw(n_test, test_owners)
    return train, shards, LabeledDataset(tf, tl, C, spec.class_names)


# -- IDX ---------------------------------------------------------------------

def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)}")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x} at byte offset 0, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise FormatError(
            f"{path}: truncated data at byte offset {len(raw)}, expected {header + count} bytes"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: Optional[int] = None,
             class_names: Sequence[str] = ()) -> LabeledDataset:
    """Load an IDX image/label pair (optionally gzipped), pixels scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if labels.shape[0] != images.shape[0]:
        raise FormatError(
            f"{labels_path}: {labels.shape[0]} labels at byte offset 4 but images file has "
            f"{images.shape[0]} items"
        )
    feats = images.astype(np.float64)[..., None] / 255.0
    C = num_classes if num_classes is not None else int(labels.max()) + 1
    return LabeledDataset(feats, labels.astype(np.int64), C, tuple(class_names))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ValueError("images must be a uint8 array of shape (N, H, W)")
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I3I", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


# -- CSV ---------------------------------------------------------------------

def load_csv(path, num_classes: Optional[int] = None) -> LabeledDataset:
    """Read ``f0,f1,...,label`` rows."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[-1] != "label" or any(
                h != f"f{i}" for i, h in enumerate(header[:-1])):
            raise FormatError(f"{path}: header must be f0,f1,...,label, got {header}")
        rows = [r for r in reader if r]
    d = len(header) - 1
    feats = np.array([[float(v) for v in r[:d]] for r in rows]).reshape(len(rows), d)
    labels = np.array([int(r[d]) for r in rows], dtype=np.int64)
    C = num_classes if num_classes is not None else (int(labels.max()) + 1 if rows else 1)
    return LabeledDataset(feats, labels, C)


def write_csv(path, data: LabeledDataset) -> None:
    feats = data.features.reshape(len(data), -1)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(feats.shape[1])] + ["label"])
        for x, y in zip(feats, data.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


# -- partitioning ------------------------------------------------------------

@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "iid"
    alpha: float = 0.5
    min_samples: int = 1
    seed: int = 0
    max_attempts: int = 100

    def __post_init__(self):
        if self.mode not in ("iid", "dirichlet"):
            raise ValueError(f"partition mode must be 'iid' or 'dirichlet', got {self.mode!r}")
        if self.mode == "dirichlet" and not self.alpha > 0:
            raise ValueError(f"Dirichlet alpha must be positive, got {self.alpha}")
        if self.min_samples < 0:
            raise ValueError("min_samples must be nonnegative")


@dataclass
class ClientShard:
    client_id: int
    indices: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.indices = np.sort(np.asarray(self.indices, dtype=np.int64))
        if self.indices.size == 0:
            raise ValueError(f"client {self.client_id} has an empty shard")
        if np.any(np.diff(self.indices) == 0):
            raise ValueError(f"client {self.client_id} has duplicate indices")

    @property
    def n(self) -> int:
        return int(self.indices.size)


def largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    """Integer counts summing to ``total``, closest to ``total * proportions``.

    Ties in the remainder go to the lower index.
    """
    p = np.asarray(proportions, dtype=np.float64)
    p = p / p.sum()
    raw = total * p
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition(data: LabeledDataset, spec: PartitionSpec, clients: int) -> list[ClientShard]:
    N = len(data)
    if N == 0:
        raise ValueError("cannot partition an empty dataset")
    if clients < 1:
        raise ValueError(f"client count must be >= 1, got {clients}")
    if clients > N:
        raise ValueError(f"{clients} clients but only {N} samples")
    rng = derive_rng(spec.seed, "partition")
    if spec.mode == "iid":
        # stratified round-robin keeps class proportions and sizes within 1
        order = np.concatenate([
            rng.permutation(np.flatnonzero(data.labels == c)) for c in range(data.num_classes)
        ])
        owner = np.empty(N, dtype=np.int64)
        owner[order] = (np.arange(N) + rng.integers(clients)) % clients
        return [ClientShard(k, np.flatnonzero(owner == k)) for k in range(clients)]

    need = max(spec.min_samples, 1)
    if need * clients > N:
        raise ValueError(f"min_samples={need} unsatisfiable for {clients} clients and {N} samples")
    for _ in range(spec.max_attempts):
        owner = np.empty(N, dtype=np.int64)
        for c in range(data.num_classes):
            idx = rng.permutation(np.flatnonzero(data.labels == c))
            if idx.size == 0:
                continue
            props = rng.dirichlet(np.full(clients, spec.alpha))
            counts = largest_remainder(idx.size, props)
            owner[idx] = np.repeat(np.arange(clients), counts)
        sizes = np.bincount(owner, minlength=clients)
        if sizes.min() >= need:
            return [ClientShard(k, np.flatnonzero(owner == k)) for k in range(clients)]
    raise ValueError(
        f"could not give every client >= {need} samples in {spec.max_attempts} Dirichlet draws "
        f"(alpha={spec.alpha})"
    )
