"""Dataset loading, non-IID partitioning, and split management.

Datasets are (n, d) float64 sample matrices with values in [0, 1] plus
integer class labels. Client partitions follow a label-skewed Dirichlet
scheme: for each class, per-client proportions are drawn from
Dirichlet(concentration) and the class's indices are dealt out by largest
remainder, so smaller concentrations give stronger label skew.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class IdxFormatError(ValueError):
    """Malformed IDX file; the message carries the failing byte offset."""


@dataclass(frozen=True)
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = ""

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)
        if samples.ndim != 2 or samples.shape[0] < 1:
            raise ValueError("samples must be a non-empty (n, d) matrix")
        if labels.shape != (samples.shape[0],):
            raise ValueError("labels must align with samples")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        if samples.size and (samples.min() < 0.0 or samples.max() > 1.0):
            raise ValueError("sample values must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def subset(self, indices: np.ndarray, name: Optional[str] = None) -> "LabeledDataset":
        return LabeledDataset(
            samples=self.samples[indices],
            labels=self.labels[indices],
            n_classes=self.n_classes,
            name=self.name if name is None else name,
        )


class AuditedDataset:
    """Wraps a dataset and counts every access to its contents.

    The federation loop must not touch secret splits; asserting this wrapper's
    counter stayed put across a round enforces that.
    """

    def __init__(self, ds: LabeledDataset):
        self._ds = ds
        self.reads = 0

    @property
    def samples(self) -> np.ndarray:
        self.reads += 1
        return self._ds.samples

    @property
    def labels(self) -> np.ndarray:
        self.reads += 1
        return self._ds.labels

    @property
    def n_classes(self) -> int:
        return self._ds.n_classes

    def __len__(self) -> int:
        return len(self._ds)

    def unwrap(self) -> LabeledDataset:
        self.reads += 1
        return self._ds


def _read_exact(fh, n, offset, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise IdxFormatError(f"{path}: truncated at byte {offset + len(buf)} (wanted {n} bytes)")
    return buf


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Parse the big-endian IDX image/label pair into a flat [0, 1] dataset."""
    with open(images_path, "rb") as fh:
        magic = struct.unpack(">I", _read_exact(fh, 4, 0, images_path))[0]
        if magic != 0x00000803:
            raise IdxFormatError(f"{images_path}: bad image magic {magic:#010x} at byte 0")
        n, rows, cols = struct.unpack(">III", _read_exact(fh, 12, 4, images_path))
        raw = _read_exact(fh, n * rows * cols, 16, images_path)
        samples = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
        samples = samples.reshape(n, rows * cols)
    with open(labels_path, "rb") as fh:
        magic = struct.unpack(">I", _read_exact(fh, 4, 0, labels_path))[0]
        if magic != 0x00000801:
            raise IdxFormatError(f"{labels_path}: bad label magic {magic:#010x} at byte 0")
        n_labels = struct.unpack(">I", _read_exact(fh, 4, 4, labels_path))[0]
        labels = np.frombuffer(_read_exact(fh, n_labels, 8, labels_path), dtype=np.uint8)
    if n_labels != n:
        raise IdxFormatError(
            f"{labels_path}: {n_labels} labels for {n} images (count mismatch at byte 4)"
        )
    n_classes = int(labels.max()) + 1 if labels.size else 1
    return LabeledDataset(samples=samples, labels=labels.astype(np.int64), n_classes=n_classes, name="idx")


def downsample(ds: LabeledDataset, factor: int) -> LabeledDataset:
    """Block-mean pooling of square images; labels preserved."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return ds
    side = math.isqrt(ds.dim)
    if side * side != ds.dim:
        raise ValueError(f"samples are not square images (dim {ds.dim})")
    if side % factor != 0:
        raise ValueError(f"side {side} not divisible by factor {factor}")
    out_side = side // factor
    imgs = ds.samples.reshape(len(ds), out_side, factor, out_side, factor)
    pooled = imgs.mean(axis=(2, 4)).reshape(len(ds), out_side * out_side)
    return LabeledDataset(pooled, ds.labels, ds.n_classes, name=f"{ds.name}@{out_side}x{out_side}")


@dataclass(frozen=True)
class PartitionPlan:
    client_indices: tuple[np.ndarray, ...]
    concentration: float
    seed: Optional[int] = None

    def __post_init__(self):
        all_idx = np.concatenate(self.client_indices) if self.client_indices else np.array([])
        if len(np.unique(all_idx)) != all_idx.size:
            raise ValueError("client index lists overlap")


def dirichlet_partition(
    labels: np.ndarray, n_clients: int, concentration: float, rng: np.random.Generator
) -> PartitionPlan:
    """Label-skewed client split: per-class proportions ~ Dirichlet(concentration).

    Every client ends up non-empty: the plan is redrawn up to 100 times, after
    which single samples are moved over from the largest client.
    """
    labels = np.asarray(labels)
    n = labels.size
    if n_clients < 1:
        raise ValueError("need at least one client")
    if n < n_clients:
        raise ValueError(f"{n} samples cannot cover {n_clients} clients")
    if concentration <= 0:
        raise ValueError("concentration must be positive")

    classes = np.unique(labels)
    assignment = None
    for _ in range(100):
        buckets = [[] for _ in range(n_clients)]
        for c in classes:
            idx = np.flatnonzero(labels == c)
            idx = rng.permutation(idx)
            props = rng.dirichlet(np.full(n_clients, concentration))
            counts = _largest_remainder(props, idx.size)
            start = 0
            for client, cnt in enumerate(counts):
                buckets[client].extend(idx[start : start + cnt])
                start += cnt
        if all(buckets):
            assignment = buckets
            break
    if assignment is None:
        assignment = buckets
        for client in range(n_clients):
            if not assignment[client]:
                donor = max(range(n_clients), key=lambda c: len(assignment[c]))
                assignment[client].append(assignment[donor].pop())
    return PartitionPlan(
        client_indices=tuple(np.array(sorted(b), dtype=np.int64) for b in assignment),
        concentration=concentration,
    )


def _largest_remainder(props: np.ndarray, total: int) -> np.ndarray:
    raw = props * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        frac = raw - counts
        order = np.argsort(-frac, kind="stable")
        counts[order[:short]] += 1
    return counts


def split_train_val(
    indices: np.ndarray,
    val_fraction: float,
    rng: np.random.Generator,
    labels: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint train/val cover of the given indices, stratified when labels are given."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0, 1)")
    indices = np.asarray(indices, dtype=np.int64)
    if labels is None:
        shuffled = rng.permutation(indices)
        n_val = int(round(val_fraction * indices.size))
        return np.sort(shuffled[n_val:]), np.sort(shuffled[:n_val])
    labels = np.asarray(labels)
    train_parts, val_parts = [], []
    for c in np.unique(labels[indices]):
        grp = rng.permutation(indices[labels[indices] == c])
        n_val = int(round(val_fraction * grp.size))
        val_parts.append(grp[:n_val])
        train_parts.append(grp[n_val:])
    return np.sort(np.concatenate(train_parts)), np.sort(np.concatenate(val_parts))


def two_moons(n: int, noise: float, rng: np.random.Generator) -> LabeledDataset:
    """Two interleaved half-circles scaled into [0, 1]; the fast built-in toy task."""
    n_up = n // 2
    n_down = n - n_up
    t_up = rng.uniform(0.0, math.pi, n_up)
    t_down = rng.uniform(0.0, math.pi, n_down)
    xs = np.concatenate([np.cos(t_up), 1.0 - np.cos(t_down)])
    ys = np.concatenate([np.sin(t_up), 0.5 - np.sin(t_down)])
    pts = np.stack([xs, ys], axis=1)
    pts += rng.normal(0.0, noise, size=pts.shape)
    pts = np.clip((pts + np.array([1.5, 1.5])) / 4.0, 0.0, 1.0)
    labels = np.concatenate([np.zeros(n_up, dtype=np.int64), np.ones(n_down, dtype=np.int64)])
    perm = rng.permutation(n)
    return LabeledDataset(pts[perm], labels[perm], n_classes=2, name="moons")


def digits14() -> LabeledDataset:
    """Bundled 8x8 handwritten digits upsampled to 14x14 (2x then center crop).

    Stands in for a 14x14 grayscale digit corpus wherever IDX files are not
    on disk; same geometry and class structure, loads offline.
    """
    from sklearn.datasets import load_digits

    raw = load_digits()
    imgs = raw.images / 16.0
    up = np.kron(imgs, np.ones((2, 2)))[:, 1:15, 1:15]
    return LabeledDataset(
        up.reshape(len(imgs), 196), raw.target.astype(np.int64), n_classes=10, name="digits14"
    )


def load_cifar_batch(path, n_classes: int = 10) -> LabeledDataset:
    """One binary batch of <label byte><3072 pixel bytes> records."""
    with open(path, "rb") as fh:
        raw = np.frombuffer(fh.read(), dtype=np.uint8)
    record = 3073
    if raw.size == 0 or raw.size % record != 0:
        raise ValueError(f"{path}: size {raw.size} is not a whole number of {record}-byte records")
    raw = raw.reshape(-1, record)
    return LabeledDataset(
        raw[:, 1:].astype(np.float64) / 255.0,
        raw[:, 0].astype(np.int64),
        n_classes=n_classes,
        name="cifar",
    )


def load_csv_dataset(path) -> LabeledDataset:
    """CSV with a header row; the column named 'label' holds the class id."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if "label" not in header:
            raise ValueError(f"{path}: no 'label' column in header")
        label_col = header.index("label")
        feats, labels = [], []
        for row in reader:
            labels.append(int(row[label_col]))
            feats.append([float(v) for i, v in enumerate(row) if i != label_col])
    labels = np.array(labels, dtype=np.int64)
    return LabeledDataset(
        np.array(feats, dtype=np.float64),
        labels,
        n_classes=int(labels.max()) + 1,
        name="csv",
    )
