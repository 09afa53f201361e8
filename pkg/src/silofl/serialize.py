"""Binary file formats for model parameters and synthetic datasets.

Both formats are little-endian and self-describing.

Parameter file (magic ``SFPM``, version 1):
    magic[4] | u32 version | u32 n_layers
    per layer (sorted by id):
        u16 name_len | name utf-8 | u32 rows | u32 cols | u8 has_bias
        f64 weights (rows*cols, row-major) | f64 bias (cols, if has_bias)

Synthetic dataset file (magic ``SFSD``, version 1):
    magic[4] | u32 version | u32 dim | u32 count | u32 n_classes | u32 client_id
    f64 epsilon_spent (+inf when DP was off) | f64 delta
    u16 hash_len | config-hash ascii
    u32 n_class_ids | u32 class ids (sorted, classes present)
    f64 samples (count*dim, row-major) | u32 labels (count)
"""

from __future__ import annotations

import math
import struct

import numpy as np

from . import nn
from .datagen import SyntheticDataset

_PARAM_MAGIC = b"SFPM"
_SYNTH_MAGIC = b"SFSD"


def save_params(params: nn.ParamSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_PARAM_MAGIC)
        fh.write(struct.pack("<II", 1, len(params)))
        for name, (w, b) in params.items():
            blob = name.encode()
            fh.write(struct.pack("<H", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<IIB", w.shape[0], w.shape[1], 1 if b is not None else 0))
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            if b is not None:
                fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_params(path) -> nn.ParamSet:
    with open(path, "rb") as fh:
        if fh.read(4) != _PARAM_MAGIC:
            raise ValueError(f"{path}: not a parameter file")
        version, n_layers = struct.unpack("<II", fh.read(8))
        if version != 1:
            raise ValueError(f"{path}: unsupported version {version}")
        entries = {}
        for _ in range(n_layers):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            rows, cols, has_bias = struct.unpack("<IIB", fh.read(9))
            w = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8").reshape(rows, cols).copy()
            b = None
            if has_bias:
                b = np.frombuffer(fh.read(cols * 8), dtype="<f8").copy()
            entries[name] = (w, b)
    return nn.ParamSet(entries)


def params_manifest(path) -> list[dict]:
    """Named-layer table of a parameter file without keeping the arrays."""
    params = load_params(path)
    return [
        {
            "name": name,
            "shape": list(w.shape),
            "has_bias": b is not None,
            "values": int(w.size + (0 if b is None else b.size)),
        }
        for name, (w, b) in params.items()
    ]


def save_synthetic(sds: SyntheticDataset, path) -> None:
    class_ids = sorted(int(c) for c in np.unique(sds.labels))
    with open(path, "wb") as fh:
        fh.write(_SYNTH_MAGIC)
        fh.write(
            struct.pack("<IIIII", 1, sds.dim, len(sds), sds.n_classes, sds.client_id)
        )
        fh.write(struct.pack("<dd", sds.epsilon_spent, sds.delta))
        blob = sds.config_hash.encode()
        fh.write(struct.pack("<H", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(class_ids)))
        fh.write(np.array(class_ids, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(sds.samples, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(sds.labels, dtype="<u4").tobytes())


def load_synthetic(path) -> SyntheticDataset:
    with open(path, "rb") as fh:
        if fh.read(4) != _SYNTH_MAGIC:
            raise ValueError(f"{path}: not a synthetic dataset file")
        version, dim, count, n_classes, client_id = struct.unpack("<IIIII", fh.read(20))
        if version != 1:
            raise ValueError(f"{path}: unsupported version {version}")
        epsilon, delta = struct.unpack("<dd", fh.read(16))
        (hash_len,) = struct.unpack("<H", fh.read(2))
        config_hash = fh.read(hash_len).decode()
        (n_ids,) = struct.unpack("<I", fh.read(4))
        fh.read(4 * n_ids)  # class list is recoverable from the labels
        samples = np.frombuffer(fh.read(count * dim * 8), dtype="<f8").reshape(count, dim).copy()
        labels = np.frombuffer(fh.read(count * 4), dtype="<u4").astype(np.int64)
    return SyntheticDataset(
        samples=samples,
        labels=labels,
        n_classes=n_classes,
        client_id=client_id,
        epsilon_spent=epsilon,
        delta=delta,
        config_hash=config_hash,
    )


def synthetic_csv(sds: SyntheticDataset, path) -> None:
    header = ",".join(f"feature_{i}" for i in range(sds.dim)) + ",label"
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row, label in zip(sds.samples, sds.labels):
            fh.write(",".join(repr(float(v)) for v in row) + f",{int(label)}\n")
