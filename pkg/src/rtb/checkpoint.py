"""Saving and loading drift networks, metrics and samples."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .ad import MlpParams
from .diffusion import DriftNet


def _mlp_to_arrays(prefix, p: MlpParams):
    out = {}
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        out[f"{prefix}W{i}"] = w
        out[f"{prefix}b{i}"] = b
    return out


def _mlp_from_arrays(prefix, arrays, activation, compute_dtype):
    n = sum(1 for k in arrays if k.startswith(prefix + "W"))
    ws = [np.array(arrays[f"{prefix}W{i}"]) for i in range(n)]
    bs = [np.array(arrays[f"{prefix}b{i}"]) for i in range(n)]
    return MlpParams(ws, bs, activation, compute_dtype)


def save_net(path, net: DriftNet, log_z=None):
    """Write ``net`` (and an optional log Z) to an .npz file."""
    arrays = _mlp_to_arrays("base_", net.base)
    if net.langevin_head is not None:
        arrays.update(_mlp_to_arrays("head_", net.langevin_head))
    meta = {
        "n_fourier": net.n_fourier,
        "activation": net.base.activation,
        "compute_dtype": net.base.compute_dtype,
        "x_scale": net.x_scale,
        "out_scale": net.out_scale,
        "langevin": net.langevin,
        "log_z": None if log_z is None else float(log_z),
    }
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_net(path):
    """Inverse of :func:`save_net`; returns (net, log_z or None)."""
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(str(arrays.pop("meta")))
    base = _mlp_from_arrays("base_", arrays, meta["activation"], meta["compute_dtype"])
    head = _mlp_from_arrays("head_", arrays, meta["activation"], meta["compute_dtype"]) if meta["langevin"] else None
    net = DriftNet(base, head, meta["n_fourier"], meta["x_scale"], meta["out_scale"])
    return net, meta["log_z"]


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(path, rows, columns):
    """CSV with a fixed column order; missing values become empty cells."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) if c in row else "" for c in columns])


def write_samples(path, x):
    x = np.atleast_2d(x)
    write_rows(path, [{"x_1": float(a), "x_2": float(b)} for a, b in x], ["x_1", "x_2"])


def read_samples(path):
    """Samples CSV written by :func:`write_samples`; raises on an empty file."""
    path = Path(path)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if len(rows) < 2:
        raise ValueError(f"{path} contains no samples")
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    if data.ndim != 2 or data.shape[1] != 2 or not np.all(np.isfinite(data)):
        raise ValueError(f"{path} is not a valid 2-d sample file")
    return data
