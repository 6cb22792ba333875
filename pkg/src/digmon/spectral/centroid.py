"""Nearest-centroid signature classifier over standardized log-PSD vectors.

Persistence format: one ASCII header line ``DGCM <json>\\n`` with labels,
counts, dimension and dtype, followed by little-endian float64 arrays:
feature mean, feature scale, then one centroid per class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .psd import Psd

__all__ = [
    "InsufficientDataError",
    "CentroidModel",
    "features",
    "train_centroids",
    "classify",
    "classify_many",
]

MIN_WINDOWS = 5
_MAGIC = b"DGCM"
_FLOOR = 1e-12  # W^2/Hz, below any simulated noise floor


class InsufficientDataError(ValueError):
    pass


def features(psd) -> np.ndarray:
    """Log-PSD feature vector (dB)."""
    b = psd.bins if isinstance(psd, Psd) else np.asarray(psd, dtype=float)
    return 10.0 * np.log10(np.maximum(b, _FLOOR))


@dataclass(frozen=True)
class CentroidModel:
    labels: tuple
    centroids: np.ndarray  # (n_classes, n_bins), standardized space
    mean: np.ndarray
    scale: np.ndarray
    n_train: tuple

    @property
    def n_bins(self) -> int:
        return self.mean.size

    def standardize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def save(self, path: str | Path):
        head = {
            "version": 1,
            "labels": list(self.labels),
            "n_train": list(self.n_train),
            "n_bins": int(self.n_bins),
            "dtype": "<f8",
        }
        with open(path, "wb") as fh:
            fh.write(_MAGIC + b" " + json.dumps(head).encode() + b"\n")
            for arr in (self.mean, self.scale, self.centroids):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "CentroidModel":
        raw = Path(path).read_bytes()
        nl = raw.index(b"\n")
        line = raw[:nl]
        if not line.startswith(_MAGIC + b" "):
            raise ValueError("not a centroid model file")
        head = json.loads(line[len(_MAGIC) + 1:])
        n, c = head["n_bins"], len(head["labels"])
        data = np.frombuffer(raw, dtype="<f8", offset=nl + 1)
        if data.size != n * (2 + c):
            raise ValueError("centroid model body has the wrong size")
        return cls(tuple(head["labels"]), data[2 * n:].reshape(c, n).copy(),
                   data[:n].copy(), data[n:2 * n].copy(), tuple(head["n_train"]))


def train_centroids(windows) -> CentroidModel:
    """``windows``: mapping label -> list of Psd (or bin arrays), or (label, psd) pairs."""
    if isinstance(windows, dict):
        items = list(windows.items())
    else:
        grouped: dict = {}
        for label, w in windows:
            grouped.setdefault(label, []).append(w)
        items = list(grouped.items())
    labels = [lab for lab, _ in items]
    if len(set(labels)) != len(labels):
        raise ValueError("class labels must be unique")
    if len(items) < 2:
        raise InsufficientDataError("need at least 2 classes")
    feats = []
    for lab, ws in items:
        if len(ws) < MIN_WINDOWS:
            raise InsufficientDataError(f"class {lab!r} has {len(ws)} windows, need {MIN_WINDOWS}")
        feats.append(np.array([features(w) for w in ws]))
    dims = {f.shape[1] for f in feats}
    if len(dims) != 1:
        raise ValueError("all windows must have the same number of bins")
    allf = np.concatenate(feats)
    mean = allf.mean(axis=0)
    scale = allf.std(axis=0)
    scale[scale <= 1e-9] = 1.0
    cents = np.array([((f - mean) / scale).mean(axis=0) for f in feats])
    return CentroidModel(tuple(labels), cents, mean, scale, tuple(len(f) for f in feats))


def _distances(model: CentroidModel, z: np.ndarray) -> np.ndarray:
    # |z - c|^2 expanded; clipped because cancellation can go slightly negative
    d2 = (z * z).sum(axis=1)[:, None] - 2 * z @ model.centroids.T + (model.centroids ** 2).sum(axis=1)[None, :]
    return np.sqrt(np.maximum(d2, 0.0))


def classify(psd, model: CentroidModel):
    """-> (label, margin); margin = (second - best)/best distance, inf on an exact hit."""
    x = features(psd)
    if x.shape != (model.n_bins,):
        raise ValueError(f"feature length {x.size} does not match model ({model.n_bins})")
    z = model.standardize(x)
    d = np.sqrt(((model.centroids - z) ** 2).sum(axis=1))
    order = np.argsort(d, kind="stable")
    best, second = d[order[0]], d[order[1]]
    margin = np.inf if best == 0 else float((second - best) / best)
    return model.labels[order[0]], margin


def classify_many(psds, model: CentroidModel) -> list:
    """Vectorised :func:`classify`, labels only."""
    x = np.array([features(p) for p in psds])
    if x.ndim != 2 or x.shape[1] != model.n_bins:
        raise ValueError("feature length does not match model")
    d = _distances(model, model.standardize(x))
    return [model.labels[i] for i in np.argmin(d, axis=1)]
