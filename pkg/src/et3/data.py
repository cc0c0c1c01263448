"""Labeled point sets, synthetic generators and their CSV storage."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    seed: int = 0
    cluster: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X must be (n, d) with one label per row")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("labels out of range")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("features must be finite")

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> "Dataset":
        cl = None if self.cluster is None else self.cluster[idx]
        return Dataset(self.X[idx], self.y[idx], self.num_classes, self.seed, cl)


def gaussian_blobs(n_per_class: int, num_classes: int, dim: int, separation: float = 3.0,
                   sigma: float = 1.0, seed: int = 0) -> Dataset:
    """Isotropic Gaussian classes whose means are random directions scaled by ``separation``."""
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    y = np.repeat(np.arange(num_classes), n_per_class)
    X = means[y] + sigma * rng.standard_normal((y.size, dim))
    perm = rng.permutation(y.size)
    return Dataset(X[perm], y[perm], num_classes, seed)


def concept_means(num_concepts: int, dim: int, radius: float = 4.0, seed: int = 0) -> np.ndarray:
    """Fine-grained cluster centers: random directions of norm ``radius``."""
    if num_concepts < 1:
        raise ValueError("need at least one concept")
    rng = np.random.default_rng([seed, 0])
    means = rng.standard_normal((num_concepts, dim))
    return means * (radius / np.linalg.norm(means, axis=1, keepdims=True))


def concept_clusters(n_samples: int, num_concepts: int, num_classes: int, dim: int,
                     radius: float = 4.0, sigma: float = 0.5, seed: int = 0) -> Dataset:
    """Many tight clusters ("concepts") sharing a few coarse labels.

    Concept ``j`` carries label ``j % num_classes``; every sample records its
    concept in ``Dataset.cluster``.  Centers come from :func:`concept_means`
    with the same seed.
    """
    if num_concepts < num_classes:
        raise ValueError("need at least one concept per class")
    means = concept_means(num_concepts, dim, radius, seed)
    rng = np.random.default_rng([seed, 1])
    cluster = rng.integers(0, num_concepts, size=n_samples)
    X = means[cluster] + sigma * rng.standard_normal((n_samples, dim))
    return Dataset(X, cluster % num_classes, num_classes, seed, cluster)


def moons(n_samples: int, dim: int = 2, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Two interleaved half circles, embedded in the first two of ``dim`` coordinates.

    Remaining coordinates carry small isotropic noise only.
    """
    if dim < 2:
        raise ValueError("moons need at least two dimensions")
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n_samples)
    t = rng.uniform(0.0, np.pi, size=n_samples)
    X = np.zeros((n_samples, dim))
    X[:, 0] = np.where(y == 0, np.cos(t), 1.0 - np.cos(t))
    X[:, 1] = np.where(y == 0, np.sin(t), 0.5 - np.sin(t))
    X += noise * rng.standard_normal((n_samples, dim))
    return Dataset(X, y, 2, seed)


def save_dataset(ds: Dataset, out_dir) -> None:
    """Write ``data.csv`` (features then label per row) and ``meta.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "data.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(ds.dim)] + ["label"])
        for row, label in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])
    meta = {"dim": ds.dim, "K": ds.num_classes, "seed": ds.seed, "n": len(ds)}
    if ds.cluster is not None:
        meta["cluster"] = [int(c) for c in ds.cluster]
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(in_dir) -> Dataset:
    src = Path(in_dir)
    meta = json.loads((src / "meta.json").read_text())
    X, y = read_feature_csv(src / "data.csv", labeled=True)
    if X.shape[1] != meta["dim"]:
        raise ValueError("data.csv width disagrees with meta.json")
    cluster = np.asarray(meta["cluster"]) if "cluster" in meta else None
    return Dataset(X.reshape(-1, meta["dim"]), y, meta["K"], meta["seed"], cluster)


def read_feature_csv(path, labeled: bool = False):
    """Rows of floats with a header line; with ``labeled`` the last column is an integer label."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    if labeled:
        X = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64)
        y = np.array([int(r[-1]) for r in body], dtype=np.int64)
        return X, y
    return np.array([[float(v) for v in r] for r in body], dtype=np.float64), None
