"""Synthetic desk-scale datasets and CSV round-tripping."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from .modelkit import ConfigError

KINDS = ("gaussian_blobs", "two_spirals", "quadratic_regression", "csv_file")


class DataError(ValueError):
    """Malformed dataset file."""


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "gaussian_blobs"
    n_samples: int = 2000
    n_features: int = 8
    n_classes: int = 2
    noise: float = 0.5
    seed: int = 0
    path: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "csv_file" and not self.path:
            raise ConfigError("csv_file dataset requires a path")
        if self.n_samples < 1 or self.n_features < 1 or self.n_classes < 1:
            raise ConfigError("n_samples, n_features and n_classes must be >= 1")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")

    @property
    def is_classification(self) -> bool:
        return self.kind in ("gaussian_blobs", "two_spirals") or (self.kind == "csv_file" and self.n_classes > 1)

    def to_dict(self) -> dict:
        return asdict(self)


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def gen_dataset(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Features ``(n_samples, n_features)`` and labels ``(n_samples,)`` (or targets for regression)."""
    rng = np.random.default_rng(spec.seed)
    n, d, k = spec.n_samples, spec.n_features, spec.n_classes
    if spec.kind == "gaussian_blobs":
        centers = rng.normal(size=(k, d))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        y = _balanced_labels(n, k, rng)
        X = centers[y] + spec.noise * rng.normal(size=(n, d))
        return X, y
    if spec.kind == "two_spirals":
        if d < 2:
            raise ConfigError("two_spirals needs n_features >= 2")
        y = _balanced_labels(n, 2, rng)
        r = rng.uniform(0.05, 1.0, size=n)
        theta = 3.0 * np.pi * r + np.pi * y
        X = np.zeros((n, d))
        X[:, 0] = r * np.cos(theta)
        X[:, 1] = r * np.sin(theta)
        X += spec.noise * rng.normal(size=(n, d))
        return X, y
    if spec.kind == "quadratic_regression":
        X = rng.normal(size=(n, d))
        Q = rng.normal(size=(k, d, d)) / d
        lin = rng.normal(size=(k, d)) / np.sqrt(d)
        Y = np.einsum("ni,kij,nj->nk", X, Q, X) + X @ lin.T + spec.noise * rng.normal(size=(n, k))
        return X, (Y[:, 0] if k == 1 else Y)
    return load_csv(spec.path, classification=spec.n_classes > 1)


def save_csv(X: np.ndarray, y: np.ndarray, path) -> None:
    y2 = np.asarray(y).reshape(len(X), -1)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x{i}" for i in range(X.shape[1])] + [f"y{i}" for i in range(y2.shape[1])] if y2.shape[1] > 1
                   else [f"x{i}" for i in range(X.shape[1])] + ["y"])
        for xi, yi in zip(X, y2):
            w.writerow([repr(float(v)) for v in xi] + [repr(v.item()) for v in yi])


def load_csv(path, classification: bool = True, n_targets: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Read ``features..., label`` rows; a non-numeric first row is taken as a header."""
    rows = []
    width = None
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            try:
                vals = [float(v) for v in row]
            except ValueError:
                if lineno == 1:
                    continue
                raise DataError(f"{path}: line {lineno}: non-numeric value") from None
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise DataError(f"{path}: line {lineno}: expected {width} columns, got {len(vals)}")
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    A = np.array(rows)
    X, Y = A[:, :-n_targets], A[:, -n_targets:]
    if classification:
        if not np.all(Y == np.round(Y)):
            raise DataError(f"{path}: class labels must be integers")
        return X, Y[:, 0].astype(np.int64)
    return X, (Y[:, 0] if n_targets == 1 else Y)
