"""Learning substrate: a one-hidden-layer ReLU MLP on flat parameter vectors,
dataset generators, IID / Dirichlet partitioning, local SGD and accuracy.

Parameters are laid out as ``W1 (d*h) | b1 (h) | W2 (h*c) | b2 (c)``, row-major.
All functions are pure: input parameter vectors are never mutated.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class DivergenceError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


class ModelDims(NamedTuple):
    d: int
    h: int
    c: int

    @property
    def n_params(self) -> int:
        return self.d * self.h + self.h + self.h * self.c + self.c


def unpack(params: np.ndarray, dims: ModelDims):
    """Return views ``(W1, b1, W2, b2)`` into ``params``."""
    d, h, c = dims
    if params.shape != (dims.n_params,):
        raise ValueError(f"expected {dims.n_params} parameters, got {params.shape}")
    i = 0
    W1 = params[i:i + d * h].reshape(d, h)
    i += d * h
    b1 = params[i:i + h]
    i += h
    W2 = params[i:i + h * c].reshape(h, c)
    i += h * c
    b2 = params[i:i + c]
    return W1, b1, W2, b2


def init_params(dims: ModelDims, rng: np.random.Generator) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer."""
    d, h, c = dims
    a1 = 1.0 / math.sqrt(d)
    a2 = 1.0 / math.sqrt(h)
    return np.concatenate([
        rng.uniform(-a1, a1, size=d * h),
        rng.uniform(-a1, a1, size=h),
        rng.uniform(-a2, a2, size=h * c),
        rng.uniform(-a2, a2, size=c),
    ])


def hidden_activations(params: np.ndarray, dims: ModelDims, X: np.ndarray) -> np.ndarray:
    """Post-ReLU hidden layer outputs, shape (n_samples, h)."""
    W1, b1, _, _ = unpack(params, dims)
    return np.maximum(X @ W1 + b1, 0.0)


def logits(params: np.ndarray, dims: ModelDims, X: np.ndarray) -> np.ndarray:
    W1, b1, W2, b2 = unpack(params, dims)
    return np.maximum(X @ W1 + b1, 0.0) @ W2 + b2


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss(params: np.ndarray, dims: ModelDims, X: np.ndarray, y: np.ndarray) -> float:
    """Mean softmax cross-entropy."""
    lp = _log_softmax(logits(params, dims, X))
    return float(-lp[np.arange(len(y)), y].mean())


def loss_and_grad(params: np.ndarray, dims: ModelDims, X: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and its analytic gradient w.r.t. the flat parameters."""
    W1, b1, W2, b2 = unpack(params, dims)
    n = len(y)
    z1 = X @ W1 + b1
    a1 = np.maximum(z1, 0.0)
    lp = _log_softmax(a1 @ W2 + b2)
    value = float(-lp[np.arange(n), y].mean())

    dz2 = np.exp(lp)
    dz2[np.arange(n), y] -= 1.0
    dz2 /= n
    gW2 = a1.T @ dz2
    gb2 = dz2.sum(axis=0)
    dz1 = (dz2 @ W2.T) * (z1 > 0.0)
    gW1 = X.T @ dz1
    gb1 = dz1.sum(axis=0)
    grad = np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])
    return value, grad


def local_train(
    params: np.ndarray,
    dims: ModelDims,
    X: np.ndarray,
    y: np.ndarray,
    epochs: int,
    lr: float,
    seed,
    batch_size: int = 32,
) -> np.ndarray:
    """Mini-batch SGD on softmax cross-entropy for ``epochs`` passes over (X, y).

    ``seed`` feeds ``np.random.default_rng`` and only drives the shuffling, so a
    given seed always yields the same parameters.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if lr < 0:
        raise ValueError("lr must be >= 0")
    w = np.array(params, dtype=float, copy=True)
    if lr == 0 or len(y) == 0:
        return w
    rng = np.random.default_rng(seed)
    n = len(y)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                value, grad = loss_and_grad(w, dims, X[idx], y[idx])
                if not math.isfinite(value):
                    raise DivergenceError("divergence: non-finite loss (learning rate too high?)")
                w -= lr * grad
    if not np.all(np.isfinite(w)):
        raise DivergenceError("divergence: non-finite parameters")
    return w


def predict(params: np.ndarray, dims: ModelDims, X: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest class index
    return np.argmax(logits(params, dims, X), axis=1)


def evaluate_accuracy(params: np.ndarray, dims: ModelDims, X: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ValueError("cannot evaluate accuracy on an empty dataset")
    return float(np.mean(predict(params, dims, X) == y))


# --------------------------------------------------------------------------- data

@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    index: np.ndarray | None = None  # positions in the source dataset

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise ValueError("features must be N x d with N labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError("labels out of range")
        if self.index is None:
            self.index = np.arange(len(self.y))

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.X[rows], self.y[rows], self.n_classes, self.index[rows])

    @staticmethod
    def concat(parts: list["Dataset"]) -> "Dataset":
        return Dataset(
            np.concatenate([p.X for p in parts]),
            np.concatenate([p.y for p in parts]),
            parts[0].n_classes,
            np.concatenate([p.index for p in parts]),
        )

    def to_csv(self, path) -> None:
        rows = np.column_stack([self.X, self.y])
        fmt = ["%.17g"] * self.X.shape[1] + ["%d"]
        np.savetxt(path, rows, delimiter=",", fmt=fmt)

    @classmethod
    def from_csv(cls, path, n_classes: int | None = None) -> "Dataset":
        rows = np.loadtxt(path, delimiter=",", ndmin=2)
        y = rows[:, -1].astype(np.int64)
        return cls(rows[:, :-1], y, n_classes or int(y.max()) + 1)


def load_toy_digits() -> Dataset:
    """8x8 handwritten digits (1797 samples, 64 features scaled to [0, 1])."""
    from sklearn.datasets import load_digits

    bunch = load_digits()
    return Dataset(bunch.data / 16.0, bunch.target, 10)


def make_synthetic(seed, n_samples: int = 2000, d: int = 64, c: int = 10,
                   spread: float = 1.5) -> Dataset:
    """Gaussian-mixture classification task: one isotropic blob per class."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, spread / math.sqrt(d) * 4.0, size=(c, d))
    y = rng.integers(0, c, size=n_samples)
    X = centers[y] + rng.normal(0.0, 1.0, size=(n_samples, d)) / math.sqrt(d) * 4.0
    return Dataset(X, y, c)


class PartitionMode(str, enum.Enum):
    IID = "iid"
    DIRICHLET = "dirichlet"


@dataclass(frozen=True)
class PartitionSpec:
    mode: PartitionMode
    client_count: int
    beta: float | None = None
    min_samples: int = 10

    def __post_init__(self):
        if self.client_count < 1:
            raise ValueError("client_count must be >= 1")
        if self.mode == PartitionMode.DIRICHLET and not (self.beta and self.beta > 0):
            raise ValueError("Dirichlet partition needs beta > 0")
        if self.min_samples < 0:
            raise ValueError("min_samples must be >= 0")

    @classmethod
    def parse(cls, text: str, client_count: int, min_samples: int = 10) -> "PartitionSpec":
        """Parse ``iid`` or ``dirichlet:<beta>``."""
        text = text.strip().lower()
        if text == "iid":
            return cls(PartitionMode.IID, client_count, None, min_samples)
        if text.startswith("dirichlet:"):
            return cls(PartitionMode.DIRICHLET, client_count, float(text.split(":", 1)[1]), min_samples)
        raise ValueError(f"unknown partition {text!r} (expected iid or dirichlet:<beta>)")

    def __str__(self) -> str:
        return "iid" if self.mode == PartitionMode.IID else f"dirichlet:{self.beta!r}"


def partition_indices(labels: np.ndarray, n_classes: int, spec: PartitionSpec,
                      rng: np.random.Generator, max_redraws: int = 1000) -> list[np.ndarray]:
    """Split sample positions among ``spec.client_count`` clients.

    IID: random permutation cut into near-equal contiguous chunks.
    Dirichlet: for each class, client shares ~ Dir(beta); the class's shuffled
    samples are cut at the cumulative shares. Redrawn until every client holds at
    least ``min(spec.min_samples, N // K)`` samples.
    """
    n = len(labels)
    K = spec.client_count
    if K > n:
        raise ValueError(f"more clients ({K}) than samples ({n})")
    if spec.mode == PartitionMode.IID:
        return [np.sort(part) for part in np.array_split(rng.permutation(n), K)]

    floor = min(spec.min_samples, n // K)
    by_class = [np.flatnonzero(labels == k) for k in range(n_classes)]
    for _ in range(max_redraws):
        buckets: list[list[np.ndarray]] = [[] for _ in range(K)]
        for members in by_class:
            if len(members) == 0:
                continue
            shares = rng.dirichlet(np.full(K, spec.beta))
            members = rng.permutation(members)
            cuts = (np.cumsum(shares)[:-1] * len(members)).astype(int)
            for client, chunk in enumerate(np.split(members, cuts)):
                buckets[client].append(chunk)
        parts = [np.sort(np.concatenate(b)) for b in buckets]
        if min(len(p) for p in parts) >= floor:
            return parts
    raise RuntimeError(f"could not draw a Dirichlet({spec.beta}) partition with "
                       f">= {floor} samples per client")


def partition(dataset: Dataset, spec: PartitionSpec, rng: np.random.Generator) -> list[Dataset]:
    return [dataset.subset(idx) for idx in partition_indices(dataset.y, dataset.n_classes, spec, rng)]


def split_train_val_test(dataset: Dataset, rng: np.random.Generator,
                         ratios=(0.8, 0.1, 0.1)) -> tuple[Dataset, Dataset, Dataset]:
    """Random 8:1:1 split; validation and test get at least one sample each when N >= 3."""
    n = len(dataset)
    order = rng.permutation(n)
    n_val = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))
    if n >= 3:
        n_val, n_test = max(n_val, 1), max(n_test, 1)
    n_train = n - n_val - n_test
    return (dataset.subset(np.sort(order[:n_train])),
            dataset.subset(np.sort(order[n_train:n_train + n_val])),
            dataset.subset(np.sort(order[n_train + n_val:])))


def class_entropy(labels: np.ndarray, n_classes: int) -> float:
    """Shannon entropy (nats) of the empirical class distribution."""
    counts = np.bincount(labels, minlength=n_classes).astype(float)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())
