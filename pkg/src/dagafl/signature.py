"""Activation-sparsity signatures and the pairwise similarity registry.

A client's signature is a vector of zero-activation fractions: the hidden layer
of the MLP is cut into ``n_groups`` contiguous blocks and, per block, we
average (over the client's samples) the fraction of units the ReLU switched
off. Similar data distributions switch off similar units.
"""
from __future__ import annotations

import csv
import io
import math
from bisect import bisect_right

import numpy as np

from .fl_core import ModelDims, hidden_activations

ZERO_TOL = 1e-12
DEFAULT_GROUPS = 8


class UnknownPairError(KeyError):
    """No similarity was ever recorded for the requested client pair."""


def sample_signature(feature_map) -> float:
    """Fraction of (near-)zero entries of one feature map."""
    fm = np.asarray(feature_map, dtype=float)
    if fm.size == 0:
        raise ValueError("empty feature map")
    return float(np.count_nonzero(np.abs(fm) <= ZERO_TOL)) / fm.size


def group_bounds(h: int, n_groups: int) -> list[tuple[int, int]]:
    if not 1 <= n_groups <= h:
        raise ValueError(f"n_groups must be in [1, {h}], got {n_groups}")
    edges = np.linspace(0, h, n_groups + 1).round().astype(int)
    return list(zip(edges[:-1].tolist(), edges[1:].tolist()))


def sample_signatures(params: np.ndarray, dims: ModelDims, X: np.ndarray,
                      n_groups: int = DEFAULT_GROUPS) -> np.ndarray:
    """Per-sample, per-group zero fractions, shape (n_samples, n_groups)."""
    zero = np.abs(hidden_activations(params, dims, np.atleast_2d(X))) <= ZERO_TOL
    return np.column_stack([zero[:, lo:hi].mean(axis=1) for lo, hi in group_bounds(dims.h, n_groups)])


def dataset_signature(params: np.ndarray, dims: ModelDims, X: np.ndarray,
                      n_groups: int = DEFAULT_GROUPS) -> np.ndarray:
    if len(X) == 0:
        raise ValueError("cannot compute a signature of an empty dataset")
    return sample_signatures(params, dims, X, n_groups).mean(axis=0)


def cosine_similarity(a, b) -> float:
    """Cosine of two signature vectors; 0 when either has zero norm."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"signature lengths differ: {a.shape} vs {b.shape}")
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    # clip guards the last ulp; signatures are nonnegative so the cosine is too
    return min(1.0, max(0.0, float(a @ b) / (na * nb)))


class SimilarityRegistry:
    """Round-stamped record of pairwise client similarities.

    Stands in for an on-chain contract: writes are serialized by the event loop,
    queries return the value recorded at the latest round not after the one asked.
    """

    def __init__(self):
        self._rounds: dict[tuple[int, int], list[int]] = {}
        self._values: dict[tuple[int, int], list[float]] = {}
        self.n_queries = 0

    @staticmethod
    def _key(i: int, j: int) -> tuple[int, int]:
        return (i, j) if i <= j else (j, i)

    def record(self, round_: int, i: int, j: int, value: float) -> None:
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"similarity {value} outside [0, 1]")
        if i == j and value != 1.0:
            raise ValueError("self-similarity must be 1")
        key = self._key(i, j)
        rounds = self._rounds.setdefault(key, [])
        values = self._values.setdefault(key, [])
        if rounds and round_ < rounds[-1]:
            raise ValueError(f"round {round_} recorded after round {rounds[-1]}")
        if rounds and rounds[-1] == round_:
            values[-1] = value
        else:
            rounds.append(round_)
            values.append(value)

    def query(self, round_: int, i: int, j: int) -> float:
        self.n_queries += 1
        key = self._key(i, j)
        rounds = self._rounds.get(key)
        if rounds:
            pos = bisect_right(rounds, round_)
            if pos:
                return self._values[key][pos - 1]
        raise UnknownPairError((i, j))

    def get(self, round_: int, i: int, j: int, default: float = 0.0) -> float:
        try:
            return self.query(round_, i, j)
        except UnknownPairError:
            return default

    def matrix(self, round_: int, n_clients: int) -> np.ndarray:
        """Dense K x K snapshot; unknown pairs are NaN, the diagonal is 1."""
        out = np.full((n_clients, n_clients), np.nan)
        np.fill_diagonal(out, 1.0)
        for (i, j), rounds in self._rounds.items():
            if i < n_clients and j < n_clients:
                pos = bisect_right(rounds, round_)
                if pos:
                    out[i, j] = out[j, i] = self._values[(i, j)][pos - 1]
        return out

    def rows(self):
        recs = []
        for (i, j), rounds in self._rounds.items():
            for r, v in zip(rounds, self._values[(i, j)]):
                recs.append((r, i, j, v))
        return sorted(recs)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["round", "i", "j", "value"])
        for r, i, j, v in self.rows():
            writer.writerow([r, i, j, repr(v)])
        return buf.getvalue()
