"""Normalized Laplacians of per-class complete label graphs.

Every class forms a complete subgraph with unit edge weights and classes are
disconnected from each other, so the normalized Laplacian is block diagonal
with blocks ``(n I - 1 1^T) / (n - 1)``. The blocks are never materialized;
each one is kept as its size and evaluated in ``O(n)`` per vector.

A single-vertex class has no edges and its Laplacian is the zero operator.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError


@dataclass(frozen=True)
class ClassLaplacian:
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("class Laplacian needs at least one vertex")

    @property
    def diag(self) -> float:
        return 1.0 if self.size > 1 else 0.0

    @property
    def off(self) -> float:
        return -1.0 / (self.size - 1) if self.size > 1 else 0.0

    def dense(self) -> np.ndarray:
        """Materialize the block; for tests and debugging only."""
        n = self.size
        L = np.full((n, n), self.off)
        np.fill_diagonal(L, self.diag)
        return L


@dataclass(frozen=True)
class BlockLaplacian:
    blocks: tuple[ClassLaplacian, ...]

    @classmethod
    def from_class_sizes(cls, sizes) -> "BlockLaplacian":
        return cls(tuple(class_laplacian(int(n)) for n in sizes))

    @property
    def size(self) -> int:
        return sum(b.size for b in self.blocks)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([b.size for b in self.blocks])]).astype(int)

    def dense(self) -> np.ndarray:
        N = self.size
        L = np.zeros((N, N))
        off = self.offsets
        for b, lo, hi in zip(self.blocks, off[:-1], off[1:]):
            L[lo:hi, lo:hi] = b.dense()
        return L


def class_laplacian(n: int) -> ClassLaplacian:
    if n < 1:
        raise ValueError(f"class size must be >= 1, got {n}")
    return ClassLaplacian(int(n))


def quad_form(L: ClassLaplacian, f) -> float:
    """``f^T L f`` for one class block.

    Uses ``n/(n-1) * sum((f - mean(f))**2)``, which equals
    ``n/(n-1) * (||f||^2 - n mean(f)^2)`` but cannot go negative.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (L.size,):
        raise DimensionMismatchError(f"vector of length {f.shape} for class of size {L.size}")
    n = L.size
    if n == 1:
        return 0.0
    d = f - f.mean()
    return float(n / (n - 1) * (d @ d))


def block_variation(Xc: np.ndarray, L: ClassLaplacian) -> float:
    """``tr(Xc L Xc^T)``, the summed quad form over the rows of a code block."""
    Xc = np.asarray(Xc, dtype=np.float64)
    if Xc.ndim != 2 or Xc.shape[1] != L.size:
        raise DimensionMismatchError(f"code block {Xc.shape} for class of size {L.size}")
    n = L.size
    if n == 1:
        return 0.0
    d = Xc - Xc.mean(axis=1, keepdims=True)
    return float(n / (n - 1) * np.einsum("ij,ij->", d, d))


def total_variation(X: np.ndarray, L: BlockLaplacian) -> float:
    """``tr(X L X^T)`` summed over all classes."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != L.size:
        raise DimensionMismatchError(f"code matrix {X.shape} for graph of size {L.size}")
    off = L.offsets
    return float(sum(block_variation(X[:, lo:hi], b)
                     for b, lo, hi in zip(L.blocks, off[:-1], off[1:])))


def laplacian_rhs_term(Xc: np.ndarray, L: ClassLaplacian) -> np.ndarray:
    """``Xc (L - I)``: column ``j`` is ``-1/(n-1)`` times the sum of the other columns.

    For ``n = 1`` the result is ``-Xc``.
    """
    Xc = np.asarray(Xc, dtype=np.float64)
    if Xc.ndim != 2 or Xc.shape[1] != L.size:
        raise DimensionMismatchError(f"code block {Xc.shape} for class of size {L.size}")
    n = L.size
    if n == 1:
        return -Xc
    s = Xc.sum(axis=1, keepdims=True)
    return (s - Xc) * (-1.0 / (n - 1))
