"""Alternating minimization for the structured dictionary.

The learned model minimizes, subject to unit-norm atoms,

    ||Y - D X||_F^2 + beta ||X||_F^2
        + lam * sum_c ||P^c X^c||_F^2 + gamma * tr(X L X^T)

where ``P^c`` keeps the coefficients a class-``c`` sample places on other
classes' label-particular atoms and ``L`` is the block-diagonal normalized
Laplacian of the label graph. Codes are updated class by class with ridge-type
closed forms; atoms are updated block by block, one atom at a time.

Determinism: with ``jobs=1`` (the default) every step runs single-threaded in a
fixed order and repeated runs with the same seed give identical results. In
batch mode the per-class code solves are independent given the dictionary, so
``jobs > 1`` also reproduces the single-threaded result; sequential mode and
the atom updates always run single-threaded.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Literal

import numpy as np
from scipy.linalg.lapack import dpotrf, dpotrs

from . import _kernels
from .dataset import LabeledDataset
from .dictionary import (
    LabelLayout,
    StructuredDictionary,
    SuppressionSelector,
    suppression_selector,
)
from .errors import (
    DimensionMismatchError,
    FactorizationError,
    InsufficientSamplesError,
    LearningError,
)
from .laplacian import BlockLaplacian, ClassLaplacian, laplacian_rhs_term, total_variation

log = logging.getLogger(__name__)

FAST_LAMBDA_THRESHOLD = 100.0
DEAD_ATOM_TOL = 1e-10


@dataclass(frozen=True)
class Hyperparameters:
    beta: float = 2e-3
    lam: float = 2e2
    gamma: float = 1.0
    max_iters: int = 30
    rel_tol: float = 1e-4
    code_update_mode: Literal["sequential", "batch"] = "sequential"
    fast_particular_update: bool = False
    kmeans_iters: int = 100
    kmeans_restarts: int = 3
    seed: int = 0
    init: Literal["kmeans", "random"] = "kmeans"

    def __post_init__(self):
        for name in ("beta", "lam", "gamma", "rel_tol"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.beta <= 0:
            raise ValueError("beta must be strictly positive")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.kmeans_iters < 1 or self.kmeans_restarts < 1:
            raise ValueError("k-means iterations and restarts must be >= 1")
        if self.code_update_mode not in ("sequential", "batch"):
            raise ValueError(f"unknown code update mode {self.code_update_mode!r}")
        if self.init not in ("kmeans", "random"):
            raise ValueError(f"unknown initialization {self.init!r}")


@dataclass(frozen=True)
class ObjectiveBreakdown:
    reconstruction: float
    ridge: float
    suppression: float
    group: float

    @property
    def total(self) -> float:
        return self.reconstruction + self.ridge + self.suppression + self.group

    def as_dict(self) -> dict:
        return {**asdict(self), "total": self.total}


@dataclass
class TrainState:
    """Result of :func:`train`.

    ``history[0]`` is the objective right after initialization; each later
    entry follows one full code + dictionary iteration.
    """

    dictionary: StructuredDictionary
    codes: np.ndarray
    history: list[ObjectiveBreakdown] = field(default_factory=list)
    iterations_run: int = 0
    converged: bool = False
    log: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def _atoms(D) -> np.ndarray:
    return D.atoms if isinstance(D, StructuredDictionary) else np.asarray(D, dtype=np.float64)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _cholesky(A: np.ndarray, class_index: int | None = None) -> np.ndarray:
    if not np.all(np.isfinite(A)):
        raise FactorizationError(
            f"non-finite system matrix (class {class_index})", class_index
        )
    c, info = dpotrf(np.asfortranarray(A), lower=1, clean=1)
    if info != 0:
        raise FactorizationError(
            f"Cholesky factorization failed (info={info}, class {class_index})", class_index
        )
    return c


def _cho_solve(c: np.ndarray, B: np.ndarray) -> np.ndarray:
    X, info = dpotrs(c, B, lower=1)
    if info != 0:
        raise FactorizationError(f"triangular solve failed (info={info})")
    return X


def ridge_codes(D, Y, beta: float) -> np.ndarray:
    """``(D^T D + beta I)^{-1} D^T Y`` through a Cholesky solve."""
    D = _atoms(D)
    A = D.T @ D
    A[np.diag_indices_from(A)] += beta
    X = _cho_solve(_cholesky(A), D.T @ Y)
    if not np.all(np.isfinite(X)):
        raise LearningError("ridge coding produced non-finite values")
    return X


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _kmeans_pp(P: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = P.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((P - P[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # every remaining point coincides with a chosen centre
            free = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(free))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((P - P[idx]) ** 2, axis=1))
    return P[chosen].copy()


def _lloyd(P: np.ndarray, centers: np.ndarray, iters: int):
    k = centers.shape[0]
    sq = np.einsum("ij,ij->i", P, P)
    assign = None
    for _ in range(iters):
        dist = sq[:, None] - 2.0 * P @ centers.T + np.einsum("ij,ij->i", centers, centers)[None, :]
        new = np.argmin(dist, axis=1)
        counts = np.bincount(new, minlength=k)
        for e in np.flatnonzero(counts == 0):
            # refill an empty cluster with the point farthest from its centre
            own = dist[np.arange(P.shape[0]), new]
            movable = counts[new] > 1
            if not np.any(movable):
                break
            far = int(np.argmax(np.where(movable, own, -np.inf)))
            counts[new[far]] -= 1
            new[far] = e
            counts[e] = 1
            dist[far, :] = np.inf
            dist[far, e] = 0.0
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = P[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    inertia = float(np.sum((P - centers[assign]) ** 2))
    return centers, inertia


def kmeans(points, k: int, iters: int = 100, restarts: int = 3, seed=0) -> np.ndarray:
    """k-means++ seeded Lloyd iterations, best of ``restarts`` by inertia.

    ``points`` is ``M x n`` (one point per column). Returns ``M x k`` centroids
    scaled to unit norm; a centroid that collapses to zero is replaced by the
    largest-norm input point not already used.
    """
    points = np.asarray(points, dtype=np.float64)
    M, n = points.shape
    if not 1 <= k <= n:
        raise InsufficientSamplesError(f"cannot form {k} clusters from {n} points")
    rng = _rng(seed)
    P = points.T
    best, best_inertia = None, np.inf
    for _ in range(restarts):
        centers, inertia = _lloyd(P, _kmeans_pp(P, k, rng), iters)
        if inertia < best_inertia:
            best, best_inertia = centers, inertia
    C = best.T.copy()
    norms = np.linalg.norm(C, axis=0)
    dead = np.flatnonzero(norms <= 1e-12 * max(1.0, float(norms.max(initial=0.0))))
    if dead.size:
        pnorms = np.linalg.norm(points, axis=0)
        candidates = [int(i) for i in np.argsort(-pnorms, kind="stable") if pnorms[i] > 0]
        for j in dead:
            if candidates:
                C[:, j] = points[:, candidates.pop(0)]
            else:
                C[:, j] = rng.standard_normal(M)
        norms = np.linalg.norm(C, axis=0)
    return C / norms


def init_dictionary(train: LabeledDataset, layout: LabelLayout, hp: Hyperparameters,
                    rng=None) -> StructuredDictionary:
    """k-means per class for the particular atoms, then k-means over the
    per-class ridge residuals for the shared atoms."""
    if layout.n_classes != train.n_classes:
        raise DimensionMismatchError(
            f"layout has {layout.n_classes} classes, dataset has {train.n_classes}"
        )
    rng = _rng(hp.seed if rng is None else rng)
    M = train.n_features
    if hp.init == "random":
        # atoms drawn from randomly chosen training samples, ignoring labels
        Y = train.features
        usable = np.flatnonzero(np.linalg.norm(Y, axis=0) > 0)
        if usable.size < layout.n_atoms:
            raise InsufficientSamplesError(
                f"{layout.n_atoms} atoms need as many non-zero samples, have {usable.size}"
            )
        A = Y[:, rng.choice(usable, layout.n_atoms, replace=False)]
        return StructuredDictionary(A / np.linalg.norm(A, axis=0), layout)

    sizes = train.class_sizes
    for c in range(1, layout.n_classes + 1):
        if sizes[c - 1] < layout.block_size(c):
            raise InsufficientSamplesError(
                f"class {c} has {sizes[c - 1]} samples but {layout.block_size(c)} atoms"
            )
    if layout.shared_count > train.n_samples:
        raise InsufficientSamplesError(
            f"{layout.shared_count} shared atoms exceed {train.n_samples} samples"
        )
    parts, residuals = [], []
    for c in range(1, layout.n_classes + 1):
        Yc = train.class_block(c)
        Dc = kmeans(Yc, layout.block_size(c), hp.kmeans_iters, hp.kmeans_restarts, rng)
        parts.append(Dc)
        if layout.shared_count:
            residuals.append(Yc - Dc @ ridge_codes(Dc, Yc, hp.beta))
    if layout.shared_count:
        shared = kmeans(np.hstack(residuals), layout.shared_count,
                        hp.kmeans_iters, hp.kmeans_restarts, rng)
    else:
        shared = np.empty((M, 0))
    return StructuredDictionary(np.hstack([shared, *parts]), layout)


def init_codes(train, D, beta: float) -> np.ndarray:
    """Ridge codes of all training samples over the whole dictionary."""
    Y = train.features if isinstance(train, LabeledDataset) else np.asarray(train, dtype=np.float64)
    if Y.shape[0] != _atoms(D).shape[0]:
        raise DimensionMismatchError("feature dimension differs from atom dimension")
    return ridge_codes(D, Y, beta)


# ---------------------------------------------------------------------------
# Code update
# ---------------------------------------------------------------------------

def class_system(gram: np.ndarray, sel: SuppressionSelector, L: ClassLaplacian,
                 hp: Hyperparameters) -> tuple[np.ndarray, float]:
    """System matrix for a class code update and the coupling weight.

    In batch mode the diagonal shift is ``beta + gamma``; in sequential mode it
    is ``beta + gamma * L(i, i)``, which drops to ``beta`` for a single-sample
    class. The coupling weight multiplies the sum of the other columns on the
    right-hand side.
    """
    A = gram.copy()
    idx = np.diag_indices_from(A)
    if hp.code_update_mode == "batch":
        A[idx] += hp.beta + hp.gamma
    else:
        A[idx] += hp.beta + hp.gamma * L.diag
    A[sel.active_indices, sel.active_indices] += hp.lam
    return A, -hp.gamma * L.off


def update_codes_class(Yc, D, sel: SuppressionSelector, L: ClassLaplacian, Xc_prev,
                       hp: Hyperparameters, gram=None, DtYc=None) -> np.ndarray:
    """New code block for one class; ``Xc_prev`` is not modified.

    ``gram`` (``D^T D``) and ``DtYc`` (``D^T Y^c``) may be passed in when the
    caller already has them.
    """
    D = _atoms(D)
    Xc_prev = np.asarray(Xc_prev, dtype=np.float64)
    if Xc_prev.shape != (D.shape[1], L.size) or np.shape(Yc)[1] != L.size:
        raise DimensionMismatchError("code block, samples and Laplacian sizes disagree")
    if gram is None:
        gram = D.T @ D
    if DtYc is None:
        DtYc = D.T @ Yc
    A, coupling = class_system(gram, sel, L, hp)
    chol = _cholesky(A, sel.class_index)
    if hp.code_update_mode == "batch":
        rhs = DtYc - hp.gamma * laplacian_rhs_term(Xc_prev, L)
        X = _cho_solve(chol, rhs)
    else:
        X = np.array(Xc_prev, order="F", copy=True)
        _kernels.sequential_code_sweep(np.asfortranarray(chol), np.asfortranarray(DtYc), X, coupling)
    if not np.all(np.isfinite(X)):
        raise FactorizationError(f"non-finite codes for class {sel.class_index}", sel.class_index)
    return np.ascontiguousarray(X)


def update_codes(Y, D, X, layout: LabelLayout, L: BlockLaplacian, hp: Hyperparameters,
                 jobs: int = 1) -> np.ndarray:
    """Update every class block ``c = 1..C`` against a fixed dictionary."""
    D = _atoms(D)
    gram = D.T @ D
    DtY = D.T @ Y
    off = L.offsets
    X_new = np.empty_like(X)

    def one(c):
        sl = slice(off[c - 1], off[c])
        X_new[:, sl] = update_codes_class(
            Y[:, sl], D, suppression_selector(layout, c), L.blocks[c - 1], X[:, sl], hp,
            gram=gram, DtYc=DtY[:, sl],
        )

    classes = range(1, layout.n_classes + 1)
    if jobs > 1 and hp.code_update_mode == "batch":
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(one, classes))
    else:
        for c in classes:
            one(c)
    return X_new


def code_column_gradient(y, D, sel: SuppressionSelector, L: ClassLaplacian, Xc, i: int,
                         hp: Hyperparameters) -> np.ndarray:
    """Gradient of the objective with respect to column ``i`` of a class code block."""
    D = _atoms(D)
    Xc = np.asarray(Xc, dtype=np.float64)
    x = Xc[:, i]
    g = D.T @ (D @ x - y) + hp.beta * x
    g[sel.active_indices] += hp.lam * x[sel.active_indices]
    if L.size > 1:
        others = Xc.sum(axis=1) - x
        g += hp.gamma * (L.diag * x + L.off * others)
    return 2.0 * g


# ---------------------------------------------------------------------------
# Dictionary update
# ---------------------------------------------------------------------------

def _replace_dead(atoms, X, dead_idx, Yr, cols):
    """Swap dead atoms for the worst-reconstructed samples and zero their code rows."""
    X[dead_idx, :] = 0.0
    Xr = X[:, cols]
    resid = np.linalg.norm(Yr - atoms @ Xr, axis=0)
    ynorm = np.linalg.norm(Yr, axis=0)
    order = [j for j in np.argsort(-resid, kind="stable") if ynorm[j] > 0]
    for a, j in zip(dead_idx, order):
        atoms[:, a] = Yr[:, j] / ynorm[j]
    log.debug("replaced %d dead atoms", len(dead_idx))


def update_atoms_class(Y, X, D, layout: LabelLayout, c: int, hp: Hyperparameters,
                       class_offsets=None, normalize: bool = True, products=None):
    """Update the atoms of block ``c`` (``0`` = shared) one at a time.

    Each atom gets the least-squares solution against the residual that
    excludes it, then is scaled to unit norm (skipped with ``normalize=False``).
    Atoms whose update vanishes are replaced by the worst-reconstructed sample
    of the relevant class and their code rows are zeroed.

    ``products`` may hold ``(Y X^T, X X^T)`` for the full data; it is updated
    in place when code rows are zeroed.

    Returns ``(atoms, X)`` as new arrays.
    """
    atoms = np.array(_atoms(D), dtype=np.float64, copy=True)
    X = np.array(X, dtype=np.float64, copy=True)
    blk = layout.block(c)
    if blk.stop == blk.start:
        return atoms, X
    restricted = c >= 1 and hp.fast_particular_update and hp.lam >= FAST_LAMBDA_THRESHOLD
    if restricted:
        if class_offsets is None:
            raise ValueError("class_offsets required for the restricted update")
        cols = slice(int(class_offsets[c - 1]), int(class_offsets[c]))
        Yr, Xr = Y[:, cols], X[:, cols]
        YXt = Yr @ Xr[blk].T
        XXt = Xr @ Xr[blk].T
    else:
        cols = slice(None)
        Yr = Y
        if products is None:
            YXt, XXt = Y @ X[blk].T, X @ X[blk].T
        else:
            YXt, XXt = products[0][:, blk], products[1][:, blk]
    gram = np.asfortranarray(XXt[blk])
    # Z X_b^T with Z = Y - sum_{k outside the block} d_k x_k
    cross = YXt - atoms[:, :blk.start] @ XXt[:blk.start] - atoms[:, blk.stop:] @ XXt[blk.stop:]
    block_atoms = np.asfortranarray(atoms[:, blk])
    dead = _kernels.atom_block_sweep(
        block_atoms, np.asfortranarray(cross), gram, normalize, DEAD_ATOM_TOL
    )
    atoms[:, blk] = block_atoms
    if dead.any():
        dead_idx = blk.start + np.flatnonzero(dead)
        _replace_dead(atoms, X, dead_idx, Yr, cols)
        if products is not None:
            products[0][:, dead_idx] = 0.0
            products[1][dead_idx, :] = 0.0
            products[1][:, dead_idx] = 0.0
    return atoms, X


def update_dictionary(Y, X, D, layout: LabelLayout, class_offsets, hp: Hyperparameters):
    """Update blocks ``0..C`` in order. Returns ``(atoms, X)``."""
    atoms = np.array(_atoms(D), copy=True)
    products = [Y @ X.T, X @ X.T]
    for c in range(layout.n_classes + 1):
        atoms, X = update_atoms_class(Y, X, atoms, layout, c, hp, class_offsets,
                                      products=products)
    return atoms, X


# ---------------------------------------------------------------------------
# Objective and training loop
# ---------------------------------------------------------------------------

def objective(Y, D, X, layout: LabelLayout, L: BlockLaplacian,
              hp: Hyperparameters) -> ObjectiveBreakdown:
    D = _atoms(D)
    Y = np.asarray(Y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if D.shape[1] != X.shape[0] or Y.shape[1] != X.shape[1] or X.shape[1] != L.size:
        raise DimensionMismatchError(
            f"shapes Y {Y.shape}, D {D.shape}, X {X.shape}, graph {L.size} disagree"
        )
    R = Y - D @ X
    off = L.offsets
    supp = 0.0
    for c in range(1, layout.n_classes + 1):
        rows = suppression_selector(layout, c).active_indices
        block = X[rows, off[c - 1]:off[c]]
        supp += float(np.einsum("ij,ij->", block, block))
    return ObjectiveBreakdown(
        reconstruction=float(np.einsum("ij,ij->", R, R)),
        ridge=hp.beta * float(np.einsum("ij,ij->", X, X)),
        suppression=hp.lam * supp,
        group=hp.gamma * total_variation(X, L),
    )


def train(train: LabeledDataset, layout: LabelLayout, hp: Hyperparameters,
          callback: Callable[[dict], None] | None = None, jobs: int = 1) -> TrainState:
    """Initialize, then alternate code and dictionary updates until the relative
    change of the objective drops below ``hp.rel_tol`` or ``hp.max_iters`` is hit.

    ``callback`` receives one log record per iteration (iteration 0 is the
    initialization) with the four objective terms, the total and the elapsed
    wall-clock milliseconds.
    """
    t0 = time.perf_counter()
    Y = train.features
    L = BlockLaplacian.from_class_sizes(train.class_sizes)
    offsets = train.class_offsets
    D = init_dictionary(train, layout, hp)
    atoms = D.atoms
    X = init_codes(train, D, hp.beta)
    state = TrainState(dictionary=D, codes=X)

    def record(it, J):
        if not np.isfinite(J.total):
            raise LearningError(f"objective became non-finite at iteration {it}: {J.as_dict()}")
        state.history.append(J)
        rec = {"iteration": it, **J.as_dict(),
               "wall_ms": (time.perf_counter() - t0) * 1e3}
        state.log.append(rec)
        log.debug("iteration %d total %.6g", it, J.total)
        if callback is not None:
            callback(rec)

    record(0, objective(Y, atoms, X, layout, L, hp))
    for it in range(1, hp.max_iters + 1):
        X = update_codes(Y, atoms, X, layout, L, hp, jobs=jobs)
        atoms, X = update_dictionary(Y, X, atoms, layout, offsets, hp)
        prev = state.history[-1].total
        record(it, objective(Y, atoms, X, layout, L, hp))
        state.iterations_run = it
        cur = state.history[-1].total
        if prev == 0 or abs(cur - prev) / prev < hp.rel_tol:
            state.converged = True
            break
    state.dictionary = StructuredDictionary(atoms, layout)
    state.codes = X
    state.seconds = time.perf_counter() - t0
    return state
