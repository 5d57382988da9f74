"""Coding-based classifiers over a learned structured dictionary.

GCC codes a query once over the whole dictionary and scores class ``c`` by
the residual left by the shared and class-``c`` atoms divided by the l1 mass of
those coefficients. LCC codes the query separately over each ``[D^0, D^c]``
and scores by residual alone. Lower scores win; ties go to the smaller class
index.

Ridge factorizations are cached per dictionary object (one ``K x K`` factor for
GCC, one small factor per class for LCC), together with the ridge projectors
derived from them, so a query costs a few matrix products. The cache is filled
under a lock.
"""
from __future__ import annotations

import enum
import threading
import weakref
from dataclasses import dataclass

import numpy as np
from scipy.linalg.lapack import dpotrs

from .dataset import LabeledDataset, SplitSpec, split
from .dictionary import (
    LabelLayout,
    StructuredDictionary,
    combined_part_dictionary,
    read_model_file,
    write_model_file,
)
from .errors import (
    DimensionMismatchError,
    LabelMismatchError,
    NonFiniteError,
    UnclassifiableError,
)
from .learning import Hyperparameters, _cholesky, train

# block l1 mass at or below this fraction of the query's total mass counts as zero
ZERO_MASS_RTOL = 1e-12
# scores within this relative distance of the minimum count as tied
TIE_RTOL = 1e-12
_SCORE_CHUNK_ELEMS = 1 << 21


class ClassifierKind(enum.IntEnum):
    GCC = 0
    LCC = 1

    @classmethod
    def parse(cls, name) -> "ClassifierKind":
        if isinstance(name, cls):
            return name
        return cls[str(name).upper()]


@dataclass(frozen=True)
class Prediction:
    label: int
    scores: np.ndarray
    code: object


_factor_cache: "weakref.WeakKeyDictionary[StructuredDictionary, dict]" = weakref.WeakKeyDictionary()
# re-entrant: building a projector plan fetches the factor it is derived from
_factor_lock = threading.RLock()


def _factor(D: StructuredDictionary, beta: float, c: int | None):
    """Cholesky factor of the ridge system for the whole dictionary (``c=None``)
    or for the combined part-dictionary of class ``c``."""
    return _cached(D, ("factor", float(beta), c), lambda: _build_factor(D, beta, c))


def _build_factor(D, beta, c):
    B = D.atoms if c is None else combined_part_dictionary(D, c)
    A = B.T @ B
    A[np.diag_indices_from(A)] += beta
    return _cholesky(A, c)


def _cached(D, key, build):
    with _factor_lock:
        entry = _factor_cache.setdefault(D, {})
        if key not in entry:
            entry[key] = build()
        return entry[key]


@dataclass(frozen=True)
class _GccPlan:
    """Ridge projector ``(D^T D + beta I)^{-1} D^T`` and the class blocks
    stacked as ``C x M x k_max`` with zero padding."""

    projector: np.ndarray
    blocks: np.ndarray
    slots: tuple  # (class index, slot index) of every label-particular atom


@dataclass(frozen=True)
class _LccPlan:
    """Per-class projectors and combined part-dictionaries, zero padded to a
    common width: ``C x w x M`` and ``C x M x w``."""

    projectors: np.ndarray
    parts: np.ndarray


def _class_slots(lay: LabelLayout):
    labels = lay.atom_labels()[lay.shared_count:] - 1
    slot = np.arange(labels.size) - (lay.offsets[1:-1] - lay.shared_count)[labels]
    return labels, slot


def _gcc_plan(D: StructuredDictionary, beta: float) -> _GccPlan:
    def build():
        lay = D.layout
        G = _solve(_factor(D, beta, None), np.ascontiguousarray(D.atoms.T))
        cls, slot = _class_slots(lay)
        blocks = np.zeros((lay.n_classes, D.n_features, max(lay.particular_counts)))
        blocks[cls, :, slot] = D.atoms[:, lay.shared_count:].T
        return _GccPlan(np.ascontiguousarray(G), blocks, (cls, slot))

    return _cached(D, ("gcc", float(beta)), build)


def _lcc_plan(D: StructuredDictionary, beta: float) -> _LccPlan:
    def build():
        lay = D.layout
        w = lay.shared_count + max(lay.particular_counts)
        proj = np.zeros((lay.n_classes, w, D.n_features))
        parts = np.zeros((lay.n_classes, D.n_features, w))
        for c in range(1, lay.n_classes + 1):
            B = combined_part_dictionary(D, c)
            proj[c - 1, :B.shape[1]] = _solve(_factor(D, beta, c), np.ascontiguousarray(B.T))
            parts[c - 1, :, :B.shape[1]] = B
        return _LccPlan(proj, parts)

    return _cached(D, ("lcc", float(beta)), build)


def _check_queries(Y, D: StructuredDictionary) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != D.n_features:
        raise DimensionMismatchError(
            f"query dimension M={Y.shape[0]} does not match model dimension M={D.n_features}"
        )
    if not np.all(np.isfinite(Y)):
        raise NonFiniteError("query contains non-finite values")
    return Y


def _solve(factor, B):
    X, info = dpotrs(factor, B, lower=1)
    if info != 0:
        raise ArithmeticError(f"dpotrs failed with info={info}")
    return X


def _chunks(n_queries: int, per_query: int):
    step = max(1, _SCORE_CHUNK_ELEMS // max(per_query, 1))
    for lo in range(0, n_queries, step):
        yield slice(lo, min(lo + step, n_queries))


def gcc_code(y, D: StructuredDictionary, beta: float) -> np.ndarray:
    """Ridge code over the whole dictionary, no suppression."""
    Y = _check_queries(y, D)
    X = _gcc_plan(D, beta).projector @ Y
    return X[:, 0] if np.ndim(y) == 1 else X


def gcc_scores(Y, D: StructuredDictionary, beta: float):
    """Returns ``(codes K x n, scores C x n)``."""
    Y = _check_queries(Y, D)
    plan = _gcc_plan(D, beta)
    X = plan.projector @ Y
    lay = D.layout
    K0 = lay.shared_count
    absX = np.abs(X)
    den = absX[:K0].sum(axis=0) + np.add.reduceat(absX[K0:], lay.offsets[1:-1] - K0, axis=0)
    shared = Y - D.atoms[:, :K0] @ X[:K0]
    C, M, w = plan.blocks.shape
    num = np.empty_like(den)
    for sl in _chunks(Y.shape[1], C * M):
        Xpad = np.zeros((C, w, sl.stop - sl.start))
        Xpad[plan.slots] = X[K0:, sl]
        R = shared[None, :, sl] - np.matmul(plan.blocks, Xpad)
        num[:, sl] = np.einsum("cmj,cmj->cj", R, R)
    live = den > ZERO_MASS_RTOL * absX.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = np.where(live, num / np.where(live, den, 1.0), np.inf)
    return X, scores


def lcc_scores(Y, D: StructuredDictionary, beta: float):
    """Returns ``(list of per-class codes, scores C x n)``."""
    Y = _check_queries(Y, D)
    plan = _lcc_plan(D, beta)
    lay = D.layout
    C, M, w = plan.parts.shape
    codes = np.empty((C, w, Y.shape[1]))
    scores = np.empty((C, Y.shape[1]))
    for sl in _chunks(Y.shape[1], C * M):
        codes[:, :, sl] = np.matmul(plan.projectors, Y[:, sl])
        R = Y[None, :, sl] - np.matmul(plan.parts, codes[:, :, sl])
        scores[:, sl] = np.einsum("cmj,cmj->cj", R, R)
    widths = [lay.shared_count + k for k in lay.particular_counts]
    return [codes[c, :widths[c]] for c in range(C)], scores


def _argmin_labels(scores: np.ndarray) -> np.ndarray:
    bad = np.flatnonzero(np.all(~np.isfinite(scores), axis=0))
    if bad.size:
        raise UnclassifiableError(
            f"query {int(bad[0])} has zero code mass on every class block"
        )
    # scores are non-negative; np.argmax returns the first True, so the
    # smallest class index wins among near-equal minima
    best = scores.min(axis=0)
    return np.argmax(scores <= best * (1.0 + TIE_RTOL), axis=0) + 1


def gcc_classify(y, D: StructuredDictionary, beta: float) -> Prediction:
    X, scores = gcc_scores(y, D, beta)
    return Prediction(int(_argmin_labels(scores)[0]), scores[:, 0], X[:, 0])


def lcc_classify(y, D: StructuredDictionary, beta: float) -> Prediction:
    codes, scores = lcc_scores(y, D, beta)
    return Prediction(int(_argmin_labels(scores)[0]), scores[:, 0],
                      tuple(x[:, 0] for x in codes))


class Model:
    """A learned dictionary with its hyperparameters and chosen classifier."""

    def __init__(self, dictionary: StructuredDictionary, beta: float, lam: float = 0.0,
                 gamma: float = 0.0, classifier=ClassifierKind.GCC):
        self.dictionary = dictionary
        self.beta = float(beta)
        self.lam = float(lam)
        self.gamma = float(gamma)
        self.classifier = ClassifierKind.parse(classifier)

    @classmethod
    def from_training(cls, state, hp: Hyperparameters, classifier=ClassifierKind.GCC) -> "Model":
        return cls(state.dictionary, hp.beta, hp.lam, hp.gamma, classifier)

    @property
    def n_classes(self) -> int:
        return self.dictionary.layout.n_classes

    def warm(self) -> "Model":
        """Populate the factorization caches up front."""
        _gcc_plan(self.dictionary, self.beta)
        _lcc_plan(self.dictionary, self.beta)
        return self

    def scores(self, Y, kind=None) -> np.ndarray:
        kind = self.classifier if kind is None else ClassifierKind.parse(kind)
        fn = gcc_scores if kind is ClassifierKind.GCC else lcc_scores
        return fn(Y, self.dictionary, self.beta)[1]

    def predict(self, Y, kind=None) -> np.ndarray:
        return _argmin_labels(self.scores(Y, kind))

    def classify(self, y, kind=None) -> Prediction:
        kind = self.classifier if kind is None else ClassifierKind.parse(kind)
        fn = gcc_classify if kind is ClassifierKind.GCC else lcc_classify
        return fn(y, self.dictionary, self.beta)

    def save(self, path) -> None:
        write_model_file(path, self.dictionary, self.beta, self.lam, self.gamma,
                         int(self.classifier))

    @classmethod
    def load(cls, path) -> "Model":
        D, beta, lam, gamma, tag = read_model_file(path)
        return cls(D, beta, lam, gamma, ClassifierKind(tag))


# ---------------------------------------------------------------------------
# Evaluation and selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Evaluation:
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray
    predictions: np.ndarray


def confusion_matrix(true, pred, n_classes: int) -> np.ndarray:
    """``confusion[i, j]`` counts true class ``i+1`` predicted as ``j+1``."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true) - 1, np.asarray(pred) - 1), 1)
    return cm


def evaluate(model: Model, test: LabeledDataset, kind=None) -> Evaluation:
    if test.n_classes > model.n_classes:
        raise LabelMismatchError(
            f"test set has {test.n_classes} classes, model has {model.n_classes}"
        )
    pred = model.predict(test.features, kind)
    cm = confusion_matrix(test.labels, pred, model.n_classes)
    rows = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(rows > 0, np.diag(cm) / np.maximum(rows, 1), np.nan)
    return Evaluation(float(np.trace(cm) / cm.sum()), per_class, cm, pred)


def cross_validate(data: LabeledDataset, layout, hp: Hyperparameters,
                   folds: int = 5) -> dict[ClassifierKind, np.ndarray]:
    """Per-fold accuracy of both classifiers; each fold trains its own dictionary.

    ``layout`` is a :class:`LabelLayout` or a callable building one from the
    fold's training set.
    """
    pairs = split(data, SplitSpec("k-fold", folds, hp.seed))
    acc = {ClassifierKind.GCC: [], ClassifierKind.LCC: []}
    for tr, te in pairs:
        fold_layout = layout if isinstance(layout, LabelLayout) else layout(tr)
        model = Model.from_training(train(tr, fold_layout, hp), hp)
        for kind in acc:
            acc[kind].append(evaluate(model, te, kind).accuracy)
    return {k: np.array(v) for k, v in acc.items()}


def select_classifier(data: LabeledDataset, layout: LabelLayout, hp: Hyperparameters,
                      folds: int = 5) -> ClassifierKind:
    """Higher mean cross-validated accuracy wins; a tie goes to GCC."""
    acc = cross_validate(data, layout, hp, folds)
    return choose_kind(acc)


def choose_kind(acc: dict) -> ClassifierKind:
    if acc[ClassifierKind.LCC].mean() > acc[ClassifierKind.GCC].mean():
        return ClassifierKind.LCC
    return ClassifierKind.GCC


# ---------------------------------------------------------------------------
# Block-structure diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InspectReport:
    """``profiles[c-1]`` is the mean absolute code of class ``c`` samples over
    the atoms; ``ratios[c-1]`` divides the mean per-atom mass on the shared and
    class-``c`` atoms by the mean per-atom mass on other classes' atoms."""

    profiles: np.ndarray
    ratios: np.ndarray


def inspect_codes(D: StructuredDictionary, beta: float, data: LabeledDataset) -> InspectReport:
    if data.n_classes > D.layout.n_classes:
        raise LabelMismatchError(
            f"data has {data.n_classes} classes, model has {D.layout.n_classes}"
        )
    X = np.abs(gcc_code(data.features, D, beta))
    lay = D.layout
    C = lay.n_classes
    profiles = np.zeros((C, lay.n_atoms))
    ratios = np.full(C, np.nan)
    own_labels = lay.atom_labels()
    for c in range(1, data.n_classes + 1):
        profiles[c - 1] = X[:, data.class_slice(c)].mean(axis=1)
        inside = (own_labels == 0) | (own_labels == c)
        if inside.all():
            ratios[c - 1] = np.inf
            continue
        cross = profiles[c - 1][~inside].mean()
        ratios[c - 1] = np.inf if cross == 0 else profiles[c - 1][inside].mean() / cross
    return InspectReport(profiles, ratios)
