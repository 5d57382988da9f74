"""Structured dictionaries: atom-label layout, suppression selectors, model files.

Atoms are ordered canonically: the shared atoms (label 0) first, then the
label-particular atoms of class 1, class 2, and so on. Every index set is
therefore a contiguous range.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError, LayoutError, ModelFormatError

MODEL_MAGIC = b"XLDM"
MODEL_VERSION = 1
NORM_TOLERANCE = 1e-8


@dataclass(frozen=True)
class LabelLayout:
    shared_count: int
    particular_counts: tuple[int, ...]

    def __post_init__(self):
        if self.shared_count < 0:
            raise LayoutError("shared atom count must be >= 0")
        if len(self.particular_counts) < 1:
            raise LayoutError("layout needs at least one class")
        if any(k < 1 for k in self.particular_counts):
            raise LayoutError("every class needs at least one label-particular atom")

    @property
    def n_classes(self) -> int:
        return len(self.particular_counts)

    @property
    def n_atoms(self) -> int:
        return self.shared_count + sum(self.particular_counts)

    @cached_property
    def offsets(self) -> np.ndarray:
        """Start index of block ``0..C`` followed by ``K``."""
        off = np.concatenate(
            [[0], np.cumsum((self.shared_count,) + tuple(self.particular_counts))]
        ).astype(int)
        off.setflags(write=False)
        return off

    def block(self, c: int) -> slice:
        """Index range of ``I^c``; ``c = 0`` is the shared block."""
        if not 0 <= c <= self.n_classes:
            raise LayoutError(f"class index {c} outside 0..{self.n_classes}")
        off = self.offsets
        return slice(int(off[c]), int(off[c + 1]))

    def indices(self, c: int) -> np.ndarray:
        sl = self.block(c)
        return np.arange(sl.start, sl.stop)

    def block_size(self, c: int) -> int:
        sl = self.block(c)
        return sl.stop - sl.start

    def atom_labels(self) -> np.ndarray:
        """Label of every atom, 0 for shared."""
        return np.repeat(np.arange(self.n_classes + 1), [self.shared_count, *self.particular_counts])


def build_layout(n_classes: int, per_class, shared: int = 0) -> LabelLayout:
    """``per_class`` is either one count used for every class or a sequence of ``C`` counts."""
    if n_classes < 1:
        raise LayoutError("need at least one class")
    if np.ndim(per_class) == 0:
        counts = (int(per_class),) * n_classes
    else:
        counts = tuple(int(k) for k in per_class)
        if len(counts) != n_classes:
            raise LayoutError(f"{len(counts)} per-class counts for {n_classes} classes")
    return LabelLayout(int(shared), counts)


@dataclass(frozen=True)
class SuppressionSelector:
    """Diagonal 0/1 extractor of the coefficients on other classes' atoms."""

    class_index: int
    active_indices: np.ndarray
    n_atoms: int

    def mask(self) -> np.ndarray:
        m = np.zeros(self.n_atoms)
        m[self.active_indices] = 1.0
        return m


def suppression_selector(layout: LabelLayout, c: int) -> SuppressionSelector:
    if not 1 <= c <= layout.n_classes:
        raise LayoutError(f"class {c} outside 1..{layout.n_classes}")
    own = layout.block(c)
    active = np.arange(layout.shared_count, layout.n_atoms)
    active = active[(active < own.start) | (active >= own.stop)]
    active.setflags(write=False)
    return SuppressionSelector(c, active, layout.n_atoms)


def apply_selector(sel: SuppressionSelector, x) -> float:
    """``||P^c x||^2``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (sel.n_atoms,):
        raise DimensionMismatchError(f"code of length {x.shape} for {sel.n_atoms} atoms")
    v = x[sel.active_indices]
    return float(v @ v)


@dataclass(frozen=True, eq=False)
class StructuredDictionary:
    atoms: np.ndarray
    layout: LabelLayout

    def __post_init__(self):
        D = self.atoms
        if D.ndim != 2 or D.shape[1] != self.layout.n_atoms:
            raise DimensionMismatchError(
                f"atom matrix {D.shape} does not match layout with {self.layout.n_atoms} atoms"
            )
        if not np.all(np.isfinite(D)):
            raise LayoutError("dictionary has non-finite entries")
        norms = np.linalg.norm(D, axis=0)
        bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOLERANCE)
        if bad.size:
            raise LayoutError(f"atom {int(bad[0])} has norm {norms[bad[0]]!r}, expected 1")

    @property
    def n_features(self) -> int:
        return self.atoms.shape[0]

    def part(self, c: int) -> np.ndarray:
        return self.atoms[:, self.layout.block(c)]


def combined_part_dictionary(D: StructuredDictionary, c: int) -> np.ndarray:
    """Shared atoms followed by the class-``c`` atoms."""
    if not 1 <= c <= D.layout.n_classes:
        raise LayoutError(f"class {c} outside 1..{D.layout.n_classes}")
    return np.hstack([D.part(0), D.part(c)])


def write_model_file(path, D: StructuredDictionary, beta: float, lam: float, gamma: float,
                     classifier_tag: int) -> None:
    lay = D.layout
    head = struct.pack(
        f"<4sIIII{lay.n_classes}I",
        MODEL_MAGIC, MODEL_VERSION, D.n_features, lay.n_classes, lay.shared_count,
        *lay.particular_counts,
    )
    body = np.ascontiguousarray(D.atoms.T, dtype="<f8").tobytes()
    tail = struct.pack("<dddB", beta, lam, gamma, classifier_tag)
    Path(path).write_bytes(head + body + tail)


def read_model_file(path):
    """Returns ``(dictionary, beta, lam, gamma, classifier_tag)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: missing XLDM magic")
    try:
        version, M, C, K0 = struct.unpack_from("<IIII", raw, 4)
        if version != MODEL_VERSION:
            raise ModelFormatError(f"{path}: unsupported model version {version}")
        pos = 20
        counts = struct.unpack_from(f"<{C}I", raw, pos)
        pos += 4 * C
        layout = LabelLayout(K0, tuple(counts))
        K = layout.n_atoms
        atoms = np.frombuffer(raw, dtype="<f8", count=K * M, offset=pos).reshape(K, M).T
        pos += 8 * K * M
        beta, lam, gamma, tag = struct.unpack_from("<dddB", raw, pos)
        pos += 25
    except struct.error as exc:
        raise ModelFormatError(f"{path}: truncated model file") from exc
    except ValueError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
    if pos != len(raw):
        raise ModelFormatError(f"{path}: {len(raw) - pos} trailing bytes")
    if tag not in (0, 1):
        raise ModelFormatError(f"{path}: unknown classifier tag {tag}")
    D = StructuredDictionary(np.ascontiguousarray(atoms, dtype=np.float64), layout)
    return D, beta, lam, gamma, tag
