"""Shared domain types: contrast phases, slices, slice grids, boxes, labels.

Pure in-memory value types plus structural validation.  No file I/O here;
serialization lives in :mod:`pkcp.cohort`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

SIMPLEX_TOL = 1e-9


class PhaseId(Enum):
    """The four contrast phases, in canonical acquisition order.

    The enum value doubles as the canonical channel index: a phase's
    channel in a fused multi-channel image is its position here (restricted
    to whatever subset of phases is in play).
    """

    PC = 0
    AP = 1
    PVP = 2
    DP = 3

    def __lt__(self, other):
        if not isinstance(other, PhaseId):
            return NotImplemented
        return self.value < other.value

    @classmethod
    def canonical_order(cls) -> tuple["PhaseId", ...]:
        return (cls.PC, cls.AP, cls.PVP, cls.DP)

    @classmethod
    def from_name(cls, name: str) -> "PhaseId":
        try:
            return cls[name]
        except KeyError:
            raise ValueError(f"unknown phase {name!r}; expected one of "
                             f"{[p.name for p in cls]}") from None


class Branch(Enum):
    BENIGN = "benign"
    MALIGNANT = "malignant"


class LeafClass(Enum):
    """The four diagnosis leaf classes under the benign/malignant hierarchy."""

    HH = "HH"        # hepatic hemangioma (benign)
    OBHT = "OBHT"    # other benign hepatic tumors
    HB = "HB"        # hepatoblastoma (malignant)
    OMHT = "OMHT"    # other malignant hepatic tumors

    @property
    def branch(self) -> Branch:
        return Branch.BENIGN if self in (LeafClass.HH, LeafClass.OBHT) else Branch.MALIGNANT

    @classmethod
    def from_name(cls, name: str) -> "LeafClass":
        try:
            return cls[name]
        except KeyError:
            raise ValueError(f"unknown class {name!r}; expected one of "
                             f"{[c.name for c in cls]}") from None


LEAF_ORDER: tuple[LeafClass, ...] = (LeafClass.HH, LeafClass.OBHT, LeafClass.HB, LeafClass.OMHT)
BRANCH_LEAVES: dict[Branch, tuple[LeafClass, ...]] = {
    Branch.BENIGN: (LeafClass.HH, LeafClass.OBHT),
    Branch.MALIGNANT: (LeafClass.HB, LeafClass.OMHT),
}


@dataclass(frozen=True, order=True)
class BoundingBox:
    """Axis-aligned pixel box, half-open: [x_min, x_max) x [y_min, y_max).

    Integer coordinates keep area and IoU arithmetic exact.
    """

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def contains(self, other: "BoundingBox") -> bool:
        return (self.x_min <= other.x_min and self.y_min <= other.y_min
                and self.x_max >= other.x_max and self.y_max >= other.y_max)

    def within_image(self, height: int, width: int) -> bool:
        return 0 <= self.x_min and self.x_max <= width and 0 <= self.y_min and self.y_max <= height

    def dilated(self, margin: int, height: int, width: int) -> "BoundingBox":
        """Grow by `margin` pixels on every side, clipped to the image."""
        return BoundingBox(
            max(0, self.x_min - margin),
            max(0, self.y_min - margin),
            min(width, self.x_max + margin),
            min(height, self.y_max + margin),
        )


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Slice:
    """One exported lesion slice of one radiology study."""

    patient_id: str
    report_id: str
    phase: PhaseId
    depth_index: int                    # k, 1-based
    pixels: np.ndarray                  # (H, W) uint8, read-only
    lesion_box: Optional[BoundingBox] = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.dtype != np.uint8:
            raise ValueError("pixels must be a 2-D uint8 array")
        object.__setattr__(self, "pixels", _readonly(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class SliceGrid:
    """The P x K matrix of phase-indexed lesion slices for one study.

    Cells may be None so that structurally incomplete grids can be
    represented and reported by :func:`validate_grid`; every downstream
    operation requires a grid that validates clean.
    """

    report_id: str
    class_label: LeafClass
    phases: tuple[PhaseId, ...]                      # row p <-> phases[p], canonical order
    slices: tuple[tuple[Optional[Slice], ...], ...]  # P rows x K cols

    @property
    def n_phases(self) -> int:
        return len(self.phases)

    @property
    def slices_per_phase(self) -> int:
        return len(self.slices[0]) if self.slices else 0

    def cell(self, phase: PhaseId, k: int) -> Optional[Slice]:
        """Slice of `phase` at depth k (1-based)."""
        return self.slices[self.phases.index(phase)][k - 1]


def validate_grid(grid: SliceGrid) -> list[str]:
    """Check every structural invariant of a grid; returns violations.

    An empty list means the grid is valid.  Violations are data, not
    exceptions: callers that require validity raise on a non-empty result.
    """
    problems: list[str] = []
    if len(set(grid.phases)) != len(grid.phases):
        problems.append("duplicate phases in grid")
    if list(grid.phases) != sorted(grid.phases):
        problems.append("phases not in canonical order")
    if len(grid.slices) != len(grid.phases):
        problems.append(f"grid has {len(grid.slices)} rows for {len(grid.phases)} phases")
        return problems

    k_counts = {len(row) for row in grid.slices}
    if len(k_counts) > 1:
        problems.append(f"ragged rows: per-phase slice counts {sorted(k_counts)}")

    shape = None
    for p, row in enumerate(grid.slices):
        for j, sl in enumerate(row):
            k = j + 1
            if sl is None:
                problems.append(f"missing cell ({grid.phases[p].name}, {k})")
                continue
            if sl.phase != grid.phases[p]:
                problems.append(f"cell ({grid.phases[p].name}, {k}) holds phase {sl.phase.name}")
            if sl.depth_index != k:
                problems.append(f"cell ({grid.phases[p].name}, {k}) holds depth {sl.depth_index}")
            if sl.report_id != grid.report_id:
                problems.append(f"cell ({grid.phases[p].name}, {k}) has report_id "
                                f"{sl.report_id!r} != {grid.report_id!r}")
            if shape is None:
                shape = sl.pixels.shape
            elif sl.pixels.shape != shape:
                problems.append(f"cell ({grid.phases[p].name}, {k}) shape {sl.pixels.shape} "
                                f"!= {shape}")
            if sl.lesion_box is not None and not sl.lesion_box.within_image(*sl.pixels.shape):
                problems.append(f"cell ({grid.phases[p].name}, {k}) box exceeds image bounds")
    return problems


def require_valid(grid: SliceGrid) -> SliceGrid:
    problems = validate_grid(grid)
    if problems:
        raise ValueError(f"invalid grid {grid.report_id!r}: " + "; ".join(problems))
    return grid


@dataclass(frozen=True)
class CompositeSet:
    """One slice per phase fused into a multi-channel image.

    `channels[p]` is bit-identical to the pixels of the slice chosen at
    depth `source_indices[p]` in `phases[p]`.  `union_box` is the minimal
    box enclosing every constituent lesion annotation; it is None when no
    constituent slice carries an annotation.
    """

    report_id: str
    phases: tuple[PhaseId, ...]
    source_indices: tuple[int, ...]     # chosen depth per phase, 1-based
    channels: np.ndarray                # (P, H, W) uint8, read-only
    union_box: Optional[BoundingBox]
    label: np.ndarray = field(repr=False)  # simplex vector over LEAF_ORDER

    def __post_init__(self):
        ch = np.asarray(self.channels)
        if ch.ndim != 3 or ch.dtype != np.uint8:
            raise ValueError("channels must be a 3-D uint8 array")
        if ch.shape[0] != len(self.phases) or len(self.source_indices) != len(self.phases):
            raise ValueError("one channel and one source index per phase required")
        object.__setattr__(self, "channels", _readonly(ch))
        lab = np.asarray(self.label, dtype=np.float64)
        if not is_simplex(lab):
            raise ValueError("label is not on the probability simplex")
        object.__setattr__(self, "label", _readonly(lab))

    @property
    def leaf(self) -> LeafClass:
        """Ground-truth leaf (argmax of the label vector)."""
        return LEAF_ORDER[int(np.argmax(self.label))]


def one_hot(cls: LeafClass, order: Sequence[LeafClass] = LEAF_ORDER) -> np.ndarray:
    vec = np.zeros(len(order))
    vec[list(order).index(cls)] = 1.0
    return vec


def is_simplex(vec: np.ndarray, tol: float = SIMPLEX_TOL) -> bool:
    vec = np.asarray(vec, dtype=np.float64)
    return bool(np.all(vec >= -tol) and abs(float(vec.sum()) - 1.0) <= tol)


def collapse_to_branch(leaf_vec: np.ndarray) -> np.ndarray:
    """Project a leaf-class label vector onto (benign, malignant).

    Linear, so it commutes with label mixing.
    """
    leaf_vec = np.asarray(leaf_vec, dtype=np.float64)
    if leaf_vec.shape != (len(LEAF_ORDER),):
        raise ValueError(f"expected a {len(LEAF_ORDER)}-class leaf vector")
    benign = sum(leaf_vec[LEAF_ORDER.index(c)] for c in BRANCH_LEAVES[Branch.BENIGN])
    malignant = sum(leaf_vec[LEAF_ORDER.index(c)] for c in BRANCH_LEAVES[Branch.MALIGNANT])
    return np.array([benign, malignant])


def restrict_to_branch(leaf_vec: np.ndarray, branch: Branch) -> np.ndarray:
    """Restrict a leaf label vector to one branch's two classes.

    Requires all label mass to sit inside that branch (the within-branch
    training pools guarantee this).
    """
    leaf_vec = np.asarray(leaf_vec, dtype=np.float64)
    idx = [LEAF_ORDER.index(c) for c in BRANCH_LEAVES[branch]]
    sub = leaf_vec[idx]
    if abs(float(sub.sum()) - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"label has mass outside the {branch.value} branch")
    return sub
