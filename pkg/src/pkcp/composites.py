"""Composite enumeration: expanding a report's P x K slice grid into
multi-phase composite image sets.

Minority classes take the full Cartesian product over per-phase slice
choices, K^P composites per report; majority classes take only the K
depth-aligned tuples (k, k, ..., k).  This is the class-imbalance lever:
with K=3 and four phases the minority expansion yields 81 composites per
report against 3 for the majority.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import (
    BoundingBox,
    CompositeSet,
    LeafClass,
    PhaseId,
    SliceGrid,
    one_hot,
    require_valid,
)


class ExpansionMode(Enum):
    MINORITY = "minority"   # full K^P Cartesian product
    MAJORITY = "majority"   # K depth-aligned diagonal tuples


def composite_count(mode: ExpansionMode, slices_per_phase: int, n_phases: int) -> int:
    """Number of composites one report yields under a mode."""
    if slices_per_phase < 1 or n_phases < 1:
        raise ValueError("slices_per_phase and n_phases must be >= 1")
    if mode is ExpansionMode.MINORITY:
        return slices_per_phase ** n_phases
    return slices_per_phase


# Rebalancing default: rare classes get the product expansion.
DEFAULT_POLICY: dict[LeafClass, ExpansionMode] = {
    LeafClass.HH: ExpansionMode.MAJORITY,
    LeafClass.OBHT: ExpansionMode.MINORITY,
    LeafClass.HB: ExpansionMode.MAJORITY,
    LeafClass.OMHT: ExpansionMode.MINORITY,
}


@dataclass(frozen=True)
class ExpansionPolicy:
    """Per-class choice of expansion mode, with an optional blanket override."""

    modes: Mapping[LeafClass, ExpansionMode] = field(
        default_factory=lambda: dict(DEFAULT_POLICY))

    def mode_for(self, cls: LeafClass) -> ExpansionMode:
        try:
            return self.modes[cls]
        except KeyError:
            raise ValueError(f"no expansion mode for class {cls.name}") from None

    @staticmethod
    def uniform(mode: ExpansionMode) -> "ExpansionPolicy":
        return ExpansionPolicy({cls: mode for cls in LeafClass})


def index_tuples(mode: ExpansionMode, slices_per_phase: int, n_phases: int) -> list[tuple[int, ...]]:
    """1-based per-phase slice indices, in deterministic order.

    Minority: lexicographic over the full product, first phase varying
    slowest.  Majority: the K diagonals in depth order.
    """
    ks = range(1, slices_per_phase + 1)
    if mode is ExpansionMode.MINORITY:
        return list(itertools.product(ks, repeat=n_phases))
    return [(k,) * n_phases for k in ks]


def union_box(boxes: Sequence[Optional[BoundingBox]]) -> Optional[BoundingBox]:
    """Smallest box covering every present box; None when none are present."""
    present = [b for b in boxes if b is not None]
    if not present:
        return None
    return BoundingBox(
        min(b.x_min for b in present),
        min(b.y_min for b in present),
        max(b.x_max for b in present),
        max(b.y_max for b in present),
    )


def fuse_channels(grid: SliceGrid, indices: tuple[int, ...]) -> tuple[np.ndarray, Optional[BoundingBox]]:
    """Stack the selected slice per phase into a (P, H, W) channel array."""
    chans = []
    boxes = []
    for p, phase in enumerate(grid.phases):
        sl = grid.slices[p][indices[p] - 1]
        if sl is None:
            raise ValueError(f"grid {grid.report_id} missing cell ({phase.name}, {indices[p]})")
        chans.append(sl.pixels)
        boxes.append(sl.lesion_box)
    return np.stack(chans, axis=0), union_box(boxes)


def enumerate_composites(grid: SliceGrid, policy: ExpansionPolicy = ExpansionPolicy(),
                         validate: bool = True) -> list[CompositeSet]:
    """Expand one report into its composites under the policy.

    Output order is deterministic: the index-tuple order of
    :func:`index_tuples`.  Labels are one-hot at the report's class.
    """
    if validate:
        require_valid(grid)
    mode = policy.mode_for(grid.class_label)
    label = one_hot(grid.class_label)
    out = []
    for idx in index_tuples(mode, grid.slices_per_phase, grid.n_phases):
        channels, box = fuse_channels(grid, idx)
        out.append(CompositeSet(
            report_id=grid.report_id,
            phases=grid.phases,
            source_indices=idx,
            channels=channels,
            union_box=box,
            label=label,
        ))
    return out


def enumerate_cohort(grids: Mapping[str, SliceGrid],
                     policy: ExpansionPolicy = ExpansionPolicy()) -> list[CompositeSet]:
    """Composites for every report, reports in sorted report_id order."""
    out = []
    for rid in sorted(grids):
        out.extend(enumerate_composites(grids[rid], policy))
    return out


def restrict_grid(grid: SliceGrid, keep: Sequence[PhaseId]) -> SliceGrid:
    """Drop whole phase rows before enumeration (phase-subset ablation).

    Enumerating the restricted grid gives K^|keep| minority composites, not
    a restriction of the K^P product.
    """
    keep_set = set(keep)
    if not keep_set:
        raise ValueError("must keep at least one phase")
    missing = keep_set - set(grid.phases)
    if missing:
        names = ", ".join(sorted(p.name for p in missing))
        raise ValueError(f"grid has no phase(s): {names}")
    sel = [i for i, p in enumerate(grid.phases) if p in keep_set]
    return SliceGrid(
        report_id=grid.report_id,
        class_label=grid.class_label,
        phases=tuple(grid.phases[i] for i in sel),
        slices=tuple(grid.slices[i] for i in sel),
    )


def restrict_phases(comp: CompositeSet, keep: Sequence[PhaseId]) -> CompositeSet:
    """Drop channels not in `keep` (phase-subset ablation).  Order is preserved."""
    keep_set = set(keep)
    if not keep_set:
        raise ValueError("must keep at least one phase")
    missing = keep_set - set(comp.phases)
    if missing:
        names = ", ".join(sorted(p.name for p in missing))
        raise ValueError(f"composite has no phase(s): {names}")
    sel = [i for i, p in enumerate(comp.phases) if p in keep_set]
    return CompositeSet(
        report_id=comp.report_id,
        phases=tuple(comp.phases[i] for i in sel),
        source_indices=tuple(comp.source_indices[i] for i in sel),
        channels=comp.channels[sel],
        union_box=comp.union_box,
        label=comp.label,
    )
