"""Convex sample blending for composite image sets.

A mixed sample is c_hat = lam * c_I + (1 - lam) * c_C with label
y_hat = lam * y_I + (1 - lam) * y_C, lam ~ Beta(alpha, beta).  The first
parent is drawn instance-uniformly from the pool; the second is drawn
class-uniformly first and instance-uniformly within that class, which
gives rare classes equal say in the second slot.

All mixing happens on real-valued channels in [0, 1].  8-bit images are
lifted once on entry; quantization back to uint8 happens only when a
mixed image is written out, never inside the pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import BoundingBox, CompositeSet, PhaseId, is_simplex
from .composites import union_box


@dataclass(frozen=True)
class MixupConfig:
    enabled: bool = True
    alpha: float = 2.0
    beta: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("Beta shape parameters must be positive")


def element_rng(seed: int, batch_index: int, element_index: int) -> np.random.Generator:
    """Independent generator for one batch element.

    Keyed on (seed, batch, element) so a sample's randomness does not
    depend on batch size, worker count, or evaluation order.
    """
    return np.random.default_rng(np.random.SeedSequence((seed, batch_index, element_index)))


def sample_lambda(rng: np.random.Generator, alpha: float, beta: float) -> float:
    return float(rng.beta(alpha, beta))


def lift_to_unit(channels: np.ndarray) -> np.ndarray:
    """uint8 channels -> float64 in [0, 1]."""
    if channels.dtype != np.uint8:
        raise ValueError(f"expected uint8 channels, got {channels.dtype}")
    return channels.astype(np.float64) / 255.0


def quantize_u8(unit: np.ndarray) -> np.ndarray:
    """[0, 1] reals -> uint8, rounding half away from zero."""
    x = np.clip(np.asarray(unit, dtype=np.float64), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def mix_arrays(first: np.ndarray, second: np.ndarray, lam: float) -> np.ndarray:
    if first.shape != second.shape:
        raise ValueError(f"shape mismatch: {first.shape} vs {second.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must be in [0, 1]")
    return lam * np.asarray(first, dtype=np.float64) + (1.0 - lam) * np.asarray(second, dtype=np.float64)


@dataclass(frozen=True)
class MixedSample:
    """A blended training sample in the real-valued [0, 1] image domain."""

    channels: np.ndarray                 # (P, H, W) float64 in [0, 1]
    label: np.ndarray                    # convex class weights
    phases: tuple[PhaseId, ...]
    union_box: Optional[BoundingBox]
    parents: tuple[str, str]             # report_ids of (instance, class) parents
    lam: float


def mix(first: CompositeSet, second: CompositeSet, lam: float) -> MixedSample:
    """Blend two composites.  Their phase layouts must agree.

    The mixed sample carries the union of the parents' lesion boxes: both
    lesions contribute intensity, so both supports stay inside the box.
    """
    if first.phases != second.phases:
        raise ValueError("cannot mix composites with different phase layouts")
    channels = mix_arrays(lift_to_unit(first.channels), lift_to_unit(second.channels), lam)
    label = mix_arrays(first.label, second.label, lam)
    if not is_simplex(label):
        raise ValueError("mixed label left the simplex")   # unreachable for valid parents
    return MixedSample(
        channels=channels,
        label=label,
        phases=first.phases,
        union_box=union_box([first.union_box, second.union_box]),
        parents=(first.report_id, second.report_id),
        lam=lam,
    )


class PairSampler:
    """Draws (instance-uniform, class-balanced) parent pairs from a pool.

    The pool's grouping is fixed at construction; only the generator
    passed to :meth:`sample_pair` advances state.
    """

    def __init__(self, labels: Sequence[int]):
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size == 0:
            raise ValueError("empty pool")
        self.n = int(labels.size)
        # classes keyed in ascending label order for reproducibility
        self._classes = np.unique(labels)
        self._members = {int(c): np.flatnonzero(labels == c) for c in self._classes}

    def sample_pair(self, rng: np.random.Generator) -> tuple[int, int]:
        """(i, c): i uniform over the pool, c uniform over classes then members."""
        i = int(rng.integers(self.n))
        cls = int(self._classes[rng.integers(len(self._classes))])
        members = self._members[cls]
        c = int(members[rng.integers(len(members))])
        return i, c
