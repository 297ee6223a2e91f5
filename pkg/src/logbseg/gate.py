"""Foreground/background balancing gate.

Crops are routed by their foreground-to-background ratio ``T`` into a
low-foreground queue (``T < mu``) or a high-foreground queue (``T > mu``),
each bounded by ``capacity``. Once both queues are full the gate emits a batch
of ``2 * capacity`` crops, low queue first, and starts over.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .voxelio import LabeledCrop, Volume

DEFAULT_MU = 0.15


class GateError(ValueError):
    pass


def fg_ratio(mask) -> float:
    data = mask.data if isinstance(mask, Volume) else np.asarray(mask)
    fg = int(np.count_nonzero(data > 0.5))
    bg = data.size - fg
    if bg == 0:
        raise GateError("mask has no background voxels")
    return fg / bg


@dataclass
class BalancedBatch:
    crops: list
    ratios: list


@dataclass
class GateState:
    capacity: int = 2
    mu: float = DEFAULT_MU
    q1: list = field(default_factory=list)
    q2: list = field(default_factory=list)
    # bookkeeping for the training log
    pushes: int = 0
    enqueued: int = 0
    skipped: int = 0
    emitted: int = 0
    ratios: list = field(default_factory=list)
    _r1: list = field(default_factory=list, repr=False)
    _r2: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("gate capacity must be >= 1")

    @property
    def c1(self) -> int:
        return len(self.q1)

    @property
    def c2(self) -> int:
        return len(self.q2)

    def push(self, crop: LabeledCrop) -> Optional[BalancedBatch]:
        return gate_push(self, crop)

    def stats(self, bins: Sequence[float] = (0.0, 0.05, 0.1, 0.15, 0.2, 0.3, 0.5, 1.0, np.inf)) -> dict:
        hist, _ = np.histogram(self.ratios, bins=np.asarray(bins))
        return {
            "pushes": self.pushes,
            "enqueued": self.enqueued,
            "skipped": self.skipped,
            "emitted_batches": self.emitted,
            "pending_low": self.c1,
            "pending_high": self.c2,
            "mean_ratio": float(np.mean(self.ratios)) if self.ratios else None,
            "ratio_hist": {"edges": [float(b) for b in bins], "counts": hist.tolist()},
        }


def gate_push(g: GateState, crop: LabeledCrop) -> Optional[BalancedBatch]:
    """Route one crop; returns a batch when both queues reach capacity.

    Crops with ``T == mu``, crops aimed at a full queue, and all-foreground
    crops are skipped.
    """
    if crop.mask is None:
        raise GateError("gate requires labeled crops")
    g.pushes += 1
    try:
        t = fg_ratio(crop.mask)
    except GateError:
        g.skipped += 1
        return None
    g.ratios.append(t)
    if t < g.mu and g.c1 < g.capacity:
        g.q1.append(crop)
        g._r1.append(t)
    elif t > g.mu and g.c2 < g.capacity:
        g.q2.append(crop)
        g._r2.append(t)
    else:
        g.skipped += 1
        return None
    g.enqueued += 1
    if g.c1 == g.capacity and g.c2 == g.capacity:
        batch = BalancedBatch(g.q1 + g.q2, g._r1 + g._r2)
        g.q1, g.q2, g._r1, g._r2 = [], [], [], []
        g.emitted += 1
        return batch
    return None


def gate_bypass(crops: Iterable, capacity: int = 2) -> list[list]:
    """Chunk crops into arrival-order batches of ``2 * capacity``; the last may be short."""
    crops = list(crops)
    n = 2 * capacity
    return [crops[i:i + n] for i in range(0, len(crops), n)]
