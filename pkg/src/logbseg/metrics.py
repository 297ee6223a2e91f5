"""Dice, average surface distance and symmetric Hausdorff distance.

Surfaces are the 6-connected boundary voxels of a mask; distances are taken
between voxel centers in millimetres.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .voxelio import Volume

_SIX = ndimage.generate_binary_structure(3, 1)


class MetricError(ValueError):
    pass


def _arr(m) -> np.ndarray:
    d = m.data if isinstance(m, Volume) else np.asarray(m)
    return d > 0.5


def _spacing(spacing, *vols) -> tuple:
    if spacing is not None:
        return tuple(float(s) for s in spacing)
    for v in vols:
        if isinstance(v, Volume):
            return v.spacing
    return (1.0, 1.0, 1.0)


def dice(a, b) -> float:
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface_mask(m) -> np.ndarray:
    """Foreground voxels with a background or out-of-bounds 6-neighbour."""
    m = _arr(m)
    return m & ~ndimage.binary_erosion(m, structure=_SIX, border_value=0)


def surface_voxels(m) -> np.ndarray:
    """Indices ``(N, 3)`` of the surface voxels of ``m``."""
    return np.argwhere(surface_mask(m))


def _directed(sa: np.ndarray, sb: np.ndarray, spacing) -> np.ndarray:
    # exact Euclidean distance from every voxel to the nearest surface voxel of b
    dist = ndimage.distance_transform_edt(~sb, sampling=spacing)
    return dist[sa]


def _surface_distances(a, b, spacing):
    sa, sb = surface_mask(a), surface_mask(b)
    if sa.shape != sb.shape:
        raise MetricError(f"shape mismatch {sa.shape} vs {sb.shape}")
    if not sa.any() or not sb.any():
        raise MetricError("surface distance undefined for an empty mask")
    return _directed(sa, sb, spacing), _directed(sb, sa, spacing)


def asd(a, b, spacing=None) -> float:
    """Symmetric average surface distance: mean of both directed means."""
    d_ab, d_ba = _surface_distances(a, b, _spacing(spacing, a, b))
    return float((d_ab.mean() + d_ba.mean()) / 2)


def hausdorff(a, b, spacing=None) -> float:
    d_ab, d_ba = _surface_distances(a, b, _spacing(spacing, a, b))
    return float(max(d_ab.max(), d_ba.max()))


@dataclass
class MetricsReport:
    region: str
    dice: float
    asd_mm: Optional[float]
    hausdorff_mm: Optional[float]
    n_pred_voxels: int
    n_gt_voxels: int
    distances_defined: bool = True
    source_id: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(pred, gt, region_mask=None, threshold: float = 0.5, spacing=None,
             region: str = "whole", source_id: str = "") -> MetricsReport:
    """Binarize ``pred`` at ``threshold``, optionally restrict both masks to a region, score."""
    sp = _spacing(spacing, gt, pred)
    p = (pred.data if isinstance(pred, Volume) else np.asarray(pred)) >= threshold
    g = _arr(gt)
    if p.shape != g.shape:
        raise MetricError(f"shape mismatch {p.shape} vs {g.shape}")
    if region_mask is not None:
        r = _arr(region_mask)
        if r.shape != g.shape:
            raise MetricError("region mask shape mismatch")
        p, g = p & r, g & r
    d = dice(p, g)
    if p.any() and g.any():
        return MetricsReport(region, d, asd(p, g, sp), hausdorff(p, g, sp), int(p.sum()), int(g.sum()),
                             True, source_id)
    return MetricsReport(region, d, None, None, int(p.sum()), int(g.sum()), False, source_id)


def write_reports(reports: Sequence[MetricsReport], json_path, csv_path=None):
    Path(json_path).parent.mkdir(parents=True, exist_ok=True)
    rows = [r.to_dict() for r in reports]
    Path(json_path).write_text(json.dumps(rows, indent=1))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else list(MetricsReport.__annotations__))
            w.writeheader()
            w.writerows(rows)
