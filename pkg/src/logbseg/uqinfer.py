"""Monte-Carlo inference over the LoG posterior and confidence-interval volumes."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .metrics import surface_mask
from .network import LoGBNet
from .voxelio import Volume, block_offsets, pad_to, write_volume


class UQError(ValueError):
    pass


@dataclass
class PredictionEnsemble:
    members: list
    n: int
    seed: int

    def __post_init__(self):
        shapes = {m.shape for m in self.members}
        if len(shapes) > 1:
            raise UQError(f"ensemble members differ in shape: {shapes}")
        if len(self.members) != self.n:
            raise UQError("member count does not match n")

    def stack(self) -> np.ndarray:
        return np.stack([m.data for m in self.members]).astype(np.float64)


@dataclass
class UncertaintyMap:
    mean: Volume
    lower: Volume
    upper: Volume
    width: Volume


def infer_volume(model: LoGBNet, vol: Volume, crop_size: int = 64, generator=None,
                 stochastic: bool = False, overlap: bool = False) -> Volume:
    """Sliding-window probabilities over a whole volume, overlap-averaged.

    Volumes smaller than a crop are zero-padded and trimmed back. With
    ``overlap`` the stride is half a crop.
    """
    shape = vol.shape
    padded = pad_to(vol, crop_size)
    stride = crop_size // 2 if overlap else crop_size
    offsets = block_offsets(padded.shape, crop_size, stride)
    acc = np.zeros(padded.shape, dtype=np.float64)
    cnt = np.zeros(padded.shape, dtype=np.float64)
    channels = model.cfg.in_channels
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        for g in range(0, len(offsets), channels):
            group = offsets[g:g + channels]
            x = np.zeros((1, channels) + (crop_size,) * 3, dtype=np.float32)
            for c, off in enumerate(group):
                sl = tuple(slice(o, o + crop_size) for o in off)
                x[0, c] = padded.data[sl]
            probs = torch.sigmoid(model(torch.as_tensor(x, dtype=dtype), generator, stochastic))
            probs = probs[0].double().numpy()
            for c, off in enumerate(group):
                sl = tuple(slice(o, o + crop_size) for o in off)
                acc[sl] += probs[c]
                cnt[sl] += 1
    out = acc / cnt
    return vol.like(out[: shape[0], : shape[1], : shape[2]])


def member_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1, np.uint64)[0] >> 1) for s in np.random.SeedSequence(seed).spawn(n)]


def mc_predict(model: LoGBNet, vol: Volume, n: int = 10, seed: int = 0, crop_size: int = 64,
               overlap: bool = False) -> PredictionEnsemble:
    """``n`` stochastic passes, each with its own derived seed."""
    if n < 1:
        raise UQError("n must be >= 1")
    members = []
    for s in member_seeds(seed, n):
        gen = torch.Generator().manual_seed(s)
        members.append(infer_volume(model, vol, crop_size, gen, stochastic=True, overlap=overlap))
    return PredictionEnsemble(members, n, seed)


def confidence_bounds(e: PredictionEnsemble, method: str = "minmax") -> UncertaintyMap:
    """Voxelwise lower/mean/upper bounds.

    ``minmax`` uses the ensemble extremes; ``normal`` uses mean +- 1.96 sample
    standard deviations (n - 1 denominator), clamped to [0, 1].
    """
    stack = e.stack()
    mean = stack.mean(0)
    if method == "minmax":
        lower, upper = stack.min(0), stack.max(0)
    elif method == "normal":
        if e.n < 2:
            raise UQError("normal bounds need at least two members")
        half = 1.96 * stack.std(0, ddof=1)
        lower, upper = np.clip(mean - half, 0, 1), np.clip(mean + half, 0, 1)
    else:
        raise UQError(f"unknown bounds method {method!r}")
    # guard against rounding in the mean pushing it outside the extremes
    mean = np.clip(mean, lower, upper)
    ref = e.members[0]
    return UncertaintyMap(ref.like(mean), ref.like(lower), ref.like(upper), ref.like(upper - lower))


def boundary_width_stat(u: UncertaintyMap, gt) -> dict:
    """Mean interval width on the ground-truth surface vs its interior."""
    g = (gt.data if isinstance(gt, Volume) else np.asarray(gt)) > 0.5
    if g.shape != u.width.shape:
        raise UQError("shape mismatch between uncertainty map and ground truth")
    if not g.any():
        raise UQError("ground truth has no foreground")
    surf = surface_mask(g)
    interior = g & ~surf
    w = u.width.data
    return {
        "boundary_mean_width": float(w[surf].mean()),
        "interior_mean_width": float(w[interior].mean()) if interior.any() else float("nan"),
    }


def write_uncertainty(u: UncertaintyMap, prefix) -> list[Path]:
    prefix = str(prefix)
    return [write_volume(f"{prefix}_{name}", getattr(u, name)) for name in ("mean", "lower", "upper", "width")]


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def euler_characteristic(self) -> int:
        edges = np.sort(np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]), axis=1)
        n_edges = len(np.unique(edges, axis=0))
        return len(self.vertices) - n_edges + len(self.faces)


def extract_surface(prob: Volume, level: float = 0.5) -> Mesh:
    """Marching-cubes isosurface in mm coordinates (origin + index * spacing)."""
    from skimage.measure import marching_cubes

    if not 0 < level < 1:
        raise UQError("level must lie in (0, 1)")
    data = np.pad(prob.data.astype(np.float64), 1)  # closes surfaces touching the border
    if not (data.max() > level > data.min()):
        raise UQError("empty isosurface")
    verts, faces, _, _ = marching_cubes(data, level, spacing=prob.spacing)
    verts = verts - np.asarray(prob.spacing) + np.asarray(prob.origin)
    return Mesh(verts, faces)


def export_surface(prob: Volume, level: float, path) -> Mesh:
    """Write the isosurface as an ASCII Wavefront OBJ file."""
    mesh = extract_surface(prob, level)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w") as fh:
        fh.write(f"# isosurface level {level}\n")
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")
    return mesh


def plot_slices(u: UncertaintyMap, out_dir, image: Optional[Volume] = None, gt: Optional[Volume] = None,
                axis: int = 2, n_slices: int = 4, level: float = 0.5) -> list[Path]:
    """Slice PNGs with the mean contour and lower/upper bound contours; plus a width CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    depth = u.mean.shape[axis]
    idx = np.unique(np.linspace(0, depth - 1, n_slices + 2).round().astype(int)[1:-1])
    paths = []
    for i in idx:
        take = lambda v: np.take(v.data, i, axis=axis)
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(take(image if image is not None else u.mean).T, cmap="gray", origin="lower")
        for vol, color in ((u.upper, "tab:blue"), (u.mean, "tab:red"), (u.lower, "tab:green")):
            sl = take(vol)
            if sl.max() > level > sl.min():
                ax.contour(sl.T, levels=[level], colors=color, linewidths=1)
        ax.set_title(f"axis {axis}, slice {i}")
        ax.set_axis_off()
        p = out / f"slice_{axis}_{i:03d}.png"
        fig.savefig(p, dpi=80, bbox_inches="tight")
        plt.close(fig)
        paths.append(p)
    if gt is not None:
        stats = boundary_width_stat(u, gt)
        with open(out / "width_stats.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(stats))
            w.writerow(list(stats.values()))
        paths.append(out / "width_stats.csv")
    return paths
