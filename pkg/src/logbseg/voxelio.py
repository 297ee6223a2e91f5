"""Volume container, native file format, preprocessing and synthetic tube phantoms."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

Triple = tuple[float, float, float]


class VolumeError(ValueError):
    """Raised for malformed volumes or volume files."""


class PhantomError(RuntimeError):
    """Raised when tubes cannot be placed in the requested grid."""


@dataclass
class Volume:
    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise VolumeError(f"volume must be rank-3 with non-empty axes, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise VolumeError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def like(self, data: np.ndarray) -> "Volume":
        """Same geometry, new voxel data."""
        return Volume(data, self.spacing, self.origin)


@dataclass
class LabeledCrop:
    image: Volume
    mask: Optional[Volume] = None
    source_id: str = ""
    offset: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        if self.mask is not None and self.mask.shape != self.image.shape:
            raise VolumeError("crop image and mask shapes differ")


@dataclass
class LabeledVolume:
    image: Volume
    mask: Volume
    regions: Optional[Volume] = None
    source_id: str = ""
    tubes: list = field(default_factory=list)


# region tags written by make_phantom
REGION_SA = 1
REGION_MA = 2


@dataclass
class PhantomSpec:
    grid_size: tuple[int, int, int] = (64, 64, 64)
    tube_radii: Sequence[float] = (1.0, 2.0, 4.0, 8.0)
    tube_count: int = 4
    blur_sigma: float = 1.0
    noise_std: float = 0.05
    seed: int = 0
    curved: bool = True
    thin_radius: float = 3.0      # tubes up to this radius are tagged SA
    region_margin: float = 2.0

    def validate(self):
        if len(self.grid_size) != 3 or min(self.grid_size) < 1:
            raise ValueError(f"bad grid_size {self.grid_size}")
        if self.tube_count < 0:
            raise ValueError("tube_count must be >= 0")
        if self.tube_count and not len(self.tube_radii):
            raise ValueError("tube_radii is empty")
        half = min(self.grid_size) / 2
        for r in self.tube_radii if self.tube_count else ():
            if not 0 < r < half:
                raise ValueError(f"tube radius {r} outside (0, {half})")
        if self.noise_std < 0 or self.blur_sigma < 0:
            raise ValueError("noise_std and blur_sigma must be non-negative")


# ---------------------------------------------------------------- file I/O

def _header_path(path) -> Path:
    p = Path(path)
    return p if p.suffix == ".json" else p.with_suffix(".json")


def write_volume(path, v: Volume) -> Path:
    """Write ``v`` as a JSON header plus little-endian float32 ``.raw`` payload."""
    hdr = _header_path(path)
    hdr.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "shape": list(v.shape),
        "spacing": list(v.spacing),
        "origin": list(v.origin),
        "dtype": "f32",
        "order": "C",
    }
    hdr.write_text(json.dumps(header))
    np.ascontiguousarray(v.data, dtype="<f4").tofile(hdr.with_suffix(".raw"))
    return hdr


def load_volume(path, kind: str = "intensity") -> Volume:
    """Load a volume; label volumes are binarized at 0.5.

    Native ``.json``/``.raw`` pairs are always supported. NIfTI files are read
    when nibabel is importable.
    """
    if kind not in ("intensity", "label"):
        raise ValueError(f"unknown volume kind {kind!r}")
    p = Path(path)
    if p.name.endswith((".nii", ".nii.gz")):
        v = _load_nifti(p)
    else:
        v = _load_native(p)
    if not np.all(np.isfinite(v.data)):
        raise VolumeError(f"{p}: non-finite voxel values")
    if kind == "label":
        v = v.like((v.data >= 0.5).astype(np.float32))
    return v


def _load_native(path: Path) -> Volume:
    hdr = _header_path(path)
    raw = hdr.with_suffix(".raw")
    if not hdr.exists():
        raise FileNotFoundError(hdr)
    if not raw.exists():
        raise FileNotFoundError(raw)
    try:
        header = json.loads(hdr.read_text())
        shape = tuple(int(s) for s in header["shape"])
        spacing = header["spacing"]
        origin = header.get("origin", [0.0, 0.0, 0.0])
    except (KeyError, ValueError, TypeError) as exc:
        raise VolumeError(f"{hdr}: malformed header ({exc})") from exc
    if header.get("dtype", "f32") != "f32" or header.get("order", "C") != "C":
        raise VolumeError(f"{hdr}: only f32 C-order payloads are supported")
    data = np.fromfile(raw, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise VolumeError(f"{raw}: payload has {data.size} values, header expects {int(np.prod(shape))}")
    return Volume(data.reshape(shape).astype(np.float32), spacing, origin)


def _load_nifti(path: Path) -> Volume:
    try:
        import nibabel as nib
    except ImportError as exc:
        raise VolumeError("reading NIfTI requires nibabel") from exc
    if not path.exists():
        raise FileNotFoundError(path)
    img = nib.load(str(path))
    data = np.asarray(img.get_fdata(), dtype=np.float32)
    zooms = img.header.get_zooms()[:3]
    return Volume(data, zooms, tuple(img.affine[:3, 3]))


# ----------------------------------------------------------- preprocessing

def resample(v: Volume, target_spacing: Sequence[float], kind: str = "intensity") -> Volume:
    """Resample to ``target_spacing`` (trilinear for intensity, nearest for labels).

    Voxel 0 stays anchored at the origin; the output covers the same physical
    extent to within one output voxel.
    """
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or any(t <= 0 for t in target):
        raise ValueError(f"target spacing must be three positive values, got {target}")
    if target == v.spacing:
        return v.like(v.data.copy())
    scale = np.asarray(v.spacing) / np.asarray(target)
    out_shape = tuple(int(round(n * s)) for n, s in zip(v.shape, scale))
    if min(out_shape) < 1:
        raise VolumeError(f"resampling {v.shape} to spacing {target} gives empty shape {out_shape}")
    coords = np.meshgrid(
        *[np.arange(n) / s for n, s in zip(out_shape, scale)], indexing="ij"
    )
    order = 0 if kind == "label" else 1
    data = ndimage.map_coordinates(v.data.astype(np.float64), coords, order=order, mode="nearest")
    return Volume(data.astype(v.data.dtype), target, v.origin)


def normalize(v: Volume) -> Volume:
    """Min-max scale to [0, 1]; a constant volume maps to zeros."""
    d = v.data.astype(np.float64)
    if not np.all(np.isfinite(d)):
        raise VolumeError("cannot normalize non-finite values")
    lo, hi = d.min(), d.max()
    if hi == lo:
        return v.like(np.zeros(v.shape, dtype=np.float32))
    return v.like(((d - lo) / (hi - lo)).astype(np.float32))


def block_offsets(shape: Sequence[int], size: int, stride: Optional[int] = None) -> list[tuple[int, int, int]]:
    """Corner offsets tiling ``shape`` with cubes of ``size``; the last tile sits flush."""
    stride = stride or size
    if any(n < size for n in shape):
        raise ValueError(f"block size {size} exceeds volume shape {tuple(shape)}")
    axes = []
    for n in shape:
        starts = list(range(0, n - size + 1, stride))
        if starts[-1] != n - size:
            starts.append(n - size)
        axes.append(starts)
    return [(i, j, k) for i in axes[0] for j in axes[1] for k in axes[2]]


def pad_to(v: Volume, size: int) -> Volume:
    """Zero-pad at the high end of every axis shorter than ``size``."""
    pad = [(0, max(0, size - n)) for n in v.shape]
    if not any(p[1] for p in pad):
        return v
    return v.like(np.pad(v.data, pad))


def crop_blocks(v: Volume, mask: Optional[Volume] = None, size: int = 64, source_id: str = "") -> list[LabeledCrop]:
    """Tile ``v`` (and ``mask``) into ``size``-cubed crops with stride ``size``."""
    v = pad_to(v, size)
    if mask is not None:
        mask = pad_to(mask, size)
        if mask.shape != v.shape:
            raise VolumeError("image and mask shapes differ")
    crops = []
    for off in block_offsets(v.shape, size):
        sl = tuple(slice(o, o + size) for o in off)
        crops.append(
            LabeledCrop(
                image=v.like(v.data[sl].copy()),
                mask=None if mask is None else mask.like(mask.data[sl].copy()),
                source_id=source_id,
                offset=off,
            )
        )
    return crops


_ROT_PLANES = ((0, 1), (0, 2), (1, 2))


def augment(c: LabeledCrop, rng, p: float = 0.1) -> LabeledCrop:
    """Random flips (independently per axis) and one random 90 degree rotation.

    Draw order is fixed: three flip draws, one rotation draw, then the plane
    index if a rotation happens.
    """
    if len(set(c.image.shape)) != 1:
        raise VolumeError("augment expects a cubic crop")
    img = c.image.data
    msk = None if c.mask is None else c.mask.data
    for axis in range(3):
        if rng.random() < p:
            img = np.flip(img, axis)
            if msk is not None:
                msk = np.flip(msk, axis)
    if rng.random() < p:
        plane = _ROT_PLANES[int(rng.integers(0, 3))]
        img = np.rot90(img, 1, axes=plane)
        if msk is not None:
            msk = np.rot90(msk, 1, axes=plane)
    return LabeledCrop(
        image=c.image.like(np.ascontiguousarray(img)),
        mask=None if msk is None else c.mask.like(np.ascontiguousarray(msk)),
        source_id=c.source_id,
        offset=c.offset,
    )


# ----------------------------------------------------------------- phantoms

def polyline_distance(shape: Sequence[int], points: np.ndarray) -> np.ndarray:
    """Distance (voxels) from every voxel center to a polyline through ``points``."""
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"), axis=-1)
    pts = grid.reshape(-1, 3)
    points = np.asarray(points, dtype=np.float64)
    best = np.full(len(pts), np.inf)
    if len(points) == 1:
        return np.linalg.norm(pts - points[0], axis=1).reshape(shape)
    for a, b in zip(points[:-1], points[1:]):
        ab = b - a
        denom = ab @ ab
        t = np.zeros(len(pts)) if denom == 0 else np.clip((pts - a) @ ab / denom, 0.0, 1.0)
        d = np.linalg.norm(pts - (a + t[:, None] * ab), axis=1)
        np.minimum(best, d, out=best)
    return best.reshape(shape)


def draw_tube(shape: Sequence[int], points: np.ndarray, radius: float) -> np.ndarray:
    """Binary digital tube: voxels whose center lies within ``radius`` of the centerline."""
    return polyline_distance(shape, points) <= radius


def _random_centerline(rng: np.random.Generator, shape, curved: bool, n: int = 48) -> np.ndarray:
    ext = np.asarray(shape, dtype=np.float64) - 1
    # endpoints on two different faces of the box
    ax_a, ax_b = rng.choice(3, size=2, replace=False)
    a = rng.uniform(0.2, 0.8, 3) * ext
    b = rng.uniform(0.2, 0.8, 3) * ext
    a[ax_a] = 0.0 if rng.random() < 0.5 else ext[ax_a]
    b[ax_b] = 0.0 if rng.random() < 0.5 else ext[ax_b]
    t = np.linspace(0.0, 1.0, n)[:, None]
    if curved and rng.random() < 0.5:
        ctrl = rng.uniform(0.25, 0.75, 3) * ext
        return (1 - t) ** 2 * a + 2 * (1 - t) * t * ctrl + t ** 2 * b
    return (1 - t) * a + t * b


def make_phantom(spec: PhantomSpec, max_retries: int = 200) -> LabeledVolume:
    """Synthetic labeled volume of non-overlapping tubes.

    The mask is the union of tubes, the image is the blurred mask plus Gaussian
    noise clamped to [0, 1], and the region volume tags voxels near thin tubes
    with ``REGION_SA`` and near thick ones with ``REGION_MA``.
    """
    spec.validate()
    shape = tuple(int(n) for n in spec.grid_size)
    rng = np.random.default_rng(spec.seed)
    mask = np.zeros(shape, dtype=bool)
    # signed distance to the nearest tube surface, and which region owns it
    surf = np.full(shape, np.inf)
    regions = np.zeros(shape, dtype=np.float32)
    tubes = []
    for i in range(spec.tube_count):
        r = float(spec.tube_radii[i % len(spec.tube_radii)])
        for _ in range(max_retries):
            line = _random_centerline(rng, shape, spec.curved)
            dist = polyline_distance(shape, line)
            tube = dist <= r
            if tube.any() and not np.any(tube & (surf <= 1.0)):
                break
        else:
            raise PhantomError(
                f"could not place tube {i} (radius {r}) in grid {shape} after {max_retries} tries"
            )
        d_surf = dist - r
        closer = d_surf < surf
        tag = REGION_SA if r <= spec.thin_radius else REGION_MA
        regions[closer & (d_surf <= spec.region_margin)] = tag
        surf = np.minimum(surf, d_surf)
        mask |= tube
        tubes.append({"radius": r, "centerline": line.tolist(), "region": tag})

    img = mask.astype(np.float64)
    if spec.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, spec.blur_sigma, mode="constant")
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, shape)
    img = np.clip(img, 0.0, 1.0)
    sid = f"phantom-{spec.seed}"
    return LabeledVolume(
        image=Volume(img.astype(np.float32)),
        mask=Volume(mask.astype(np.float32)),
        regions=Volume(regions),
        source_id=sid,
        tubes=tubes,
    )
