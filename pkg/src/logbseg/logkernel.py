"""3D Laplacian-of-Gaussian kernels, the five-layer kernel bank and a direct
reference correlation.

The kernels are sampled from the analytic LoG on the integer lattice and then
shifted to zero mean, so a constant background produces no response.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .voxelio import Volume

BANK_SIZES = (3, 5, 7, 9, 11)
BANK_SIGMAS = (0.5, 1.0, 1.5, 2.0, 2.5)


def gaussian3(x, y, z, sigma: float):
    """Normalized isotropic 3D Gaussian density."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    x, y, z = np.asarray(x, float), np.asarray(y, float), np.asarray(z, float)
    r2 = x * x + y * y + z * z
    return (2.0 * np.pi * sigma * sigma) ** -1.5 * np.exp(-r2 / (2.0 * sigma * sigma))


def log3(x, y, z, sigma: float):
    """Analytic Laplacian of :func:`gaussian3`: ``G * (r^2 - 3 sigma^2) / sigma^4``."""
    x, y, z = np.asarray(x, float), np.asarray(y, float), np.asarray(z, float)
    r2 = x * x + y * y + z * z
    return gaussian3(x, y, z, sigma) * (r2 - 3.0 * sigma * sigma) / sigma ** 4


@dataclass
class LoGKernel:
    size: int
    sigma: float
    weights: np.ndarray

    def to_dict(self) -> dict:
        return {
            "size": self.size,
            "sigma": self.sigma,
            "weights": self.weights.ravel(order="C").tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LoGKernel":
        k = int(d["size"])
        return cls(k, float(d["sigma"]), np.asarray(d["weights"], dtype=np.float64).reshape(k, k, k))


def lattice(k: int):
    """Integer offsets ``-c..c`` on a k^3 lattice as three broadcast grids."""
    c = (k - 1) / 2
    i = np.arange(k) - c
    return np.meshgrid(i, i, i, indexing="ij")


def sample_log(sigma: float, k: int) -> np.ndarray:
    """LoG sampled at lattice offsets, without the zero-mean correction."""
    if k < 3 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 3, got {k}")
    return log3(*lattice(k), sigma)


def discretize(sigma: float, k: int) -> LoGKernel:
    w = sample_log(sigma, k)
    return LoGKernel(k, float(sigma), w - w.mean())


def make_bank(sigmas: Sequence[float] = BANK_SIGMAS, sizes: Sequence[int] = BANK_SIZES) -> list[LoGKernel]:
    """The hierarchical bank: five kernels, sizes 3..11, sigma 0.5..2.5 by default."""
    if len(sigmas) != len(sizes):
        raise ValueError("sigmas and sizes differ in length")
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("bank sizes must be strictly increasing")
    return [discretize(s, k) for s, k in zip(sigmas, sizes)]


def convolve3(v, kern):
    """Same-size direct correlation with zero padding.

    ``v`` may be a :class:`Volume` or a rank-3 array and the result has the same
    type. ``kern`` is a :class:`LoGKernel` or a cubic weight array. This is the
    slow reference; the network uses ``torch.nn.functional.conv3d``.
    """
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    w = kern.weights if isinstance(kern, LoGKernel) else np.asarray(kern)
    k = w.shape[0]
    if w.shape != (k, k, k) or k % 2 == 0:
        raise ValueError("kernel must be an odd-sized cube")
    if any(n < k for n in data.shape):
        raise ValueError(f"kernel size {k} larger than volume {data.shape}")
    c = k // 2
    padded = np.pad(data.astype(np.float64), c)
    out = np.zeros(data.shape, dtype=np.float64)
    nx, ny, nz = data.shape
    for a in range(k):
        for b in range(k):
            for d in range(k):
                out += w[a, b, d] * padded[a:a + nx, b:b + ny, d:d + nz]
    return v.like(out) if isinstance(v, Volume) else out


def dump_kernels(kernels: Sequence[LoGKernel], path) -> Path:
    """Write kernels as a JSON list of ``{size, sigma, weights}`` (row-major)."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps([k.to_dict() for k in kernels], indent=1))
    return p


def load_kernels(path) -> list[LoGKernel]:
    return [LoGKernel.from_dict(d) for d in json.loads(Path(path).read_text())]
