"""Variational Gaussian posterior over LoG kernel weights.

Each weight has posterior ``N(mu, softplus(rho)^2)`` and an independent
Gaussian prior centred on the discretized LoG kernel with a shared scalar
standard deviation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .logkernel import discretize


def softplus_inv(y: float) -> float:
    """Inverse of ``log(1 + exp(x))`` for ``y > 0``."""
    if y <= 0:
        raise ValueError("softplus output must be positive")
    return y + math.log(-math.expm1(-y))


def torch_log_kernel(sigma: torch.Tensor, k: int) -> torch.Tensor:
    """Differentiable zero-mean LoG kernel of size ``k`` for a scalar ``sigma``."""
    c = (k - 1) / 2
    i = torch.arange(k, dtype=sigma.dtype, device=sigma.device) - c
    x, y, z = torch.meshgrid(i, i, i, indexing="ij")
    r2 = x * x + y * y + z * z
    s2 = sigma * sigma
    g = (2 * math.pi * s2) ** -1.5 * torch.exp(-r2 / (2 * s2))
    w = g * (r2 - 3 * s2) / (s2 * s2)
    return w - w.mean()


class VariationalKernel(nn.Module):
    """Posterior over one k^3 LoG kernel.

    With ``trainable_sigma`` the posterior mean is re-synthesized from a single
    learnable LoG width instead of being a free k^3 array; ``rho`` stays
    per-weight either way.
    """

    def __init__(self, size: int, sigma: float, prior_std: float = 0.1, init_std: float = 0.01,
                 trainable_sigma: bool = False, dtype=torch.float32):
        super().__init__()
        if prior_std <= 0:
            raise ValueError("prior_std must be positive")
        self.size = int(size)
        self.init_sigma = float(sigma)
        self.prior_std = float(prior_std)
        self.trainable_sigma = trainable_sigma
        prior = torch.as_tensor(discretize(sigma, size).weights, dtype=dtype)
        self.register_buffer("prior_mean", prior)
        if trainable_sigma:
            self.log_sigma = nn.Parameter(torch.tensor(math.log(sigma), dtype=dtype))
            self.register_parameter("mu_free", None)
        else:
            self.mu_free = nn.Parameter(prior.clone())
        self.rho = nn.Parameter(torch.full_like(prior, softplus_inv(init_std)))

    @property
    def mu(self) -> torch.Tensor:
        if self.trainable_sigma:
            return torch_log_kernel(self.log_sigma.exp(), self.size)
        return self.mu_free

    @property
    def std(self) -> torch.Tensor:
        return F.softplus(self.rho)

    def extra_repr(self) -> str:
        return f"size={self.size}, sigma={self.init_sigma}, prior_std={self.prior_std}"


def sample_weights(vk: VariationalKernel, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Reparameterized draw ``mu + softplus(rho) * eps``; differentiable in mu and rho."""
    mu = vk.mu
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + vk.std * eps


def gaussian_kl(mu_q, std_q, mu_p, std_p):
    """Elementwise KL(N(mu_q, std_q^2) || N(mu_p, std_p^2)). Works on arrays or tensors."""
    lib = torch if isinstance(mu_q, torch.Tensor) else np
    return lib.log(std_p / std_q) + (std_q ** 2 + (mu_q - mu_p) ** 2) / (2 * std_p ** 2) - 0.5


def kl_divergence(vk: VariationalKernel) -> torch.Tensor:
    """Closed-form KL between the posterior and the LoG prior, summed over weights."""
    std_p = torch.as_tensor(vk.prior_std, dtype=vk.rho.dtype)
    return gaussian_kl(vk.mu, vk.std, vk.prior_mean, std_p).sum()


@dataclass
class ElboTerms:
    loglik: float
    kl: float
    beta: float = 1.0

    def __post_init__(self):
        if self.kl < 0:
            raise ValueError("kl must be non-negative")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


def elbo(t: ElboTerms) -> float:
    return t.loglik - t.beta * t.kl
