"""Dual-stream segmentation model: a 3D U-Net regular stream, the Bayesian LoG
stream, and an ASPP fusion head with a 1x1x1 projection to one logit channel."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .bayeslayer import VariationalKernel, kl_divergence, sample_weights
from .logkernel import BANK_SIGMAS, BANK_SIZES
from .voxelio import Volume

_ACTIVATIONS = {
    "relu": nn.ReLU,
    "leaky_relu": nn.LeakyReLU,
    "elu": nn.ELU,
    "tanh": nn.Tanh,
}


@dataclass
class NetworkConfig:
    in_channels: int = 1
    depth: int = 3
    base_channels: int = 8
    aspp_channels: int = 8
    dilations: tuple = (1, 2, 4, 8)
    log_sizes: tuple = BANK_SIZES
    log_sigmas: tuple = BANK_SIGMAS
    active_layers: int = 5
    bayesian: bool = True
    prior_std: float = 0.1
    init_std: float = 0.01
    trainable_sigma: bool = False
    activation: str = "relu"

    def __post_init__(self):
        self.dilations = tuple(self.dilations)
        self.log_sizes = tuple(self.log_sizes)
        self.log_sigmas = tuple(self.log_sigmas)
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if len(self.log_sizes) != 5 or len(self.log_sigmas) != 5:
            raise ValueError("the LoG stream holds exactly five layers")
        if not 0 <= self.active_layers <= 5:
            raise ValueError("active_layers must be in 0..5")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _act(name: str) -> nn.Module:
    return _ACTIVATIONS[name]()


def _double_conv(cin: int, cout: int, act: str) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, padding=1), _act(act),
        nn.Conv3d(cout, cout, 3, padding=1), _act(act),
    )


class RegularStream(nn.Module):
    """Plain 3D U-Net; returns ``base_channels`` feature maps at input resolution."""

    def __init__(self, in_channels: int = 1, depth: int = 3, base_channels: int = 8, activation: str = "relu"):
        super().__init__()
        self.depth = depth
        ch = [base_channels * 2 ** i for i in range(depth + 1)]
        self.down = nn.ModuleList(
            _double_conv(in_channels if i == 0 else ch[i - 1], ch[i], activation) for i in range(depth)
        )
        self.bottom = _double_conv(ch[depth - 1], ch[depth], activation)
        self.up = nn.ModuleList(nn.ConvTranspose3d(ch[i + 1], ch[i], 2, stride=2) for i in reversed(range(depth)))
        self.dec = nn.ModuleList(_double_conv(2 * ch[i], ch[i], activation) for i in reversed(range(depth)))
        self.out_channels = base_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        step = 2 ** self.depth
        if any(n % step for n in x.shape[2:]):
            raise ValueError(f"spatial shape {tuple(x.shape[2:])} not divisible by {step}")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool3d(x, 2)
        x = self.bottom(x)
        for up, dec in zip(self.up, self.dec):
            x = dec(torch.cat([up(x), skips.pop()], dim=1))
        return x


class LoGStream(nn.Module):
    """Five variational LoG kernels; output is the mean of the active layers' responses.

    Every input channel is filtered independently, so the output has as many
    channels as the input.
    """

    def __init__(self, sizes=BANK_SIZES, sigmas=BANK_SIGMAS, active_layers: int = 5,
                 prior_std: float = 0.1, init_std: float = 0.01, trainable_sigma: bool = False):
        super().__init__()
        self.layers = nn.ModuleList(
            VariationalKernel(k, s, prior_std, init_std, trainable_sigma) for k, s in zip(sizes, sigmas)
        )
        self.active_layers = active_layers

    def kernels(self, generator=None, stochastic: bool = False) -> list[torch.Tensor]:
        active = self.layers[: self.active_layers]
        if stochastic:
            return [sample_weights(vk, generator) for vk in active]
        return [vk.mu for vk in active]

    def forward(self, x: torch.Tensor, generator=None, stochastic: bool = False) -> torch.Tensor:
        if self.active_layers < 1:
            raise ValueError("LoG stream has no active layers")
        b, c = x.shape[:2]
        flat = x.reshape(b * c, 1, *x.shape[2:])
        outs = [
            F.conv3d(flat, w[None, None].to(flat.dtype), padding=w.shape[0] // 2)
            for w in self.kernels(generator, stochastic)
        ]
        return torch.stack(outs).mean(0).reshape(x.shape)

    def kl(self) -> torch.Tensor:
        terms = [kl_divergence(vk) for vk in self.layers[: self.active_layers]]
        if not terms:
            return torch.zeros((), dtype=self.layers[0].rho.dtype)
        return torch.stack(terms).sum()


class FusionHead(nn.Module):
    """Four parallel dilated 3^3 convolutions, summed, activated, projected 1x1x1."""

    def __init__(self, in_channels: int, channels: int = 8, dilations=(1, 2, 4, 8),
                 out_channels: int = 1, activation: str = "relu"):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Conv3d(in_channels, channels, 3, padding=d, dilation=d) for d in dilations
        )
        self.act = _act(activation)
        self.project = nn.Conv3d(channels, out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.branches[0](x)
        for branch in self.branches[1:]:
            y = y + branch(x)
        return self.project(self.act(y))


class LoGBNet(nn.Module):
    def __init__(self, cfg: Optional[NetworkConfig] = None):
        super().__init__()
        self.cfg = cfg = cfg or NetworkConfig()
        self.regular = RegularStream(cfg.in_channels, cfg.depth, cfg.base_channels, cfg.activation)
        self.log_stream = LoGStream(cfg.log_sizes, cfg.log_sigmas, cfg.active_layers,
                                    cfg.prior_std, cfg.init_std, cfg.trainable_sigma)
        self.head = FusionHead(cfg.base_channels + cfg.in_channels, cfg.aspp_channels, cfg.dilations,
                               cfg.in_channels, cfg.activation)

    @property
    def log_enabled(self) -> bool:
        return self.cfg.active_layers > 0

    def log_features(self, x: torch.Tensor, generator=None, stochastic: bool = False) -> torch.Tensor:
        if not self.log_enabled:
            return torch.zeros_like(x)
        return self.log_stream(x, generator, stochastic and self.cfg.bayesian)

    def forward(self, x: torch.Tensor, generator=None, stochastic: bool = False) -> torch.Tensor:
        reg = self.regular(x)
        logf = self.log_features(x, generator, stochastic)
        return self.head(torch.cat([reg, logf], dim=1))

    def kl(self) -> torch.Tensor:
        if not (self.cfg.bayesian and self.log_enabled):
            return torch.zeros((), dtype=next(self.parameters()).dtype)
        return self.log_stream.kl()


@dataclass
class ModelOutput:
    logits: np.ndarray
    probabilities: np.ndarray = field(init=False)

    def __post_init__(self):
        self.probabilities = 1.0 / (1.0 + np.exp(-np.asarray(self.logits, dtype=np.float64)))


def _as_input(v, model: nn.Module) -> torch.Tensor:
    data = v.data if isinstance(v, Volume) else v
    t = torch.as_tensor(np.asarray(data), dtype=next(model.parameters()).dtype)
    while t.dim() < 5:
        t = t.unsqueeze(0)
    return t


def log_stream_forward(v, stream: LoGStream, generator=None, stochastic: bool = False) -> np.ndarray:
    """Mean LoG response of a single crop (rank-3 in, rank-3 out)."""
    x = _as_input(v, stream)
    with torch.no_grad():
        return stream(x, generator, stochastic)[0, 0].cpu().numpy()


def regular_forward(v, stream: RegularStream) -> np.ndarray:
    """U-Net feature maps, shape ``(C, D, H, W)``."""
    x = _as_input(v, stream)
    with torch.no_grad():
        return stream(x)[0].cpu().numpy()


def fuse_forward(reg, logf, head: FusionHead) -> ModelOutput:
    """Fuse ``(C, D, H, W)`` regular features with a rank-3 LoG map."""
    reg = np.asarray(reg)
    logf = np.asarray(logf)
    if logf.ndim == 3:
        logf = logf[None]
    if reg.shape[1:] != logf.shape[1:]:
        raise ValueError(f"spatial shapes differ: {reg.shape[1:]} vs {logf.shape[1:]}")
    dtype = next(head.parameters()).dtype
    x = torch.as_tensor(np.concatenate([reg, logf])[None], dtype=dtype)
    with torch.no_grad():
        return ModelOutput(head(x)[0, 0].cpu().numpy())


def predict(v, model: LoGBNet, generator=None, stochastic: bool = False) -> ModelOutput:
    """Full forward pass on one single-channel crop."""
    x = _as_input(v, model)
    with torch.no_grad():
        return ModelOutput(model(x, generator, stochastic)[0, 0].cpu().numpy())
