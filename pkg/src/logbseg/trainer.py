"""Dice - ELBO training of the dual-stream model, ablation switches and checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .gate import DEFAULT_MU, GateState, gate_bypass
from .network import LoGBNet, NetworkConfig
from .voxelio import LabeledCrop, LabeledVolume, augment, crop_blocks, normalize, resample

log = logging.getLogger(__name__)

DICE_EPS = 1e-6
ABLATIONS = ("full", "no_log", "no_bayes", "no_gate")


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.8
    beta2: float = 0.999
    weight_decay: float = 1e-5
    epochs: int = 500
    gate_capacity: int = 2
    gate_mu: float = DEFAULT_MU
    gate_concat: bool = False
    kl_beta: Optional[float] = None     # None: 1 / crops per epoch
    ablation: str = "full"
    seed: int = 0
    crop_size: int = 64
    target_spacing: Optional[list] = None
    augment: bool = True
    augment_p: float = 0.1
    likelihood: str = "dice"            # or "bernoulli"
    depth: int = 3
    base_channels: int = 8
    aspp_channels: int = 8
    prior_std: float = 0.1
    init_std: float = 0.01
    trainable_sigma: bool = False
    activation: str = "relu"

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.gate_capacity < 1:
            raise ConfigError("gate_capacity must be >= 1")
        if self.likelihood not in ("dice", "bernoulli"):
            raise ConfigError(f"unknown likelihood {self.likelihood!r}")
        if self.crop_size % (2 ** self.depth):
            raise ConfigError(f"crop_size {self.crop_size} not divisible by 2**depth")
        self.active_layers  # validates the ablation string

    @property
    def active_layers(self) -> int:
        a = self.ablation
        if a == "no_log":
            return 0
        if a.startswith("log_layers:"):
            try:
                n = int(a.split(":", 1)[1])
            except ValueError:
                raise ConfigError(f"bad ablation {a!r}") from None
            if not 0 <= n <= 5:
                raise ConfigError("log_layers must be in 0..5")
            return n
        if a not in ABLATIONS:
            raise ConfigError(f"unknown ablation {a!r}; expected one of {ABLATIONS} or log_layers:N")
        return 5

    @property
    def bayesian(self) -> bool:
        return self.ablation != "no_bayes"

    @property
    def use_gate(self) -> bool:
        return self.ablation != "no_gate"

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            in_channels=2 * self.gate_capacity if self.gate_concat else 1,
            depth=self.depth,
            base_channels=self.base_channels,
            aspp_channels=self.aspp_channels,
            active_layers=self.active_layers,
            bayesian=self.bayesian,
            prior_std=self.prior_std,
            init_std=self.init_std,
            trainable_sigma=self.trainable_sigma,
            activation=self.activation,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)


# ------------------------------------------------------------------ losses

def dice_loss(probs, mask, eps: float = DICE_EPS):
    """Soft Dice loss ``1 - (2 sum(p m) + eps) / (sum p + sum m + eps)``.

    Inputs with more than three axes are treated as a stack of volumes over the
    leading axes; the per-volume losses are averaged.
    """
    if tuple(probs.shape) != tuple(mask.shape):
        raise ValueError(f"shape mismatch {tuple(probs.shape)} vs {tuple(mask.shape)}")
    if isinstance(probs, torch.Tensor):
        p = probs.reshape(-1, *probs.shape[-3:]).flatten(1)
        m = mask.reshape(p.shape).to(p.dtype)
        inter, total = (p * m).sum(1), p.sum(1) + m.sum(1)
        return (1 - (2 * inter + eps) / (total + eps)).mean()
    p = np.asarray(probs, dtype=np.float64).reshape(-1, int(np.prod(probs.shape[-3:])))
    m = np.asarray(mask, dtype=np.float64).reshape(p.shape)
    inter, total = (p * m).sum(1), p.sum(1) + m.sum(1)
    return float(np.mean(1 - (2 * inter + eps) / (total + eps)))


def total_loss(data_loss, kl, kl_beta: float):
    """Dice - ELBO objective: data term (negative log-likelihood surrogate) + beta * KL."""
    kl_val = float(kl.detach()) if isinstance(kl, torch.Tensor) else float(kl)
    if kl_val < 0:
        raise ValueError("kl must be non-negative")
    return data_loss + kl_beta * kl


def data_term(logits: torch.Tensor, masks: torch.Tensor, likelihood: str = "dice") -> torch.Tensor:
    if likelihood == "bernoulli":
        return torch.nn.functional.binary_cross_entropy_with_logits(logits, masks)
    return dice_loss(torch.sigmoid(logits), masks)


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    # decoupled weight decay as the penalty term
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                             weight_decay=cfg.weight_decay)


def train_step(model: LoGBNet, opt, images: torch.Tensor, masks: torch.Tensor, cfg: TrainConfig,
               kl_beta: float, generator=None, stochastic: bool = True) -> dict:
    """One forward/backward/update on a batch; returns the scalar loss terms."""
    model.train()
    logits = model(images, generator, stochastic)
    dl = data_term(logits, masks, cfg.likelihood)
    kl = model.kl()
    loss = total_loss(dl, kl, kl_beta)
    opt.zero_grad()
    loss.backward()
    opt.step()
    out = {"dice_loss": dl.item(), "kl": kl.item(), "total": loss.item()}
    if not all(math.isfinite(v) for v in out.values()):
        raise DivergenceError(f"non-finite loss {out}")
    return out


def stack_batch(crops: Sequence[LabeledCrop], concat: bool, dtype=torch.float32):
    """Crops to ``(images, masks)`` tensors; concat mode packs them as channels of one sample."""
    imgs = np.stack([c.image.data for c in crops]).astype(np.float32)
    msks = np.stack([c.mask.data for c in crops]).astype(np.float32)
    axis = 0 if concat else 1
    return (torch.as_tensor(np.expand_dims(imgs, axis), dtype=dtype),
            torch.as_tensor(np.expand_dims(msks, axis), dtype=dtype))


def prepare_crops(dataset: Sequence[LabeledVolume], cfg: TrainConfig) -> list[LabeledCrop]:
    """Resample (optional), normalize per volume, and tile into training crops."""
    crops = []
    for i, lv in enumerate(dataset):
        img, msk = lv.image, lv.mask
        if cfg.target_spacing is not None:
            img = resample(img, cfg.target_spacing)
            msk = resample(msk, cfg.target_spacing, kind="label")
        img = normalize(img)
        crops.extend(crop_blocks(img, msk, cfg.crop_size, lv.source_id or f"vol{i}"))
    return crops


# -------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"LOGBCKPT"
CKPT_VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8", "u8": "u1", "i64": "<i8"}
_DTYPE_NAMES = {np.dtype(v): k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    params: dict
    optimizer: dict
    epoch: int
    config: dict
    rng_state: dict
    torch_rng: np.ndarray
    history: list = field(default_factory=list)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def build_model(self) -> LoGBNet:
        cfg = self.train_config()
        model = LoGBNet(cfg.network_config())
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.params.items()})
        return model


def _to_numpy_state(model, opt) -> tuple[dict, dict]:
    params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    optim = {}
    for idx, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            optim[f"{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy().copy()
    return params, optim


def _load_optimizer(opt, optim: dict):
    sd = opt.state_dict()
    state: dict = {}
    for name, arr in optim.items():
        idx, key = name.split("/", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(arr))
    sd["state"] = state
    opt.load_state_dict(sd)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Versioned container: magic, version, JSON manifest, raw little-endian blocks."""
    blocks, payload, offset = [], [], 0
    for group, arrays in (("param", ckpt.params), ("optim", ckpt.optimizer), ("rng", {"torch": ckpt.torch_rng})):
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            dname = _DTYPE_NAMES.get(arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype)
            if dname is None:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {group}:{name}")
            raw = np.ascontiguousarray(arr, dtype=_DTYPES[dname]).tobytes()
            blocks.append({"group": group, "name": name, "dtype": dname, "shape": list(arr.shape),
                           "offset": offset, "nbytes": len(raw)})
            payload.append(raw)
            offset += len(raw)
    body = b"".join(payload)
    manifest = {
        "version": CKPT_VERSION,
        "epoch": ckpt.epoch,
        "config": ckpt.config,
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
        "blocks": blocks,
        "payload_bytes": len(body),
        "payload_sha256": hashlib.sha256(body).hexdigest(),
    }
    mbytes = json.dumps(manifest).encode()
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(mbytes)))
        fh.write(mbytes)
        fh.write(body)
    return p


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    head = len(CKPT_MAGIC) + 12
    if len(buf) < head or buf[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint or truncated header")
    version, mlen = struct.unpack("<IQ", buf[len(CKPT_MAGIC):head])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    try:
        manifest = json.loads(buf[head:head + mlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    body = buf[head + mlen:]
    if len(body) != manifest["payload_bytes"] or hashlib.sha256(body).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError(f"{path}: corrupt or truncated payload")
    groups: dict = {"param": {}, "optim": {}, "rng": {}}
    for b in manifest["blocks"]:
        raw = body[b["offset"]:b["offset"] + b["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[b["dtype"]]).reshape(b["shape"]).copy()
        groups[b["group"]][b["name"]] = arr
    return Checkpoint(
        params=groups["param"],
        optimizer=groups["optim"],
        epoch=manifest["epoch"],
        config=manifest["config"],
        rng_state=manifest["rng_state"],
        torch_rng=groups["rng"]["torch"],
        history=manifest["history"],
    )


# ------------------------------------------------------------------ train

@dataclass
class TrainResult:
    model: LoGBNet
    checkpoint: Checkpoint
    history: list


def train(dataset: Sequence[LabeledVolume], cfg: TrainConfig, log_path=None,
          resume: Optional[Checkpoint] = None) -> TrainResult:
    """Train on labeled volumes. Deterministic for a fixed seed with one thread.

    Each epoch shuffles the crops, augments them, and routes them through a
    fresh balancing gate (or plain chunking for the ``no_gate`` ablation). Every
    batch gets one posterior weight sample.
    """
    if not dataset:
        raise ValueError("empty dataset")
    crops = prepare_crops(dataset, cfg)
    kl_beta = cfg.kl_beta if cfg.kl_beta is not None else 1.0 / len(crops)

    torch.manual_seed(cfg.seed)
    model = LoGBNet(cfg.network_config())
    opt = make_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    tgen = torch.Generator().manual_seed(cfg.seed)
    history: list = []
    start = 0
    if resume is not None:
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in resume.params.items()})
        _load_optimizer(opt, resume.optimizer)
        rng.bit_generator.state = resume.rng_state
        tgen.set_state(torch.from_numpy(np.array(resume.torch_rng)))
        history = list(resume.history)
        start = resume.epoch

    logf = open(log_path, "a") if log_path else None
    try:
        for epoch in range(start, cfg.epochs):
            order = rng.permutation(len(crops))
            batch_crops = []
            gate = GateState(cfg.gate_capacity, cfg.gate_mu)
            stream = (augment(crops[i], rng, cfg.augment_p) if cfg.augment else crops[i] for i in order)
            if cfg.use_gate:
                for c in stream:
                    b = gate.push(c)
                    if b is not None:
                        batch_crops.append(b.crops)
            else:
                batch_crops = gate_bypass(list(stream), cfg.gate_capacity)
                if cfg.gate_concat:
                    batch_crops = [b for b in batch_crops if len(b) == 2 * cfg.gate_capacity]
            terms = []
            for bc in batch_crops:
                images, masks = stack_batch(bc, cfg.gate_concat)
                terms.append(train_step(model, opt, images, masks, cfg, kl_beta, tgen))
            rec = {"epoch": epoch + 1, "batches": len(terms)}
            for key in ("dice_loss", "kl", "total"):
                rec[key] = float(np.mean([t[key] for t in terms])) if terms else None
            rec["gate_stats"] = gate.stats() if cfg.use_gate else None
            history.append(rec)
            if logf:
                logf.write(json.dumps(rec) + "\n")
                logf.flush()
            if not terms:
                log.warning("epoch %d produced no batches (gate never filled both queues)", epoch + 1)
    finally:
        if logf:
            logf.close()

    params, optim = _to_numpy_state(model, opt)
    ckpt = Checkpoint(
        params=params,
        optimizer=optim,
        epoch=cfg.epochs,
        config=cfg.to_dict(),
        rng_state=rng.bit_generator.state,
        torch_rng=tgen.get_state().numpy().copy(),
        history=history,
    )
    return TrainResult(model, ckpt, history)
