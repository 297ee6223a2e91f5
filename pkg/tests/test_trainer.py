import json

import numpy as np
import pytest
import torch

from logbseg.network import LoGBNet
from logbseg.trainer import (
    Checkpoint, CheckpointError, ConfigError, DivergenceError, TrainConfig, dice_loss, load_checkpoint,
    make_optimizer, save_checkpoint, stack_batch, total_loss, train, train_step,
)
from logbseg.voxelio import PhantomSpec, make_phantom, crop_blocks, normalize

TINY = dict(crop_size=16, depth=2, base_channels=2, aspp_channels=2, gate_capacity=1, lr=1e-3)


@pytest.fixture(scope="module")
def phantoms():
    # one thin-tube (low foreground) and one thick-tube (high foreground) volume
    return [
        make_phantom(PhantomSpec(grid_size=(16, 16, 16), tube_radii=(1.5,), tube_count=1, seed=1)),
        make_phantom(PhantomSpec(grid_size=(16, 16, 16), tube_radii=(5.0,), tube_count=1, seed=2)),
    ]


def test_dice_loss_examples():
    m = np.zeros((2, 2, 2))
    m[0] = 1
    assert dice_loss(m, m) < 1e-5
    assert dice_loss(1 - m, m) == pytest.approx(1.0, abs=1e-6)
    assert dice_loss(np.full((2, 2, 2), 0.5), m) == pytest.approx(0.5, abs=1e-6)
    t = torch.as_tensor(m)
    assert dice_loss(torch.full((2, 2, 2), 0.5, dtype=torch.float64), t).item() == pytest.approx(0.5, abs=1e-6)
    with pytest.raises(ValueError):
        dice_loss(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_dice_loss_batch_is_mean_of_items():
    rng = np.random.default_rng(0)
    p, m = rng.random((3, 4, 4, 4)), (rng.random((3, 4, 4, 4)) > 0.5)
    assert dice_loss(p, m) == pytest.approx(np.mean([dice_loss(p[i], m[i]) for i in range(3)]))


def test_total_loss():
    assert total_loss(0.42, 7.0, 0.0) == 0.42
    assert total_loss(0.3, 2.0, 0.1) == pytest.approx(0.5)
    vals = [total_loss(0.3, kl, 0.1) for kl in (0, 1, 2, 5)]
    assert vals == sorted(vals)
    with pytest.raises(ValueError):
        total_loss(0.3, -1.0, 0.1)


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="bogus_key"):
        TrainConfig.from_dict({"lr": 1e-3, "bogus_key": 1})
    with pytest.raises(ConfigError):
        TrainConfig(ablation="no_everything")
    with pytest.raises(ConfigError):
        TrainConfig(beta1=1.0)
    cfg = TrainConfig(ablation="log_layers:3")
    assert cfg.active_layers == 3 and cfg.network_config().active_layers == 3
    assert TrainConfig(ablation="no_log").active_layers == 0
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_default_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay) == (1e-4, 0.8, 0.999, 1e-5)
    assert cfg.gate_mu == 0.15 and cfg.crop_size == 64
    opt = make_optimizer(LoGBNet(TrainConfig(**TINY).network_config()), cfg)
    group = opt.param_groups[0]
    assert group["betas"] == (0.8, 0.999) and group["weight_decay"] == 1e-5 and group["lr"] == 1e-4


def test_lr_zero_keeps_parameters(phantoms):
    cfg = TrainConfig(**{**TINY, "lr": 0.0}, epochs=1)
    torch.manual_seed(cfg.seed)
    init = LoGBNet(cfg.network_config()).state_dict()
    res = train(phantoms, cfg)
    assert res.history[0]["batches"] == 1
    for k, v in res.model.state_dict().items():
        assert torch.equal(v, init[k]), k


def test_same_seed_same_curve(phantoms, tmp_path):
    cfg = TrainConfig(**TINY, epochs=3, augment_p=0.5)
    a = train(phantoms, cfg, log_path=tmp_path / "a.jsonl")
    b = train(phantoms, cfg)
    assert a.history == b.history
    lines = [json.loads(l) for l in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert [l["epoch"] for l in lines] == [1, 2, 3]
    assert set(lines[0]) >= {"epoch", "dice_loss", "kl", "total", "gate_stats"}
    for rec in lines:
        assert rec["total"] == pytest.approx(rec["dice_loss"] + 0.5 * rec["kl"])  # beta = 1 / two crops


def test_checkpoint_round_trip(phantoms, tmp_path):
    res = train(phantoms, TrainConfig(**TINY, epochs=1))
    path = save_checkpoint(tmp_path / "m.ckpt", res.checkpoint)
    back = load_checkpoint(path)
    assert back.epoch == 1 and back.config == res.checkpoint.config
    for k, v in res.checkpoint.params.items():
        assert back.params[k].tobytes() == v.tobytes() and back.params[k].dtype == v.dtype
    for k, v in res.checkpoint.optimizer.items():
        assert back.optimizer[k].tobytes() == v.tobytes()
    model = back.build_model()
    for k, v in res.model.state_dict().items():
        assert torch.equal(model.state_dict()[k], v)


def test_checkpoint_corruption(phantoms, tmp_path):
    res = train(phantoms, TrainConfig(**TINY, epochs=1))
    path = save_checkpoint(tmp_path / "m.ckpt", res.checkpoint)
    data = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(data[: len(data) - 100])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trunc.ckpt")
    (tmp_path / "head.ckpt").write_bytes(data[:10])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "head.ckpt")
    bad = bytearray(data)
    bad[8] = 99  # version field
    (tmp_path / "ver.ckpt").write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver.ckpt")


def test_resume_matches_uninterrupted(phantoms, tmp_path):
    cfg2 = TrainConfig(**TINY, epochs=3, augment_p=0.5)
    full = train(phantoms, cfg2)
    first = train(phantoms, TrainConfig(**TINY, epochs=2, augment_p=0.5))
    path = save_checkpoint(tmp_path / "half.ckpt", first.checkpoint)
    resumed = train(phantoms, cfg2, resume=load_checkpoint(path))
    assert resumed.history == full.history
    for k, v in full.model.state_dict().items():
        assert torch.equal(resumed.model.state_dict()[k], v), k


def _frozen_batch(phantoms, dtype=torch.float64):
    crops = [crop_blocks(normalize(p.image), p.mask, 16)[0] for p in phantoms]
    return stack_batch(crops, concat=False, dtype=dtype)


def test_small_step_decreases_loss(phantoms):
    cfg = TrainConfig(**{**TINY, "lr": 1e-6})
    torch.manual_seed(0)
    model = LoGBNet(cfg.network_config()).double()
    opt = make_optimizer(model, cfg)
    images, masks = _frozen_batch(phantoms)
    before = train_step(model, opt, images, masks, cfg, 0.5, stochastic=False)["total"]
    with torch.no_grad():
        from logbseg.trainer import data_term
        after = (data_term(model(images), masks) + 0.5 * model.kl()).item()
    assert after < before


def test_weight_decay_shrinks_norms():
    cfg = TrainConfig(**{**TINY, "lr": 1e-2, "weight_decay": 1e-5})
    torch.manual_seed(0)
    model = LoGBNet(cfg.network_config()).double()  # 1 - lr*wd is below float32 resolution
    opt = make_optimizer(model, cfg)
    norms = [torch.cat([p.detach().flatten() for p in model.parameters()]).norm().item()]
    for _ in range(3):
        opt.zero_grad()
        for p in model.parameters():
            p.grad = torch.zeros_like(p)
        opt.step()
        norms.append(torch.cat([p.detach().flatten() for p in model.parameters()]).norm().item())
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_no_bayes_equals_zero_std_full(phantoms):
    images, _ = _frozen_batch(phantoms, torch.float32)
    full_cfg = TrainConfig(**TINY, kl_beta=0.0)
    nb_cfg = TrainConfig(**TINY, ablation="no_bayes")
    torch.manual_seed(0)
    full = LoGBNet(full_cfg.network_config())
    nb = LoGBNet(nb_cfg.network_config())
    nb.load_state_dict(full.state_dict())
    with torch.no_grad():
        for vk in full.log_stream.layers:
            vk.rho.fill_(-1e4)
    g1, g2 = torch.Generator().manual_seed(5), torch.Generator().manual_seed(5)
    assert torch.equal(full(images, g1, True), nb(images, g2, True))


def test_gate_and_bypass_share_loss_formula(phantoms):
    images, masks = _frozen_batch(phantoms)
    out = []
    for ablation in ("full", "no_gate"):
        cfg = TrainConfig(**TINY, ablation=ablation)
        torch.manual_seed(0)
        model = LoGBNet(cfg.network_config()).double()
        out.append(train_step(model, make_optimizer(model, cfg), images, masks, cfg, 0.5, stochastic=False))
    assert out[0] == out[1]


def test_divergence_detected(phantoms):
    cfg = TrainConfig(**TINY)
    model = LoGBNet(cfg.network_config())
    images, masks = _frozen_batch(phantoms, torch.float32)
    images[0, 0, 0, 0, 0] = float("nan")
    with pytest.raises(DivergenceError):
        train_step(model, make_optimizer(model, cfg), images, masks, cfg, 0.5)


def test_no_gate_and_concat_modes(phantoms):
    res = train(phantoms, TrainConfig(**TINY, epochs=1, ablation="no_gate"))
    assert res.history[0]["gate_stats"] is None and res.history[0]["batches"] == 1
    res = train(phantoms, TrainConfig(**TINY, epochs=1, gate_concat=True))
    assert res.model.cfg.in_channels == 2 and res.history[0]["batches"] == 1


def test_bernoulli_likelihood(phantoms):
    res = train(phantoms, TrainConfig(**TINY, epochs=1, likelihood="bernoulli"))
    assert np.isfinite(res.history[0]["total"])


def test_single_phantom_overfit():
    # one 64^3 tube volume; the gate needs both classes, so batches bypass it
    p = make_phantom(PhantomSpec(grid_size=(64, 64, 64), tube_radii=(6.0,), tube_count=1, seed=0))
    cfg = TrainConfig(epochs=200, lr=1e-3, ablation="no_gate", augment=False, seed=0)
    res = train([p], cfg)
    assert res.history[-1]["dice_loss"] < 0.1
