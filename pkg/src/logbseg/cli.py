"""Command-line entry point: ``logbseg <subcommand> ...``.

Config layering: built-in defaults < ``--config`` JSON file < explicit flags.
Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .gate import GateError, fg_ratio
from .logkernel import LoGKernel, dump_kernels, make_bank
from .metrics import MetricError, evaluate, write_reports
from .trainer import (CheckpointError, ConfigError, DivergenceError, TrainConfig, load_checkpoint,
                      save_checkpoint, train)
from .uqinfer import (UQError, UncertaintyMap, confidence_bounds, export_surface, infer_volume,
                      mc_predict, plot_slices, write_uncertainty)
from .voxelio import (REGION_MA, REGION_SA, LabeledVolume, PhantomError, PhantomSpec, Volume,
                      VolumeError, crop_blocks, load_volume, make_phantom, normalize, resample,
                      write_volume)

log = logging.getLogger("logbseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

# keys a RunConfig file may carry on top of TrainConfig
RUN_DEFAULTS = {
    "data_dir": None,
    "out_dir": None,
    "checkpoint": None,
    "uq_n": 10,
    "bounds_method": "minmax",
    "overlap": False,
}
TRAIN_DEFAULTS = {f.name: f.default for f in fields(TrainConfig)}
ALL_KEYS = {**TRAIN_DEFAULTS, **RUN_DEFAULTS}


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _triple(text: str) -> list[float]:
    vals = _floats(text)
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three values, got {text!r}")
    return vals


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _add_key(p: argparse.ArgumentParser, key: str, *aliases: str, help: str = ""):
    """Flag for a config key; unset flags are absent from the namespace."""
    default = ALL_KEYS[key]
    text = f"{help} (config key {key}; default {default!r})".strip()
    kw = dict(dest=key, default=argparse.SUPPRESS, help=text)
    if isinstance(default, bool):
        p.add_argument(_flag(key), *aliases, action=argparse.BooleanOptionalAction, **kw)
    elif key == "target_spacing":
        p.add_argument(_flag(key), "--spacing", *aliases, type=_triple, metavar="X,Y,Z", **kw)
    elif key == "kl_beta":
        p.add_argument(_flag(key), *aliases, type=float, **kw)
    elif key in ("data_dir", "out_dir", "checkpoint", "ablation", "likelihood", "activation", "bounds_method"):
        p.add_argument(_flag(key), *aliases, type=str, **kw)
    else:
        p.add_argument(_flag(key), *aliases, type=type(default), **kw)


def load_config_file(path) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = sorted(set(d) - set(ALL_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return d


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(ALL_KEYS)
    if getattr(args, "config", None):
        cfg.update(load_config_file(args.config))
    cfg.update({k: v for k, v in vars(args).items() if k in ALL_KEYS})
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict({k: cfg[k] for k in TRAIN_DEFAULTS})


def set_threads(n: Optional[int]):
    if n is None:
        env = os.environ.get("LOGBSEG_THREADS")
        n = int(env) if env else None
    if n is not None:
        if n < 1:
            raise ConfigError("--threads must be >= 1")
        torch.set_num_threads(n)


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


# ------------------------------------------------------------------ data sets

def find_cases(data_dir) -> list[str]:
    d = Path(data_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory not found: {d}")
    ids = sorted(p.name[: -len("_image.json")] for p in d.glob("*_image.json"))
    if not ids:
        raise VolumeError(f"no *_image.json volumes in {d}")
    return ids


def load_dataset(data_dir) -> list[LabeledVolume]:
    d = Path(data_dir)
    out = []
    for cid in find_cases(d):
        regions = d / f"{cid}_regions.json"
        out.append(LabeledVolume(
            image=load_volume(d / f"{cid}_image.json"),
            mask=load_volume(d / f"{cid}_mask.json", kind="label"),
            regions=load_volume(regions) if regions.exists() else None,
            source_id=cid,
        ))
    return out


def _mask_ratio(mask: np.ndarray) -> float:
    fg = float(np.count_nonzero(mask))
    return fg / max(mask.size - fg, 1.0)


# ---------------------------------------------------------------- commands

def cmd_phantom(args) -> int:
    out = Path(args.out)
    ratios, files = [], []
    for i in range(args.count):
        seed = args.seed + i
        spec = PhantomSpec(grid_size=tuple(int(g) for g in args.grid), tube_radii=tuple(args.tube_radii),
                           tube_count=args.tube_count, blur_sigma=args.blur, noise_std=args.noise,
                           seed=seed, curved=not args.straight)
        try:
            lv = make_phantom(spec)
        except ValueError as exc:
            raise ConfigError(f"invalid phantom spec: {exc}") from None
        cid = f"phantom{seed:04d}"
        files.append(str(write_volume(out / f"{cid}_image", lv.image)))
        files.append(str(write_volume(out / f"{cid}_mask", lv.mask)))
        files.append(str(write_volume(out / f"{cid}_regions", lv.regions)))
        ratios.append(_mask_ratio(lv.mask.data))
    _emit({"files": files, "mean_fg_ratio": float(np.mean(ratios))})
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = resolve(args)
    if not cfg["data_dir"] or not cfg["out_dir"]:
        raise ConfigError("preprocess needs --data and --out")
    src, dst = Path(cfg["data_dir"]), Path(cfg["out_dir"])
    spacing = cfg["target_spacing"]
    for cid in find_cases(src):
        img = load_volume(src / f"{cid}_image.json")
        if spacing is not None:
            img = resample(img, spacing)
        write_volume(dst / f"{cid}_image", normalize(img))
        for part in ("mask", "regions"):
            p = src / f"{cid}_{part}.json"
            if p.exists():
                v = load_volume(p)
                if spacing is not None:
                    v = resample(v, spacing, kind="label")
                write_volume(dst / f"{cid}_{part}", v)
    _emit({"cases": len(find_cases(src)), "out": str(dst)})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve(args)
    tc = train_config(cfg)
    data = cfg["data_dir"]
    out = cfg["out_dir"]
    if not data or not out:
        raise ConfigError("train needs data_dir (--data-dir) and out_dir (--out-dir)")
    dataset = load_dataset(data)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is None and log_path.exists():
        log_path.unlink()
    (out / "config.json").write_text(json.dumps({**tc.to_dict(), "data_dir": str(data), "out_dir": str(out)},
                                                indent=1, sort_keys=True))
    res = train(dataset, tc, log_path=log_path, resume=resume)
    ckpt = save_checkpoint(out / "model.ckpt", res.checkpoint)
    last = res.history[-1] if res.history else {}
    _emit({"checkpoint": str(ckpt), "epochs": tc.epochs, "final": last})
    return EXIT_OK


def _load_model(cfg):
    if not cfg["checkpoint"]:
        raise ConfigError("a checkpoint is required (--checkpoint)")
    ck = load_checkpoint(cfg["checkpoint"])
    return ck, ck.build_model()


def _input_volume(path, tc: TrainConfig) -> Volume:
    v = load_volume(path)
    if tc.target_spacing is not None:
        v = resample(v, tc.target_spacing)
    return normalize(v)


def cmd_predict(args) -> int:
    cfg = resolve(args)
    ck, model = _load_model(cfg)
    tc = ck.train_config()
    vol = _input_volume(args.image, tc)
    prob = infer_volume(model, vol, tc.crop_size, overlap=cfg["overlap"])
    path = write_volume(args.out, prob)
    _emit({"prediction": str(path), "foreground_voxels": int(np.count_nonzero(prob.data >= 0.5))})
    return EXIT_OK


def cmd_uq(args) -> int:
    cfg = resolve(args)
    ck, model = _load_model(cfg)
    tc = ck.train_config()
    vol = _input_volume(args.image, tc)
    n = cfg["uq_n"]
    ens = mc_predict(model, vol, n=n, seed=args.seed, crop_size=tc.crop_size, overlap=cfg["overlap"])
    u = confidence_bounds(ens, cfg["bounds_method"])
    log.info("uncertainty from %d posterior samples (seed %d)", ens.n, ens.seed)
    paths = [str(p) for p in write_uncertainty(u, args.out)]
    summary = {"members": ens.n, "method": cfg["bounds_method"], "files": paths,
               "mean_width": float(u.width.data.mean())}
    if args.mesh:
        mesh = export_surface(u.mean, args.level, args.mesh)
        summary["mesh"] = {"path": args.mesh, "vertices": len(mesh.vertices), "faces": len(mesh.faces)}
    _emit(summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    preds, gts = args.pred, args.gt
    regions = args.regions or []
    if len(preds) != len(gts) or (regions and len(regions) != len(gts)):
        raise ConfigError("--pred, --gt and --regions need the same number of entries")
    reports = []
    for i, (pp, gp) in enumerate(zip(preds, gts)):
        pred, gt = load_volume(pp), load_volume(gp, kind="label")
        sid = Path(pp).stem
        reports.append(evaluate(pred, gt, threshold=args.threshold, region="whole", source_id=sid))
        if regions:
            tags = load_volume(regions[i]).data
            for name, tag in (("SA", REGION_SA), ("MA", REGION_MA)):
                if np.any(tags == tag):
                    reports.append(evaluate(pred, gt, tags == tag, args.threshold, region=name, source_id=sid))
    write_reports(reports, args.json, args.csv)
    _emit([r.to_dict() for r in reports])
    return EXIT_OK


def cmd_plot(args) -> int:
    parts = {name: load_volume(f"{args.uq}_{name}.json") for name in ("mean", "lower", "upper", "width")}
    u = UncertaintyMap(**parts)
    image = load_volume(args.image) if args.image else None
    gt = load_volume(args.gt, kind="label") if args.gt else None
    out = plot_slices(u, args.out, image=image, gt=gt, axis=args.axis, n_slices=args.slices)
    _emit({"files": [str(p) for p in out]})
    return EXIT_OK


def cmd_dump_kernels(args) -> int:
    cfg = resolve(args)
    if cfg["checkpoint"]:
        _, model = _load_model(cfg)
        kernels = []
        for vk in model.log_stream.layers:
            sigma = float(vk.log_sigma.exp()) if vk.trainable_sigma else vk.init_sigma
            kernels.append(LoGKernel(vk.size, sigma, vk.mu.detach().double().numpy()))
    else:
        kernels = make_bank()
    path = dump_kernels(kernels, args.out)
    _emit({"kernels": str(path), "sums": [float(k.weights.sum()) for k in kernels]})
    return EXIT_OK


def cmd_gate_stats(args) -> int:
    """Mean foreground-to-background ratio over training crops (the gate threshold estimate)."""
    cfg = resolve(args)
    data = cfg["data_dir"]
    if not data:
        raise ConfigError("gate-stats needs --data-dir")
    ratios = []
    for lv in load_dataset(data):
        mask = lv.mask
        if args.region == "sa":
            if lv.regions is None:
                raise VolumeError(f"{lv.source_id}: no region volume for --region sa")
            sa = lv.regions.data == REGION_SA
            mask = mask.like((mask.data > 0) & sa)
            keep = [c for c, r in zip(crop_blocks(mask, mask, cfg["crop_size"]),
                                      crop_blocks(lv.regions.like(sa.astype(np.float32)), None, cfg["crop_size"]))
                    if r.image.data.any()]
        else:
            keep = crop_blocks(mask, mask, cfg["crop_size"])
        for c in keep:
            if not np.all(c.mask.data > 0):
                ratios.append(fg_ratio(c.mask))
    if not ratios:
        raise VolumeError("no usable crops for the foreground ratio statistic")
    _emit({"mu": float(np.mean(ratios)), "crops": len(ratios), "region": args.region})
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _key_listing() -> str:
    lines = ["config keys (JSON --config file; flags override):"]
    for k, v in ALL_KEYS.items():
        lines.append(f"  {k} = {v!r}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="torch thread cap (env LOGBSEG_THREADS); 1 gives bit-identical reruns")
    common.add_argument("--config", default=None, help="JSON RunConfig file")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="logbseg", description="Dual-stream tube segmentation toolkit.",
                                epilog=_key_listing(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--threads", type=int, default=None, help="torch thread cap (env LOGBSEG_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, parents=[common], help=help, description=help, epilog=_key_listing(),
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.set_defaults(func=fn)
        return sp

    sp = add("phantom", cmd_phantom, "generate synthetic tube phantoms (image, mask, region tags)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--grid", type=_triple, default=[64, 64, 64], metavar="X,Y,Z")
    sp.add_argument("--tube-radii", type=_floats, default=[1.0, 2.0, 4.0, 8.0])
    sp.add_argument("--tube-count", type=int, default=4)
    sp.add_argument("--blur", type=float, default=1.0)
    sp.add_argument("--noise", type=float, default=0.05)
    sp.add_argument("--straight", action="store_true", help="straight centerlines only")

    sp = add("preprocess", cmd_preprocess, "resample and normalize a data directory")
    _add_key(sp, "data_dir", "--data")
    _add_key(sp, "out_dir", "--out")
    _add_key(sp, "target_spacing")

    sp = add("train", cmd_train, "train a model on a data directory")
    sp.add_argument("--resume", default=None, help="checkpoint to continue from")
    for k in ALL_KEYS:
        if k in ("checkpoint", "uq_n", "bounds_method", "overlap"):
            continue
        _add_key(sp, k, *{"gate_mu": ("--mu",), "data_dir": ("--data",), "out_dir": ("--out",)}.get(k, ()))

    sp = add("predict", cmd_predict, "sliding-window posterior-mean prediction")
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True, help="output volume path")
    _add_key(sp, "checkpoint")
    _add_key(sp, "overlap")

    sp = add("uq", cmd_uq, "Monte-Carlo uncertainty volumes and optional surface mesh")
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True, help="output prefix for _mean/_lower/_upper/_width")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--mesh", default=None, help="OBJ path for the mean-probability isosurface")
    sp.add_argument("--level", type=float, default=0.5)
    _add_key(sp, "checkpoint")
    _add_key(sp, "uq_n", "--n")
    _add_key(sp, "bounds_method", "--method")
    _add_key(sp, "overlap")

    sp = add("eval", cmd_eval, "Dice, ASD and Hausdorff per volume and region")
    sp.add_argument("--pred", nargs="+", required=True)
    sp.add_argument("--gt", nargs="+", required=True)
    sp.add_argument("--regions", nargs="+", default=None)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--json", required=True)
    sp.add_argument("--csv", default=None)

    sp = add("plot", cmd_plot, "slice PNGs of the uncertainty bounds")
    sp.add_argument("--uq", required=True, help="prefix written by the uq command")
    sp.add_argument("--out", required=True)
    sp.add_argument("--image", default=None)
    sp.add_argument("--gt", default=None)
    sp.add_argument("--axis", type=int, default=2)
    sp.add_argument("--slices", type=int, default=4)

    sp = add("dump-kernels", cmd_dump_kernels, "write the five LoG kernels as JSON")
    sp.add_argument("--out", required=True)
    _add_key(sp, "checkpoint")

    sp = add("gate-stats", cmd_gate_stats, "mean foreground ratio over crops (estimate for --mu)")
    sp.add_argument("--region", choices=("all", "sa"), default="all")
    _add_key(sp, "data_dir", "--data")
    _add_key(sp, "crop_size")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        set_threads(args.threads)
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, VolumeError, CheckpointError, PhantomError, MetricError, UQError,
            GateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
