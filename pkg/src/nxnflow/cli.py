"""Command-line entry point: train, eval, sample, verify.

All randomness flows from a single seed; subsystems get labeled child
streams. Output files are written atomically (temp + rename). The
NXNFLOW_THREADS environment variable caps worker parallelism (evaluation
here is sequential, which respects any cap).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checkpoint as ckpt_io
from . import data as data_io
from .config import RunConfig, model_config_from_text, parse_kv_lines
from .errors import ConfigError, DataError, FormatError, NumericError, NxnFlowError
from .model import MultiScaleModel, bits_per_dim
from .suites import SUITES, run_suites
from .tensor import Rng
from .training import METRICS_HEADER, TrainConfig, evaluate_nll, train
from .model import ModelConfig


def worker_cap() -> int:
    raw = os.environ.get("NXNFLOW_THREADS", "")
    if not raw:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"NXNFLOW_THREADS must be an integer, got {raw!r}")
    if value < 1:
        raise ConfigError("NXNFLOW_THREADS must be >= 1")
    return value


def _build_model(cfg: ModelConfig, seed: int) -> MultiScaleModel:
    return MultiScaleModel(cfg, Rng(seed).child("model_init"))


def _load_train_data(run: RunConfig, model_cfg: ModelConfig, seed: int) -> np.ndarray:
    kind = run["data.kind"]
    rng = Rng(seed).child("data")
    if model_cfg.mode == "rank2":
        if kind in data_io.GENERATORS_2D:
            return data_io.gen_2d(kind, run["data.n"], rng).points
        if kind == "csv":
            pts = data_io.load_points_csv(run["data.path"])
            if pts.shape[1] != model_cfg.dim:
                raise ConfigError(f"csv dimension {pts.shape[1]} != model dim {model_cfg.dim}")
            return pts
        raise ConfigError(f"data.kind {kind!r} is not valid for rank2 mode")
    if kind == "textures":
        if model_cfg.height != model_cfg.width:
            raise ConfigError("textures generator needs square images")
        ds = data_io.gen_textures(run["data.n"], model_cfg.channels,
                                  model_cfg.height, model_cfg.bits, rng)
    elif kind == "nxni":
        if not run["data.path"]:
            raise ConfigError("data.kind = nxni requires data.path")
        ds = data_io.load_images(run["data.path"])
    else:
        raise ConfigError(f"data.kind {kind!r} is not valid for image mode")
    if ds.images.shape[1:] != (model_cfg.channels, model_cfg.height, model_cfg.width):
        raise ConfigError(f"dataset shape {ds.images.shape[1:]} does not match model config")
    if ds.bits != model_cfg.bits:
        raise ConfigError(f"dataset bit depth {ds.bits} != model.bits {model_cfg.bits}")
    return ds.images


def _run_config_from_args(args) -> RunConfig:
    run = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    run.update(overrides)
    return run


def cmd_train(args) -> int:
    run = _run_config_from_args(args)
    model_cfg = run.model_config()
    train_cfg = run.train_config()
    data = _load_train_data(run, model_cfg, train_cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.nxnf")
    metrics_path = os.path.join(args.out, "metrics.csv")

    model = _build_model(model_cfg, train_cfg.seed)
    resume = None
    if args.resume:
        loaded = ckpt_io.load(args.resume)
        ckpt_io.restore_model(loaded, model)
        if loaded.adam_t is None:
            raise ConfigError("checkpoint has no optimizer state; cannot resume")
        resume = (loaded.step,
                  {"t": loaded.adam_t, "m": loaded.adam_m, "v": loaded.adam_v},
                  __import__("json").loads(loaded.rng_state))

    def on_checkpoint(step, opt, rng_states):
        import json
        snapshot = ckpt_io.Checkpoint(
            config_text=model_cfg.to_text(),
            step=step,
            params=ckpt_io.snapshot_params(model),
            adam_t=opt.t,
            adam_m={k: v.copy() for k, v in opt.m.items()},
            adam_v={k: v.copy() for k, v in opt.v.items()},
            rng_state=json.dumps(rng_states, sort_keys=True),
        )
        ckpt_io.save(snapshot, ckpt_path)

    new_log = resume is None or not os.path.exists(metrics_path)
    with open(metrics_path, "a" if not new_log else "w", encoding="utf-8") as f:
        if new_log:
            f.write(METRICS_HEADER + "\n")

        def log(row):
            f.write(row.csv() + "\n")

        train(model, data, train_cfg, on_checkpoint=on_checkpoint, log=log,
              resume=resume)
    print(f"trained {train_cfg.steps} steps; checkpoint: {ckpt_path}")
    return 0


def _model_from_checkpoint(path):
    loaded = ckpt_io.load(path)
    model_cfg = model_config_from_text(loaded.config_text)
    model = _build_model(model_cfg, 0)
    ckpt_io.restore_model(loaded, model)
    return model, model_cfg, loaded


def _load_eval_data(spec: str, model_cfg: ModelConfig, seed: int, n: int):
    if model_cfg.mode == "rank2":
        if spec in data_io.GENERATORS_2D:
            return data_io.gen_2d(spec, n, Rng(seed).child("data")).points
        return data_io.load_points_csv(spec)
    if spec == "textures":
        return data_io.gen_textures(n, model_cfg.channels, model_cfg.height,
                                    model_cfg.bits, Rng(seed).child("data")).images
    ds = data_io.load_images(spec)
    if ds.images.shape[1:] != (model_cfg.channels, model_cfg.height, model_cfg.width):
        raise ConfigError(f"dataset shape {ds.images.shape[1:]} does not match checkpoint")
    if ds.bits != model_cfg.bits:
        raise ConfigError(f"dataset bit depth {ds.bits} != model.bits {model_cfg.bits}")
    return ds.images


def cmd_eval(args) -> int:
    model, model_cfg, _ = _model_from_checkpoint(args.checkpoint)
    data = _load_eval_data(args.data, model_cfg, args.seed, args.n)
    nll = evaluate_nll(model, data, model_cfg.bits, args.seed)
    bits = model_cfg.bits if model_cfg.mode == "image" else 0
    bpd = bits_per_dim(nll, model_cfg.input_dims(), bits)
    print(f"nll_nats={nll:.6f} bpd={bpd:.6f}")
    if args.out:
        ckpt_io.write_atomic(args.out, f"nll_nats,bpd\n{nll:.6f},{bpd:.6f}\n".encode())
    return 0


def cmd_sample(args) -> int:
    model, model_cfg, _ = _model_from_checkpoint(args.checkpoint)
    rng = Rng(args.seed).child("sample")
    x = model.sample(args.n, args.temperature, rng)
    if model_cfg.mode == "rank2":
        data_io.save_points_csv(x, args.out)
    else:
        levels = 1 << model_cfg.bits
        ints = np.clip(np.floor(x * levels), 0, levels - 1).astype(np.uint8)
        ds = data_io.ImageDataset(images=ints, bits=model_cfg.bits)
        data_io.save_images(ds, args.out)
        data_io.save_ppm_montage(ints, model_cfg.bits, str(args.out) + ".ppm")
    print(f"wrote {args.n} samples to {args.out}")
    return 0


def cmd_verify(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    results = run_suites(names, args.seed)
    lines = [r.line() for r in results]
    report = "\n".join(lines) + "\n"
    sys.stdout.write(report)
    if args.out:
        ckpt_io.write_atomic(args.out, report.encode())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nxnflow",
                                     description="invertible n x n convolution flows")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="mean NLL and bits/dim over a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True,
                   help="NXNI/CSV path or a 2D generator name")
    p.add_argument("--n", type=int, default=4096, help="generator sample count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional CSV output path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True,
                   help="NXNI path (image mode, + .ppm montage) or CSV (rank2)")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("verify", help="run the numerical oracle suites")
    p.add_argument("--suite", choices=list(SUITES) + ["all"], default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional report output path")
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    worker_cap()  # validate NXNFLOW_THREADS before doing any work
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, FormatError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 4
    except NxnFlowError as e:
        print(f"error: {e}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    raise SystemExit(main())
