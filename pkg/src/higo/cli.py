"""Command-line entry point: ``higo generate | train | evaluate``.

Exit codes: 0 success, 2 configuration error, 3 training failure,
4 checkpoint/cube dimension mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .datagen import (GROUP_NAMES, ConfigError, CubeFormatError, GeneratorConfig,
                      class_prevalence, generate_synthetic, read_cube, write_cube)
from .metrics import write_metrics_csv
from .odeint import SolverConfig
from .trainer import (DAYS_PER_STEP, CheckpointError, TrainConfig, TrainingError, best_model,
                      evaluate, load_checkpoint, save_checkpoint, split_train_val, train,
                      write_history_csv)

log = logging.getLogger("higo")

EXIT_OK, EXIT_CONFIG, EXIT_TRAIN, EXIT_MISMATCH = 0, 2, 3, 4
CONFIG_SECTIONS = {"generator": GeneratorConfig, "train": TrainConfig}


class UsageError(Exception):
    """Bad configuration or arguments (exit code 2)."""


class MismatchError(Exception):
    """Checkpoint and cube disagree on dimensions (exit code 4)."""


def load_run_config(path) -> dict:
    """Read a JSON run config with optional ``generator``, ``train``, ``out`` keys."""
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    unknown = set(cfg) - set(CONFIG_SECTIONS) - {"out"}
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}")
    for sec, cls in CONFIG_SECTIONS.items():
        allowed = {f.name for f in fields(cls)}
        bad = set(cfg.get(sec, {})) - allowed
        if bad:
            raise UsageError(f"unknown keys in '{sec}': {sorted(bad)}")
    return cfg


def _parse_list(text: str, cast=float) -> list:
    try:
        return [cast(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"cannot parse list {text!r}") from exc


def _parse_levels(text: str) -> list[int]:
    """``3``, ``1,2,3`` or ``1..3``."""
    try:
        if ".." in text:
            a, b = text.split("..")
            return list(range(int(a), int(b) + 1))
        return [int(x) for x in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"cannot parse levels {text!r}") from exc


def _groups(text: str | None) -> tuple:
    if not text:
        return ()
    g = tuple(x.strip() for x in text.split(",") if x.strip())
    bad = set(g) - set(GROUP_NAMES)
    if bad:
        raise UsageError(f"unknown groups {sorted(bad)}; valid: {', '.join(GROUP_NAMES)}")
    return g


def _out_dir(args, run_cfg) -> Path:
    out = Path(args.out or run_cfg.get("out") or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands

def cmd_generate(args, run_cfg) -> int:
    opts = dict(run_cfg.get("generator", {}))
    for key in ("H", "W", "C_x", "C_z", "steps", "K", "levels"):
        val = getattr(args, key.lower())
        if val is not None:
            opts[key] = val
    if args.seed is not None:
        opts["seed"] = args.seed
    try:
        gcfg = GeneratorConfig(**opts)
        gcfg.validate()
    except (TypeError, ConfigError) as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(args, run_cfg)
    cube = generate_synthetic(gcfg)
    path = out / args.name
    write_cube(path, cube)
    n_train = int(len(cube) * gcfg.train_fraction)
    stats = {
        "n_samples": len(cube),
        "n_train": n_train,
        "K": cube.K,
        "prevalence": class_prevalence(cube.samples, cube.K),
        "train_prevalence": class_prevalence(cube.samples[:n_train], cube.K),
        "fire_fraction": float(np.mean([np.mean(s.ba > 0) for s in cube.samples])),
        "boundaries": list(cube.quantizer.boundaries) if cube.quantizer else None,
    }
    Path(str(path) + ".stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    print(f"wrote {path} ({len(cube)} samples, {cube.shape[0]}x{cube.shape[1]}, K={cube.K})")
    return EXIT_OK


def _train_config(args, run_cfg) -> TrainConfig:
    opts = dict(run_cfg.get("train", {}))
    mapping = {"epochs": "epochs", "lr": "lr", "batch": "batch", "horizon": "horizon_steps",
               "dim": "D", "mp_mode": "mp_mode", "seed": "seed"}
    for arg, key in mapping.items():
        val = getattr(args, arg)
        if val is not None:
            opts[key] = val
    if args.mask:
        opts["driver_mask"] = _groups(args.mask)
    if args.rk4_steps is not None:
        opts["solver"] = {"method": "rk4", "rk4_steps_per_unit": args.rk4_steps}
    try:
        cfg = TrainConfig(**opts)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _read_cube(path):
    try:
        return read_cube(path)
    except (OSError, CubeFormatError) as exc:
        raise UsageError(f"cannot read cube {path}: {exc}") from exc


def cmd_train(args, run_cfg) -> int:
    base = _train_config(args, run_cfg)
    out = _out_dir(args, run_cfg)
    cube = _read_cube(args.cube or out / "cube.hgc")
    levels = _parse_levels(args.levels) if args.levels else [base.L]
    for L in levels:
        cfg = TrainConfig(**{**base.to_dict(), "L": L})
        dest = out / f"L{L}" if len(levels) > 1 else out
        dest.mkdir(parents=True, exist_ok=True)
        ckpt = dest / "checkpoint.hgk"
        state = None
        if args.resume:
            try:
                state = load_checkpoint(args.resume)
            except (OSError, CheckpointError) as exc:
                raise UsageError(f"cannot resume from {args.resume}: {exc}") from exc
            cfg = state.config
        try:
            state = train(cube, cfg, state=state, checkpoint_path=ckpt, log=log.info)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        write_history_csv(dest / "history.csv", state.history)
        save_checkpoint(ckpt, state)
        best = "n/a" if state.best_val is None else f"{state.best_val:.4f}"
        print(f"L={L}: {state.epoch} epochs, best val AUPRC {best} at epoch {state.best_epoch} "
              f"-> {ckpt}")
    return EXIT_OK


def _check_dims(model, cube):
    mc = model.cfg
    H, W = cube.shape
    got = (H, W, len(cube.channel_names), cube.samples[0].indices.shape[0], cube.K)
    want = (mc.H, mc.W, mc.C_x, mc.C_z, mc.K)
    if got != want:
        raise MismatchError(f"cube (H, W, C_x, C_z, K)={got} but checkpoint expects {want}")


def cmd_evaluate(args, run_cfg) -> int:
    out = _out_dir(args, run_cfg)
    try:
        state = load_checkpoint(args.checkpoint or out / "checkpoint.hgk")
    except (OSError, CheckpointError) as exc:
        raise UsageError(f"cannot load checkpoint: {exc}") from exc
    cube = _read_cube(args.cube or out / "cube.hgc")
    model = best_model(state)
    _check_dims(model, cube)
    horizons = _parse_list(args.horizons) if args.horizons else \
        [state.config.horizon_steps * DAYS_PER_STEP]
    tr, va, te = split_train_val(cube, state.config.val_fraction)
    samples = {"test": te, "val": va, "train": tr}[args.split]
    solver = state.config.eval_solver
    if args.rtol is not None:
        solver = SolverConfig(method="dopri5", rtol=args.rtol, atol=args.rtol)
    mask = _groups(args.mask)
    try:
        res = evaluate(model, samples, horizons, solver, mask=mask,
                       channel_names=cube.channel_names, valid_mask=cube.valid_mask,
                       baselines=tuple(args.baseline or ()))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    name = "metrics.csv" if not mask else f"metrics_mask-{'+'.join(mask)}.csv"
    write_metrics_csv(out / name, res.rows)
    extra = {"f1_fire": {str(k): v for k, v in res.f1_fire.items()},
             "source_times": res.source_times, "split": args.split, "mask": list(mask)}
    (out / (name[:-4] + ".extra.json")).write_text(json.dumps(extra, indent=2, sort_keys=True))
    if args.dump_maps:
        mdir = out / "maps"
        mdir.mkdir(exist_ok=True)
        for h, maps in res.maps.items():
            for t, grid in zip(res.source_times, maps):
                np.savetxt(mdir / f"h{h:g}_t{t}.csv", grid, delimiter=",", fmt="%.17g")
    for h, m, v in res.rows:
        print(f"horizon {h:g}d {m}: {'n/a' if v is None else f'{v:.4f}'}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="higo", description=__doc__, formatter_class=fmt)
    p.add_argument("--config", help="JSON run config with 'generator', 'train', 'out' sections")
    p.add_argument("--seed", type=int, default=None, help="seed for generation/training")
    p.add_argument("--out", default=None, help="output directory (default: config 'out' or .)")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic HGC1 cube", formatter_class=fmt)
    defaults = GeneratorConfig()
    g.add_argument("--name", default="cube.hgc", help="cube filename inside --out")
    g.add_argument("--steps", type=int, default=None, help=f"time steps (default {defaults.steps})")
    g.add_argument("--h", type=int, default=None, help=f"grid height (default {defaults.H})")
    g.add_argument("--w", type=int, default=None, help=f"grid width (default {defaults.W})")
    g.add_argument("--c-x", dest="c_x", type=int, default=None,
                   help=f"driver channels (default {defaults.C_x})")
    g.add_argument("--c-z", dest="c_z", type=int, default=None,
                   help=f"climate indices (default {defaults.C_z})")
    g.add_argument("--k", type=int, default=None, help=f"burned-area classes (default {defaults.K})")
    g.add_argument("--levels", type=int, default=None,
                   help=f"hierarchy depth the grid must support (default {defaults.levels})")

    t = sub.add_parser("train", help="train a model on a cube", formatter_class=fmt)
    td = TrainConfig()
    t.add_argument("--cube", default=None, help="cube path (default <out>/cube.hgc)")
    t.add_argument("--epochs", type=int, default=None, help=f"epochs (default {td.epochs})")
    t.add_argument("--lr", type=float, default=None, help=f"peak learning rate (default {td.lr})")
    t.add_argument("--batch", type=int, default=None, help=f"batch size (default {td.batch})")
    t.add_argument("--horizon", type=int, default=None,
                   help=f"training horizon in 8-day steps (default {td.horizon_steps})")
    t.add_argument("--dim", type=int, default=None, help=f"hidden size D (default {td.D})")
    t.add_argument("--levels", default=None,
                   help=f"hierarchy levels: 3, 1,2,3 or 1..3 (sweep) (default {td.L})")
    t.add_argument("--mp-mode", dest="mp_mode", choices=["adaptive", "mean"], default=None,
                   help="message passing: learned softmax or uniform mean (default adaptive)")
    t.add_argument("--mask", default=None, help="comma-separated driver groups to zero")
    t.add_argument("--rk4-steps", dest="rk4_steps", type=int, default=None,
                   help="RK4 steps per 8-day unit during training (default 4)")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")

    e = sub.add_parser("evaluate", help="score a checkpoint at one or more horizons",
                       formatter_class=fmt)
    e.add_argument("--checkpoint", default=None, help="checkpoint (default <out>/checkpoint.hgk)")
    e.add_argument("--cube", default=None, help="cube path (default <out>/cube.hgc)")
    e.add_argument("--horizons", default=None,
                   help="comma-separated horizons in days, e.g. 8,16,24 (default: training horizon)")
    e.add_argument("--split", choices=["test", "val", "train"], default="test")
    e.add_argument("--baseline", action="append", choices=["persistence", "interp"],
                   help="add baseline rows (repeatable)")
    e.add_argument("--mask", default=None, help="comma-separated driver groups to zero")
    e.add_argument("--rtol", type=float, default=None, help="dopri5 tolerance override")
    e.add_argument("--dump-maps", dest="dump_maps", action="store_true",
                   help="write per-source HxW fire-probability grids as CSV")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    handlers = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate}
    try:
        run_cfg = load_run_config(args.config)
        return handlers[args.command](args, run_cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except MismatchError as exc:
        print(f"dimension mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
