"""Command-line entry point: ``splatdenoise <subcommand> [flags]``.

Exit status is 0 on success, 1 for usage errors (bad flags, unknown or
malformed config keys, missing files) and 2 when a run fails at runtime.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import ConfigError, TrainConfig
from .gaussian import Camera, Scene
from .io import (FormatError, load_cameras, load_ply, load_ppm, save_cameras,
                 save_ply, save_ppm, save_state)
from .lifecycle import FisherAccumulator, fisher_accumulate, prune_uncertain, uncertainty_scores
from .renderer import render
from .synthetic import SyntheticData, split_views, synthesize
from .trainer import TrainingDiverged, evaluate, format_metrics_csv, train

log = logging.getLogger("splatdenoise")

THREADS_ENV = "SPLATDENOISE_THREADS"
MANIFEST = "manifest.cfg"

# short ablation axis names and the config keys they sweep
AXES = {
    "alpha": "explore.alpha",
    "beta1": "explore.beta1",
    "beta2": "explore.beta2",
    "tau": "explore.tau",
    "sign": "explore.denoise_sign",
    "prune": "lifecycle.prune_fraction",
    "densify": "lifecycle.densify_fraction",
}
STAGES = ("exploration", "relocation", "pruning", "refinement")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'section.key = value' config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable, applied after --config")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")
    common.add_argument("--threads", type=int,
                        help=f"render threads (default: ${THREADS_ENV} or all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="splatdenoise", description="Denoising Gaussian-splat trainer.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic scene and its views")
    s.add_argument("--spec", default="default",
                   help="'default' (synth.* keys) or a config file whose synth.* keys are used")

    sub.add_parser("train", parents=[common], help="optimize a scene")

    r = sub.add_parser("render", parents=[common], help="render a scene from cameras")
    r.add_argument("--scene", required=True, help="PLY scene")
    r.add_argument("--cameras", required=True, help="cameras JSON")
    r.add_argument("--bits", type=int, choices=(8, 16), default=8)

    e = sub.add_parser("eval", parents=[common], help="PSNR/SSIM of a scene against a data dir")
    e.add_argument("--scene", required=True)
    e.add_argument("--views", choices=("holdout", "train", "all"), default="holdout")

    pr = sub.add_parser("prune", parents=[common], help="uncertainty-prune a scene")
    pr.add_argument("--scene", required=True)
    pr.add_argument("--fraction", type=float, help="default: lifecycle.prune_fraction")

    a = sub.add_parser("ablate", parents=[common], help="sweep one axis, one training run per value")
    a.add_argument("--axis", required=True,
                   help=f"one of {', '.join(list(AXES) + ['stages'])} or a full config key")
    a.add_argument("--values", required=True,
                   help="comma-separated values; for 'stages' use '+'-joined stage names, "
                        "'none' or 'full'")
    return p


def _resolve_threads(requested: int | None) -> int:
    import numba

    if requested is None:
        env = os.environ.get(THREADS_ENV)
        if env is None:
            return numba.config.NUMBA_NUM_THREADS
        try:
            requested = int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if requested < 1:
        raise UsageError("--threads must be at least 1")
    n = min(requested, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    return n


def _load_config(args, extra: list[str] = ()) -> TrainConfig:
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    return config_mod.load(args.config, overrides + list(extra))


# -- data directories ------------------------------------------------------

def write_data(out: Path, data: SyntheticData) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_ply(out / "ground_truth.ply", data.ground_truth)
    save_ply(out / "init.ply", data.init)
    save_cameras(out / "cameras.json", data.cameras)
    # exact targets for training; PPMs are for viewing
    np.save(out / "targets.npy", np.stack(data.targets))
    for i, img in enumerate(data.targets):
        save_ppm(out / f"target_{i:03d}.ppm", img, bits=16)


def read_data(path: Path, seed: int = 0) -> tuple[Scene, list[Camera], list[np.ndarray]]:
    for name in ("init.ply", "cameras.json"):
        if not (path / name).is_file():
            raise UsageError(f"data directory {path} has no {name}")
    cams = load_cameras(path / "cameras.json")
    if (path / "targets.npy").is_file():
        targets = list(np.load(path / "targets.npy"))
    else:
        targets = [load_ppm(path / f"target_{i:03d}.ppm") for i in range(len(cams))]
    if len(targets) != len(cams):
        raise FormatError(f"{path}: {len(cams)} cameras but {len(targets)} targets")
    return load_ply(path / "init.ply", rng_seed=seed), cams, targets


def scene_data(cfg: TrainConfig) -> tuple[Scene, list[Camera], list[np.ndarray]]:
    if cfg.data:
        return read_data(Path(cfg.data), cfg.seed)
    d = synthesize(cfg.synth, cfg.background)
    d.init.rng_seed = cfg.seed
    return d.init, d.cameras, d.targets


# -- subcommands -----------------------------------------------------------

def write_manifest(out: Path, cfg: TrainConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / MANIFEST).write_text("# resolved configuration; rerun with --config " + MANIFEST + "\n"
                                + config_mod.dumps(cfg))


def run_training(cfg: TrainConfig, out: Path) -> dict:
    """One full training run writing every artifact into ``out``; returns the last metric row."""
    write_manifest(out, cfg)
    init, cams, targets = scene_data(cfg)
    train_idx, test_idx = split_views(len(cams))
    if not test_idx or len(train_idx) < 2:
        raise UsageError("need at least three views (every 8th is held out)")
    holdout = ([cams[i] for i in test_idx], [targets[i] for i in test_idx])
    try:
        result = train(init, [cams[i] for i in train_idx], [targets[i] for i in train_idx], cfg,
                       holdout=holdout)
    except TrainingDiverged as exc:
        save_ply(out / "checkpoint.ply", exc.checkpoint)
        raise
    save_ply(out / "checkpoint.ply", result.scene)
    save_state(out / "checkpoint.state.json", result.state, result.scene)
    (out / "metrics.csv").write_text(format_metrics_csv(result.metrics))
    (out / "mutations.ndjson").write_text("".join(json.dumps(m) + "\n" for m in result.mutations))
    for cam, i in zip(holdout[0], test_idx):
        save_ppm(out / f"holdout_{i:03d}.ppm", render(result.scene, cam, cfg.background).rgb)
    return result.metrics[-1]


def cmd_synth(args) -> None:
    if args.spec == "default":
        cfg = _load_config(args)
    else:
        if not Path(args.spec).is_file():
            raise UsageError(f"--spec must be 'default' or a config file, got {args.spec!r}")
        cfg = config_mod.load(args.spec, args.overrides)
    spec = cfg.synth if args.seed is None else dataclasses.replace(cfg.synth, seed=args.seed)
    out = Path(args.out)
    write_data(out, synthesize(spec, cfg.background))
    write_manifest(out, dataclasses.replace(cfg, synth=spec))
    print(f"wrote synthetic scene to {out}")


def cmd_train(args) -> None:
    cfg = _load_config(args)
    out = Path(args.out)
    row = run_training(cfg, out)
    print(f"holdout psnr {row['psnr']:.3f} ssim {row['ssim']:.4f} primitives {row['primitive_count']}")


def cmd_render(args) -> None:
    cfg = _load_config(args)
    for p in (args.scene, args.cameras):
        if not Path(p).is_file():
            raise UsageError(f"file not found: {p}")
    scene = load_ply(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(load_cameras(args.cameras)):
        save_ppm(out / f"render_{i:03d}.ppm", render(scene, cam, cfg.background).rgb, bits=args.bits)
    print(f"rendered to {out}")


def _select_views(cfg: TrainConfig, which: str):
    if not cfg.data:
        raise UsageError("set train.data (for example --set train.data=DIR) to a synth output")
    _, cams, targets = read_data(Path(cfg.data), cfg.seed)
    train_idx, test_idx = split_views(len(cams))
    idx = {"holdout": test_idx, "train": train_idx, "all": list(range(len(cams)))}[which]
    return idx, [cams[i] for i in idx], [targets[i] for i in idx]


def cmd_eval(args) -> None:
    cfg = _load_config(args)
    if not Path(args.scene).is_file():
        raise UsageError(f"file not found: {args.scene}")
    idx, cams, targets = _select_views(cfg, args.views)
    report = evaluate(load_ply(args.scene), cams, targets, cfg.background)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["view", "psnr", "ssim"])
    for i, p, s in zip(idx, report.psnr, report.ssim):
        w.writerow([i, repr(p), repr(s)])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.csv").write_text(buf.getvalue())
    print(f"mean psnr {report.mean_psnr:.3f} ssim {report.mean_ssim:.4f} over {len(idx)} views")


def cmd_prune(args) -> None:
    cfg = _load_config(args)
    if not Path(args.scene).is_file():
        raise UsageError(f"file not found: {args.scene}")
    fraction = cfg.lifecycle.prune_fraction if args.fraction is None else args.fraction
    if not 0.0 <= fraction < 1.0:
        raise UsageError("--fraction must lie in [0, 1)")
    scene = load_ply(args.scene)
    _, cams, targets = _select_views(cfg, "train")
    acc = fisher_accumulate(FisherAccumulator.zeros(len(scene)), scene, cams, targets, cfg.background)
    scores = uncertainty_scores(acc)
    pruned, removed = prune_uncertain(scene, scores, fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_ply(out / "pruned.ply", pruned)
    (out / "pruned.ndjson").write_text("".join(
        json.dumps({"event": "prune", "primitive": int(r), "score": float(scores[r])}) + "\n"
        for r in removed))
    print(f"removed {len(removed)} of {len(scene)} primitives")


def ablation_overrides(axis: str, value: str) -> list[str]:
    """Config overrides for one ablation point."""
    if axis == "stages":
        if value in ("none", "baseline"):
            enabled = set()
        elif value in ("full", "all"):
            enabled = set(STAGES)
        else:
            enabled = set(value.split("+"))
            unknown = enabled - set(STAGES)
            if unknown:
                raise UsageError(f"unknown stage(s) {sorted(unknown)}; choose from {STAGES}")
        return [f"stages.{s}={'true' if s in enabled else 'false'}" for s in STAGES]
    key = AXES.get(axis, axis)
    if "." not in key:
        raise UsageError(f"unknown ablation axis {axis!r}")
    return [f"{key}={value}"]


def cmd_ablate(args) -> None:
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values is empty")
    # resolve every configuration first so a bad value fails before any training
    configs = [(v, _load_config(args, ablation_overrides(args.axis, v))) for v in values]
    out = Path(args.out)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "value", "psnr", "ssim", "primitive_count", "total", "run_dir"])
    for value, cfg in configs:
        run_dir = out / f"{args.axis}={value}"
        row = run_training(cfg, run_dir)
        w.writerow([args.axis, value, repr(row["psnr"]), repr(row["ssim"]), row["primitive_count"],
                    repr(row["total"]), run_dir.name])
        print(f"{args.axis}={value}: psnr {row['psnr']:.3f}")
    (out / "ablation.csv").write_text(buf.getvalue())


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "eval": cmd_eval,
            "prune": cmd_prune, "ablate": cmd_ablate}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _resolve_threads(args.threads)
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, FormatError, RuntimeError, ValueError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
