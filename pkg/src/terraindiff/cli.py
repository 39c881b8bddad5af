"""Command-line pipeline: synth, train, infer, stitch, eval, ablate,
schedule-dump.

Every run writes a JSON manifest next to its outputs recording the exact
configuration, seed, input/output paths, wall time, and output checksums.
Config files are flat `key=value` lines with `#` comments; command-line
flags override file values, and the TERRAINDIFF_SEED environment variable
overrides the seed from both.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .ablation import AXES, AblationSpec, run_ablation, write_rows_csv
from .denoiser import ArchSpec, init_model, load_checkpoint, save_checkpoint
from .fgrid import read_fgrid, write_fgrid, write_pgm
from .grid import Grid, Mask, norm_context
from .losses import LossWeights
from .metrics import classification_errors, mad, med, regression_metrics
from .sampling import sample_batch
from .schedule import make_schedule
from .stitching import estimate_runtime, stitch
from .synth import SceneSpec, generate, scene_stats
from .training import DivergenceError, TrainConfig, fit
from .grid import NormContext

EX_OK = 0
EX_USAGE = 2
EX_NOINPUT = 66
EX_SOFTWARE = 70

SEED_ENV = "TERRAINDIFF_SEED"


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def load_config(path: str | Path) -> dict[str, str]:
    """Flat key=value text; '#' starts a comment; last duplicate wins with a
    warning on stderr."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise ValueError(f"{path}:{lineno}: empty key")
            if key in out:
                print(f"warning: {path}:{lineno}: duplicate key {key!r}, last wins", file=sys.stderr)
            out[key] = value.strip()
    return out


_TRAIN_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_ARCH_KEYS = {f.name for f in fields(ArchSpec)}
_LOSS_KEYS = {"lambda1", "lambda2", "lambda_grad", "lambda_c"}


def _coerce(value: str, sample) -> object:
    if isinstance(sample, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(sample, int):
        return int(value)
    if isinstance(sample, float):
        return float(value)
    return value


def build_configs(
    file_map: dict[str, str], overrides: dict[str, object]
) -> tuple[TrainConfig, ArchSpec]:
    """Defaults, then config file, then explicit overrides, then env seed."""
    cfg = TrainConfig()
    arch = ArchSpec()
    weights = LossWeights()
    merged: dict[str, object] = {}
    for key, raw in file_map.items():
        merged[key] = raw
    merged.update({k: v for k, v in overrides.items() if v is not None})
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        merged["seed"] = env_seed

    cfg_updates: dict[str, object] = {}
    arch_updates: dict[str, object] = {}
    loss_updates: dict[str, float] = {}
    for key, value in merged.items():
        if key in _LOSS_KEYS:
            loss_updates[key] = float(value)
        elif key in _ARCH_KEYS:
            arch_updates[key] = _coerce(str(value), getattr(arch, key))
        elif key in _TRAIN_FIELD_TYPES and key not in ("loss_weights", "augment"):
            cfg_updates[key] = _coerce(str(value), getattr(cfg, key))
        else:
            raise ValueError(f"unknown config key {key!r}")
    if loss_updates:
        weights = replace(weights, **loss_updates)
        cfg_updates["loss_weights"] = weights
    if arch_updates:
        arch = replace(arch, **arch_updates)
    if cfg_updates:
        cfg = replace(cfg, **cfg_updates)
    return cfg, arch


# ---------------------------------------------------------------------------
# run manifests
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed: int,
                   inputs: list[str], outputs: list[Path], started: float) -> Path:
    config = {k: v for k, v in config.items() if k != "func"}
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "outputs": {str(p): _sha256(p) for p in outputs},
        "wall_time_s": round(time.time() - started, 3),
    }
    path = out_dir / "run_manifest.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, path)
    return path


def _require(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(p)
    return p


def _prepare_dsm(dsm: Grid) -> tuple[np.ndarray, np.ndarray, NormContext]:
    valid = np.isfinite(dsm.values)
    ctx = norm_context("minmax", dsm.values, None, valid)
    return ctx.apply(np.nan_to_num(dsm.values), valid).astype(np.float32), valid, ctx


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    started = time.time()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    manifest_lines = []
    for i in range(args.count):
        spec = SceneSpec(
            seed=args.seed + i,
            size=args.size,
            pixel_size=args.pixel_size,
            terrain_roughness=args.roughness,
            building_count=args.buildings,
            tree_count=args.trees,
            noise_sigma=args.noise_sigma,
        )
        dsm, dtm, ground = generate(spec)
        names = {}
        for kind, grid in (("dsm", dsm), ("dtm", dtm)):
            path = out_dir / f"scene_{i:04d}_{kind}.fgrid"
            write_fgrid(path, grid)
            outputs.append(path)
            names[kind] = path.name  # relative so the manifest travels with its directory
        gt_path = out_dir / f"scene_{i:04d}_gt.fgrid"
        write_fgrid(gt_path, Grid(ground.bits.astype(np.float32), pixel_size=spec.pixel_size))
        outputs.append(gt_path)
        names["gt_ground"] = gt_path.name
        manifest_lines.append({"index": i, "seed": spec.seed, **names, "stats": scene_stats(dsm, dtm, ground)})
    data_manifest = out_dir / "scenes.jsonl"
    with open(data_manifest, "w") as fh:
        for line in manifest_lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    outputs.append(data_manifest)
    write_manifest(out_dir, "synth", vars(args), args.seed, [], outputs, started)
    print(f"wrote {args.count} scenes to {out_dir}")
    return EX_OK


def _load_scenes(manifest_path: Path) -> list[tuple[Grid, Grid]]:
    base = manifest_path.parent
    scenes = []
    with open(manifest_path) as fh:
        for line in fh:
            entry = json.loads(line)
            scenes.append(
                (read_fgrid(_require(base / entry["dsm"])), read_fgrid(_require(base / entry["dtm"])))
            )
    return scenes


def cmd_train(args) -> int:
    started = time.time()
    manifest_path = _require(args.data)
    file_map = load_config(_require(args.config)) if args.config else {}
    overrides = {
        "seed": args.seed,
        "max_steps": args.steps,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "patch": args.patch,
    }
    cfg, arch = build_configs(file_map, overrides)
    scenes = _load_scenes(manifest_path)
    if len(scenes) <= args.val_count:
        raise ValueError("not enough scenes for the requested validation split")
    val = scenes[-args.val_count :]
    train = scenes[: -args.val_count]

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = init_model(arch, seed=cfg.seed)
    result = fit(model, train, val, cfg)

    ckpt = out_dir / "checkpoint.fckp"
    save_checkpoint(ckpt, result.model)
    log_path = out_dir / "training_log.csv"
    keys = ["step", "epoch", "l1", "l2", "lgrad", "lc", "total", "lr", "val_rmse", "val_e_tot"]
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in result.log:
            writer.writerow({k: row.get(k, "") for k in keys})
    cfg_snapshot = {**{k: str(v) for k, v in file_map.items()}, "resolved_seed": cfg.seed}
    write_manifest(out_dir, "train", cfg_snapshot, cfg.seed, [str(manifest_path)], [ckpt, log_path], started)
    print(f"best validation RMSE {result.best_rmse:.4f} m; checkpoint at {ckpt}")
    return EX_OK


def cmd_infer(args) -> int:
    started = time.time()
    dsm = read_fgrid(_require(args.dsm))
    model = load_checkpoint(_require(args.ckpt))
    cfg, _ = build_configs({}, {"seed": args.seed})
    sched = make_schedule(T=args.T)
    s_n, valid, ctx = _prepare_dsm(dsm)
    init = {"noise": "gaussian_noise", "dsm": "dsm", "noisy-dsm": "noisy_dsm"}[args.init]
    rng = np.random.default_rng(cfg.seed)
    pred_n, prob = sample_batch(sched, model, s_n[None], init, args.steps, rng)
    terrain = dsm.with_values(np.where(valid, ctx.invert(pred_n[0]), np.nan).astype(np.float32))
    prob_grid = dsm.with_values(prob[0].astype(np.float32))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtm_path = out_dir / "dtm.fgrid"
    prob_path = out_dir / "ground_prob.fgrid"
    write_fgrid(dtm_path, terrain)
    write_fgrid(prob_path, prob_grid)
    outputs = [dtm_path, prob_path]
    if args.pgm:
        for path, grid in ((out_dir / "dtm.pgm", terrain), (out_dir / "ground_prob.pgm", prob_grid)):
            write_pgm(path, grid)
            outputs.append(path)
    write_manifest(out_dir, "infer", vars(args), cfg.seed, [args.dsm, args.ckpt], outputs, started)
    print(f"wrote {dtm_path}")
    return EX_OK


def cmd_stitch(args) -> int:
    started = time.time()
    if args.estimate_only:
        dsm = read_fgrid(_require(args.dsm))
        secs = estimate_runtime(dsm.width, dsm.height, args.tile, args.stride, args.T, args.per_step_seconds)
        print(f"{secs:.1f} s")
        return EX_OK
    dsm = read_fgrid(_require(args.dsm))
    model = load_checkpoint(_require(args.ckpt))
    cfg, _ = build_configs({}, {"seed": args.seed})
    sched = make_schedule(T=args.T)
    terrain, prob = stitch(
        sched, model, dsm, args.tile, args.stride,
        mode=args.blend, use_prior=not args.no_prior, seed=cfg.seed, T_r=args.steps,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtm_path = out_dir / "dtm.fgrid"
    prob_path = out_dir / "ground_prob.fgrid"
    write_fgrid(dtm_path, dsm.with_values(terrain.values.astype(np.float32)))
    write_fgrid(prob_path, dsm.with_values(prob.values.astype(np.float32)))
    write_manifest(out_dir, "stitch", vars(args), cfg.seed, [args.dsm, args.ckpt], [dtm_path, prob_path], started)
    print(f"wrote {dtm_path}")
    return EX_OK


def cmd_eval(args) -> int:
    started = time.time()
    pred = read_fgrid(_require(args.pred))
    truth = read_fgrid(_require(args.truth))
    valid = Mask(np.isfinite(pred.values) & np.isfinite(truth.values))
    rmse, mae = regression_metrics(pred, truth, valid)
    row: dict[str, object] = {"rmse": rmse, "mae": mae}
    if args.prob and args.gt_mask:
        prob = read_fgrid(_require(args.prob))
        gt = read_fgrid(_require(args.gt_mask))
        ce = classification_errors(prob.values, gt.values > 0.5, valid)
        row.update({"e_t1": ce.e_t1, "e_t2": ce.e_t2, "e_tot": ce.e_tot, "e_sum": ce.e_sum})
    if args.points:
        pts = np.loadtxt(_require(args.points), delimiter=",", ndmin=2)
        res = med(pred, pts)
        row.update({"med": res.value, "med_points_used": res.n_used, "med_points_skipped": res.n_skipped})
    if min(pred.shape) >= 3:
        row["mad"] = mad(pred)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row.keys()))
        writer.writeheader()
        writer.writerow(row)
    outputs = [csv_path]
    if args.error_grid:
        err_path = out_dir / "error.fgrid"
        write_fgrid(err_path, pred.with_values((pred.values - truth.values).astype(np.float32)))
        outputs.append(err_path)
    write_manifest(out_dir, "eval", vars(args), 0, [args.pred, args.truth], outputs, started)
    print(",".join(f"{k}={v}" for k, v in row.items()))
    return EX_OK


def cmd_ablate(args) -> int:
    started = time.time()
    spec = AblationSpec(axis=args.axis, corpus_seed=args.seed, budget=args.budget,
                        n_train=args.n_train, n_val=args.n_val)
    rows = run_ablation(spec)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{args.axis}.csv"
    write_rows_csv(rows, csv_path)
    write_manifest(out_dir, "ablate", vars(args), args.seed, [], [csv_path], started)
    for row in rows:
        print(f"{row['variant']}: rmse={row['rmse']:.4f} mae={row['mae']:.4f} e_tot={row['e_tot']:.2f}")
    return EX_OK


def cmd_schedule_dump(args) -> int:
    sched = make_schedule(args.family, args.T, args.beta_min, args.beta_max)
    lines = ["t,beta,alpha,alpha_bar"]
    lines.append(f"0,,,{float(sched.alpha_bar[0])!r}")
    for t in range(1, sched.T + 1):
        lines.append(
            f"{t},{float(sched.beta[t])!r},{float(sched.alpha[t])!r},{float(sched.alpha_bar[t])!r}"
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EX_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="terraindiff",
                                     description="Terrain extraction from surface rasters "
                                                 "via gated conditional denoising diffusion.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic (dsm, dtm, ground) scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--pixel-size", type=float, default=1.0)
    p.add_argument("--roughness", type=float, default=0.5)
    p.add_argument("--buildings", type=int, default=6)
    p.add_argument("--trees", type=int, default=10)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a denoiser on a scene manifest")
    p.add_argument("--data", required=True, help="scenes.jsonl from synth")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True)
    p.add_argument("--val-count", type=int, default=8)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="training step budget")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patch", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="generate terrain for one surface raster")
    p.add_argument("--dsm", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", choices=("noise", "dsm", "noisy-dsm"), default="noisy-dsm")
    p.add_argument("--steps", type=int, default=10, help="generation steps")
    p.add_argument("--T", type=int, default=10, help="trained step count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pgm", action="store_true", help="also write PGM previews")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("stitch", help="tiled generation for large rasters")
    p.add_argument("--dsm", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--out", default="stitch-out")
    p.add_argument("--tile", type=int, default=64)
    p.add_argument("--stride", type=int, default=32)
    p.add_argument("--blend", choices=("mean", "min", "max", "linear", "cosine", "exp"), default="min")
    p.add_argument("--no-prior", action="store_true")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--T", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--estimate-only", action="store_true")
    p.add_argument("--per-step-seconds", type=float, default=0.06)
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("eval", help="metrics for a prediction against truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--prob")
    p.add_argument("--gt-mask")
    p.add_argument("--points", help="CSV of x,y,z ground-truth points")
    p.add_argument("--error-grid", action="store_true")
    p.add_argument("--out", default="eval-out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run one ablation axis on synthetic data")
    p.add_argument("--axis", choices=AXES, required=True)
    p.add_argument("--budget", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=64)
    p.add_argument("--n-val", type=int, default=16)
    p.add_argument("--out", default="ablate-out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("schedule-dump", help="emit the beta/alpha tables as CSV")
    p.add_argument("--T", type=int, default=10)
    p.add_argument("--beta-min", type=float, default=1e-4)
    p.add_argument("--beta-max", type=float, default=0.02)
    p.add_argument("--family", choices=("beta-cosine", "alphabar-cosine"), default="beta-cosine")
    p.add_argument("--out")
    p.set_defaults(func=cmd_schedule_dump)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return EX_NOINPUT
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EX_SOFTWARE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EX_USAGE


if __name__ == "__main__":
    sys.exit(main())
