"""``ecdb`` command line: data synthesis, training, restoration, verification and dumps.

Exit codes: 0 success, 1 check or training failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .bridge import SamplerConfig, reverse_euler_sample
from .checkpoint import build_model, file_hash, load_checkpoint
from .config import RunConfig, load_config, with_seed
from .control import ControlBranch, ECDBModel, dfm_feature_probe, fusion_weight
from .data import TASK_KINDS, PairedDataset, load_png, load_pairs, make_task, save_png, write_task
from .denoiser import UNetDenoiser
from .errors import ConfigError, ECDBError, SamplerDivergence, TrainingDivergence
from .metrics import evaluate_images
from .oracles import (
    affine_check,
    backward_coeff_check,
    constraint_check,
    forward_marginal_check,
    fusion_weight_check,
    gradient_checks,
    pinning_check,
    reverse_gaussian_check,
    zero_init_check,
    CheckResult,
)
from .schedule import ProcessSchedule, build_schedule, format_sig, write_schedule_csv
from .training import train_loop

log = logging.getLogger("ecdb")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


# -- helpers -------------------------------------------------------------------------


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.generic,)):
        x = x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    if isinstance(x, Path):
        return str(x)
    return x


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def write_manifest(out: Path, command: str, cfg: RunConfig, **extra) -> dict:
    man = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "ecdb_version": __version__,
        **extra,
    }
    _write_json(out / "manifest.json", man)
    return man


def _bool_flag(parser, name: str, help: str) -> None:
    parser.add_argument(f"--{name}", dest=name.replace("-", "_"), action=argparse.BooleanOptionalAction,
                        default=None, help=help)


def resolve_config(args, check_process: bool = True) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    rep = dataclasses.replace
    if getattr(args, "steps", None) is not None:
        cfg = rep(cfg, train=rep(cfg.train, total_steps=args.steps))
    if getattr(args, "batch_size", None) is not None:
        cfg = rep(cfg, train=rep(cfg.train, batch_size=args.batch_size))
    if getattr(args, "lr", None) is not None:
        cfg = rep(cfg, train=rep(cfg.train, lr_initial=args.lr))
    ab = {k: getattr(args, k) for k in ("chm", "dfm", "fusion_schedule") if getattr(args, k, None) is not None}
    if ab:
        cfg = rep(cfg, ablation=rep(cfg.ablation, **ab))
    if getattr(args, "sampler_steps", None) is not None:
        cfg = rep(cfg, sampler=rep(cfg.sampler, n_steps=args.sampler_steps))
    if getattr(args, "deterministic", False):
        cfg = rep(cfg, sampler=rep(cfg.sampler, stochastic=False))
    if getattr(args, "task", None) is not None:
        if args.task not in TASK_KINDS:
            raise ConfigError(f"unknown task {args.task!r}; expected one of {sorted(TASK_KINDS)}")
        deg = rep(cfg.data.degradation, kind=TASK_KINDS[args.task])
        cfg = rep(cfg, data=rep(cfg.data, task=args.task, degradation=deg))
    counts = {k: getattr(args, k, None) for k in ("n_train", "n_val", "n_test")}
    counts = {k: v for k, v in counts.items() if v is not None}
    if counts:
        cfg = rep(cfg, data=rep(cfg.data, **counts))
    if cfg.data.task in TASK_KINDS and TASK_KINDS[cfg.data.task] != cfg.data.degradation.kind:
        raise ConfigError(
            f"task {cfg.data.task!r} expects degradation {TASK_KINDS[cfg.data.task]!r}, "
            f"got {cfg.data.degradation.kind!r}"
        )
    cfg.validate(check_process=check_process)
    return cfg


def _list_pngs(directory: Path) -> list[Path]:
    return sorted(p for p in directory.glob("*.png") if p.is_file())


def _image_dir(path: Path) -> Path:
    # accept a split directory (with lq/) or a flat folder of PNGs
    return path / "lq" if (path / "lq").is_dir() else path


def image_grid(columns: list[np.ndarray], pad: int = 2) -> np.ndarray:
    """Tile ``columns`` (each ``(N, C, H, W)``) as N rows, one column per array."""
    n, c, h, w = columns[0].shape
    k = len(columns)
    grid = np.ones((c, n * (h + pad) + pad, k * (w + pad) + pad))
    for j, col in enumerate(columns):
        for i in range(n):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            grid[:, y:y + h, x:x + w] = col[i]
    return grid


def channel_grid(feat: np.ndarray, cols: int = 8, pad: int = 1) -> np.ndarray:
    """Tile a ``(C, h, w)`` feature map as a grayscale mosaic scaled to ``[0, 1]``."""
    c, h, w = feat.shape
    rows = math.ceil(c / cols)
    lo, hi = float(feat.min()), float(feat.max())
    scaled = (feat - lo) / (hi - lo) if hi > lo else np.full_like(feat, 0.5)
    grid = np.zeros((1, rows * (h + pad) + pad, cols * (w + pad) + pad))
    for k in range(c):
        r, q = divmod(k, cols)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        grid[0, y:y + h, x:x + w] = scaled[k]
    return grid


# -- subcommands ---------------------------------------------------------------------


def cmd_make_data(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = write_task(cfg.data, out, extra={"config_hash": cfg.hash()})
    total = sum(man["counts"].values())
    log.info("wrote %d pairs to %s", total, out)
    print(f"wrote {total} pairs to {out}")
    return EXIT_OK


def _dataset(cfg: RunConfig, data_root: str | None, split: str = "train") -> PairedDataset:
    if data_root is None:
        log.info("no --data given: synthesizing the %s split in memory", split)
        return make_task(cfg.data)[split]
    return load_pairs(data_root, split)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    sched = build_schedule(cfg.process)
    train_cfg = cfg.train_config()
    torch.manual_seed(train_cfg.seed)
    inputs = {}

    if args.phase == "pretrain":
        model = UNetDenoiser(cfg.arch)
        branch = None
    else:
        base = args.resume or args.pretrained
        if base is None:
            raise ConfigError("ecdb phase requires --pretrained (or --resume) checkpoint")
        if not Path(base).is_file():
            raise ConfigError(f"checkpoint not found: {base}")
        ckpt = load_checkpoint(base)
        built = build_model(ckpt)
        if args.resume is None and isinstance(built, ECDBModel):
            raise ConfigError(f"{base} already carries a control branch; pass a pretrain checkpoint")
        if isinstance(built, ECDBModel):
            model, branch = built.dm, built.branch
            branch.fusion = dataclasses.replace(branch.fusion, a=cfg.ablation.fusion_a)
        else:
            model = built.freeze()
            branch = ControlBranch(model, cfg.fusion())
        if args.pretrained:
            inputs["pretrained"] = {"path": str(args.pretrained), "sha256": file_hash(args.pretrained)}
    if args.resume is not None:
        if not Path(args.resume).is_file():
            raise ConfigError(f"checkpoint not found: {args.resume}")
        inputs["resume"] = {"path": str(args.resume), "sha256": file_hash(args.resume)}

    dataset = _dataset(cfg, args.data)
    if args.data:
        inputs["data"] = str(args.data)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"phase": args.phase, "ablation": cfg.ablation.label}
    write_manifest(out, "train", cfg, phase=args.phase, inputs=inputs, status="running")
    try:
        run = train_loop(train_cfg, sched, model, dataset, branch=branch, run_dir=out,
                         resume=args.resume, config_hash=cfg.hash(), meta=meta)
    except TrainingDivergence as exc:
        write_manifest(out, "train", cfg, phase=args.phase, inputs=inputs, status="diverged",
                       failed_step=exc.step)
        print(f"error: training diverged at step {exc.step}", file=sys.stderr)
        return EXIT_FAIL
    ckpts = [{"path": str(p.relative_to(out)), "sha256": file_hash(p)} for p in run.checkpoint_paths]
    write_manifest(out, "train", cfg, phase=args.phase, inputs=inputs, status="complete",
                   steps=run.step, first_loss=run.first_loss,
                   last_loss=run.losses[-1] if run.losses else None, checkpoints=ckpts)
    print(f"trained {args.phase} to step {run.step}; final checkpoint {run.checkpoint_paths[-1]}")
    return EXIT_OK


def restore_batch(sched: ProcessSchedule, model, lq: np.ndarray, sampler: SamplerConfig,
                  batch_size: int = 32) -> np.ndarray:
    """Reverse-sample every image in ``lq``; batch ``k`` uses seed ``rng_seed + k``."""
    outs = []
    for k, start in enumerate(range(0, len(lq), batch_size)):
        xT = torch.as_tensor(lq[start:start + batch_size], dtype=torch.float32)
        cfg = dataclasses.replace(sampler, rng_seed=sampler.rng_seed + k)
        outs.append(reverse_euler_sample(sched, model, xT, cfg).clamp(0, 1).numpy())
    return np.concatenate(outs) if outs else np.zeros((0,) + lq.shape[1:])


def cmd_restore(args) -> int:
    cfg = resolve_config(args)
    in_dir = _image_dir(Path(args.input))
    out = Path(args.out)
    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    if not in_dir.is_dir():
        raise ConfigError(f"input directory not found: {in_dir}")
    files = _list_pngs(in_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.limit is not None:
        files = files[: args.limit]
    if not files:
        log.warning("no PNG images in %s; nothing to restore", in_dir)
        print(f"warning: no PNG images in {in_dir}; nothing to restore", file=sys.stderr)
        write_manifest(out, "restore", cfg, inputs={"input": str(in_dir)}, restored=0)
        return EXIT_OK

    ckpt = load_checkpoint(args.checkpoint)
    model = build_model(ckpt).eval()
    sched = build_schedule(cfg.process)
    lq = np.stack([load_png(p) for p in files])
    try:
        restored = restore_batch(sched, model, lq, cfg.sampler, args.restore_batch)
    except SamplerDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL

    (out / "restored").mkdir(exist_ok=True)
    text = {"config_hash": cfg.hash(), "checkpoint_sha256": file_hash(args.checkpoint)}
    for p, img in zip(files, restored):
        save_png(img, out / "restored" / p.name, text)
    columns = [lq, restored]
    ref_dir = in_dir.parent / "hq" if in_dir.name == "lq" else None
    if ref_dir is not None and all((ref_dir / p.name).is_file() for p in files):
        columns.append(np.stack([load_png(ref_dir / p.name) for p in files]))
    shown = slice(0, min(len(files), args.grid_rows))
    save_png(image_grid([c[shown] for c in columns]), out / "grid.png", text)
    write_manifest(out, "restore", cfg, restored=len(files),
                   inputs={"input": str(in_dir), "checkpoint": str(args.checkpoint),
                           "checkpoint_sha256": text["checkpoint_sha256"]},
                   grid_columns=["input", "restored", "reference"][: len(columns)])
    print(f"restored {len(files)} images into {out / 'restored'}")
    return EXIT_OK


def run_verification(cfg: RunConfig, quick: bool = False, seed: int = 0) -> list[CheckResult]:
    """Every hermetic check; a schedule that fails validation is reported, not raised."""
    try:
        cfg.process.validate()
        sched = build_schedule(cfg.process)
    except ConfigError as exc:
        results = [CheckResult("schedule", False, {"error": str(exc)})]
        sched = None
    else:
        results = [CheckResult("schedule", True, {"n_steps": sched.n_steps, "lambda_sq": sched.lambda_sq})]
    n_fwd, n_reg, n_rev = (20_000, 20_000, 2_000) if quick else (100_000, 100_000, 10_000)
    if sched is not None:
        results += [
            forward_marginal_check(sched, n_paths=n_fwd, n_substeps=10 * sched.n_steps, seed=seed),
            pinning_check(sched),
            affine_check(sched),
            constraint_check(sched),
            backward_coeff_check(sched, n_paths=n_reg, seed=seed),
            reverse_gaussian_check(sched, n_samples=n_rev, seed=seed),
            gradient_checks(sched, seed=seed),
        ]
    results += [
        zero_init_check(dataclasses.replace(cfg.arch, base_width=8, time_embed_dim=16), seed=seed),
        fusion_weight_check(cfg.ablation.fusion_a),
    ]
    return results


def _z_scores(r: CheckResult):
    if r.name == "forward_marginal":
        return [row["z_score"] for row in r.rows]
    if r.name == "backward_coefficients":
        return {str(row["t_index"]): {k: v for k, v in row.items() if k.startswith("z_")} for row in r.rows}
    if "z_score" in r.details:
        return r.details["z_score"]
    return None


def cmd_verify(args) -> int:
    cfg = resolve_config(args, check_process=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    results = run_verification(cfg, quick=args.quick, seed=args.seed or 0)
    fwd = next((r for r in results if r.name == "forward_marginal"), None)
    if fwd is not None:
        with (out / "forward_oracle.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "analytic_mean", "mc_mean", "analytic_var", "mc_var", "z_score"])
            for row in fwd.rows:
                w.writerow([format_sig(row[k]) for k in ("t", "analytic_mean", "mc_mean", "analytic_var", "mc_var", "z_score")])
    passed = all(r.passed for r in results)
    report = {
        "config_hash": cfg.hash(),
        "passed": passed,
        "quick": bool(args.quick),
        "seconds": time.perf_counter() - t0,
        "failed": [r.name for r in results if not r.passed],
        "checks": [{"name": r.name, "passed": r.passed, "z_scores": _z_scores(r), "details": r.details}
                   for r in results],
    }
    _write_json(out / "report.json", report)
    write_manifest(out, "verify", cfg, passed=passed, artifacts=["report.json", "forward_oracle.csv"])
    for r in results:
        print(r.summary())
    return EXIT_OK if passed else EXIT_FAIL


def _load_dir(directory: Path) -> dict[str, np.ndarray]:
    return {p.stem: load_png(p) for p in _list_pngs(directory)}


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    rest_dir, ref_dir = Path(args.restored), Path(args.reference)
    for d in (rest_dir, ref_dir):
        if not d.is_dir():
            raise ConfigError(f"directory not found: {d}")
    restored, reference = _load_dir(rest_dir), _load_dir(ref_dir)
    missing = sorted(set(restored) - set(reference))
    if missing:
        from .errors import PairingError

        raise PairingError(f"restored image {missing[0]!r} has no reference")
    ids = sorted(restored)
    if not ids:
        raise ConfigError(f"no PNG images in {rest_dir}")
    mode = "y_channel" if args.y_channel else "rgb"
    report = evaluate_images(np.stack([restored[i] for i in ids]), np.stack([reference[i] for i in ids]),
                             ids, channel_mode=mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "metrics.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "psnr", "ssim"])
        for i, p, s in zip(report.ids, report.psnr, report.ssim):
            w.writerow([i, "inf" if math.isinf(p) else f"{p:.6f}", f"{s:.6f}"])
    agg = {**report.aggregate(), "config_hash": cfg.hash()}
    _write_json(out / "aggregate.json", agg)
    write_manifest(out, "evaluate", cfg, inputs={"restored": str(rest_dir), "reference": str(ref_dir)},
                   artifacts=["metrics.csv", "aggregate.json"])
    print(f"{len(ids)} images: PSNR {report.mean_psnr:.3f} dB, SSIM {report.mean_ssim:.4f} ({mode})")
    return EXIT_OK


def cmd_schedule_dump(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sched = build_schedule(cfg.process)
    write_schedule_csv(sched, out / "schedule.csv")
    with (out / "fusion_weight.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "W"])
        for t in sched.grid:
            w.writerow([format_sig(t), format_sig(fusion_weight(float(t), cfg.ablation.fusion_a, sched.T))])
    write_manifest(out, "schedule-dump", cfg, artifacts=["schedule.csv", "fusion_weight.csv"])
    print(f"wrote {sched.n_steps + 1} rows to {out / 'schedule.csv'}")
    return EXIT_OK


def cmd_feature_dump(args) -> int:
    cfg = resolve_config(args)
    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    if not Path(args.sample).is_file():
        raise ConfigError(f"sample image not found: {args.sample}")
    model = build_model(load_checkpoint(args.checkpoint)).eval()
    if not isinstance(model, ECDBModel):
        raise ConfigError("feature-dump needs an ECDB checkpoint (one with a control branch)")
    sched = build_schedule(cfg.process)
    xT = torch.as_tensor(load_png(args.sample)[None], dtype=torch.float32)
    traj: list = []
    reverse_euler_sample(sched, model, xT, cfg.sampler, trajectory=traj)
    times = [float(t) for t in args.times.split(",")]
    picks = []
    for t in times:
        if not 0 <= t <= sched.T:
            raise ConfigError(f"time {t} outside [0, {sched.T}]")
        picks.append(min(traj, key=lambda p: abs(p[0] - t)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = {"config_hash": cfg.hash()}
    written = []
    for t_req, (t, feat) in zip(times, dfm_feature_probe(model.branch.dfm, xT, picks)):
        f = feat[0].numpy()
        stem = f"dfm_t{t:.3f}"
        np.save(out / f"{stem}.npy", f)
        save_png(channel_grid(f), out / f"{stem}.png", text)
        written.append({"requested_t": t_req, "t": t, "png": f"{stem}.png", "npy": f"{stem}.npy"})
    write_manifest(out, "feature-dump", cfg, features=written,
                   inputs={"checkpoint": str(args.checkpoint), "sample": str(args.sample)})
    print(f"wrote DFM features at {len(written)} times to {out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", required=True, help="output (run) directory")
    common.add_argument("-q", "--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="ecdb", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-data", parents=[common], help="synthesize a paired dataset")
    s.add_argument("--task", help=f"one of {sorted(TASK_KINDS)}")
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-val", type=int)
    s.add_argument("--n-test", type=int)
    s.set_defaults(func=cmd_make_data)

    s = sub.add_parser("train", parents=[common], help="pretrain the denoiser or train the control branch")
    s.add_argument("--phase", choices=("pretrain", "ecdb"), required=True)
    s.add_argument("--data", help="dataset root written by make-data (default: synthesize in memory)")
    s.add_argument("--task", help=f"one of {sorted(TASK_KINDS)} (in-memory data only)")
    s.add_argument("--n-train", type=int)
    s.add_argument("--pretrained", help="pretrain checkpoint (ecdb phase)")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.add_argument("--steps", type=int, help="total training steps")
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float, help="initial learning rate")
    _bool_flag(s, "chm", "condition hint module on/off")
    _bool_flag(s, "dfm", "degradation feature module on/off")
    _bool_flag(s, "fusion-schedule", "time-dependent DFM weighting on/off")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("restore", parents=[common], help="restore degraded images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="folder of PNGs, or a split folder with lq/")
    s.add_argument("--sampler-steps", type=int)
    s.add_argument("--deterministic", action="store_true", help="no noise injection")
    s.add_argument("--batch-size", dest="restore_batch", type=int, default=32)
    s.add_argument("--limit", type=int, help="restore only the first N images")
    s.add_argument("--grid-rows", type=int, default=8)
    s.set_defaults(func=cmd_restore)

    s = sub.add_parser("verify", parents=[common], help="run the numerical oracles")
    s.add_argument("--quick", action="store_true", help="fewer Monte-Carlo samples")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("evaluate", parents=[common], help="PSNR/SSIM of restored vs reference")
    s.add_argument("--restored", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--y-channel", action="store_true", help="BT.601 luma instead of RGB")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("schedule-dump", parents=[common], help="write schedule and W(t) tables")
    s.set_defaults(func=cmd_schedule_dump)

    s = sub.add_parser("feature-dump", parents=[common], help="DFM feature maps along a restoration")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--sample", required=True, help="degraded PNG")
    s.add_argument("--times", default="0.0,0.5,1.0", help="comma-separated times in [0, T]")
    s.set_defaults(func=cmd_feature_dump)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ECDBError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
