"""Reproduction harness: dataset simulation, training, evaluation, the
four-variant ablation sweep, and a gradient self-check.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .dataio import (
    DatasetBundle,
    SampleRecord,
    load_dataset,
    load_recon_model,
    save_recon_model,
    save_sample,
    write_manifest,
)
from .diffcore import Tensor, grad_check
from .kinetics import make_decode_plan
from .metrics import PSNR_INF, mse_roi, psnr, ssim
from .phantom import (
    FengParams,
    KineticFields,
    build_label_map,
    default_roi_priors,
    feng_input,
    generate_ground_truth,
    sample_kinetics,
)
from .projector import ProjectorConfig, measurement_expectation, sample_poisson
from .recon import (
    build_recon_model,
    encoder_normalizer,
    fbp_baseline,
    reconstruct_batch,
)
from .train import (
    VARIANTS,
    TrainingDiverged,
    evaluate_split,
    format_report_csv,
    supervised_loss,
    train_run,
    unsupervised_loss,
    variant_ordering_report,
)

__all__ = [
    "main",
    "simulate_dataset",
    "run_ablation",
    "gradcheck_suite",
    "evaluate_fbp",
    "write_pgm",
]


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalError(Exception):
    pass


# ------------------------------------------------------------------ simulate

def simulate_dataset(cfg: dict) -> DatasetBundle:
    """Generate phantom/kinetics/activity/sinogram records for every sample
    of the configured splits; deterministic for the dataset seed."""
    schedule = cfgmod.schedule_from(cfg)
    feng = cfgmod.feng_from(cfg)
    proj = cfgmod.projector_from(cfg)
    tau = cfg["tau"]
    d = cfg["dataset"]
    counts = {"train": d["num_train"], "val": d["num_val"], "test": d["num_test"]}
    priors = default_roi_priors()
    root_seed = int(d["seed"])
    total = sum(counts.values())
    children = np.random.SeedSequence(root_seed).spawn(total)
    samples: dict[str, SampleRecord] = {}
    splits: dict[str, list[str]] = {}
    index = 0
    for split, n in counts.items():
        names = []
        for _ in range(n):
            name = f"sample_{index:03d}"
            seeds = np.random.default_rng(children[index]).integers(2 ** 31, size=3)
            label_map = build_label_map(cfg["phantom"]["width"],
                                        cfg["phantom"]["height"], int(seeds[0]))
            fields = sample_kinetics(label_map, priors, int(seeds[1]))
            activity = generate_ground_truth(fields, feng, schedule,
                                             dt=cfg["gen_dt"], tau=tau)
            expected = measurement_expectation(activity, proj)
            measured = sample_poisson(expected, int(seeds[2]))
            samples[name] = SampleRecord(
                name=name, labels=label_map.labels, kinetics=fields,
                activity=activity, expected=expected.data, measured=measured.data,
                scale_factor=expected.scale_factor,
                randoms_level=expected.randoms_level,
                randoms_fraction=expected.randoms_fraction, seed=int(seeds[2]))
            names.append(name)
            index += 1
        splits[split] = names
    meta = {"schedule": list(schedule.boundaries), "tau": tau,
            "feng": {k: getattr(feng, k) for k in ("a1", "a2", "a3", "l1", "l2", "l3")},
            "projector": {"image_height": proj.image_height,
                          "image_width": proj.image_width,
                          "num_angles": proj.num_angles,
                          "num_bins": proj.num_bins,
                          "randoms_fraction": proj.randoms_fraction,
                          "target_total_counts": proj.target_total_counts},
            "gen_dt": cfg["gen_dt"], "seed": root_seed}
    return DatasetBundle(schedule=schedule, feng=feng, tau=tau, projector=proj,
                         samples=samples, splits=splits, meta=meta)


def cmd_simulate(cfg: dict, out_dir: Path, force: bool) -> int:
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists() and not force:
        raise DataError(f"{manifest_path} exists; pass --force to regenerate")
    bundle = simulate_dataset(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, rec in bundle.samples.items():
        save_sample(out_dir / "samples" / name, rec, bundle.schedule, rec.seed)
    write_manifest(out_dir, bundle.splits, bundle.meta, bundle.meta["seed"])
    (out_dir / "config.resolved.json").write_text(json.dumps(cfg, indent=1))
    n = len(bundle.samples)
    print(f"simulated {n} sequences into {out_dir} "
          f"(splits: {({k: len(v) for k, v in bundle.splits.items()})})")
    return 0


# --------------------------------------------------------------------- train

def _history_csv(history: list[dict]) -> str:
    lines = ["epoch,split,loss,mse,psnr,ssim"]
    for row in history:
        cells = [str(row["epoch"]), row["split"], f"{row['loss']:.10g}"]
        for key in ("mse", "psnr", "ssim"):
            cells.append("" if row[key] is None else f"{row[key]:.10g}")
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _load_bundle(dataset_dir) -> DatasetBundle:
    if dataset_dir is None:
        raise DataError("no dataset directory given (--dataset or dataset_dir key)")
    dataset_dir = Path(dataset_dir)
    if not dataset_dir.exists():
        raise DataError(f"dataset directory {dataset_dir} does not exist")
    try:
        return load_dataset(dataset_dir)
    except (ValueError, FileNotFoundError, KeyError) as e:
        raise DataError(f"cannot load dataset: {e}") from e


def cmd_train(cfg: dict, dataset_dir, out_dir: Path, force: bool) -> int:
    bundle = _load_bundle(dataset_dir)
    out_dir = Path(out_dir)
    ckpt = out_dir / "checkpoint.bin"
    if ckpt.exists() and not force:
        raise DataError(f"{ckpt} exists; pass --force to retrain")
    spec = cfgmod.model_spec_from(cfg)
    tcfg = cfgmod.train_config_from(cfg)
    variant = cfg["variant"]
    t0 = time.time()
    try:
        result = train_run(bundle, variant, tcfg, spec)
    except TrainingDiverged as e:
        raise NumericalError(str(e)) from e
    out_dir.mkdir(parents=True, exist_ok=True)
    save_recon_model(ckpt, result.model,
                     extra={"mode": tcfg.mode, "seed": tcfg.seed,
                            "lambda": tcfg.lam, "epochs": tcfg.epochs,
                            "solver_dt": spec.solver_dt,
                            "best_epoch": result.best_epoch})
    (out_dir / "metrics.csv").write_text(_history_csv(result.history))
    (out_dir / "config.resolved.json").write_text(json.dumps(cfg, indent=1))
    val_rows = [r for r in result.history if r["split"] == "val"]
    note = f", best val loss {result.best_val_loss:.6g} @ epoch {result.best_epoch}" \
        if val_rows else ""
    print(f"trained {variant} [{tcfg.mode}] for {tcfg.epochs} epochs in "
          f"{time.time() - t0:.1f}s{note}")
    return 0


# ------------------------------------------------------------------ evaluate

def write_pgm(path: Path, img: np.ndarray, vmax: float | None = None):
    """8-bit binary PGM (P5); values scale linearly from [0, vmax]."""
    arr = np.asarray(img, dtype=np.float64)
    if vmax is None:
        vmax = arr.max() if arr.max() > 0 else 1.0
    u8 = np.clip(arr / vmax * 255.0, 0, 255).astype(np.uint8)
    h, w = u8.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(u8.tobytes())


def _montage(frames: np.ndarray) -> np.ndarray:
    t, h, w = frames.shape
    cols = int(math.ceil(math.sqrt(t)))
    rows = int(math.ceil(t / cols))
    out = np.zeros((rows * h, cols * w))
    for i in range(t):
        r, c = divmod(i, cols)
        out[r * h:(r + 1) * h, c * w:(c + 1) * w] = frames[i]
    return out


def evaluate_fbp(bundle: DatasetBundle, split: str):
    """FBP baseline rows for a split: ramp filter, backprojection, clamp,
    count-scale division back to activity units."""
    rows = []
    recons = {}
    for s in bundle.split_samples(split):
        rec = fbp_baseline(s.measured.astype(np.float64), bundle.projector)
        rec = rec / s.scale_factor
        recons[s.name] = rec
        rows.append({"name": s.name,
                     "mse": float(np.mean((s.activity - rec) ** 2)),
                     "psnr": psnr(s.activity, rec),
                     "ssim": ssim(s.activity, rec)})
    return rows, recons


def _aggregate_row(method: str, rows: list[dict]) -> dict:
    out = {"method": method}
    for key in ("mse", "psnr", "ssim"):
        vals = np.array([r[key] for r in rows])
        out[key] = f"{vals.mean():.4f}({vals.std():.4f})"
    return out


def _tac_csv(sample: SampleRecord, recon: np.ndarray, midpoints: np.ndarray) -> str:
    lines = ["frame,t_mid,roi,truth,recon"]
    for roi in sorted(np.unique(sample.labels)):
        if roi == 0:
            continue
        mask = sample.labels == roi
        truth = sample.activity[:, mask].mean(axis=1)
        rec = recon[:, mask].mean(axis=1)
        for k in range(truth.size):
            lines.append(f"{k},{midpoints[k]:.4g},{roi},{truth[k]:.8g},{rec[k]:.8g}")
    return "\n".join(lines) + "\n"


def cmd_evaluate(cfg: dict, checkpoint, dataset_dir, split: str, out_dir: Path,
                 force: bool) -> int:
    bundle = _load_bundle(dataset_dir)
    out_dir = Path(out_dir)
    agg_path = out_dir / "aggregate.csv"
    if agg_path.exists() and not force:
        raise DataError(f"{agg_path} exists; pass --force to re-evaluate")
    if checkpoint is None:
        raise DataError("evaluate needs --checkpoint PATH or --checkpoint fbp")
    if str(checkpoint) == "fbp":
        method = "fbp"
        rows, recons = evaluate_fbp(bundle, split)
    else:
        ckpt_path = Path(checkpoint)
        if not ckpt_path.exists():
            raise DataError(f"checkpoint {ckpt_path} does not exist")
        model, header = load_recon_model(ckpt_path)
        if header["n_frames"] != bundle.schedule.n_frames or \
                header["num_bins"] != bundle.projector.num_bins:
            raise DataError("checkpoint geometry does not match the dataset")
        method = header.get("variant", "model")
        solver_dt = header.get("solver_dt", cfg["model"]["solver_dt"])
        rows, recons = evaluate_split(model, bundle, split, solver_dt)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_seq = ["name,mse,psnr,ssim"]
    for r in rows:
        per_seq.append(f"{r['name']},{r['mse']:.8g},{r['psnr']:.8g},{r['ssim']:.8g}")
    (out_dir / "per_sequence.csv").write_text("\n".join(per_seq) + "\n")
    agg = _aggregate_row(method, rows)
    agg_path.write_text("method,mse,psnr,ssim\n" +
                        ",".join(agg[k] for k in ("method", "mse", "psnr", "ssim"))
                        + "\n")
    mids = bundle.schedule.midpoints
    for s in bundle.split_samples(split):
        sdir = out_dir / s.name
        sdir.mkdir(exist_ok=True)
        rec = recons[s.name]
        (sdir / "tacs.csv").write_text(_tac_csv(s, rec, mids))
        vmax = max(float(s.activity.max()), float(rec.max()), 1e-12)
        for k in range(rec.shape[0]):
            write_pgm(sdir / f"frame_{k:02d}.pgm", rec[k], vmax)
        write_pgm(sdir / "montage.pgm", _montage(rec), vmax)
        write_pgm(sdir / "montage_truth.pgm", _montage(s.activity), vmax)
    print(f"evaluated {method} on split {split!r}: "
          + ", ".join(f"{k}={agg[k]}" for k in ("mse", "psnr", "ssim")))
    return 0


# -------------------------------------------------------------------- ablate

def run_ablation(bundle: DatasetBundle, cfg: dict, mode: str,
                 log=print) -> tuple[list[dict], dict]:
    """Train all four variants across the seed list in one mode; score each
    run on the test split and aggregate per variant."""
    spec = cfgmod.model_spec_from(cfg)
    seeds = cfg["seeds"]
    if not seeds:
        raise ConfigError("seed list is empty")
    results = {v: [] for v in VARIANTS}
    runs = {}
    for variant in VARIANTS:
        for seed in seeds:
            tcfg = cfgmod.train_config_from(cfg)
            tcfg.mode = mode
            tcfg.seed = int(seed)
            t0 = time.time()
            result = train_run(bundle, variant, tcfg, spec)
            rows, _ = evaluate_split(result.model, bundle, "test", spec.solver_dt)
            summary = {"mse": float(np.mean([r["mse"] for r in rows])),
                       "psnr": float(np.mean([r["psnr"] for r in rows])),
                       "ssim": float(np.mean([r["ssim"] for r in rows]))}
            results[variant].append(summary)
            runs[(mode, variant, int(seed))] = result
            if log is not None:
                log(f"  {mode}/{variant} seed {seed}: "
                    f"psnr {summary['psnr']:.2f} dB, mse {summary['mse']:.4g}, "
                    f"ssim {summary['ssim']:.3f} ({time.time() - t0:.0f}s)")
    return variant_ordering_report(results), runs


def cmd_ablate(cfg: dict, dataset_dir, out_dir: Path, force: bool) -> int:
    bundle = _load_bundle(dataset_dir)
    out_dir = Path(out_dir)
    modes = cfg.get("ablate_modes", ["unsupervised"])
    for mode in modes:
        report_path = out_dir / f"ablation_{mode}.csv"
        if report_path.exists() and not force:
            raise DataError(f"{report_path} exists; pass --force to rerun")
    out_dir.mkdir(parents=True, exist_ok=True)
    for mode in modes:
        try:
            report, runs = run_ablation(bundle, cfg, mode)
        except TrainingDiverged as e:
            raise NumericalError(str(e)) from e
        (out_dir / f"ablation_{mode}.csv").write_text(format_report_csv(report))
        for (m, variant, seed), result in runs.items():
            rdir = out_dir / f"{m}_{variant}_seed{seed}"
            rdir.mkdir(exist_ok=True)
            save_recon_model(rdir / "checkpoint.bin", result.model,
                             extra={"mode": m, "seed": seed})
            (rdir / "metrics.csv").write_text(_history_csv(result.history))
        best = report[0]
        print(f"[{mode}] best variant: {best['variant']} "
              f"({best['psnr_mean']:.2f} dB mean PSNR)")
    (out_dir / "config.resolved.json").write_text(json.dumps(cfg, indent=1))
    return 0


# ----------------------------------------------------------------- gradcheck

def gradcheck_suite(seed: int = 0, num_samples: int = 60) -> dict:
    """End-to-end finite-difference check of both objectives on a tiny
    4x4, six-frame instance; returns max relative error per mode."""
    from .kinetics import ScanSchedule

    rng = np.random.default_rng(seed)
    schedule = ScanSchedule(np.array([0.0, 1, 2, 3, 6, 9, 12]))
    feng = FengParams()
    tau = 80.0
    proj = ProjectorConfig(image_height=4, image_width=4, num_angles=8,
                           num_bins=7, randoms_fraction=0.2,
                           target_total_counts=3e4)
    fields = KineticFields(k1=rng.uniform(0.05, 0.15, (4, 4)),
                           k2=rng.uniform(0.1, 0.2, (4, 4)),
                           k3=rng.uniform(0.02, 0.06, (4, 4)),
                           k4=rng.uniform(0.01, 0.04, (4, 4)),
                           V=rng.uniform(0.02, 0.08, (4, 4)))
    x = generate_ground_truth(fields, feng, schedule, dt=0.5, tau=tau)
    expected = measurement_expectation(x, proj)
    measured = sample_poisson(expected, seed)
    y = measured.data.astype(np.float64)[None]
    scales = np.array([expected.scale_factor])
    randoms = np.array([expected.randoms_level])
    norms = np.array([encoder_normalizer(measured.data, expected.scale_factor,
                                         proj)])
    template = build_recon_model("hyke", "one_tissue", True, 2, n_frames=6,
                                 num_bins=7, seed=seed, hidden=(4, 4),
                                 encoder_hidden=6)
    plan = make_decode_plan(template.hybrid, lambda t: feng_input(feng, t),
                            schedule, 0.5, tau)
    point = [t.values.copy() for _, t in template.named_parameters()]

    def make_loss(mode):
        def fn(*params):
            model = template.clone_with(list(params))
            xhat, xtilde = reconstruct_batch(model, y, scales, norms, proj, plan)
            if mode == "supervised":
                return supervised_loss(x[None], xhat, xtilde, 0.1)
            from .projector import expected_counts
            ybar = expected_counts(xhat, proj, scales.reshape(1, 1, 1, 1),
                                   randoms.reshape(1, 1, 1, 1))
            return unsupervised_loss(y, ybar, xhat, xtilde, 0.1)
        return fn

    # eps large enough that roundoff in the high-magnitude likelihood does
    # not swamp the central difference
    return {mode: grad_check(make_loss(mode), point, eps=1e-5,
                             num_samples=num_samples, seed=seed)
            for mode in ("supervised", "unsupervised")}


def cmd_gradcheck(cfg: dict, seed: int | None) -> int:
    errs = gradcheck_suite(seed=0 if seed is None else seed)
    worst = max(errs.values())
    for mode, err in errs.items():
        print(f"gradcheck [{mode}]: max relative error {err:.3e}")
    if worst >= 1e-4:
        raise NumericalError(f"gradient check failed: {worst:.3e} >= 1e-4")
    print("gradcheck passed (< 1e-4)")
    return 0


# ---------------------------------------------------------------------- main

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hyke",
        description="dynamic PET simulation and hybrid-kinetics reconstruction")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_txt in [
        ("simulate", "generate a synthetic dataset directory"),
        ("train", "train one variant on a dataset"),
        ("evaluate", "reconstruct a split and report metrics"),
        ("ablate", "train all four kinetics variants and rank them"),
        ("gradcheck", "finite-difference check of the end-to-end gradients"),
    ]:
        p = sub.add_parser(name, help=help_txt)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="K=V",
                       help="override a config key (dotted path, JSON value)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--force", action="store_true",
                       help="overwrite existing outputs")
        if name in ("train", "evaluate", "ablate"):
            p.add_argument("--dataset", default=None, help="dataset directory")
        if name == "evaluate":
            p.add_argument("--checkpoint", default=None,
                           help="checkpoint path, or 'fbp' for the baseline")
            p.add_argument("--split", default="test")
    return parser


def main(argv=None) -> int:
    warnings.filterwarnings("ignore", message=".*TBB.*")
    args = _build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config, args.set)
    except (ValueError, OSError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    if args.threads is not None:
        if args.threads < 1:
            print("config error: --threads must be >= 1", file=sys.stderr)
            return 2
        import numba
        numba.set_num_threads(args.threads)
    out_dir = Path(args.out) if args.out else Path(cfg["out_dir"])
    dataset_dir = getattr(args, "dataset", None) or cfg.get("dataset_dir")
    try:
        if args.command == "simulate":
            if args.seed is not None:
                cfg["dataset"]["seed"] = args.seed
            return cmd_simulate(cfg, out_dir, args.force)
        if args.command == "train":
            if args.seed is not None:
                cfg["train"]["seed"] = args.seed
            return cmd_train(cfg, dataset_dir, out_dir, args.force)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.checkpoint, dataset_dir, args.split,
                                out_dir, args.force)
        if args.command == "ablate":
            if args.seed is not None:
                cfg["seeds"] = [args.seed]
            return cmd_ablate(cfg, dataset_dir, out_dir, args.force)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
