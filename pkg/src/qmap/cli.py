"""Command-line interface.

Every subcommand reads an optional strict-JSON config (``--config``) whose
sections carry the numeric settings; flags carry paths and per-run seeds.
Failures print a single ``error: ...`` line on stderr and exit nonzero.
Set ``QMAP_LOG=debug|info|warning|quiet`` to control verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import ddpm, evaluate, mle, pngio, regression
from .config import RunConfig, load_run_config
from .container import read_container, write_container
from .phantom import (
    SPHERE_T1_SECONDS,
    SPHERE_T1_STD_SECONDS,
    Dataset,
    realise_dataset,
)

log = logging.getLogger("qmap")
_thread_limiter = None  # keeps threadpoolctl limits alive for the process


def _setup_logging():
    level = os.environ.get("QMAP_LOG", "info").strip().lower()
    levels = {"debug": logging.DEBUG, "info": logging.INFO,
              "warning": logging.WARNING, "quiet": logging.ERROR}
    if level not in levels:
        level = "info"
    logging.basicConfig(level=levels[level], format="%(message)s", stream=sys.stderr)


def _apply_threads(n):
    global _thread_limiter
    if n is None:
        return
    if n < 1:
        raise ValueError(f"--device-threads must be >= 1, got {n}")
    try:
        from threadpoolctl import threadpool_limits

        _thread_limiter = threadpool_limits(limits=n)
    except ImportError:  # pragma: no cover
        log.debug("threadpoolctl unavailable; BLAS thread count unchanged")
    try:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except Exception:  # pragma: no cover - numba optional
        pass


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise FileNotFoundError(f"config file not found: {args.config}")
        return load_run_config(args.config)
    return RunConfig()


def _open_dataset(path) -> Dataset:
    if not os.path.isdir(path):
        raise FileNotFoundError(f"dataset directory not found: {path}")
    return Dataset.open(path)


def _select_records(dataset: Dataset, split, limit):
    records = dataset.select(split if split != "all" else None)
    if not records:
        raise ValueError(f"dataset has no pairs in split {split!r}")
    if limit:
        records = records[:limit]
    return records


def _maps_container_entries(qmap, suffix=""):
    return {
        f"t1{suffix}": qmap.t1_map,
        f"pd{suffix}": qmap.pd_map,
        f"b{suffix}": qmap.b_map,
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    manifest = cfg.manifest
    if args.seed is not None:
        manifest = dataclasses.replace(manifest, seed=args.seed)
    workers = args.device_threads or 1
    index = realise_dataset(manifest, args.out, protocol=cfg.protocol(), workers=workers)
    log.info("wrote %d pairs to %s", len(index["pairs"]), args.out)
    print(args.out)
    return 0


def cmd_fit_mle(args) -> int:
    cfg = _load_config(args)
    dataset = _open_dataset(args.data)
    records = _select_records(dataset, args.split, args.limit)
    os.makedirs(args.out, exist_ok=True)
    pooled = []
    for rec in records:
        qmap_gt, series, _, _ = dataset.load_pair(rec)
        fitted, info = mle.fit_map(series, cfg.fit)
        out_path = os.path.join(args.out, f"mle_{rec['file']}")
        entries = _maps_container_entries(fitted, "_map")
        entries["mask"] = fitted.mask.astype(np.float32)
        entries["residual_norm"] = info.residual_norm
        entries["iterations"] = info.iterations.astype(np.float32)
        write_container(out_path, entries,
                        meta={"kind": "mle-fit", "source": rec["file"],
                              "converged_fraction": float(info.converged.mean())})
        metrics = evaluate.error_metrics(fitted, qmap_gt)
        pooled.append({"file": rec["file"],
                       **{f"{ch}_{m}": getattr(metrics[ch], m)
                          for ch in metrics for m in ("rmse", "mare", "bias")}})
        log.info("fit %s: t1 rmse %.4f s", rec["file"], metrics["t1"].rmse)
    with open(os.path.join(args.out, "mle_metrics.json"), "w") as fh:
        json.dump(pooled, fh, indent=1)
    print(args.out)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    tcfg = cfg.train
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    tcfg = dataclasses.replace(tcfg, dataset=str(args.data))
    dataset = _open_dataset(args.data)
    _, history = ddpm.train(dataset, tcfg, out_dir=args.out, log=log.info)
    log.info("final epoch loss %.5f", history["epoch_loss"][-1])
    print(os.path.join(args.out, "model.qmap"))
    return 0


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    model = ddpm.load_model(args.model)
    dataset = _open_dataset(args.data)
    records = _select_records(dataset, args.split, None)
    if not 0 <= args.index < len(records):
        raise ValueError(f"--index {args.index} out of range (0..{len(records) - 1})")
    rec = records[args.index]
    _, series, _, _ = dataset.load_pair(rec)
    repeats = args.repeats if args.repeats is not None else cfg.sample.repeats
    seed = args.seed if args.seed is not None else cfg.sample.seed
    result = evaluate.repeat_sample(series, model, k=repeats, seed=seed)
    entries = _maps_container_entries(result.mean_map, "_mean")
    if result.std_map is not None:
        entries.update({"t1_std": result.std_map[0], "pd_std": result.std_map[1],
                        "b_std": result.std_map[2]})
    out = args.out
    if os.path.isdir(out) or not out.endswith(".qmap"):
        os.makedirs(out, exist_ok=True)
        out = os.path.join(out, f"sample_{rec['file']}")
    write_container(out, entries,
                    meta={"kind": "ddpm-sample", "source": rec["file"],
                          "repeats": repeats, "seed": seed, "seeds": result.seeds})
    log.info("sampled %s with K=%d", rec["file"], repeats)
    print(out)
    return 0


def cmd_train_regression(args) -> int:
    cfg = _load_config(args)
    rcfg = cfg.regression
    if args.seed is not None:
        rcfg = dataclasses.replace(rcfg, seed=args.seed)
    rcfg = dataclasses.replace(rcfg, dataset=str(args.data))
    dataset = _open_dataset(args.data)
    _, history = regression.train_regressor(dataset, rcfg, out_dir=args.out, log=log.info)
    log.info("final epoch loss %.5f", history["epoch_loss"][-1])
    print(os.path.join(args.out, "model.qmap"))
    return 0


def cmd_predict_regression(args) -> int:
    model = regression.load_regressor(args.model)
    dataset = _open_dataset(args.data)
    records = _select_records(dataset, args.split, None)
    if not 0 <= args.index < len(records):
        raise ValueError(f"--index {args.index} out of range (0..{len(records) - 1})")
    rec = records[args.index]
    _, series, _, _ = dataset.load_pair(rec)
    qmap = regression.predict(series, model)
    out = args.out
    if os.path.isdir(out) or not out.endswith(".qmap"):
        os.makedirs(out, exist_ok=True)
        out = os.path.join(out, f"regression_{rec['file']}")
    write_container(out, _maps_container_entries(qmap, "_map"),
                    meta={"kind": "regression-predict", "source": rec["file"]})
    print(out)
    return 0


def _sphere_gt_stds(manifest) -> dict:
    """Known ladder uncertainties when the manifest uses the standard values."""
    out = {}
    for k, t1 in enumerate(manifest.sphere_t1_values):
        for ref_t1, ref_std in zip(SPHERE_T1_SECONDS, SPHERE_T1_STD_SECONDS):
            if abs(t1 - ref_t1) < 1e-12:
                out[k] = ref_std
                break
    return out


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    dataset = _open_dataset(args.data)
    records = _select_records(dataset, args.split, args.limit)
    os.makedirs(args.out, exist_ok=True)
    repeats = args.repeats if args.repeats is not None else cfg.sample.repeats
    seed = args.seed if args.seed is not None else cfg.sample.seed

    methods = {}
    if args.model:
        methods["ddpm"] = ddpm.load_model(args.model)
    if args.regression_model:
        methods["regression"] = regression.load_regressor(args.regression_model)
    if args.mle:
        methods["mle"] = cfg.fit
    if not methods:
        raise ValueError("eval needs at least one of --model, --regression-model, --mle")

    gt_stds = _sphere_gt_stds(dataset.manifest) if dataset.manifest.kind == "spheres" else {}
    pools = {name: [] for name in methods}  # (qmap, spec) pairs for ROI pooling
    metrics_acc = {name: [] for name in methods}
    corr_std, corr_err = [], []
    for i, rec in enumerate(records):
        qmap_gt, series, labels, meta = dataset.load_pair(rec)
        spec = None
        if meta.get("regions"):
            spec = evaluate.roi_spec_from_regions(labels, meta["regions"],
                                                  gt_t1_std=gt_stds,
                                                  erosion=cfg.sample.erosion)
        for name, handle in methods.items():
            if name == "ddpm":
                result = evaluate.repeat_sample(series, handle, k=repeats,
                                                seed=seed + i)
                est = result.mean_map
                if result.std_map is not None:
                    corr_std.append(result.std_map[0][qmap_gt.mask])
                    corr_err.append(np.abs(est.t1_map - qmap_gt.t1_map)[qmap_gt.mask])
            elif name == "regression":
                est = regression.predict(series, handle)
            else:
                est, _ = mle.fit_map(series, handle)
            metrics_acc[name].append(evaluate.error_metrics(est, qmap_gt))
            if spec is not None:
                pools[name].append((est, spec))
        log.info("evaluated %s (%d/%d)", rec["file"], i + 1, len(records))

    reports = [evaluate.pooled_roi_stats(pools[name], method=name)
               for name in methods if pools[name]]
    if reports:
        evaluate.write_roi_csv(reports, os.path.join(args.out, "roi_report.csv"))
    summary = {}
    for name in methods:
        per_channel = {}
        for ch in ("t1", "pd", "b"):
            per_channel[ch] = {
                m: float(np.mean([getattr(e[ch], m) for e in metrics_acc[name]]))
                for m in ("rmse", "mare", "bias")
            }
        summary[name] = per_channel
    if corr_std:
        corr = evaluate.uncertainty_error_correlation(
            np.concatenate(corr_std), np.concatenate(corr_err),
            np.ones(sum(a.size for a in corr_std), dtype=bool))
        summary["ddpm"]["uncertainty_spearman"] = corr.rho if corr.defined else None
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        json.dump(summary, fh, indent=1)
    log.info("wrote %s", os.path.join(args.out, "metrics.json"))
    print(args.out)
    return 0


_PNG_KINDS = (
    ("t1_map", "t1"), ("pd_map", "pd"), ("b_map", "b"),
    ("t1_mean", "t1"), ("pd_mean", "pd"), ("b_mean", "b"),
    ("t1_std", "uncertainty"), ("pd_std", "uncertainty"), ("b_std", "uncertainty"),
)


def cmd_export_png(args) -> int:
    arrays, _ = read_container(args.input)
    written = []
    if args.entry:
        if args.entry not in arrays:
            raise KeyError(f"entry {args.entry!r} not in {args.input} "
                           f"(has {sorted(arrays)})")
        kind = args.kind or "t1"
        written.append(pngio.export_png(arrays[args.entry],
                                        f"{args.out}_{args.entry}.png", kind=kind))
    else:
        for entry, kind in _PNG_KINDS:
            if entry in arrays:
                written.append(pngio.export_png(arrays[entry],
                                                f"{args.out}_{entry}.png", kind=kind))
        if not written:
            raise ValueError(f"no exportable entries in {args.input}; "
                             f"use --entry (has {sorted(arrays)})")
    for path in written:
        print(path)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="strict JSON run configuration")
    common.add_argument("--seed", type=int, default=None,
                        help="override the relevant section seed")
    common.add_argument("--device-threads", type=int, default=None,
                        help="CPU thread cap (BLAS pools / dataset workers)")

    parser = argparse.ArgumentParser(prog="qmap",
                                     description="quantitative map estimation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="synthesize a paired dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit-mle", parents=[common], help="per-voxel least-squares fits")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_mle)

    p = sub.add_parser("train", parents=[common], help="train the diffusion estimator")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", parents=[common],
                       help="repeat-sample maps for one series")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train-regression", parents=[common],
                       help="train the regression baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_regression)

    p = sub.add_parser("predict-regression", parents=[common],
                       help="single-pass regression prediction")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict_regression)

    p = sub.add_parser("eval", parents=[common], help="ROI/metrics evaluation harness")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--model", help="diffusion checkpoint")
    p.add_argument("--regression-model", help="regression checkpoint")
    p.add_argument("--mle", action="store_true", help="include the MLE baseline")
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-png", parents=[common], help="grayscale PNG export")
    p.add_argument("--input", required=True)
    p.add_argument("--entry", help="container entry name (default: all known map entries)")
    p.add_argument("--kind", choices=["t1", "pd", "b", "uncertainty"])
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_export_png)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_threads(args.device_threads)
        return args.func(args)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
