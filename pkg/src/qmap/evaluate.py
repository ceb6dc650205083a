"""Repeat-inference uncertainty and the quantitative evaluation harness.

``repeat_sample`` runs K independently seeded reverse chains for one
condition and reduces them to a posterior-mean map and a per-voxel standard
deviation (the uncertainty surrogate).  ROI statistics emulate calibration-
phantom reporting: per-sphere mean/std of T1 in milliseconds against ground
truth, with disk edges eroded away.  ``error_metrics`` and
``uncertainty_error_correlation`` quantify map accuracy and whether the
uncertainty ranks the actual errors.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, stats

from .ddpm import DdpmModel, _maps_from_scaled, ancestral_sample, prepare_condition
from .phantom import QuantMap, WeightedSeries
from .signal import TissueParams


@dataclass
class UncertaintyResult:
    """Mean and spread of K conditional samples for one weighted series."""

    mean_map: QuantMap
    std_map: np.ndarray | None  # (3, H, W); None when k == 1
    k: int
    seeds: list
    samples: np.ndarray = field(repr=False, default=None)  # (K, 3, H, W)


def derive_seeds(base_seed: int, k: int) -> list:
    return [int(v) for v in np.random.SeedSequence(base_seed).generate_state(k, np.uint64)]


def repeat_sample(y: WeightedSeries, model: DdpmModel, k: int = 10,
                  seed: int = 0) -> UncertaintyResult:
    """K independently seeded conditional samples, reduced to mean and std.

    The repeats run as rows of one batch with per-row RNG streams; each
    chain sees exactly the noise a sequential :func:`qmap.ddpm.sample` call
    with the same derived seed would draw, so results agree with sequential
    runs to float32 rounding.  Std uses the (K-1)-denominator sample
    estimator and requires K >= 2.
    """
    if k < 1:
        raise ValueError(f"repeat count must be >= 1, got {k}")
    seeds = derive_seeds(seed, k)
    rngs = [np.random.default_rng(s) for s in seeds]
    cond = prepare_condition(y, model)
    x = ancestral_sample(model.net, model.schedule, np.repeat(cond[None], k, axis=0), rngs)
    stacks = np.stack([_maps_from_scaled(x[i], model.pd_p99).stack() for i in range(k)])
    mean = stacks.mean(axis=0)
    std = stacks.std(axis=0, ddof=1) if k >= 2 else None
    mean_map = QuantMap(mean[0], mean[1], mean[2], np.ones(mean.shape[1:], dtype=bool))
    return UncertaintyResult(mean_map, std, k, seeds, samples=stacks)


# ---------------------------------------------------------------------------
# ROI statistics


@dataclass
class RoiSpec:
    """Labeled regions with per-region ground truth.

    ``labels`` is an integer image (< 0 = background); ``gt`` maps each
    region label to its true parameters, ``gt_t1_std`` optionally to a known
    ground-truth uncertainty [s].  Regions are eroded by ``erosion`` voxels
    before statistics to drop partial-volume edges.
    """

    labels: np.ndarray
    gt: dict
    names: dict = field(default_factory=dict)
    gt_t1_std: dict = field(default_factory=dict)
    erosion: int = 1

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if not self.gt:
            raise ValueError("RoiSpec needs at least one region")
        present = set(np.unique(self.labels[self.labels >= 0]).tolist())
        missing = sorted(set(self.gt) - present)
        if missing:
            raise ValueError(f"regions {missing} not present in the label image")

    def region_mask(self, label: int) -> np.ndarray:
        mask = self.labels == label
        if self.erosion > 0:
            mask = ndimage.binary_erosion(mask, iterations=self.erosion)
        if not mask.any():
            raise ValueError(f"region {label} is empty after erosion={self.erosion}")
        return mask


def roi_spec_from_regions(labels, regions, gt_t1_std=None, erosion: int = 1) -> RoiSpec:
    """Build a RoiSpec from a dataset pair's label image and region metadata."""
    gt = {}
    names = {}
    for r in regions:
        k = int(r["label"])
        gt[k] = TissueParams(float(r["t1"]), float(r["pd"]), float(r["b"]))
        names[k] = str(r.get("name", f"roi{k}"))
    stds = {int(k): float(v) for k, v in (gt_t1_std or {}).items()}
    return RoiSpec(labels, gt, names, stds, erosion)


@dataclass
class RoiRow:
    region: int
    name: str
    gt_t1_ms: float
    gt_std_ms: float
    est_mean_ms: float
    est_std_ms: float
    rel_bias: float
    n_voxels: int
    pd_mean: float = 0.0
    pd_std: float = 0.0
    b_mean: float = 0.0
    b_std: float = 0.0


@dataclass
class RoiReport:
    method: str
    rows: list


def roi_stats(qmap: QuantMap, spec: RoiSpec, method: str = "") -> RoiReport:
    """Per-region mean/std of the map channels; T1 reported in milliseconds."""
    rows = []
    for label in sorted(spec.gt):
        sel = spec.region_mask(label)
        t1 = qmap.t1_map[sel]
        gt_t1 = spec.gt[label].t1
        rows.append(RoiRow(
            region=label,
            name=spec.names.get(label, f"roi{label}"),
            gt_t1_ms=1e3 * gt_t1,
            gt_std_ms=1e3 * spec.gt_t1_std.get(label, 0.0),
            est_mean_ms=1e3 * float(t1.mean()),
            est_std_ms=1e3 * float(t1.std(ddof=1)) if t1.size > 1 else 0.0,
            rel_bias=float((t1.mean() - gt_t1) / gt_t1),
            n_voxels=int(sel.sum()),
            pd_mean=float(qmap.pd_map[sel].mean()),
            pd_std=float(qmap.pd_map[sel].std(ddof=1)) if t1.size > 1 else 0.0,
            b_mean=float(qmap.b_map[sel].mean()),
            b_std=float(qmap.b_map[sel].std(ddof=1)) if t1.size > 1 else 0.0,
        ))
    return RoiReport(method=method, rows=rows)


def pooled_roi_stats(maps_and_specs, method: str = "") -> RoiReport:
    """ROI stats with voxels pooled across several (map, spec) pairs.

    Region labels must mean the same thing in every spec.  When the per-pair
    ground truth varies (brain-style random draws), the reported truth is the
    voxel-weighted average and rel_bias is taken against it.
    """
    maps_and_specs = list(maps_and_specs)
    if not maps_and_specs:
        raise ValueError("nothing to pool")
    acc = {}
    for qmap, spec in maps_and_specs:
        for label in sorted(spec.gt):
            sel = spec.region_mask(label)
            entry = acc.setdefault(label, {
                "t1": [], "pd": [], "b": [], "gt_sum": 0.0, "gt_std_sum": 0.0,
                "n": 0, "name": spec.names.get(label, f"roi{label}"),
            })
            entry["t1"].append(qmap.t1_map[sel])
            entry["pd"].append(qmap.pd_map[sel])
            entry["b"].append(qmap.b_map[sel])
            count = int(sel.sum())
            entry["gt_sum"] += spec.gt[label].t1 * count
            entry["gt_std_sum"] += spec.gt_t1_std.get(label, 0.0) * count
            entry["n"] += count
    rows = []
    for label in sorted(acc):
        entry = acc[label]
        t1 = np.concatenate(entry["t1"])
        pd = np.concatenate(entry["pd"])
        b = np.concatenate(entry["b"])
        gt_t1 = entry["gt_sum"] / entry["n"]
        rows.append(RoiRow(
            region=label,
            name=entry["name"],
            gt_t1_ms=1e3 * gt_t1,
            gt_std_ms=1e3 * entry["gt_std_sum"] / entry["n"],
            est_mean_ms=1e3 * float(t1.mean()),
            est_std_ms=1e3 * float(t1.std(ddof=1)) if t1.size > 1 else 0.0,
            rel_bias=float((t1.mean() - gt_t1) / gt_t1),
            n_voxels=entry["n"],
            pd_mean=float(pd.mean()),
            pd_std=float(pd.std(ddof=1)) if pd.size > 1 else 0.0,
            b_mean=float(b.mean()),
            b_std=float(b.std(ddof=1)) if b.size > 1 else 0.0,
        ))
    return RoiReport(method=method, rows=rows)


def write_roi_csv(reports, path):
    """Table-style CSV, one row per (region, method)."""
    if isinstance(reports, RoiReport):
        reports = [reports]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region", "gt_t1_ms", "gt_std_ms", "method",
                         "est_mean_ms", "est_std_ms", "rel_bias"])
        for report in reports:
            for row in report.rows:
                writer.writerow([
                    row.name, f"{row.gt_t1_ms:.3f}", f"{row.gt_std_ms:.3f}",
                    report.method, f"{row.est_mean_ms:.3f}", f"{row.est_std_ms:.3f}",
                    f"{row.rel_bias:.5f}",
                ])


# ---------------------------------------------------------------------------
# Error metrics


@dataclass(frozen=True)
class ChannelMetrics:
    rmse: float
    mare: float
    bias: float


def error_metrics(estimate: QuantMap, truth: QuantMap, mask=None) -> dict:
    """Masked RMSE / mean-absolute-relative-error / bias per channel.

    Works in native units (t1 seconds).  MARE averages only over voxels with
    non-zero truth.  ``mask`` defaults to the truth map's own mask.
    """
    if estimate.shape != truth.shape:
        raise ValueError(f"shape mismatch: {estimate.shape} vs {truth.shape}")
    mask = truth.mask if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty evaluation mask")
    out = {}
    pairs = (("t1", estimate.t1_map, truth.t1_map),
             ("pd", estimate.pd_map, truth.pd_map),
             ("b", estimate.b_map, truth.b_map))
    for name, est, gt in pairs:
        diff = est[mask] - gt[mask]
        gtv = gt[mask]
        nz = gtv != 0
        mare = float(np.abs(diff[nz] / gtv[nz]).mean()) if nz.any() else 0.0
        out[name] = ChannelMetrics(
            rmse=float(np.sqrt((diff**2).mean())),
            mare=mare,
            bias=float(diff.mean()),
        )
    return out


@dataclass(frozen=True)
class CorrelationResult:
    rho: float
    defined: bool


def uncertainty_error_correlation(std_map, error_map, mask) -> CorrelationResult:
    """Spearman rank correlation between uncertainty and absolute error.

    Constant inputs have no rank ordering; those return ``defined=False``
    with a NaN coefficient instead of a spurious number.
    """
    std_map = np.asarray(std_map, dtype=np.float64)
    error_map = np.asarray(error_map, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if std_map.shape != error_map.shape or std_map.shape != mask.shape:
        raise ValueError(
            f"shape mismatch: std {std_map.shape}, error {error_map.shape}, "
            f"mask {mask.shape}")
    if not mask.any():
        raise ValueError("empty mask")
    a = std_map[mask]
    b = np.abs(error_map[mask])
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return CorrelationResult(float("nan"), False)
    rho = float(stats.spearmanr(a, b)[0])
    return CorrelationResult(rho, bool(np.isfinite(rho)))
