"""Procedural phantom generation and paired-dataset synthesis.

Two slice geometries are provided: a sphere-array phantom mimicking the
NIST/ISMRM calibration phantom (disks with a ladder of known T1 values) and a
brain-like layout of smooth nested tissue regions.  ``realise_dataset`` turns
a :class:`DatasetManifest` into persisted (parameter maps, weighted series)
pairs: every slice geometry is realised ``realisations`` times with fresh
parameter draws, the forward signal model produces the weighted series, and
measurement noise is added.

Every pair derives its RNG streams from ``(manifest seed, slice, realisation)``
so generation order (serial or parallel) never changes the output bytes.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .container import read_container, write_container
from .signal import (
    DEFAULT_SNR,
    NOISE_KINDS,
    NoiseSpec,
    Protocol,
    add_noise,
    series_from_maps,
    sigma_for_snr,
)

# Calibrated T1 ladder of the NiCl2 contrast spheres in the NIST/ISMRM system
# phantom (3 T, 20 C), in seconds.
SPHERE_T1_SECONDS = (
    1.884, 1.330, 0.987, 0.690, 0.485, 0.342, 0.241,
    0.175, 0.121, 0.085, 0.060, 0.043, 0.030, 0.021,
)
# Manufacturer uncertainty on the ladder above, in seconds.
SPHERE_T1_STD_SECONDS = (
    0.030, 0.020, 0.014, 0.010, 0.007, 0.005, 0.003,
    0.003, 0.002, 0.001, 0.001, 0.001, 0.001, 0.001,
)

MIN_FOREGROUND_FRACTION = 0.05


@dataclass
class QuantMap:
    """3-channel parameter image with a validity mask.

    Inside the mask: t1 > 0 [s], pd > 0 [a.u.], 0 <= b <= 2.  Outside the
    mask all three channels are zero by convention.
    """

    t1_map: np.ndarray
    pd_map: np.ndarray
    b_map: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.t1_map = np.asarray(self.t1_map, dtype=np.float64)
        self.pd_map = np.asarray(self.pd_map, dtype=np.float64)
        self.b_map = np.asarray(self.b_map, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        shapes = {a.shape for a in (self.t1_map, self.pd_map, self.b_map, self.mask)}
        if len(shapes) != 1:
            raise ValueError(f"map channels must share a shape, got {shapes}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.t1_map.shape

    def validate(self) -> None:
        m = self.mask
        if m.any():
            if not (self.t1_map[m] > 0).all():
                raise ValueError("t1 must be > 0 inside the mask")
            if not (self.pd_map[m] > 0).all():
                raise ValueError("pd must be > 0 inside the mask")
            b = self.b_map[m]
            if not ((b >= 0) & (b <= 2)).all():
                raise ValueError("b must be in [0, 2] inside the mask")
        out = ~m
        if out.any():
            for name, arr in (("t1", self.t1_map), ("pd", self.pd_map), ("b", self.b_map)):
                if not (arr[out] == 0).all():
                    raise ValueError(f"{name} must be 0 outside the mask")

    def stack(self) -> np.ndarray:
        """Channels-first (3, H, W) view of (t1, pd, b)."""
        return np.stack([self.t1_map, self.pd_map, self.b_map])


@dataclass
class WeightedSeries:
    """Magnitude image per inversion time, channels-first (N, H, W)."""

    images: np.ndarray
    protocol: Protocol

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 3:
            raise ValueError(f"series must be (channels, H, W), got {self.images.shape}")
        if self.images.shape[0] != len(self.protocol):
            raise ValueError(
                f"series has {self.images.shape[0]} channels but protocol has "
                f"{len(self.protocol)} inversion times")
        if (self.images < 0).any():
            raise ValueError("weighted series values must be >= 0")

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.images.shape[1:]


@dataclass(frozen=True)
class TissueSpec:
    """Uniform per-realisation sampling ranges for one tissue type."""

    label: str
    t1_range: tuple[float, float]
    pd_range: tuple[float, float]
    b_range: tuple[float, float] = (1.8, 2.0)

    def __post_init__(self):
        for name, (lo, hi) in (("t1", self.t1_range), ("pd", self.pd_range),
                               ("b", self.b_range)):
            if lo > hi:
                raise ValueError(f"{self.label}: {name}_range lo > hi ({lo} > {hi})")
        if self.t1_range[0] <= 0:
            raise ValueError(f"{self.label}: t1 range must be positive")
        if self.pd_range[0] < 0:
            raise ValueError(f"{self.label}: pd range must be non-negative")
        if self.b_range[0] < 0 or self.b_range[1] > 2:
            raise ValueError(f"{self.label}: b range must lie in [0, 2]")


# Implementer defaults for brain-like slices; ranges are configurable.
DEFAULT_TISSUES = (
    TissueSpec("csf", (3.0, 4.5), (0.9, 1.0)),
    TissueSpec("gm", (1.2, 1.7), (0.7, 0.9)),
    TissueSpec("wm", (0.7, 1.0), (0.6, 0.8)),
)


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def make_sphere_phantom(
    shape: tuple[int, int],
    sphere_t1_list=SPHERE_T1_SECONDS,
    pd: float = 1.0,
    b: float = 1.9,
    seed=None,
    radius: int | None = None,
    centers=None,
) -> tuple[QuantMap, np.ndarray]:
    """Disk-array phantom; returns the parameter maps and a label image.

    Disks are laid out on a regular grid (jittered when ``seed`` is given) or
    at explicit ``centers``.  Disk k carries t1 = ``sphere_t1_list[k]``; pd
    and b are constant across disks.  Labels are -1 for background and the
    disk index inside each disk.  Overlapping or out-of-bounds disks are
    rejected.
    """
    h, w = shape
    t1_values = np.asarray(sphere_t1_list, dtype=np.float64)
    n = t1_values.size
    if n == 0:
        raise ValueError("need at least one sphere")
    if (t1_values <= 0).any():
        raise ValueError("sphere t1 values must be > 0")

    if centers is None:
        ncols = int(np.ceil(np.sqrt(n)))
        nrows = int(np.ceil(n / ncols))
        cell_h, cell_w = h / nrows, w / ncols
        if radius is None:
            radius = max(2, int(0.3 * min(cell_h, cell_w)))
        slack = int(min(cell_h, cell_w) / 2 - radius - 1)
        rng = _rng(seed) if seed is not None else None
        centers = []
        for k in range(n):
            r, c = divmod(k, ncols)
            cy = (r + 0.5) * cell_h
            cx = (c + 0.5) * cell_w
            if rng is not None and slack > 0:
                cy += rng.integers(-slack, slack + 1)
                cx += rng.integers(-slack, slack + 1)
            centers.append((cy, cx))
    elif radius is None:
        raise ValueError("explicit centers require an explicit radius")
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape != (n, 2):
        raise ValueError(f"need one (row, col) center per sphere, got {centers.shape}")

    for k, (cy, cx) in enumerate(centers):
        if cy - radius < 0 or cy + radius > h - 1 or cx - radius < 0 or cx + radius > w - 1:
            raise ValueError(f"sphere {k} at ({cy:.1f}, {cx:.1f}) r={radius} "
                             f"does not fit inside {shape}")
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    close = (dist < 2 * radius) & ~np.eye(n, dtype=bool)
    if close.any():
        i, j = np.argwhere(close)[0]
        raise ValueError(f"spheres {i} and {j} overlap (distance {dist[i, j]:.1f} "
                         f"< {2 * radius})")

    yy, xx = np.ogrid[:h, :w]
    labels = np.full(shape, -1, dtype=np.int16)
    t1 = np.zeros(shape)
    for k, (cy, cx) in enumerate(centers):
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
        labels[disk] = k
        t1[disk] = t1_values[k]
    mask = labels >= 0
    qmap = QuantMap(t1, np.where(mask, pd, 0.0), np.where(mask, b, 0.0), mask)
    qmap.validate()
    return qmap, labels


def make_brain_phantom(
    shape: tuple[int, int],
    tissues=DEFAULT_TISSUES,
    seed=0,
    param_seed=None,
    background_fraction: float = 0.25,
    constant_b: bool = True,
    b_variation: float = 0.0,
) -> tuple[QuantMap, np.ndarray]:
    """Brain-like slice: smooth random nested regions, one parameter draw per
    tissue.

    ``seed`` fixes the region geometry, ``param_seed`` (defaults to ``seed``)
    the parameter draws, so one geometry can be realised many times.  The
    inversion efficiency is a single slice-wide draw when ``constant_b``;
    ``b_variation`` > 0 superimposes a smooth spatial modulation of that
    amplitude.
    """
    tissues = tuple(tissues)
    if not tissues:
        raise ValueError("need at least one tissue")
    if not 0 <= background_fraction < 1:
        raise ValueError(f"background_fraction must be in [0, 1), got {background_fraction}")
    h, w = shape
    geo = _rng(seed)
    rough = geo.standard_normal((h, w))
    smooth = ndimage.gaussian_filter(rough, sigma=max(2.0, min(h, w) / 8.0))
    order = np.argsort(smooth, axis=None, kind="stable")
    rank = np.empty(h * w)
    rank[order] = np.arange(h * w) / (h * w)
    rank = rank.reshape(h, w)

    labels = np.full(shape, -1, dtype=np.int16)
    tissue_frac = (1.0 - background_fraction) / len(tissues)
    lo = background_fraction
    for k in range(len(tissues)):
        hi = 1.0 if k == len(tissues) - 1 else lo + tissue_frac
        labels[(rank >= lo) & (rank < hi)] = k
        lo = hi

    params = _rng(seed if param_seed is None else param_seed)
    t1 = np.zeros(shape)
    pd = np.zeros(shape)
    b = np.zeros(shape)
    b_global = None
    for k, tissue in enumerate(tissues):
        region = labels == k
        t1[region] = params.uniform(*tissue.t1_range)
        pd[region] = params.uniform(*tissue.pd_range)
        draw = params.uniform(*tissue.b_range)
        if constant_b:
            b_global = draw if b_global is None else b_global
            b[region] = b_global
        else:
            b[region] = draw
    mask = labels >= 0
    if b_variation > 0:
        field_rough = geo.standard_normal((h, w))
        mod = ndimage.gaussian_filter(field_rough, sigma=max(2.0, min(h, w) / 4.0))
        span = mod.max() - mod.min()
        if span > 0:
            mod = (mod - mod.min()) / span * 2.0 - 1.0
        b = np.where(mask, np.clip(b + b_variation * mod, 0.0, 2.0), 0.0)
    qmap = QuantMap(t1, pd, b, mask)
    qmap.validate()
    return qmap, labels


@dataclass
class DatasetManifest:
    """Everything needed to (re)generate one dataset deterministically."""

    kind: str = "spheres"
    slices: int = 200
    realisations: int = 4
    shape: tuple[int, int] = (64, 64)
    seed: int = 0
    noise_kind: str = "rician"
    noise_sigma: float | None = None  # None -> sigma = max(pd) / snr per series
    snr: float = DEFAULT_SNR
    tissues: tuple[TissueSpec, ...] = DEFAULT_TISSUES
    sphere_t1_values: tuple[float, ...] = SPHERE_T1_SECONDS
    sphere_pd_range: tuple[float, float] = (0.8, 1.2)
    sphere_b_range: tuple[float, float] = (1.8, 2.0)
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.kind not in ("spheres", "brain"):
            raise ValueError(f"kind must be 'spheres' or 'brain', got {self.kind!r}")
        if self.slices <= 0 or self.realisations <= 0:
            raise ValueError("slices and realisations must be > 0")
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"noise_kind must be one of {NOISE_KINDS}")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {self.split_fractions}")
        self.shape = tuple(int(s) for s in self.shape)

    def pair_count(self) -> int:
        return self.slices * self.realisations

    def slice_split(self, slice_idx: int) -> str:
        n_train = int(round(self.split_fractions[0] * self.slices))
        n_val = int(round(self.split_fractions[1] * self.slices))
        if slice_idx < n_train:
            return "train"
        if slice_idx < n_train + n_val:
            return "val"
        return "test"

    def plan(self) -> list[dict]:
        """Pair records (file name, slice, realisation, split) without I/O."""
        return [
            {
                "file": f"pair_s{s:05d}_r{r:02d}.qmap",
                "slice": s,
                "realisation": r,
                "split": self.slice_split(s),
            }
            for s in range(self.slices)
            for r in range(self.realisations)
        ]

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "slices": self.slices,
            "realisations": self.realisations,
            "shape": list(self.shape),
            "seed": self.seed,
            "noise_kind": self.noise_kind,
            "noise_sigma": self.noise_sigma,
            "snr": self.snr,
            "split_fractions": list(self.split_fractions),
        }
        if self.kind == "brain":
            d["tissues"] = [
                {"label": t.label, "t1_range": list(t.t1_range),
                 "pd_range": list(t.pd_range), "b_range": list(t.b_range)}
                for t in self.tissues
            ]
        else:
            d["sphere_t1_values"] = list(self.sphere_t1_values)
            d["sphere_pd_range"] = list(self.sphere_pd_range)
            d["sphere_b_range"] = list(self.sphere_b_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        d = dict(d)
        if "tissues" in d:
            d["tissues"] = tuple(
                TissueSpec(t["label"], tuple(t["t1_range"]), tuple(t["pd_range"]),
                           tuple(t.get("b_range", (1.8, 2.0))))
                for t in d["tissues"]
            )
        for key in ("shape", "split_fractions", "sphere_t1_values",
                    "sphere_pd_range", "sphere_b_range"):
            if key in d:
                d[key] = tuple(d[key])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(**d)


def _pair_streams(manifest: DatasetManifest, s: int, r: int):
    geo = np.random.SeedSequence(entropy=manifest.seed, spawn_key=(0, s))
    par = np.random.SeedSequence(entropy=manifest.seed, spawn_key=(1, s, r))
    noise = np.random.SeedSequence(entropy=manifest.seed, spawn_key=(2, s, r))
    return geo, par, int(noise.generate_state(1)[0])


def _realise_pair(manifest: DatasetManifest, protocol: Protocol, s: int, r: int):
    geo_ss, par_ss, noise_seed = _pair_streams(manifest, s, r)
    if manifest.kind == "spheres":
        params = _rng(par_ss)
        pd = params.uniform(*manifest.sphere_pd_range)
        b = params.uniform(*manifest.sphere_b_range)
        qmap, labels = make_sphere_phantom(
            manifest.shape, manifest.sphere_t1_values, pd=pd, b=b, seed=geo_ss)
        regions = [
            {"label": k, "t1": float(t1), "pd": float(pd), "b": float(b)}
            for k, t1 in enumerate(manifest.sphere_t1_values)
        ]
    else:
        qmap, labels = make_brain_phantom(
            manifest.shape, manifest.tissues, seed=geo_ss, param_seed=par_ss)
        regions = []
        for k, tissue in enumerate(manifest.tissues):
            sel = labels == k
            if sel.any():
                regions.append({
                    "label": k,
                    "name": tissue.label,
                    "t1": float(qmap.t1_map[sel][0]),
                    "pd": float(qmap.pd_map[sel][0]),
                    "b": float(qmap.b_map[sel][0]),
                })
    fg = qmap.mask.mean()
    if fg < MIN_FOREGROUND_FRACTION:
        raise ValueError(f"slice {s} foreground fraction {fg:.3f} < "
                         f"{MIN_FOREGROUND_FRACTION} (degenerate geometry)")

    # Quantize maps to f32 before the forward model so stored maps and stored
    # series stay exactly consistent on re-read.
    t1 = qmap.t1_map.astype(np.float32).astype(np.float64)
    pd_map = qmap.pd_map.astype(np.float32).astype(np.float64)
    b_map = qmap.b_map.astype(np.float32).astype(np.float64)
    clean = series_from_maps(t1, pd_map, b_map, protocol)
    if manifest.noise_sigma is not None:
        sigma = manifest.noise_sigma
    else:
        sigma = sigma_for_snr(float(pd_map.max()), manifest.snr) if pd_map.max() > 0 else 0.0
    series = add_noise(clean, NoiseSpec(manifest.noise_kind, sigma, noise_seed))
    return qmap, labels, series, regions, sigma


def realise_dataset(manifest: DatasetManifest, out_dir, protocol: Protocol | None = None,
                    workers: int = 1) -> dict:
    """Generate and persist every (maps, series) pair of the manifest.

    Returns the written sidecar index (also stored as ``manifest.json``).
    Pair files are independent of generation order, so ``workers > 1`` yields
    byte-identical output to a serial run.
    """
    protocol = protocol or Protocol()
    os.makedirs(out_dir, exist_ok=True)
    records = manifest.plan()

    def build(rec):
        s, r = rec["slice"], rec["realisation"]
        qmap, labels, series, regions, sigma = _realise_pair(manifest, protocol, s, r)
        path = os.path.join(out_dir, rec["file"])
        try:
            write_container(
                path,
                {
                    "t1_map": qmap.t1_map,
                    "pd_map": qmap.pd_map,
                    "b_map": qmap.b_map,
                    "mask": qmap.mask.astype(np.float32),
                    "labels": labels.astype(np.float32),
                    "series": series,
                },
                meta={
                    "tis_seconds": list(protocol.tis),
                    "slice": s,
                    "realisation": r,
                    "split": rec["split"],
                    "noise": {"kind": manifest.noise_kind, "sigma": sigma},
                    "regions": regions,
                },
                units={"t1_map": "s", "pd_map": "au", "b_map": "1",
                       "mask": "bool", "labels": "index", "series": "au"},
            )
        except OSError as exc:
            raise OSError(f"failed writing dataset pair {path}: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(build, records))
    else:
        for rec in records:
            build(rec)

    index = {
        "format": "qmap-dataset-v1",
        "manifest": manifest.to_dict(),
        "protocol": {"tis_seconds": list(protocol.tis)},
        "pairs": records,
    }
    index_path = os.path.join(out_dir, "manifest.json")
    tmp = index_path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
    os.replace(tmp, index_path)
    return index


@dataclass
class Dataset:
    """On-disk dataset handle: sidecar index plus pair loading."""

    root: str
    manifest: DatasetManifest
    protocol: Protocol
    records: list = field(default_factory=list)

    @classmethod
    def open(cls, root) -> "Dataset":
        index_path = os.path.join(root, "manifest.json")
        if not os.path.exists(index_path):
            raise FileNotFoundError(f"no dataset index at {index_path}")
        with open(index_path, encoding="utf-8") as fh:
            index = json.load(fh)
        manifest = DatasetManifest.from_dict(index["manifest"])
        protocol = Protocol(tuple(index["protocol"]["tis_seconds"]))
        return cls(str(root), manifest, protocol, index["pairs"])

    def select(self, split: str | None = None) -> list:
        if split is None:
            return list(self.records)
        return [r for r in self.records if r["split"] == split]

    def load_pair(self, record) -> tuple[QuantMap, WeightedSeries, np.ndarray, dict]:
        arrays, meta = read_container(os.path.join(self.root, record["file"]))
        qmap = QuantMap(arrays["t1_map"], arrays["pd_map"], arrays["b_map"],
                        arrays["mask"] > 0.5)
        series = WeightedSeries(arrays["series"], self.protocol)
        labels = arrays["labels"].astype(np.int16)
        return qmap, series, labels, meta
