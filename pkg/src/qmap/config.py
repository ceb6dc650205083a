"""Run configuration: one strict JSON file driving the whole pipeline.

Top-level keys (all optional, defaults shown by ``RunConfig()``):

* ``tis_seconds`` — inversion-time protocol, strictly increasing seconds
* ``seed``        — pipeline seed used when a section has none of its own
* ``manifest``    — dataset generation section (see DatasetManifest)
* ``fit``         — MLE fit options (see FitOptions)
* ``train``       — diffusion training section (see TrainConfig)
* ``regression``  — regression baseline section (see RegressionConfig)
* ``sample``      — sampling section: ``repeats`` (default 10), ``seed``,
                    ``erosion`` (ROI erosion voxels, default 1)

Unknown keys anywhere are rejected by name rather than ignored, so typos
fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

from .ddpm import TrainConfig
from .mle import FitOptions
from .nn import UNetConfig
from .phantom import DatasetManifest, TissueSpec
from .regression import RegressionConfig
from .signal import DEFAULT_TIS_SECONDS, Protocol


@dataclass(frozen=True)
class SampleSettings:
    repeats: int = 10
    seed: int = 0
    erosion: int = 1

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError(f"sample.repeats must be >= 1, got {self.repeats}")
        if self.erosion < 0:
            raise ValueError(f"sample.erosion must be >= 0, got {self.erosion}")


@dataclass(frozen=True)
class RunConfig:
    tis_seconds: tuple = DEFAULT_TIS_SECONDS
    seed: int = 0
    manifest: DatasetManifest = field(default_factory=DatasetManifest)
    fit: FitOptions = field(default_factory=FitOptions)
    train: TrainConfig = field(default_factory=TrainConfig)
    regression: RegressionConfig = field(default_factory=RegressionConfig)
    sample: SampleSettings = field(default_factory=SampleSettings)

    def protocol(self) -> Protocol:
        return Protocol(tuple(self.tis_seconds))


def _reject_unknown(d: dict, cls, section: str):
    allowed = {f.name for f in fields(cls)}
    for key in d:
        if key not in allowed:
            raise ValueError(f"unknown config key {key!r} in section {section!r} "
                             f"(allowed: {sorted(allowed)})")


def _fit_from_dict(d: dict) -> FitOptions:
    _reject_unknown(d, FitOptions, "fit")
    d = dict(d)
    for key in ("t1_grid", "b_grid"):
        if key in d:
            d[key] = tuple(d[key])
    if "bounds" in d:
        d["bounds"] = tuple(tuple(pair) for pair in d["bounds"])
    return FitOptions(**d)


def _train_from_dict(d: dict) -> TrainConfig:
    _reject_unknown(d, TrainConfig, "train")
    d = dict(d)
    if "unet" in d:
        _reject_unknown(d["unet"], UNetConfig, "train.unet")
        d["unet"] = UNetConfig.from_dict(d["unet"])
    return TrainConfig(**d)


def _regression_from_dict(d: dict) -> RegressionConfig:
    _reject_unknown(d, RegressionConfig, "regression")
    return RegressionConfig(**d)


def _manifest_from_dict(d: dict) -> DatasetManifest:
    _reject_unknown(d, DatasetManifest, "manifest")
    if "tissues" in d:
        for i, t in enumerate(d["tissues"]):
            extra = set(t) - {"label", "t1_range", "pd_range", "b_range"}
            if extra:
                raise ValueError(f"unknown config key {sorted(extra)[0]!r} in "
                                 f"section 'manifest.tissues[{i}]'")
    return DatasetManifest.from_dict(d)


def _sample_from_dict(d: dict) -> SampleSettings:
    _reject_unknown(d, SampleSettings, "sample")
    return SampleSettings(**d)


_SECTIONS = {
    "manifest": _manifest_from_dict,
    "fit": _fit_from_dict,
    "train": _train_from_dict,
    "regression": _regression_from_dict,
    "sample": _sample_from_dict,
}


def run_config_from_dict(d: dict) -> RunConfig:
    _reject_unknown(d, RunConfig, "<top level>")
    kwargs = {}
    for key, value in d.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ValueError(f"config section {key!r} must be an object")
            kwargs[key] = _SECTIONS[key](value)
        elif key == "tis_seconds":
            kwargs[key] = tuple(float(v) for v in value)
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def load_run_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must contain a JSON object")
    return run_config_from_dict(data)


def _plain(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        if isinstance(value, (DatasetManifest, TrainConfig, RegressionConfig, UNetConfig)):
            return value.to_dict()
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, TissueSpec):
        return {"label": value.label, "t1_range": list(value.t1_range),
                "pd_range": list(value.pd_range), "b_range": list(value.b_range)}
    return value


def run_config_to_dict(cfg: RunConfig) -> dict:
    return {f.name: _plain(getattr(cfg, f.name)) for f in fields(cfg)}


def save_run_config(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(run_config_to_dict(cfg), fh, indent=1, sort_keys=True)
        fh.write("\n")
