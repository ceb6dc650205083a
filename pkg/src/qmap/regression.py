"""Direct regression baseline: weighted series in, parameter maps out.

A residual CNN is trained to predict the scaled map stack from the
normalized condition series with plain MSE; prediction is one deterministic
forward pass.  Scaling and normalization are shared with :mod:`qmap.ddpm`
so the two methods are directly comparable.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .ddpm import (
    _collect_pairs,
    _maps_from_scaled,
    _scaled_stack,
    foreground_pd_p99,
    normalize_condition,
)
from .nn import Adam, RegressionNet, RegressionNetConfig, Tensor, no_grad
from .nn import functional as F
from .phantom import QuantMap, WeightedSeries


@dataclass(frozen=True)
class RegressionConfig:
    blocks: int = 6
    channels: int = 64
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    dataset: str = ""
    in_channels: int = 7
    out_channels: int = 3
    groups: int = 8

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError(f"blocks must be >= 1, got {self.blocks}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.batch_size < 1 or self.epochs < 1 or self.lr <= 0:
            raise ValueError("batch_size/epochs must be >= 1 and lr > 0")

    def net_config(self) -> RegressionNetConfig:
        return RegressionNetConfig(
            in_channels=self.in_channels,
            out_channels=self.out_channels,
            channels=self.channels,
            blocks=self.blocks,
            groups=self.groups,
        )

    def to_dict(self) -> dict:
        return {
            "blocks": self.blocks,
            "channels": self.channels,
            "lr": self.lr,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "dataset": self.dataset,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "groups": self.groups,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionConfig":
        return cls(**d)


@dataclass
class RegressionModel:
    net: RegressionNet
    pd_p99: float
    tis_seconds: tuple
    meta: dict = field(default_factory=dict)


def train_regressor(dataset, cfg: RegressionConfig, out_dir=None, log=None):
    """Fit the regression CNN; returns (RegressionModel, history)."""
    pairs = _collect_pairs(dataset, "train")
    protocol = pairs[0][1].protocol
    shape = pairs[0][0].shape
    for q, s in pairs:
        if q.shape != shape or s.protocol.tis != protocol.tis:
            raise ValueError("all training pairs must share shape and protocol")
    if len(protocol) != cfg.in_channels:
        raise ValueError(
            f"config expects {cfg.in_channels} input channels but the series has "
            f"{len(protocol)}")

    pd_p99 = foreground_pd_p99(pairs)
    target = np.stack([_scaled_stack(q, pd_p99) for q, _ in pairs])
    cond = np.stack([normalize_condition(s.images) for _, s in pairs])

    net = RegressionNet(cfg.net_config(), seed=cfg.seed)
    opt = Adam(net.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(10,)))

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    n = cond.shape[0]
    step_losses = []
    epoch_losses = []
    model = RegressionModel(net, pd_p99, protocol.tis, meta={"config": cfg.to_dict()})
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            pred = net(Tensor(cond[idx]))
            loss = F.mse(pred, Tensor(target[idx]))
            value = float(loss.data)
            if not np.isfinite(value):
                raise RuntimeError(
                    f"regression loss became non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            batch_losses.append(value)
            step_losses.append(value)
        epoch_losses.append(float(np.mean(batch_losses)))
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {epoch_losses[-1]:.5f}")
        if out_dir is not None:
            save_regressor(model, os.path.join(out_dir, f"ckpt_epoch{epoch + 1:04d}.qmap"))
            with open(os.path.join(out_dir, "loss_log.csv"), "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["step", "loss"])
                for i, v in enumerate(step_losses):
                    writer.writerow([i + 1, f"{v:.8e}"])
    if out_dir is not None:
        save_regressor(model, os.path.join(out_dir, "model.qmap"))
    return model, {"step_loss": step_losses, "epoch_loss": epoch_losses}


def predict(y: WeightedSeries, model: RegressionModel) -> QuantMap:
    """Deterministic single-pass map estimate for a weighted series."""
    if tuple(np.round(y.protocol.tis, 9)) != tuple(np.round(model.tis_seconds, 9)):
        raise ValueError(
            f"series protocol {y.protocol.tis} does not match the model's "
            f"{tuple(model.tis_seconds)}")
    cond = normalize_condition(y.images)[None]
    with no_grad():
        out = model.net(Tensor(cond)).data[0]
    return _maps_from_scaled(out, model.pd_p99)


def save_regressor(model: RegressionModel, path):
    arrays = {f"param/{k}": v.astype(np.float32) for k, v in model.net.state_dict().items()}
    meta = {
        "kind": "regression",
        "net": model.net.cfg.to_dict(),
        "pd_p99": model.pd_p99,
        "tis_seconds": list(model.tis_seconds),
    }
    meta.update(model.meta)
    write_container(path, arrays, meta=meta)


def load_regressor(path) -> RegressionModel:
    arrays, meta = read_container(path)
    if meta.get("kind") != "regression":
        raise ValueError(f"{path} is not a regression checkpoint (kind={meta.get('kind')!r})")
    net = RegressionNet(RegressionNetConfig.from_dict(meta["net"]), seed=0)
    net.load_state_dict({k[len("param/"):]: v for k, v in arrays.items()
                         if k.startswith("param/")})
    extra = {k: v for k, v in meta.items()
             if k not in ("kind", "net", "pd_p99", "tis_seconds")}
    return RegressionModel(net, float(meta["pd_p99"]), tuple(meta["tis_seconds"]), meta=extra)
