"""Conditional denoising diffusion for quantitative-map estimation.

The generative target x0 is the scaled (t1, pd, b) map stack; the condition
y is the normalized weighted series, concatenated channelwise with x_t at
every denoising step.  Training minimises the standard epsilon-prediction
objective; sampling runs the ancestral reverse chain with sigma_t^2 = beta_t
and no noise on the final step.

Map scaling uses f(x) = 2*tanh(x) - 1, which sends the physical domain
[0, inf) into [-1, 1).  Before scaling, pd is divided by the training set's
99th-percentile foreground value (stored in the checkpoint) and the condition
series by its own per-sample 99th percentile, so inference needs nothing
beyond the checkpoint.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .container import write_container, read_container
from .nn import Adam, Tensor, UNet, UNetConfig, no_grad
from .nn import functional as F
from .phantom import Dataset, QuantMap, WeightedSeries

UNSCALE_CEIL = 1.0 - 1e-6


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Linear-beta schedule and its derived per-step quantities."""

    t_steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_sigma: np.ndarray

    def __post_init__(self):
        if not ((self.beta > 0) & (self.beta < 1)).all():
            raise ValueError("beta must lie in (0, 1)")
        if not (np.diff(self.alpha_bar) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")
        if self.posterior_sigma[0] != 0.0 or (self.posterior_sigma < 0).any():
            raise ValueError("posterior sigma must be >= 0 with a zero final-step entry")


def make_schedule(t_steps: int) -> NoiseSchedule:
    """Linear beta schedule over ``t_steps``.

    Endpoints are 1e-4 and 0.02 at 1000 steps and are rescaled by
    ``1000 / t_steps`` otherwise, which keeps the total corruption (and so
    alpha_bar at the final step, ~4e-5) roughly constant when running short
    desk-scale chains.
    """
    if t_steps < 2:
        raise ValueError(f"schedule needs at least 2 steps, got {t_steps}")
    scale = 1000.0 / t_steps
    beta = np.clip(scale * np.linspace(1e-4, 0.02, t_steps), 0.0, 0.999)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    sigma[0] = 0.0
    return NoiseSchedule(t_steps, beta, alpha, alpha_bar, sigma)


def scale_map(x) -> np.ndarray:
    """Elementwise 2*tanh(x) - 1 on non-negative normalized maps."""
    x = np.asarray(x, dtype=np.float64)
    if (x < 0).any():
        raise ValueError("scale_map input must be >= 0 (normalized physical maps)")
    return 2.0 * np.tanh(x) - 1.0


def unscale_map(v, return_flag: bool = False):
    """Inverse of :func:`scale_map`: atanh((v+1)/2) with clamping to [-1, 1).

    Values outside the representable range are clamped; ``return_flag=True``
    additionally reports whether any clamping occurred.
    """
    v = np.asarray(v, dtype=np.float64)
    flagged = bool((v < -1.0).any() or (v > UNSCALE_CEIL).any())
    x = np.arctanh((np.clip(v, -1.0, UNSCALE_CEIL) + 1.0) / 2.0)
    if return_flag:
        return x, flagged
    return x


def q_sample(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """Forward-corrupt ``x0`` to step ``t`` (1-indexed, possibly per-sample)."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} shapes differ")
    t = np.asarray(t)
    if ((t < 1) | (t > sched.t_steps)).any():
        raise ValueError(f"step out of range 1..{sched.t_steps}")
    ab = sched.alpha_bar[t - 1]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(x0.dtype, copy=False)


def normalize_condition(images: np.ndarray) -> np.ndarray:
    """Per-sample condition normalization: divide by the 99th percentile."""
    scale = float(np.percentile(images, 99))
    if scale <= 0:
        scale = 1.0
    return (np.asarray(images, dtype=np.float64) / scale).astype(np.float32)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 2e-4
    t_steps: int = 1000
    seed: int = 0
    dataset: str = ""
    unet: UNetConfig = field(default_factory=UNetConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.t_steps < 2:
            raise ValueError(f"t_steps must be >= 2, got {self.t_steps}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "t_steps": self.t_steps,
            "seed": self.seed,
            "dataset": self.dataset,
            "unet": self.unet.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "unet" in d:
            d["unet"] = UNetConfig.from_dict(d["unet"])
        return cls(**d)


@dataclass
class DdpmModel:
    """A trained denoiser plus everything needed to run it standalone."""

    net: UNet
    schedule: NoiseSchedule
    pd_p99: float
    tis_seconds: tuple
    meta: dict = field(default_factory=dict)


def _check_spatial(shape, channels):
    factor = 2 ** (len(channels) - 1)
    if shape[0] % factor or shape[1] % factor:
        raise ValueError(
            f"spatial shape {shape} must be divisible by {factor} "
            f"for a {len(channels)}-level network")


def _collect_pairs(dataset, split: str = "train"):
    """Accept a Dataset (uses the given split) or an explicit pair sequence."""
    if isinstance(dataset, Dataset):
        records = dataset.select(split) or dataset.select(None)
        pairs = [dataset.load_pair(r)[:2] for r in records]
    else:
        pairs = [(q, s) for q, s in dataset]
    if not pairs:
        raise ValueError("dataset contains no training pairs")
    return pairs


def _scaled_stack(qmap: QuantMap, pd_p99: float) -> np.ndarray:
    stack = qmap.stack().copy()
    stack[1] /= pd_p99
    return scale_map(stack).astype(np.float32)


def foreground_pd_p99(pairs) -> float:
    values = np.concatenate([q.pd_map[q.mask].ravel() for q, _ in pairs if q.mask.any()])
    if values.size == 0:
        raise ValueError("no foreground voxels in dataset; cannot normalize pd")
    return float(np.percentile(values, 99))


def train(dataset, cfg: TrainConfig, out_dir=None, log=None):
    """Train the conditional denoiser; returns (DdpmModel, history).

    ``history["epoch_loss"]`` holds per-epoch mean losses and
    ``history["step_loss"]`` every batch loss, in order.  With ``out_dir``
    set, a checkpoint is written after every epoch along with a CSV loss log.
    A non-finite loss aborts with a diagnostic dump.
    """
    pairs = _collect_pairs(dataset, "train")
    protocol = pairs[0][1].protocol
    shape = pairs[0][0].shape
    _check_spatial(shape, cfg.unet.channels)
    for q, s in pairs:
        if q.shape != shape or s.protocol.tis != protocol.tis:
            raise ValueError("all training pairs must share shape and protocol")

    pd_p99 = foreground_pd_p99(pairs)
    x0 = np.stack([_scaled_stack(q, pd_p99) for q, _ in pairs])
    cond = np.stack([normalize_condition(s.images) for _, s in pairs])

    sched = make_schedule(cfg.t_steps)
    net = UNet(cfg.unet, seed=cfg.seed)
    opt = Adam(net.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(9,)))

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    n = x0.shape[0]
    step_losses = []
    epoch_losses = []
    model = DdpmModel(net, sched, pd_p99, protocol.tis,
                      meta={"train_config": cfg.to_dict()})
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            xb = x0[idx]
            t = rng.integers(1, cfg.t_steps + 1, size=idx.size)
            eps = rng.standard_normal(xb.shape, dtype=np.float32)
            xt = q_sample(xb, t, eps, sched)
            inp = Tensor(np.concatenate([xt, cond[idx]], axis=1))
            pred = net(inp, t)
            loss = F.mse(pred, Tensor(eps))
            value = float(loss.data)
            if not np.isfinite(value):
                _nan_dump(out_dir, epoch, step, step_losses)
                raise RuntimeError(
                    f"training loss became non-finite at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            batch_losses.append(value)
            step_losses.append(value)
            step += 1
        epoch_losses.append(float(np.mean(batch_losses)))
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {epoch_losses[-1]:.5f}")
        if out_dir is not None:
            save_model(model, os.path.join(out_dir, f"ckpt_epoch{epoch + 1:04d}.qmap"))
            _write_loss_log(os.path.join(out_dir, "loss_log.csv"),
                            step_losses, cfg.batch_size, n)
    history = {"step_loss": step_losses, "epoch_loss": epoch_losses}
    if out_dir is not None:
        save_model(model, os.path.join(out_dir, "model.qmap"))
    return model, history


def _nan_dump(out_dir, epoch, step, step_losses):
    if out_dir is None:
        return
    path = os.path.join(out_dir, "nan_dump.json")
    with open(path, "w") as fh:
        json.dump({"epoch": epoch, "step": step, "recent_losses": step_losses[-50:]}, fh)


def _write_loss_log(path, step_losses, batch_size, n):
    steps_per_epoch = -(-n // batch_size)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "loss"])
        for i, value in enumerate(step_losses):
            writer.writerow([i // steps_per_epoch + 1, i + 1, f"{value:.8e}"])


def ancestral_sample(net: UNet, sched: NoiseSchedule, cond: np.ndarray, rngs) -> np.ndarray:
    """Reverse chain for a batch of conditions; one RNG stream per row.

    ``cond`` is (B, N, H, W) already normalized; returns scaled-space maps
    (B, 3, H, W) float32.  Every layer acts per-sample and each row consumes
    only its own RNG stream, so a batched run matches independent per-row
    runs up to float32 rounding (BLAS kernel selection depends on the batch
    shape, which can flip last-ulp reduction order).
    """
    nb = cond.shape[0]
    if len(rngs) != nb:
        raise ValueError(f"need one rng per batch row: {len(rngs)} vs {nb}")
    out_ch = net.cfg.out_channels
    shape = (out_ch,) + cond.shape[2:]
    x = np.stack([r.standard_normal(shape, dtype=np.float32) for r in rngs])
    with no_grad():
        for t in range(sched.t_steps, 0, -1):
            inp = Tensor(np.concatenate([x, cond], axis=1))
            eps_hat = net(inp, np.full(nb, t)).data
            k = t - 1
            coef = np.float32(sched.beta[k] / np.sqrt(1.0 - sched.alpha_bar[k]))
            x = (x - coef * eps_hat) / np.float32(np.sqrt(sched.alpha[k]))
            if t > 1:
                sig = np.float32(sched.posterior_sigma[k])
                x = x + sig * np.stack(
                    [r.standard_normal(shape, dtype=np.float32) for r in rngs])
    return x


def _maps_from_scaled(x: np.ndarray, pd_p99: float) -> QuantMap:
    maps = unscale_map(x)
    t1 = np.clip(maps[0], 0.0, 10.0)
    pd = np.maximum(maps[1] * pd_p99, 0.0)
    b = np.clip(maps[2], 0.0, 2.0)
    return QuantMap(t1, pd, b, np.ones(t1.shape, dtype=bool))


def prepare_condition(y: WeightedSeries, model: DdpmModel) -> np.ndarray:
    """Validate compatibility and return the normalized condition (N, H, W)."""
    if tuple(np.round(y.protocol.tis, 9)) != tuple(np.round(model.tis_seconds, 9)):
        raise ValueError(
            f"series protocol {y.protocol.tis} does not match the model's "
            f"{tuple(model.tis_seconds)}")
    _check_spatial(y.spatial_shape, model.net.cfg.channels)
    if len(y.protocol) + model.net.cfg.out_channels != model.net.cfg.in_channels:
        raise ValueError(
            f"series channels ({len(y.protocol)}) incompatible with network input "
            f"({model.net.cfg.in_channels})")
    return normalize_condition(y.images)


def sample(y: WeightedSeries, model: DdpmModel, seed: int = 0) -> QuantMap:
    """Draw one conditional map estimate for the weighted series ``y``."""
    cond = prepare_condition(y, model)[None]
    rng = np.random.default_rng(seed)
    x = ancestral_sample(model.net, model.schedule, cond, [rng])
    return _maps_from_scaled(x[0], model.pd_p99)


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: DdpmModel, path):
    arrays = {f"param/{k}": v.astype(np.float32) for k, v in model.net.state_dict().items()}
    meta = {
        "kind": "ddpm-denoiser",
        "unet": model.net.cfg.to_dict(),
        "t_steps": model.schedule.t_steps,
        "pd_p99": model.pd_p99,
        "tis_seconds": list(model.tis_seconds),
    }
    meta.update(model.meta)
    write_container(path, arrays, meta=meta)


def load_model(path) -> DdpmModel:
    arrays, meta = read_container(path)
    if meta.get("kind") != "ddpm-denoiser":
        raise ValueError(f"{path} is not a denoiser checkpoint (kind={meta.get('kind')!r})")
    cfg = UNetConfig.from_dict(meta["unet"])
    net = UNet(cfg, seed=0)
    net.load_state_dict({k[len("param/"):]: v for k, v in arrays.items()
                         if k.startswith("param/")})
    extra = {k: v for k, v in meta.items()
             if k not in ("kind", "unet", "t_steps", "pd_p99", "tis_seconds")}
    return DdpmModel(net, make_schedule(int(meta["t_steps"])), float(meta["pd_p99"]),
                     tuple(meta["tis_seconds"]), meta=extra)
