"""Network modules: layers, residual blocks, the conditional U-Net and the
plain regression CNN.

Parameters are :class:`Tensor` leaves with ``requires_grad=True``.  Module
construction draws every initial weight from an explicitly passed
``numpy.random.Generator``, so a builder seed fully determines the network.
Parameter names (``named_parameters``) follow attribute/list order and are
the keys used in checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ValueError(f"state dict mismatch: missing={missing}, unexpected={extra}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def to_dtype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _param(arr, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin, cout, k=3, stride=1, pad=None, rng=None, zero_init=False, dtype=np.float32):
        self.stride = stride
        self.pad = (k // 2) if pad is None else pad
        fan_in = cin * k * k
        if zero_init:
            w = np.zeros((cout, cin, k, k))
            b = np.zeros(cout)
        else:
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
            b = rng.uniform(-1.0, 1.0, size=cout) / np.sqrt(fan_in)
        self.w = _param(w, dtype)
        self.b = _param(b, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class Linear(Module):
    def __init__(self, din, dout, rng, dtype=np.float32):
        bound = np.sqrt(6.0 / din)
        self.w = _param(rng.uniform(-bound, bound, size=(dout, din)), dtype)
        self.b = _param(rng.uniform(-1.0, 1.0, size=dout) / np.sqrt(din), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.w, self.b)


class GroupNorm(Module):
    def __init__(self, channels, groups=8, eps=1e-5, dtype=np.float32):
        if channels % groups:
            raise ValueError(f"channels ({channels}) must be divisible by groups ({groups})")
        self.groups = groups
        self.eps = eps
        self.gamma = _param(np.ones(channels), dtype)
        self.beta = _param(np.zeros(channels), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self.gamma, self.beta, self.groups, self.eps)


class ResBlock(Module):
    """GN -> SiLU -> 3x3 conv (+ per-channel time bias) with residual skip.

    The skip is identity when channel counts match, otherwise a 1x1 conv.
    ``temb_dim=None`` builds an unconditional block (regression baseline).
    """

    def __init__(self, cin, cout, temb_dim=None, groups=8, rng=None, dtype=np.float32):
        self.norm = GroupNorm(cin, groups, dtype=dtype)
        self.conv = Conv2d(cin, cout, 3, rng=rng, dtype=dtype)
        self.time = Linear(temb_dim, cout, rng, dtype=dtype) if temb_dim else None
        self.skip = Conv2d(cin, cout, 1, pad=0, rng=rng, dtype=dtype) if cin != cout else None

    def __call__(self, x: Tensor, temb: Tensor = None) -> Tensor:
        h = self.conv(F.silu(self.norm(x)))
        if self.time is not None:
            bias = self.time(F.silu(temb))
            h = F.add(h, F.reshape(bias, (bias.shape[0], bias.shape[1], 1, 1)))
        shortcut = x if self.skip is None else self.skip(x)
        return F.add(h, shortcut)


class _DownLevel(Module):
    def __init__(self, cin, cout, temb_dim, groups, rng, has_down, dtype):
        self.blocks = [
            ResBlock(cin, cout, temb_dim, groups, rng, dtype),
            ResBlock(cout, cout, temb_dim, groups, rng, dtype),
        ]
        self.down = Conv2d(cout, cout, 3, stride=2, rng=rng, dtype=dtype) if has_down else None


class _UpLevel(Module):
    def __init__(self, cin, cout, temb_dim, groups, rng, dtype):
        self.upconv = Conv2d(cin, cout, 3, rng=rng, dtype=dtype)
        self.blocks = [
            ResBlock(2 * cout, cout, temb_dim, groups, rng, dtype),
            ResBlock(cout, cout, temb_dim, groups, rng, dtype),
        ]


@dataclass(frozen=True)
class UNetConfig:
    """Shape of the conditional denoiser.

    ``channels`` lists the per-level widths; each extra level halves the
    spatial resolution, so inputs must be divisible by ``2**(levels-1)``.
    """

    in_channels: int = 10
    out_channels: int = 3
    channels: tuple = (32, 64)
    groups: int = 8
    temb_dim: int = 0  # 0 -> 4 * channels[0]

    def __post_init__(self):
        if len(self.channels) < 1:
            raise ValueError("need at least one level")
        if any(c % self.groups for c in self.channels):
            raise ValueError(f"channels {self.channels} must be divisible by groups={self.groups}")

    @property
    def embed_dim(self):
        return self.temb_dim or 4 * self.channels[0]

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "channels": list(self.channels),
            "groups": self.groups,
            "temb_dim": self.temb_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        d["channels"] = tuple(d.get("channels", (32, 64)))
        return cls(**d)


class UNet(Module):
    """Conditional U-Net: noisy maps + conditioning stack in, noise estimate out.

    Encoder levels run two residual blocks then a strided-conv downsample;
    the decoder mirrors with nearest-neighbour upsampling, a 3x3 conv, and a
    channel concat of the matching encoder output.  Timestep enters each
    block as a learned per-channel bias from a sinusoidal embedding.
    """

    def __init__(self, cfg: UNetConfig = UNetConfig(), seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        ch = cfg.channels
        ed = cfg.embed_dim
        self.temb_lin1 = Linear(ch[0], ed, rng, dtype=dtype)
        self.temb_lin2 = Linear(ed, ed, rng, dtype=dtype)
        self.conv_in = Conv2d(cfg.in_channels, ch[0], 3, rng=rng, dtype=dtype)
        self.down = []
        for lvl, c in enumerate(ch):
            cin = ch[0] if lvl == 0 else ch[lvl - 1]
            self.down.append(_DownLevel(cin, c, ed, cfg.groups, rng, lvl < len(ch) - 1, dtype))
        self.up = [
            _UpLevel(ch[lvl + 1], ch[lvl], ed, cfg.groups, rng, dtype)
            for lvl in reversed(range(len(ch) - 1))
        ]
        self.head_norm = GroupNorm(ch[0], cfg.groups, dtype=dtype)
        self.head_conv = Conv2d(ch[0], cfg.out_channels, 3, rng=rng, zero_init=True, dtype=dtype)
        self._dtype = dtype

    def __call__(self, x: Tensor, t: np.ndarray) -> Tensor:
        temb = Tensor(F.sinusoidal_time_embedding(t, self.cfg.channels[0], dtype=x.data.dtype))
        temb = self.temb_lin2(F.silu(self.temb_lin1(temb)))
        h = self.conv_in(x)
        skips = []
        for level in self.down:
            for blk in level.blocks:
                h = blk(h, temb)
            if level.down is not None:
                skips.append(h)
                h = level.down(h)
        for level in self.up:
            h = level.upconv(F.upsample_nearest2x(h))
            h = F.concat_channels(h, skips.pop())
            for blk in level.blocks:
                h = blk(h, temb)
        return self.head_conv(F.silu(self.head_norm(h)))


@dataclass(frozen=True)
class RegressionNetConfig:
    in_channels: int = 7
    out_channels: int = 3
    channels: int = 64
    blocks: int = 6
    groups: int = 8

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "channels": self.channels,
            "blocks": self.blocks,
            "groups": self.groups,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionNetConfig":
        return cls(**d)


class RegressionNet(Module):
    """Direct series -> maps CNN: conv stem, residual trunk, conv head."""

    def __init__(self, cfg: RegressionNetConfig = RegressionNetConfig(), seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.conv_in = Conv2d(cfg.in_channels, cfg.channels, 3, rng=rng, dtype=dtype)
        self.blocks = [
            ResBlock(cfg.channels, cfg.channels, None, cfg.groups, rng, dtype)
            for _ in range(cfg.blocks)
        ]
        self.head_norm = GroupNorm(cfg.channels, cfg.groups, dtype=dtype)
        self.head_conv = Conv2d(cfg.channels, cfg.out_channels, 3, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv_in(x)
        for blk in self.blocks:
            h = blk(h)
        return self.head_conv(F.silu(self.head_norm(h)))
