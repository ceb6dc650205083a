"""Inversion-recovery signal model.

Magnitude signal of an inversion-recovery acquisition at inversion time TI:

    S(t1, pd, b; TI) = | pd * (1 - b * exp(-TI / t1)) |

with ``t1`` the longitudinal relaxation time in seconds, ``pd`` the proton
density (arbitrary units) and ``b`` the inversion efficiency (2 for a perfect
180 degree inversion).  For ``b > 1`` the signal has a single null point at
``TI = t1 * ln(b)``.

All times are seconds throughout; report formatting converts to milliseconds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# 7-point inversion-time protocol used as the default acquisition.
DEFAULT_TIS_SECONDS = (0.05, 0.10, 0.25, 0.50, 0.85, 1.50, 2.50)

# Default signal-to-noise ratio for synthetic series (sigma = max(pd) / SNR).
DEFAULT_SNR = 50.0

NOISE_KINDS = ("gaussian_magnitude", "rician")


class NullPointError(ValueError):
    """Exact-mode Jacobian requested at (or numerically on) a signal null."""


@dataclass(frozen=True)
class TissueParams:
    """Per-voxel tissue parameters: t1 [s] > 0, pd >= 0, b in [0, 2]."""

    t1: float
    pd: float
    b: float

    def __post_init__(self):
        if not self.t1 > 0:
            raise ValueError(f"t1 must be > 0, got {self.t1}")
        if self.pd < 0:
            raise ValueError(f"pd must be >= 0, got {self.pd}")
        if not 0.0 <= self.b <= 2.0:
            raise ValueError(f"b must be in [0, 2], got {self.b}")


@dataclass(frozen=True)
class Protocol:
    """Ordered inversion times in seconds, strictly increasing, all > 0."""

    tis: tuple[float, ...] = DEFAULT_TIS_SECONDS

    def __post_init__(self):
        tis = tuple(float(t) for t in self.tis)
        if len(tis) == 0:
            raise ValueError("protocol needs at least one inversion time")
        if any(t <= 0 for t in tis):
            raise ValueError(f"inversion times must be > 0, got {tis}")
        if any(b <= a for a, b in zip(tis, tis[1:])):
            raise ValueError(f"inversion times must be strictly increasing, got {tis}")
        object.__setattr__(self, "tis", tis)

    def __len__(self) -> int:
        return len(self.tis)

    @property
    def tis_array(self) -> np.ndarray:
        return np.asarray(self.tis, dtype=np.float64)


@dataclass(frozen=True)
class NoiseSpec:
    """Measurement-noise description for synthetic series.

    ``gaussian_magnitude`` adds zero-mean Gaussian noise and clamps at zero;
    ``rician`` forms sqrt((S + n1)^2 + n2^2) with n1, n2 ~ N(0, sigma^2),
    the physically correct magnitude-image distribution.
    """

    kind: str = "rician"
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def signal(params: TissueParams, ti: float) -> float:
    """Magnitude signal at one inversion time; non-negative."""
    if ti <= 0:
        raise ValueError(f"ti must be > 0, got {ti}")
    return abs(params.pd * (1.0 - params.b * np.exp(-ti / params.t1)))


def signal_series(params: TissueParams, protocol: Protocol) -> np.ndarray:
    """Magnitude signal at every inversion time of the protocol."""
    tis = protocol.tis_array
    return np.abs(params.pd * (1.0 - params.b * np.exp(-tis / params.t1)))


def series_from_maps(
    t1_map: np.ndarray,
    pd_map: np.ndarray,
    b_map: np.ndarray,
    protocol: Protocol,
) -> np.ndarray:
    """Vectorised forward model over parameter maps.

    Returns an array of shape ``(len(protocol),) + t1_map.shape``.  Voxels
    with ``t1 == 0`` (background convention) produce zero signal.
    """
    t1 = np.asarray(t1_map, dtype=np.float64)
    pd = np.asarray(pd_map, dtype=np.float64)
    b = np.asarray(b_map, dtype=np.float64)
    if not (t1.shape == pd.shape == b.shape):
        raise ValueError("t1, pd and b maps must share a shape")
    tis = protocol.tis_array.reshape((-1,) + (1,) * t1.ndim)
    with np.errstate(divide="ignore"):
        decay = np.exp(-tis / np.where(t1 > 0, t1, np.inf))
    return np.abs(pd * (1.0 - b * decay))


def signal_jacobian(
    params: TissueParams,
    ti: float,
    mode: str = "exact",
    eps: float = 1e-6,
) -> np.ndarray:
    """Gradient of the magnitude signal w.r.t. (t1, pd, b).

    ``exact`` carries the sign of the inner expression through the absolute
    value and raises :class:`NullPointError` within ``eps`` of the null.
    ``smoothed`` differentiates pd * sqrt(inner^2 + eps^2) instead, which is
    well-defined everywhere and is what the fitting code uses.
    """
    if ti <= 0:
        raise ValueError(f"ti must be > 0, got {ti}")
    if mode not in ("exact", "smoothed"):
        raise ValueError(f"mode must be 'exact' or 'smoothed', got {mode!r}")
    t1, pd, b = params.t1, params.pd, params.b
    decay = np.exp(-ti / t1)
    inner = 1.0 - b * decay
    d_inner_t1 = -b * decay * ti / t1**2
    d_inner_b = -decay
    if mode == "exact":
        if abs(inner) < eps:
            raise NullPointError(
                f"signal null at ti={ti} for t1={t1}, b={b}; use mode='smoothed'"
            )
        sgn = np.sign(inner)
        return np.array([sgn * pd * d_inner_t1, sgn * inner, sgn * pd * d_inner_b])
    root = np.sqrt(inner**2 + eps**2)
    scale = inner / root
    return np.array([pd * scale * d_inner_t1, root, pd * scale * d_inner_b])


def jacobian_series(
    params: TissueParams,
    protocol: Protocol,
    mode: str = "exact",
    eps: float = 1e-6,
) -> np.ndarray:
    """Stacked per-TI gradients, shape ``(len(protocol), 3)``."""
    return np.stack([signal_jacobian(params, ti, mode=mode, eps=eps) for ti in protocol.tis])


def sigma_for_snr(pd_max: float, snr: float = DEFAULT_SNR) -> float:
    """Noise sigma giving the requested SNR at the series' peak amplitude."""
    if snr <= 0:
        raise ValueError(f"snr must be > 0, got {snr}")
    return float(pd_max) / float(snr)


def add_noise(series: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Corrupt a clean magnitude series; deterministic given ``spec.seed``."""
    clean = np.asarray(series, dtype=np.float64)
    if spec.sigma == 0.0:
        return clean.copy()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    if spec.kind == "gaussian_magnitude":
        noisy = clean + rng.normal(0.0, spec.sigma, size=clean.shape)
        return np.maximum(noisy, 0.0)
    n1 = rng.normal(0.0, spec.sigma, size=clean.shape)
    n2 = rng.normal(0.0, spec.sigma, size=clean.shape)
    return np.sqrt((clean + n1) ** 2 + n2**2)
