"""Signal-model oracles and properties.

High-precision reference values (40-digit mpmath, frozen here):

    S(t1=1.0, pd=0.8, b=1.9; ti=0.85)   = 0.15032930343793546
    dS/dt1 at the same point            = -0.55222009207775486
    dS/dpd                              =  0.18791162929741933
    dS/db                               = -0.34193194555898134
    S(t1=0.5, pd=1, b=2;   ti=0.25)     = 0.21306131942526685
    null point for t1=0.5, b=2          = 0.34657359027997265
    E[rician(S=0, sigma)] / sigma       = 1.2533141373155003   (Rayleigh mean)
"""

import numpy as np
import pytest

from qmap.signal import (
    DEFAULT_TIS_SECONDS,
    NoiseSpec,
    NullPointError,
    Protocol,
    TissueParams,
    add_noise,
    jacobian_series,
    signal,
    signal_jacobian,
    signal_series,
    sigma_for_snr,
)

PROTO = Protocol()


def test_default_protocol_is_the_seven_point_series():
    assert PROTO.tis == (0.05, 0.10, 0.25, 0.50, 0.85, 1.50, 2.50)
    assert len(PROTO) == 7
    assert DEFAULT_TIS_SECONDS == PROTO.tis


def test_signal_oracle_value():
    s = signal(TissueParams(1.0, 0.8, 1.9), 0.85)
    assert s == pytest.approx(0.15032930343793546, rel=1e-12)


def test_signal_null_point():
    ti = 0.34657359027997265  # 0.5 * ln 2
    assert signal(TissueParams(0.5, 1.0, 2.0), ti) == pytest.approx(0.0, abs=1e-12)


def test_signal_long_ti_limit_recovers_pd():
    # exp(-ti/t1) vanishes, so S -> pd
    assert signal(TissueParams(0.3, 1.0, 2.0), 50.0) == pytest.approx(1.0, rel=1e-12)


def test_signal_series_matches_scalar_calls():
    p = TissueParams(0.5, 1.0, 2.0)
    series = signal_series(p, PROTO)
    assert series.shape == (7,)
    for n, ti in enumerate(PROTO.tis):
        assert series[n] == pytest.approx(signal(p, ti), rel=1e-14)
    # frozen oracle at TI=0.25: |1 - 2 e^{-1/2}|
    assert series[2] == pytest.approx(0.21306131942526685, rel=1e-12)


def test_signal_series_zero_pd_is_zero_vector():
    assert (signal_series(TissueParams(1.0, 0.0, 1.9), PROTO) == 0).all()


def test_signal_nonnegative_and_pd_linear():
    rng = np.random.default_rng(0)
    for _ in range(200):
        t1 = float(np.exp(rng.uniform(np.log(0.02), np.log(6.0))))
        pd = float(rng.uniform(0.0, 3.0))
        b = float(rng.uniform(0.0, 2.0))
        s1 = signal_series(TissueParams(t1, pd, b), PROTO)
        s2 = signal_series(TissueParams(t1, 2.0 * pd, b), PROTO)
        assert (s1 >= 0).all()
        np.testing.assert_allclose(s2, 2.0 * s1, rtol=1e-12, atol=1e-300)


def test_single_zero_crossing_for_b_above_one():
    # signed recovery 1 - b*exp(-ti/t1) crosses zero once at t1*ln(b) and the
    # magnitude increases monotonically afterwards
    t1, b = 0.8, 1.7
    null = t1 * np.log(b)
    tis = np.linspace(0.01, 6.0, 2000)
    vals = np.abs(1.0 - b * np.exp(-tis / t1))
    after = tis > null * 1.001
    assert (np.diff(vals[after]) > 0).all()
    assert np.abs(1.0 - b * np.exp(-null / t1)) < 1e-12


def test_param_validation():
    with pytest.raises(ValueError):
        TissueParams(0.0, 1.0, 1.9)
    with pytest.raises(ValueError):
        TissueParams(1.0, -0.1, 1.9)
    with pytest.raises(ValueError):
        TissueParams(1.0, 1.0, 2.1)
    with pytest.raises(ValueError):
        Protocol(())
    with pytest.raises(ValueError):
        Protocol((0.1, 0.1))
    with pytest.raises(ValueError):
        Protocol((-0.1, 0.2))
    with pytest.raises(ValueError):
        signal(TissueParams(1.0, 1.0, 1.9), 0.0)


def test_jacobian_oracle_values():
    jac = signal_jacobian(TissueParams(1.0, 0.8, 1.9), 0.85, mode="exact")
    np.testing.assert_allclose(
        jac,
        [-0.55222009207775486, 0.18791162929741933, -0.34193194555898134],
        rtol=1e-12,
    )


def test_jacobian_pd_component_is_inner_expression():
    # linearity in pd: dS/dpd = |1 - b exp(-ti/t1)| with the sign folded in
    p = TissueParams(0.7, 1.3, 1.5)
    for ti in PROTO.tis:
        jac = signal_jacobian(p, ti, mode="exact")
        assert jac[1] == pytest.approx(signal(p, ti) / p.pd, rel=1e-12)


def test_exact_jacobian_raises_on_null():
    p = TissueParams(0.5, 1.0, 2.0)
    with pytest.raises(NullPointError):
        signal_jacobian(p, 0.34657359027997265, mode="exact")
    # smoothed mode is defined there
    jac = signal_jacobian(p, 0.34657359027997265, mode="smoothed")
    assert np.isfinite(jac).all()


def _fd_jacobian(t1, pd, b, ti, h=1e-6):
    def f(a, c, d):
        return abs(c * (1.0 - d * np.exp(-ti / a)))

    return np.array([
        (f(t1 + h, pd, b) - f(t1 - h, pd, b)) / (2 * h),
        (f(t1, pd + h, b) - f(t1, pd - h, b)) / (2 * h),
        (f(t1, pd, b + h) - f(t1, pd, b - h)) / (2 * h),
    ])


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 100:
        t1 = float(np.exp(rng.uniform(np.log(0.05), np.log(5.0))))
        pd = float(rng.uniform(0.3, 3.0))
        b = float(rng.uniform(1.1, 2.0))
        ti = float(rng.choice(PROTO.tis))
        if abs(1.0 - b * np.exp(-ti / t1)) < 1e-3:  # skip near-null draws
            continue
        jac = signal_jacobian(TissueParams(t1, pd, b), ti, mode="exact")
        fd = _fd_jacobian(t1, pd, b, ti)
        np.testing.assert_allclose(jac, fd, rtol=1e-6, atol=1e-9)
        checked += 1


def test_jacobian_series_stacks_per_ti():
    p = TissueParams(1.2, 0.9, 1.8)
    js = jacobian_series(p, PROTO, mode="exact")
    assert js.shape == (7, 3)
    np.testing.assert_allclose(js[4], signal_jacobian(p, PROTO.tis[4]), rtol=0)


def test_smoothed_jacobian_close_to_exact_away_from_null():
    p = TissueParams(1.0, 0.8, 1.9)
    je = signal_jacobian(p, 0.85, mode="exact")
    js = signal_jacobian(p, 0.85, mode="smoothed", eps=1e-6)
    np.testing.assert_allclose(js, je, rtol=1e-9)


# ---------------------------------------------------------------------------
# noise


def test_add_noise_sigma_zero_identity():
    series = signal_series(TissueParams(1.0, 1.0, 1.9), PROTO)
    out = add_noise(series, NoiseSpec("rician", 0.0, 3))
    np.testing.assert_array_equal(out, series)


def test_add_noise_deterministic_given_seed():
    series = signal_series(TissueParams(1.0, 1.0, 1.9), PROTO)
    a = add_noise(series, NoiseSpec("rician", 0.05, 11))
    b = add_noise(series, NoiseSpec("rician", 0.05, 11))
    c = add_noise(series, NoiseSpec("rician", 0.05, 12))
    np.testing.assert_array_equal(a, b)
    assert np.abs(a - c).max() > 0


def test_rician_zero_signal_rayleigh_mean():
    # S=0 folds to a Rayleigh with mean sigma*sqrt(pi/2)
    zeros = np.zeros(1_000_000)
    out = add_noise(zeros, NoiseSpec("rician", 1.0, 0))
    assert out.mean() == pytest.approx(1.2533141373155003, rel=0.01)
    assert (out >= 0).all()


def test_gaussian_magnitude_clamps_at_zero():
    zeros = np.zeros(10_000)
    out = add_noise(zeros, NoiseSpec("gaussian_magnitude", 1.0, 0))
    assert (out >= 0).all()
    assert (out == 0).mean() == pytest.approx(0.5, abs=0.05)


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec("poisson", 0.1, 0)
    with pytest.raises(ValueError):
        NoiseSpec("rician", -0.1, 0)


def test_sigma_for_snr():
    assert sigma_for_snr(1.0, 100.0) == pytest.approx(0.01)
    assert sigma_for_snr(2.0, 50.0) == pytest.approx(0.04)
    with pytest.raises(ValueError):
        sigma_for_snr(1.0, 0.0)
