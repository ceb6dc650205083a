"""Tape autodiff op library: finite-difference gradient checks and op semantics.

Every differentiable op is checked elementwise against central differences in
float64 (rel < 1e-6) and via a random directional derivative in float32
(rel < 1e-3).  Convolutions run under both compute backends.
"""

import numpy as np
import pytest

import qmap.backend as backend
import qmap.nn.functional as F
from qmap.nn.optim import Adam
from qmap.nn.tensor import Tensor, no_grad


@pytest.fixture(params=["numba", "numpy"])
def both_backends(request):
    previous = backend.set_backend(request.param)
    yield request.param
    backend.set_backend(previous)


def _numeric_grad(build_loss, t, h):
    flat = t.data.reshape(-1)
    num = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(build_loss().data)
        flat[i] = orig - h
        fm = float(build_loss().data)
        flat[i] = orig
        num[i] = (fp - fm) / (2.0 * h)
    return num.reshape(t.data.shape)


def check_grads_f64(build_loss, tensors, h=1e-6, rtol=1e-6, atol=1e-8):
    """Elementwise FD check; `build_loss` must rebuild the graph each call."""
    for t in tensors:
        t.grad = None
    build_loss().backward()
    for t in tensors:
        assert t.grad is not None and t.grad.shape == t.data.shape
        num = _numeric_grad(build_loss, t, h)
        np.testing.assert_allclose(t.grad, num, rtol=rtol, atol=atol)


def check_grads_f32(build_loss, tensors, rng, h=1e-2, rtol=1e-3):
    """Directional-derivative check, robust to f32 forward rounding."""
    for t in tensors:
        t.grad = None
    build_loss().backward()
    base = [t.data.copy() for t in tensors]
    ds = [rng.standard_normal(t.data.shape).astype(np.float32) for t in tensors]
    for t, d in zip(tensors, ds):
        t.data = (t.data + h * d).astype(np.float32)
    fp = float(build_loss().data)
    for t, b0, d in zip(tensors, base, ds):
        t.data = (b0 - h * d).astype(np.float32)
    fm = float(build_loss().data)
    for t, b0 in zip(tensors, base):
        t.data = b0
    numeric = (fp - fm) / (2.0 * h)
    analytic = sum(float((t.grad.astype(np.float64) * d).sum()) for t, d in zip(tensors, ds))
    assert analytic == pytest.approx(numeric, rel=rtol, abs=1e-4)


def _t(rng, *shape, dtype=np.float64):
    return Tensor(rng.standard_normal(shape).astype(dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def test_add_sub_mul_broadcast_grads():
    rng = np.random.default_rng(0)
    for op in (F.add, F.sub, F.mul):
        a = _t(rng, 3, 4)
        b = _t(rng, 4)  # broadcast over rows; grads must unbroadcast-sum
        check_grads_f64(lambda: F.mean(op(a, b)), [a, b])


def test_mean_value_and_grad():
    rng = np.random.default_rng(1)
    x = _t(rng, 5, 3)
    out = F.mean(x)
    assert float(out.data) == pytest.approx(x.data.mean(), rel=1e-15)
    check_grads_f64(lambda: F.mean(x), [x])


def test_mse_value_and_grad():
    rng = np.random.default_rng(2)
    a = _t(rng, 4, 4)
    tgt = Tensor(rng.standard_normal((4, 4)))
    assert float(F.mse(a, tgt).data) == pytest.approx(((a.data - tgt.data) ** 2).mean())
    check_grads_f64(lambda: F.mse(a, tgt), [a])


def test_silu_values_and_grad():
    x = Tensor(np.array([0.0, 1.0, -2.0, 8.0]), requires_grad=True)
    out = F.silu(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    np.testing.assert_allclose(out.data, x.data * sig, rtol=1e-12)
    assert out.data[0] == 0.0
    check_grads_f64(lambda: F.mean(F.silu(x)), [x])


def test_reshape_grad():
    rng = np.random.default_rng(3)
    x = _t(rng, 2, 6)
    # weight the loss so the gradient is not constant over entries
    w = Tensor(rng.standard_normal((3, 4)))
    check_grads_f64(lambda: F.mean(F.mul(F.reshape(x, (3, 4)), w)), [x])


def test_linear_grad():
    rng = np.random.default_rng(4)
    x, w, b = _t(rng, 5, 4), _t(rng, 3, 4), _t(rng, 3)
    out = F.linear(x, w, b)
    assert out.shape == (5, 3)
    np.testing.assert_allclose(out.data, x.data @ w.data.T + b.data, rtol=1e-12)
    check_grads_f64(lambda: F.mean(F.mul(F.linear(x, w, b), Tensor(np.ones((5, 3))))), [x, w, b])


def test_upsample_nearest_values_and_grad():
    rng = np.random.default_rng(5)
    x = _t(rng, 2, 3, 4, 4)
    out = F.upsample_nearest2x(x)
    assert out.shape == (2, 3, 8, 8)
    np.testing.assert_array_equal(out.data[:, :, ::2, ::2], x.data)
    np.testing.assert_array_equal(out.data[:, :, 1::2, 1::2], x.data)
    w = Tensor(rng.standard_normal((2, 3, 8, 8)))
    check_grads_f64(lambda: F.mean(F.mul(F.upsample_nearest2x(x), w)), [x])


def test_concat_channels_values_and_grad():
    rng = np.random.default_rng(6)
    a, b = _t(rng, 2, 3, 4, 4), _t(rng, 2, 5, 4, 4)
    out = F.concat_channels(a, b)
    assert out.shape == (2, 8, 4, 4)
    np.testing.assert_array_equal(out.data[:, :3], a.data)
    np.testing.assert_array_equal(out.data[:, 3:], b.data)
    w = Tensor(rng.standard_normal((2, 8, 4, 4)))
    check_grads_f64(lambda: F.mean(F.mul(F.concat_channels(a, b), w)), [a, b])


# ---------------------------------------------------------------------------
# conv2d (both backends)


@pytest.mark.parametrize(
    "cin,cout,k,stride,pad",
    [(3, 4, 3, 1, 1), (3, 4, 3, 2, 1), (2, 3, 3, 1, 0), (4, 2, 1, 1, 0), (2, 2, 5, 1, 2)],
)
def test_conv2d_grads_f64(both_backends, cin, cout, k, stride, pad):
    rng = np.random.default_rng(7)
    x = _t(rng, 2, cin, 6, 6)
    w = _t(rng, cout, cin, k, k)
    b = _t(rng, cout)
    out = F.conv2d(x, w, b, stride=stride, pad=pad)
    wt = Tensor(np.random.default_rng(8).standard_normal(out.shape))
    check_grads_f64(lambda: F.mean(F.mul(F.conv2d(x, w, b, stride=stride, pad=pad), wt)),
                    [x, w, b])


def test_conv2d_no_bias(both_backends):
    rng = np.random.default_rng(9)
    x, w = _t(rng, 1, 2, 5, 5), _t(rng, 3, 2, 3, 3)
    check_grads_f64(lambda: F.mean(F.conv2d(x, w, pad=1)), [x, w])


def test_conv2d_matches_reference(both_backends):
    # brute-force correlation oracle, stride 1 / pad 1
    rng = np.random.default_rng(10)
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    out = F.conv2d(Tensor(x), Tensor(w), pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(4):
            for i in range(5):
                for j in range(5):
                    ref[n, o, i, j] = (xp[n, :, i : i + 3, j : j + 3] * w[o]).sum()
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv2d_f32_directional(both_backends):
    rng = np.random.default_rng(11)
    x = _t(rng, 2, 3, 8, 8, dtype=np.float32)
    w = _t(rng, 4, 3, 3, 3, dtype=np.float32)
    b = _t(rng, 4, dtype=np.float32)
    check_grads_f32(lambda: F.mean(F.conv2d(x, w, b, pad=1)), [x, w, b], rng)


def test_conv2d_empty_output_rejected():
    with pytest.raises(ValueError):
        F.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


# ---------------------------------------------------------------------------
# group norm


def test_group_norm_normalizes_groups():
    rng = np.random.default_rng(12)
    x = Tensor(rng.standard_normal((3, 8, 5, 5)) * 4.0 + 2.0)
    gamma, beta = Tensor(np.ones(8)), Tensor(np.zeros(8))
    out = F.group_norm(x, gamma, beta, groups=4).data
    grouped = out.reshape(3, 4, -1)
    np.testing.assert_allclose(grouped.mean(axis=2), 0.0, atol=1e-12)
    np.testing.assert_allclose(grouped.var(axis=2), 1.0, atol=1e-4)  # eps shrinks var


def test_group_norm_grads():
    rng = np.random.default_rng(13)
    x = _t(rng, 2, 4, 3, 3)
    gamma = Tensor(1.0 + 0.1 * rng.standard_normal(4), requires_grad=True)
    beta = Tensor(0.1 * rng.standard_normal(4), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 4, 3, 3)))
    check_grads_f64(
        lambda: F.mean(F.mul(F.group_norm(x, gamma, beta, groups=2), w)),
        [x, gamma, beta],
        rtol=1e-5,
    )


def test_group_norm_f32_directional():
    rng = np.random.default_rng(14)
    x = _t(rng, 2, 8, 6, 6, dtype=np.float32)
    gamma = Tensor(np.ones(8, dtype=np.float32), requires_grad=True)
    beta = Tensor(np.zeros(8, dtype=np.float32), requires_grad=True)
    check_grads_f32(lambda: F.mean(F.group_norm(x, gamma, beta, groups=4)), [x, gamma, beta], rng)


def test_group_norm_divisibility():
    with pytest.raises(ValueError):
        F.group_norm(Tensor(np.zeros((1, 6, 2, 2))), Tensor(np.ones(6)), Tensor(np.zeros(6)),
                     groups=4)


# ---------------------------------------------------------------------------
# time embedding


def test_time_embedding_t0_is_zeros_then_ones():
    emb = F.sinusoidal_time_embedding(0, 16)
    np.testing.assert_array_equal(emb[0, :8], np.zeros(8))
    np.testing.assert_array_equal(emb[0, 8:], np.ones(8))


def test_time_embedding_distinct_and_deterministic():
    ts = np.arange(1000)
    emb = F.sinusoidal_time_embedding(ts, 128)
    assert emb.shape == (1000, 128) and emb.dtype == np.float32
    assert len(np.unique(emb, axis=0)) == 1000  # all timesteps distinguishable
    np.testing.assert_array_equal(emb, F.sinusoidal_time_embedding(ts, 128))


def test_time_embedding_bounded_and_validated():
    emb = F.sinusoidal_time_embedding(np.arange(200), 32)
    assert np.abs(emb).max() <= 1.0 + 1e-6
    with pytest.raises(ValueError):
        F.sinusoidal_time_embedding(0, 15)
    with pytest.raises(ValueError):
        F.sinusoidal_time_embedding(0, 0)


# ---------------------------------------------------------------------------
# tape mechanics


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        F.mul(x, x).backward()


def test_grad_accumulates_over_reuse():
    x = Tensor(np.array([1.5, -2.0, 3.0]), requires_grad=True)
    F.mean(F.mul(x, x)).backward()  # d/dx mean(x^2) = 2x/n
    np.testing.assert_allclose(x.grad, 2.0 * x.data / 3.0, rtol=1e-12)


def test_no_grad_blocks_graph():
    x = Tensor(np.ones(4), requires_grad=True)
    with no_grad():
        out = F.mul(x, x)
    assert not out.requires_grad and out._backward is None


def test_graph_released_after_backward():
    x = Tensor(np.ones(1), requires_grad=True)
    out = F.mul(x, x)
    F.mean(out).backward()
    assert out._parents == () and out._backward is None
    assert x.grad is not None


def test_detach_cuts_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    d = x.detach()
    assert not d.requires_grad
    assert d.data is x.data or np.shares_memory(d.data, x.data) or (d.data == x.data).all()


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_is_signed_lr():
    lr = 1e-3
    p = Tensor(np.zeros(5), requires_grad=True)
    p.grad = np.array([3.0, -0.5, 1e-4, -7.0, 2.0])
    opt = Adam([p], lr=lr)
    opt.step()
    # bias-corrected first step: -lr * g/(|g| + eps) ~ -lr * sign(g)
    np.testing.assert_allclose(p.data, -lr * np.sign(p.grad), atol=lr * 1e-3)
    assert opt.t == 1


def test_adam_none_grad_is_noop():
    p = Tensor(np.ones(3), requires_grad=True)
    opt = Adam([p], lr=0.1)
    opt.zero_grad()
    assert p.grad is None
    opt.step()
    np.testing.assert_array_equal(p.data, np.ones(3))


def test_adam_decreases_quadratic():
    p = Tensor(np.array([4.0, -3.0]), requires_grad=True)
    opt = Adam([p], lr=0.05)
    for _ in range(400):
        opt.zero_grad()
        p.grad = 2.0 * p.data
        opt.step()
    assert np.abs(p.data).max() < 0.05
    assert opt.t == 400


def test_adam_lr_validation():
    with pytest.raises(ValueError):
        Adam([], lr=0.0)
