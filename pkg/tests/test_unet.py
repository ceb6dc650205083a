"""Assembled network checks: U-Net wiring, state dicts, end-to-end gradients."""

import numpy as np
import pytest

import qmap.nn.functional as F
from qmap.nn.modules import (
    Conv2d,
    RegressionNet,
    RegressionNetConfig,
    ResBlock,
    UNet,
    UNetConfig,
)
from qmap.nn.tensor import Tensor, no_grad

TINY = UNetConfig(in_channels=4, out_channels=2, channels=(8, 8), groups=4)


def _randomize_head(net, rng, scale=0.1):
    # the output conv is zero-initialised; give it weight so gradients and
    # timestep conditioning reach the rest of the network
    net.head_conv.w.data = (scale * rng.standard_normal(net.head_conv.w.shape)).astype(
        net.head_conv.w.dtype
    )
    net.head_conv.b.data = (scale * rng.standard_normal(net.head_conv.b.shape)).astype(
        net.head_conv.b.dtype
    )


def test_unet_output_shape_and_dtype():
    net = UNet(UNetConfig(), seed=0)
    x = Tensor(np.random.default_rng(0).standard_normal((2, 10, 16, 16)).astype(np.float32))
    with no_grad():
        out = net(x, np.array([5, 100]))
    assert out.shape == (2, 3, 16, 16)
    assert out.dtype == np.float32
    assert np.isfinite(out.data).all()


def test_unet_zero_init_head_gives_zero_output():
    net = UNet(TINY, seed=1)
    assert np.all(net.head_conv.w.data == 0) and np.all(net.head_conv.b.data == 0)
    x = Tensor(np.random.default_rng(1).standard_normal((1, 4, 8, 8)).astype(np.float32))
    with no_grad():
        out = net(x, np.array([3]))
    np.testing.assert_array_equal(out.data, np.zeros((1, 2, 8, 8)))


def test_unet_forward_deterministic_and_seeded():
    a = UNet(TINY, seed=7)
    b = UNet(TINY, seed=7)
    c = UNet(TINY, seed=8)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert sa.keys() == sb.keys() == sc.keys()
    for k in sa:
        np.testing.assert_array_equal(sa[k], sb[k])
    assert any(not np.array_equal(sa[k], sc[k]) for k in sa)
    x = Tensor(np.random.default_rng(2).standard_normal((1, 4, 8, 8)).astype(np.float32))
    with no_grad():
        np.testing.assert_array_equal(a(x, np.array([9])).data, b(x, np.array([9])).data)


def test_unet_timestep_changes_output():
    net = UNet(TINY, seed=3, dtype=np.float64)
    _randomize_head(net, np.random.default_rng(3))
    x = Tensor(np.random.default_rng(4).standard_normal((1, 4, 8, 8)))
    with no_grad():
        o1 = net(x, np.array([1])).data
        o2 = net(x, np.array([199])).data
    assert np.abs(o1 - o2).max() > 1e-8


def test_unet_batch_rows_independent():
    net = UNet(TINY, seed=5, dtype=np.float64)
    _randomize_head(net, np.random.default_rng(5))
    x = np.random.default_rng(6).standard_normal((3, 4, 8, 8))
    t = np.array([2, 50, 120])
    with no_grad():
        full = net(Tensor(x), t).data
        row1 = net(Tensor(x[1:2]), t[1:2]).data
    np.testing.assert_allclose(full[1:2], row1, rtol=1e-12, atol=1e-13)


def test_unet_end_to_end_gradcheck_f64():
    rng = np.random.default_rng(11)
    net = UNet(TINY, seed=11, dtype=np.float64)
    _randomize_head(net, rng)
    x = Tensor(rng.standard_normal((1, 4, 8, 8)), requires_grad=True)
    t = np.array([17])
    wt = Tensor(rng.standard_normal((1, 2, 8, 8)))

    def build_loss():
        return F.mean(F.mul(net(x, t), wt))

    net.zero_grad()
    x.grad = None
    build_loss().backward()

    # input gradient, elementwise on a random subset
    idx = rng.choice(x.data.size, size=40, replace=False)
    flat = x.data.reshape(-1)
    h = 1e-6
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(build_loss().data)
        flat[i] = orig - h
        fm = float(build_loss().data)
        flat[i] = orig
        num = (fp - fm) / (2 * h)
        assert x.grad.reshape(-1)[i] == pytest.approx(num, rel=1e-5, abs=1e-8)

    # parameter gradients, a few entries from every layer
    for name, p in net.named_parameters():
        assert p.grad is not None, name
        pf = p.data.reshape(-1)
        gf = p.grad.reshape(-1)
        for i in rng.choice(pf.size, size=min(3, pf.size), replace=False):
            orig = pf[i]
            pf[i] = orig + h
            fp = float(build_loss().data)
            pf[i] = orig - h
            fm = float(build_loss().data)
            pf[i] = orig
            num = (fp - fm) / (2 * h)
            assert gf[i] == pytest.approx(num, rel=1e-5, abs=1e-8), name


def test_state_dict_roundtrip_and_strictness():
    net = UNet(TINY, seed=2)
    state = net.state_dict()
    other = UNet(TINY, seed=99)
    other.load_state_dict(state)
    for k, v in other.state_dict().items():
        np.testing.assert_array_equal(v, state[k])

    missing = dict(state)
    dropped = sorted(missing)[0]
    del missing[dropped]
    with pytest.raises(ValueError, match="missing"):
        other.load_state_dict(missing)

    extra = dict(state)
    extra["not_a_param"] = np.zeros(1)
    with pytest.raises(ValueError, match="unexpected"):
        other.load_state_dict(extra)

    bad_shape = dict(state)
    k0 = sorted(bad_shape)[0]
    bad_shape[k0] = np.zeros((1, 2, 3))
    with pytest.raises(ValueError, match="shape mismatch"):
        other.load_state_dict(bad_shape)


def test_num_parameters_consistent():
    net = UNet(UNetConfig(), seed=0)
    total = sum(v.size for v in net.state_dict().values())
    assert net.num_parameters() == total
    assert total > 100_000  # desk-size model, two levels of width 32/64


def test_unetconfig_validation_and_roundtrip():
    with pytest.raises(ValueError):
        UNetConfig(channels=())
    with pytest.raises(ValueError):
        UNetConfig(channels=(30,), groups=8)
    cfg = UNetConfig(in_channels=4, out_channels=2, channels=(16, 32), groups=4, temb_dim=20)
    assert UNetConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.embed_dim == 20
    assert UNetConfig(channels=(32, 64)).embed_dim == 128


def test_resblock_skip_selection():
    rng = np.random.default_rng(0)
    same = ResBlock(8, 8, temb_dim=None, groups=4, rng=rng)
    grow = ResBlock(8, 16, temb_dim=None, groups=4, rng=rng)
    assert same.skip is None
    assert isinstance(grow.skip, Conv2d)
    assert grow.skip.w.shape == (16, 8, 1, 1)


def test_resblock_zeroed_conv_is_identity():
    rng = np.random.default_rng(1)
    blk = ResBlock(4, 4, temb_dim=None, groups=2, rng=rng, dtype=np.float64)
    blk.conv.w.data[:] = 0.0
    blk.conv.b.data[:] = 0.0
    x = Tensor(rng.standard_normal((2, 4, 5, 5)))
    with no_grad():
        out = blk(x)
    np.testing.assert_array_equal(out.data, x.data)


def test_regression_net_shape_and_determinism():
    cfg = RegressionNetConfig(in_channels=7, out_channels=3, channels=16, blocks=2, groups=4)
    net = RegressionNet(cfg, seed=4)
    x = Tensor(np.random.default_rng(8).standard_normal((2, 7, 16, 16)).astype(np.float32))
    with no_grad():
        o1 = net(x).data
        o2 = net(x).data
    assert o1.shape == (2, 3, 16, 16)
    np.testing.assert_array_equal(o1, o2)
    assert np.isfinite(o1).all()
    assert RegressionNetConfig.from_dict(cfg.to_dict()) == cfg
