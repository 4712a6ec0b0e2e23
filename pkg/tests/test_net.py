import math
from dataclasses import replace

import numpy as np
import pytest

import oracles
from gaitproj import net
from gaitproj.net import (
    ConvSpec,
    DAMLParams,
    NetConfig,
    ShapeError,
    TemporalSpec,
    backbone_forward,
    conv2d,
    cross_entropy,
    daml_forward,
    horizontal_pool,
    init_params,
    mean_over_frames,
    subtract_frame_mean,
    temporal_conv,
    temporal_pool,
    triplet_loss,
)


def _rand_conv(rng, c_in, c_out, k, stride=1, padding=None):
    return ConvSpec(rng.normal(size=(c_out, c_in, k, k)), rng.normal(size=c_out), stride,
                    k // 2 if padding is None else padding)


def _rand_daml(rng, c, **kw):
    return DAMLParams(_rand_conv(rng, c, c, 3), _rand_conv(rng, c, c, 1), _rand_conv(rng, c, c, 3),
                      _rand_conv(rng, c, c, 3), TemporalSpec(rng.normal(size=(c, 3)), rng.normal(size=c)), **kw)


def _close(a, b, rel=1e-6):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    assert a.shape == b.shape
    np.testing.assert_allclose(a, b, rtol=rel, atol=rel * max(1.0, float(np.abs(b).max(initial=0.0))))


# ---------------------------------------------------------------- conv2d

def test_conv_identity_1x1():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 4))
    assert np.array_equal(conv2d(x, ConvSpec.identity(3)), x)


def test_conv_zero_weights_bias():
    spec = ConvSpec(np.zeros((2, 1, 3, 3)), [1.5, -2.0], padding=1)
    out = conv2d(np.ones((1, 1, 6, 6)), spec)
    assert out.shape == (1, 2, 6, 6)
    assert np.all(out[0, 0] == 1.5) and np.all(out[0, 1] == -2.0)


def test_conv_ramp_against_loop():
    x = np.arange(25, dtype=float).reshape(1, 1, 5, 5)
    w = np.random.default_rng(1).normal(size=(1, 1, 3, 3))
    spec = ConvSpec(w, [0.3], padding=1)
    _close(conv2d(x, spec), oracles.conv2d_loop(x, w, [0.3], 1, 1), rel=1e-12)


@pytest.mark.parametrize("stride, padding, k", [(1, 0, 3), (2, 1, 3), (2, 0, 1), (1, 2, 5)])
def test_conv_against_loop(stride, padding, k):
    rng = np.random.default_rng(stride * 10 + padding + k)
    x = rng.normal(size=(2, 3, 7, 6))
    spec = _rand_conv(rng, 3, 4, k, stride, padding)
    _close(conv2d(x, spec), oracles.conv2d_loop(x, spec.weight, spec.bias, stride, padding))


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError, match="channels"):
        conv2d(np.zeros((1, 2, 4, 4)), ConvSpec.identity(3))


def test_conv_linearity():
    rng = np.random.default_rng(2)
    spec = ConvSpec(rng.normal(size=(3, 2, 3, 3)), np.zeros(3), padding=1)
    x, y = rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(2, 2, 6, 6))
    a, b = rng.normal(size=2)
    _close(conv2d(a * x + b * y, spec), a * conv2d(x, spec) + b * conv2d(y, spec), rel=1e-12)


def test_conv_does_not_mutate_input():
    x = np.random.default_rng(3).normal(size=(1, 1, 4, 4))
    before = x.copy()
    conv2d(x, ConvSpec(np.ones((1, 1, 3, 3)), [0.0], padding=1))
    assert np.array_equal(x, before)


# ---------------------------------------------------------------- frame mean

def test_mean_single_frame():
    x = np.random.default_rng(4).normal(size=(1, 2, 3, 3))
    assert np.array_equal(mean_over_frames(x), x)
    assert not subtract_frame_mean(x).any()


def test_mean_antisymmetric_frames():
    f = np.random.default_rng(5).normal(size=(1, 2, 3, 3))
    assert not mean_over_frames(np.concatenate([f, -f])).any()


def test_mean_against_loop():
    x = np.random.default_rng(6).normal(size=(4, 2, 5, 5))
    _close(mean_over_frames(x), oracles.frame_mean_loop(x), rel=1e-12)


def test_mean_constant_is_exact():
    f = np.random.default_rng(7).normal(size=(1, 3, 4, 4)) * 1e3
    assert not subtract_frame_mean(np.repeat(f, 7, axis=0)).any()


def test_mean_is_order_free():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(6, 2, 3, 3))
    assert np.array_equal(mean_over_frames(x), mean_over_frames(x[rng.permutation(6)]))


# ---------------------------------------------------------------- temporal

def test_temporal_conv_against_loop():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(5, 2, 3, 3))
    spec = TemporalSpec(rng.normal(size=(2, 3)), rng.normal(size=2))
    _close(temporal_conv(x, spec), oracles.temporal_loop(x, spec.weight, spec.bias), rel=1e-12)


def test_temporal_identity():
    x = np.random.default_rng(10).normal(size=(3, 2, 2, 2))
    assert np.array_equal(temporal_conv(x, TemporalSpec.identity(2)), x)


def test_temporal_pool_cases():
    rng = np.random.default_rng(11)
    one = rng.normal(size=(1, 2, 3, 3))
    assert np.array_equal(temporal_pool(one), one)
    x = rng.normal(size=(3, 2, 4, 4))
    assert np.array_equal(temporal_pool(x), temporal_pool(x[[2, 0, 1]]))
    assert np.array_equal(temporal_pool(x), np.array(oracles.frame_max_loop(x)))


# ---------------------------------------------------------------- DAM-L

def test_daml_zero_dynamics():
    rng = np.random.default_rng(12)
    c = 3
    p = DAMLParams(ConvSpec.zeros(c, c, 3), ConvSpec.zeros(c, c, 1), _rand_conv(rng, c, c, 3),
                   ConvSpec.zeros(c, c, 3), TemporalSpec.identity(c))
    x = np.repeat(rng.normal(size=(1, c, 6, 6)), 4, axis=0)
    # conv_c sees an exactly-zero map, so its bias is the only contribution
    out = daml_forward(x, replace(p, conv_c=ConvSpec(p.conv_c.weight, np.zeros(c), 1, 1)))
    assert np.array_equal(out, x)


def test_daml_all_zero_is_residual():
    c = 2
    p = DAMLParams(ConvSpec.zeros(c, c, 3), ConvSpec.zeros(c, c, 1), ConvSpec.zeros(c, c, 3),
                   ConvSpec.zeros(c, c, 3), TemporalSpec.identity(c))
    x = np.random.default_rng(13).normal(size=(3, c, 5, 5))
    assert np.array_equal(daml_forward(x, p), x)


def _daml_oracle(x, p, layers=1, parse="raw"):
    for _ in range(layers):
        T = x.shape[0]
        mean = np.array(oracles.frame_mean_loop(x))
        cen = x - mean
        ab_in, c_in = (x, cen) if parse == "raw" else (cen, x)

        def conv(inp, s):
            return np.array(oracles.conv2d_loop(inp, s.weight, s.bias, s.stride, s.padding))

        pre = x + conv(ab_in, p.conv_a) + conv(ab_in, p.conv_b) + conv(c_in, p.conv_c) + conv(x, p.conv_s)
        x = np.array(oracles.temporal_loop(pre, p.temporal.weight, p.temporal.bias))
        assert x.shape[0] == T
    return x


@pytest.mark.parametrize("layers, parse", [(1, "raw"), (2, "raw"), (1, "centered")])
def test_daml_matches_composition(layers, parse):
    rng = np.random.default_rng(14 + layers)
    p = _rand_daml(rng, 2, layers=layers, dynamic_parse=parse)
    x = rng.normal(size=(4, 2, 8, 8))
    _close(daml_forward(x, p), _daml_oracle(x, p, layers, parse))


def test_daml_rejects_bad_params():
    rng = np.random.default_rng(15)
    with pytest.raises(ShapeError):
        _rand_daml(rng, 2, layers=3)
    with pytest.raises(ShapeError):
        _rand_daml(rng, 2, dynamic_parse="other")
    with pytest.raises(ShapeError, match="conv_a"):
        DAMLParams(_rand_conv(rng, 2, 3, 3), _rand_conv(rng, 2, 2, 1), _rand_conv(rng, 2, 2, 3),
                   _rand_conv(rng, 2, 2, 3), TemporalSpec.identity(2))
    p = _rand_daml(rng, 2)
    with pytest.raises(ShapeError, match="DAM-L"):
        daml_forward(np.zeros((2, 3, 4, 4)), p)


# ---------------------------------------------------------------- backbone

@pytest.fixture(scope="module")
def params():
    return init_params(NetConfig(), seed=0)


def test_backbone_zero_input_finite(params):
    out = backbone_forward(np.zeros((2, 3, 64, 64)), params)
    assert out.shape == (2, 128, 8, 8) and np.all(np.isfinite(out))


def test_backbone_bias_only_is_spatially_constant():
    # zero conv weights: every stage carries only propagated biases
    rng = np.random.default_rng(25)
    arrays = {k: (rng.normal(size=v) if (k.endswith(".bias") or ".temporal." in k) else np.zeros(v))
              for k, v in net.param_shapes(NetConfig()).items()}
    p = net.params_from_arrays(NetConfig(), arrays)
    out = backbone_forward(np.zeros((2, 3, 64, 64)), p)
    assert out.shape == (2, 128, 8, 8)
    assert np.array_equal(out, np.broadcast_to(out[:, :, :1, :1], out.shape))


def test_backbone_zero_weights_zero_output():
    p = init_params(NetConfig(), kind="zero")
    out = backbone_forward(np.random.default_rng(0).random((2, 3, 64, 64)), p)
    assert not out.any()


def test_backbone_frame_independence(params):
    ident = params.with_identity_temporal()
    f = np.random.default_rng(16).random((1, 3, 64, 64))
    one = backbone_forward(f, ident)
    three = backbone_forward(np.repeat(f, 3, axis=0), ident)
    assert all(np.array_equal(three[t], one[0]) for t in range(3))


def test_backbone_permutation_equivariance(params):
    ident = params.with_identity_temporal()
    rng = np.random.default_rng(17)
    x = rng.random((4, 3, 64, 64))
    perm = rng.permutation(4)
    a, b = backbone_forward(x, ident), backbone_forward(x[perm], ident)
    assert np.array_equal(a[perm], b)
    assert np.array_equal(temporal_pool(a), temporal_pool(b))


@pytest.mark.parametrize("T", [1, 3])
def test_backbone_stage_table(params, T):
    stages = backbone_forward(np.random.default_rng(T).random((T, 3, 64, 64)), params, return_stages=True)
    assert [s.shape for s in stages] == [(T, 16, 32, 32), (T, 32, 16, 16), (T, 64, 8, 8), (T, 128, 8, 8)]
    assert [s.shape for s in stages] == params.config.stage_shapes(T)


def test_backbone_rejects_wrong_size(params):
    with pytest.raises(ShapeError, match="64"):
        backbone_forward(np.zeros((1, 3, 32, 32)), params)


def test_init_is_seeded():
    a = init_params(NetConfig(), seed=3).arrays()
    b = init_params(NetConfig(), seed=3).arrays()
    c = init_params(NetConfig(), seed=4).arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not all(np.array_equal(a[k], c[k]) for k in a)


def test_config_round_trip():
    cfg = NetConfig(layers=2, dynamic_parse="centered")
    assert NetConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- horizontal pool

def test_strip_pool_single_strip():
    x = np.random.default_rng(18).normal(size=(1, 3, 4, 4))
    v = horizontal_pool(x, 1)
    assert np.allclose(v[0], x[0].max(axis=(1, 2)) + x[0].mean(axis=(1, 2)), rtol=0, atol=1e-15)


def test_strip_pool_zero_strip_gives_bias():
    rng = np.random.default_rng(19)
    x = rng.normal(size=(1, 2, 4, 3))
    x[0, :, 2:] = 0.0
    w, b = rng.normal(size=(2, 5, 2)), rng.normal(size=(2, 5))
    assert np.array_equal(horizontal_pool(x, 2, w, b)[1], b[1])


def test_strip_pool_hand_fixture():
    x = np.zeros((1, 1, 4, 2))
    x[0, 0] = [[1, 5], [3, 3], [-2, -4], [0, -6]]
    # top strip: max 5, mean 3; bottom: max 0, mean -3
    assert horizontal_pool(x, 2).tolist() == [[8.0], [-3.0]]
    _close(horizontal_pool(x, 2), oracles.strip_pool_loop(x, 2), rel=1e-15)


def test_strip_pool_bad_split():
    with pytest.raises(ValueError, match="divisible"):
        horizontal_pool(np.zeros((1, 1, 5, 2)), 2)


# ---------------------------------------------------------------- losses

def test_triplet_identical_is_margin():
    assert triplet_loss(np.ones((6, 4)), [0, 0, 1, 1, 2, 2], 0.2) == 0.2


def test_triplet_separated_is_zero():
    e = np.array([[0, 0], [0, 0.1], [10, 0], [10, 0.1]])
    assert triplet_loss(e, [0, 0, 1, 1], 0.2) == 0.0


def test_triplet_against_enumeration():
    rng = np.random.default_rng(20)
    e = rng.normal(size=(4, 5))
    labels = [0, 1, 0, 1]
    assert triplet_loss(e, labels) == pytest.approx(oracles.triplet_loop(e, labels, 0.2), rel=1e-12)


def test_triplet_strips_average():
    rng = np.random.default_rng(21)
    e = rng.normal(size=(5, 3, 4))
    labels = [0, 0, 1, 1, 1]
    want = np.mean([oracles.triplet_loop(e[:, s], labels, 0.3) for s in range(3)])
    assert triplet_loss(e, labels, 0.3) == pytest.approx(want, rel=1e-12)


def test_triplet_needs_valid_triplet():
    with pytest.raises(ValueError, match="triplet"):
        triplet_loss(np.zeros((3, 2)), [0, 1, 2])
    with pytest.raises(ValueError, match="triplet"):
        triplet_loss(np.zeros((3, 2)), [0, 0, 0])


def test_ce_uniform():
    assert cross_entropy(np.zeros((3, 7)), [0, 3, 6]) == pytest.approx(math.log(7), abs=1e-12)


def test_ce_sharpening_decreases():
    base = np.eye(4)[:3]
    losses = [cross_entropy(base * s, [0, 1, 2]) for s in (1, 2, 5, 10, 50)]
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-15 + 4e-21


def test_ce_against_direct_sum():
    z = np.random.default_rng(22).normal(size=(3, 5))
    labels = [4, 0, 2]
    assert cross_entropy(z, labels) == pytest.approx(oracles.cross_entropy_loop(z, labels), rel=1e-12)


def test_ce_shift_invariance():
    rng = np.random.default_rng(23)
    z = rng.normal(size=(6, 4))
    shifts = rng.normal(size=(6, 1)) * 50
    assert cross_entropy(z + shifts, [0, 1, 2, 3, 0, 1]) == pytest.approx(
        cross_entropy(z, [0, 1, 2, 3, 0, 1]), rel=1e-12)


def test_ce_stable_for_large_logits():
    assert cross_entropy([[1000.0, 0.0]], [1]) == pytest.approx(1000.0, rel=1e-12)


def test_ce_label_out_of_range():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 3)), [0, 3])


def test_embed_batch_shapes(params):
    rng = np.random.default_rng(24)
    xs = [rng.random((2, 3, 64, 64)) for _ in range(3)]
    es = net.embed_batch(xs, [0, 1, 0], params)
    assert es.embeddings.shape == (3, 8, 32) and es.logits.shape == (3, 8, 4)
