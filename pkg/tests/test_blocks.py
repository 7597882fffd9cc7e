import numpy as np
import pytest

from seplab.blocks import (
    BlockKind,
    BlockSpec,
    build,
    copy_weights,
    make_block,
    map_weights,
    param_shapes,
    parse_kind,
    standard_conv_param_count,
)
from seplab.conv import depthwise_conv2d, pointwise_conv2d
from seplab.tensor import Prng, random_normal

K = BlockKind


def x_for(spec, seed=0, n=2, size=6):
    return random_normal(Prng(seed), (n, spec.c_in, size, size))


def test_parse_kind_accepts_values_and_slugs():
    assert parse_kind("ResNeXt") is K.RESNEXT
    assert parse_kind("resnext") is K.RESNEXT
    assert parse_kind("relu-variant") is K.SEPARABLE_INTERMEDIATE_RELU
    assert parse_kind(K.HYBRID) is K.HYBRID
    with pytest.raises(ValueError):
        parse_kind("bogus")


def test_separable_shapes():
    b = build(BlockSpec(K.SEPARABLE, 4, 4), Prng(0))
    assert [v.shape for v in b.params.values()] == [(4, 1, 3, 3), (4, 4, 1, 1)]


def test_hybrid_shapes():
    b = build(BlockSpec(K.HYBRID, 4, 4), Prng(0))
    assert [b.params[f"path{i}"].shape for i in range(4)] == [(1, 1, 3, 3)] * 4
    assert b.params["merge"].shape == (4, 4, 1, 1)
    assert len(b.params) == 5


def test_other_kind_shapes():
    s = BlockSpec(K.INCEPTION, 8, 8, towers=4)
    assert param_shapes(s)["tower0.reduce"][0] == (2, 8, 1, 1)
    assert param_shapes(s)["tower3.conv"][0] == (2, 2, 3, 3)
    s = BlockSpec(K.REFORMULATED_INCEPTION, 8, 8, towers=4)
    assert [v[0] for v in param_shapes(s).values()] == [(8, 8, 1, 1), (8, 2, 3, 3)]
    s = BlockSpec(K.RESNEXT, 8, 8, cardinality=4)
    assert param_shapes(s)["path3"][0] == (2, 2, 3, 3)
    assert param_shapes(s)["projection"][0] == (8, 8, 1, 1)
    s = BlockSpec(K.RESNEXT_GROUPED, 8, 8, cardinality=4)
    assert param_shapes(s)["grouped"][0] == (8, 2, 3, 3)
    assert standard_conv_param_count(8, 8) == 576


@pytest.mark.parametrize("kind", list(BlockKind))
def test_build_deterministic(kind):
    s = BlockSpec(kind, 4, 4, cardinality=4 if kind is not K.RESNEXT else 2, towers=2)
    a, b = build(s, Prng(5)), build(s, Prng(5))
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name])


def test_he_init_scale():
    b = build(BlockSpec(K.SEPARABLE, 64, 64), Prng(1))
    std = b.params["pointwise"].std()
    assert abs(std - np.sqrt(2.0 / 64)) < 0.01


def test_spec_validation():
    with pytest.raises(ValueError):
        BlockSpec(K.SEPARABLE, 4, 4, kernel=2)
    with pytest.raises(ValueError):
        BlockSpec(K.RESNEXT, 6, 6, cardinality=4)
    with pytest.raises(ValueError):
        BlockSpec(K.HYBRID, 4, 4, cardinality=2)
    with pytest.raises(ValueError):
        BlockSpec(K.INCEPTION, 6, 6, towers=4)
    with pytest.raises(ValueError):
        BlockSpec(K.SEPARABLE, 4, 8, residual=True)
    with pytest.raises(ValueError):
        BlockSpec(K.SEPARABLE, 4, 4, stride=2, residual=True)
    with pytest.raises(ValueError):
        make_block(BlockSpec(K.SEPARABLE, 4, 4), {"depthwise": np.zeros((4, 1, 3, 3))})


@pytest.mark.parametrize("kind", list(BlockKind))
def test_residual_with_zero_weights_is_identity(kind):
    s = BlockSpec(kind, 4, 4, cardinality=4 if kind is not K.RESNEXT else 2, towers=2, residual=True)
    params = {n: np.zeros(shape) for n, (shape, _) in param_shapes(s).items()}
    x = x_for(s)
    assert np.array_equal(make_block(s, params).forward(x), x)


def test_separable_is_pointwise_after_depthwise():
    s = BlockSpec(K.SEPARABLE, 4, 6, stride=2)
    b = build(s, Prng(2))
    x = x_for(s, size=7)
    manual = pointwise_conv2d(depthwise_conv2d(x, b.params["depthwise"], 2, 1), b.params["pointwise"])
    assert np.array_equal(b.forward(x), manual)


def test_relu_variant_applies_relu_between():
    s = BlockSpec(K.SEPARABLE_INTERMEDIATE_RELU, 4, 4)
    b = build(s, Prng(3))
    x = x_for(s)
    manual = pointwise_conv2d(np.maximum(depthwise_conv2d(x, b.params["depthwise"], 1, 1), 0), b.params["pointwise"])
    assert np.array_equal(b.forward(x), manual)


def test_map_separable_to_reformulation_exact():
    prng = Prng(4)
    for _ in range(50):
        s = BlockSpec(K.SEPARABLE, 4, 4)
        b = build(s, prng)
        x = random_normal(prng, (2, 4, 8, 8))
        assert np.abs(b.forward(x) - map_weights(b, K.SEP_REFORMULATION).forward(x)).max() <= 1e-12


def test_map_separable_to_hybrid_zero_input():
    b = build(BlockSpec(K.SEPARABLE, 4, 4), Prng(5))
    h = map_weights(b, K.HYBRID)
    zero = np.zeros((1, 4, 5, 5))
    assert not b.forward(zero).any() and not h.forward(zero).any()


def test_resnext_to_grouped_block_diagonal():
    s = BlockSpec(K.RESNEXT, 8, 8, cardinality=4)
    b = build(s, Prng(6))
    g = map_weights(b, K.RESNEXT_GROUPED)
    w = g.params["grouped"]
    for i in range(4):
        assert np.array_equal(w[2 * i : 2 * i + 2], b.params[f"path{i}"])
    x = x_for(s)
    assert np.abs(b.forward(x) - g.forward(x)).max() <= 1e-10


@pytest.mark.parametrize(
    "src,dst",
    [(K.SEPARABLE, K.HYBRID), (K.HYBRID, K.SEPARABLE), (K.SEP_REFORMULATION, K.SEPARABLE), (K.RESNEXT_GROUPED, K.RESNEXT)],
)
def test_map_round_trip_restores_parameters(src, dst):
    s = BlockSpec(src, 4, 4, cardinality=4 if src is not K.RESNEXT_GROUPED else 2)
    b = build(s, Prng(7))
    back = map_weights(map_weights(b, dst), src)
    for name in b.params:
        assert np.array_equal(b.params[name], back.params[name])


def test_map_unsupported_pair():
    b = build(BlockSpec(K.INCEPTION, 4, 4, towers=2), Prng(0))
    with pytest.raises(ValueError):
        map_weights(b, K.SEPARABLE)


def test_copy_weights_between_separable_variants():
    b = build(BlockSpec(K.SEPARABLE, 4, 4), Prng(8))
    r = copy_weights(b, K.SEPARABLE_INTERMEDIATE_RELU)
    assert r.spec.kind is K.SEPARABLE_INTERMEDIATE_RELU
    assert np.array_equal(r.params["depthwise"], b.params["depthwise"])
    ident = copy_weights(b, K.SEPARABLE_INTERMEDIATE_RELU, intermediate="identity")
    x = x_for(b.spec)
    assert np.array_equal(ident.forward(x), b.forward(x))
    with pytest.raises(ValueError):
        copy_weights(b, K.INCEPTION)


@pytest.mark.parametrize("kind", list(BlockKind))
def test_output_shape_and_backward_shapes(kind):
    s = BlockSpec(kind, 4, 8 if kind not in (K.HYBRID,) else 4, stride=2, cardinality=4 if kind is not K.RESNEXT else 2, towers=2)
    b = build(s, Prng(9))
    x = x_for(s, size=7)
    out = b.forward(x)
    assert out.shape == b.output_shape(x.shape)
    gx, grads = b.backward(x, np.ones_like(out))
    assert gx.shape == x.shape
    assert list(grads) == list(b.params)
    for name, g in grads.items():
        assert g.shape == b.params[name].shape


def test_forward_rejects_wrong_channels():
    b = build(BlockSpec(K.SEPARABLE, 4, 4), Prng(0))
    with pytest.raises(ValueError):
        b.forward(np.zeros((1, 3, 5, 5)))
