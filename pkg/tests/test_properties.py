"""Property-based checks of the invariants each module promises."""

import math

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from seplab.blocks import BlockKind, BlockSpec, build, map_weights
from seplab.conv import ConvParams, conv2d, conv2d_reference, depthwise_conv2d
from seplab.data import sample_split, synthetic_dataset
from seplab.equivalence import EquivalenceReport
from seplab.experiment import ExperimentConfig, config_text, mean_and_std, parse_config
from seplab.report import read_summary, render_svg
from seplab.serialize import dumps_params, loads_params
from seplab.tensor import Prng, elementwise, random_normal, reduce

from oracles import SplitMix64

SETTINGS = settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
seeds = st.integers(min_value=0, max_value=2**64 - 1)


@st.composite
def conv_case(draw):
    groups = draw(st.sampled_from([1, 2, 3]))
    cin_g = draw(st.integers(1, 3))
    cout_g = draw(st.integers(1, 3))
    k = draw(st.sampled_from([1, 3, 5]))
    stride = draw(st.integers(1, 3))
    pad = draw(st.integers(0, 2))
    size = draw(st.integers(max(1, k - 2 * pad), 9))
    seed = draw(seeds)
    prng = Prng(seed)
    x = random_normal(prng, (draw(st.integers(1, 2)), groups * cin_g, size, size))
    w = random_normal(prng, (groups * cout_g, cin_g, k, k))
    bias = random_normal(prng, (1, 1, 1, groups * cout_g)).ravel() if draw(st.booleans()) else None
    return x, ConvParams(w, bias, stride, pad, groups)


@SETTINGS
@given(seeds, st.integers(0, 200))
def test_prng_vectorized_equals_scalar(seed, count):
    oracle = SplitMix64(seed)
    assert Prng(seed).u64_array(count).tolist() == [oracle.next_u64() for _ in range(count)]


@SETTINGS
@given(conv_case())
def test_conv2d_agrees_with_reference(case):
    x, p = case
    assert np.abs(conv2d(x, p) - conv2d_reference(x, p)).max() <= 1e-12


@SETTINGS
@given(conv_case(), st.floats(-4, 4), st.floats(-4, 4))
def test_conv_linearity(case, a, b):
    x, p = case
    p = ConvParams(p.weights, None, p.stride, p.padding, p.groups)
    y = np.flip(x, axis=3).copy()
    lhs = conv2d(a * x + b * y, p)
    rhs = a * conv2d(x, p) + b * conv2d(y, p)
    scale = 1.0 + np.abs(lhs).max()
    assert np.abs(lhs - rhs).max() <= 1e-10 * scale


@SETTINGS
@given(seeds, st.integers(1, 5), st.integers(0, 4))
def test_depthwise_channel_isolation(seed, c, ch):
    ch %= c
    prng = Prng(seed)
    x = random_normal(prng, (1, c, 6, 6))
    w = random_normal(prng, (c, 1, 3, 3))
    x2 = x.copy()
    x2[:, ch] = random_normal(prng, (1, 1, 6, 6))[:, 0]
    a, b = depthwise_conv2d(x, w, 1, 1), depthwise_conv2d(x2, w, 1, 1)
    others = [i for i in range(c) if i != ch]
    assert np.array_equal(a[:, others], b[:, others])


@SETTINGS
@given(seeds)
def test_relu_idempotent_and_sum_bit_stable(seed):
    x = random_normal(Prng(seed), (2, 3, 4, 5))
    r = elementwise("relu", x)
    assert np.array_equal(elementwise("relu", r), r)
    assert reduce("sum", x) == reduce("sum", x.copy())


@SETTINGS
@given(seeds, st.sampled_from([2, 4, 8]), st.sampled_from([1, 3]), st.sampled_from([1, 2]))
def test_strict_reformulation_is_bitwise(seed, c, k, stride):
    b = build(BlockSpec(BlockKind.SEPARABLE, c, c, kernel=k, stride=stride), Prng(seed))
    x = random_normal(Prng(seed ^ 1), (2, c, 7, 7))
    assert np.array_equal(b.forward(x), map_weights(b, BlockKind.SEP_REFORMULATION).forward(x))


@SETTINGS
@given(seeds, st.sampled_from([2, 4, 8]))
def test_hybrid_and_resnext_maps_within_reordering_tolerance(seed, c):
    x = random_normal(Prng(seed ^ 2), (2, c, 6, 6))
    sep = build(BlockSpec(BlockKind.SEPARABLE, c, c), Prng(seed))
    assert np.abs(sep.forward(x) - map_weights(sep, BlockKind.HYBRID).forward(x)).max() <= 1e-10
    rx = build(BlockSpec(BlockKind.RESNEXT, c, c, cardinality=2), Prng(seed))
    assert np.abs(rx.forward(x) - map_weights(rx, BlockKind.RESNEXT_GROUPED).forward(x)).max() <= 1e-10


@SETTINGS
@given(st.dictionaries(st.text(min_size=1, max_size=12), st.tuples(*[st.integers(0, 3)] * 4), max_size=4), seeds)
def test_serialize_round_trip(shapes, seed):
    prng = Prng(seed)
    params = {name: random_normal(prng, dims) for name, dims in shapes.items()}
    back = loads_params(dumps_params(params))
    assert list(back) == list(params)
    for name in params:
        assert back[name].shape == params[name].shape
        assert back[name].tobytes() == params[name].tobytes()


@SETTINGS
@given(st.integers(10, 80), st.data(), seeds)
def test_sample_split_disjoint_and_complete(n, data, seed):
    d = synthetic_dataset(n, h=2, w=2, noise=0.0)
    d = type(d)(d.images, d.labels, d.name)
    n_train = data.draw(st.integers(0, n))
    n_eval = n - n_train
    marked = type(d)(np.broadcast_to(np.arange(n, dtype=float)[:, None, None, None] / n, d.images.shape).copy(), d.labels)
    tr, ev = sample_split(marked, n_train, n_eval, seed)
    ids = np.round(np.concatenate([tr.images[:, 0, 0, 0], ev.images[:, 0, 0, 0]]) * n).astype(int)
    assert sorted(ids.tolist()) == list(range(n))


@SETTINGS
@given(st.integers(10, 30), st.floats(0, 1), seeds)
def test_synthetic_bit_reproducible(n, noise, seed):
    a = synthetic_dataset(n, h=4, w=4, noise=noise, seed=seed)
    b = synthetic_dataset(n, h=4, w=4, noise=noise, seed=seed)
    assert a.images.tobytes() == b.images.tobytes() and np.array_equal(a.labels, b.labels)


@SETTINGS
@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=12), st.randoms())
def test_mean_abs_diff_permutation_invariant(values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert mean_and_std(values) == mean_and_std(shuffled)


@SETTINGS
@given(
    st.lists(st.sampled_from([k.value for k in BlockKind]), min_size=1, max_size=5),
    st.integers(1, 20),
    st.floats(1e-5, 1.0),
    seeds,
    st.booleans(),
)
def test_config_text_round_trip(setups, trials, lr, seed, flag):
    cfg = ExperimentConfig(setups=tuple(setups), trials=trials, learning_rate=lr, seed_base=seed, shared_init=flag)
    assert parse_config(config_text(cfg)) == cfg


@SETTINGS
@given(st.floats(0, 1e-9), st.floats(1e-12, 1e-9))
def test_report_verdict_iff_within_tolerance(diff, tol):
    r = EquivalenceReport(("a", "b"), 1, diff, diff, 0.0, tol, 0)
    assert r.passed == (diff <= tol)
    assert r.to_csv_row().split(",")[6] == ("pass" if diff <= tol else "fail")


@SETTINGS
@given(st.lists(st.tuples(st.text("abcXYZ_", min_size=1, max_size=10), st.floats(0, 50)), max_size=8))
def test_svg_deterministic(rows):
    text = "setup,mean_abs_diff_pct,std_abs_diff_pct,trials_used,diverged\n"
    text += "".join(f"{name},{v!r},0.0,1,0\n" for name, v in rows)
    a = render_svg(read_summary(text))
    assert a == render_svg(read_summary(text))
    assert a.count('class="bar"') == len(rows)
    assert not math.isnan(len(a))
