import numpy as np
import pytest

from seplab.blocks import BlockKind, BlockSpec
from seplab.equivalence import CSV_HEADER, DEFAULT_PAIRS, PAIRS, gradcheck, sweep_equivalence, sweep_pair

K = BlockKind


def test_separable_to_reformulation_passes_at_1e12():
    r = sweep_equivalence(BlockSpec(K.SEPARABLE, 4, 4), K.SEP_REFORMULATION, cases=100, tol=1e-12, seed=1)
    assert r.passed and r.cases == 100 and r.verdict == "pass"


def test_relu_variant_fails_with_positive_diff():
    r = sweep_equivalence(BlockSpec(K.SEPARABLE, 4, 4), K.SEPARABLE_INTERMEDIATE_RELU, cases=5, seed=1)
    assert not r.passed and r.max_abs_diff > 0 and r.verdict == "fail"


def test_zero_weights_zero_diff():
    r = sweep_equivalence(BlockSpec(K.SEPARABLE, 4, 4), K.SEPARABLE_INTERMEDIATE_RELU, cases=1, weight_std=0.0)
    assert r.max_abs_diff == 0.0 and r.passed


def test_unsupported_pair_and_bad_cases():
    with pytest.raises(ValueError):
        sweep_equivalence(BlockSpec(K.INCEPTION, 4, 4, towers=2), K.SEPARABLE)
    with pytest.raises(ValueError):
        sweep_equivalence(BlockSpec(K.SEPARABLE, 4, 4), K.SEP_REFORMULATION, cases=0)
    with pytest.raises(KeyError):
        sweep_pair("bogus")


def test_reports_are_bitwise_deterministic():
    a = sweep_pair("separable:hybrid", cases=10, seed=3)
    b = sweep_pair("separable:hybrid", cases=10, seed=3)
    assert a == b and a.to_csv_row() == b.to_csv_row()


def test_csv_row_schema():
    r = sweep_pair("depthwise:grouped", cases=3, seed=5)
    row = r.to_csv_row().split(",")
    assert len(row) == len(CSV_HEADER.split(","))
    assert row[0] == "depthwise:grouped" and row[1] == "3" and row[6] == "pass" and row[7] == "5"


@pytest.mark.parametrize("c", [2, 4, 8])
@pytest.mark.parametrize("size", [5, 8])
@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("kernel", [1, 3])
def test_every_pair_on_the_invariant_grid(c, size, stride, kernel):
    for name in DEFAULT_PAIRS:
        if name == "depthwise:grouped":
            continue
        src, dst, tol = PAIRS[name]
        card = {"ResNeXt": 2, "ResNeXtGrouped": 2}.get(src, c)
        spec = BlockSpec(src, c, c, kernel=kernel, stride=stride, cardinality=card)
        r = sweep_equivalence(spec, dst, cases=3, seed=c * 100 + size, size=size)
        assert r.max_abs_diff <= tol, (name, r)


def test_gradcheck_linear_separable_is_near_exact():
    r = gradcheck(BlockSpec(K.SEPARABLE, 4, 4), eps=1e-5)
    assert r.max_error <= 1e-9
    assert set(r.errors) == {"depthwise", "pointwise", "input"}


def test_gradcheck_hybrid():
    r = gradcheck(BlockSpec(K.HYBRID, 4, 4), size=6)
    assert r.passed and r.max_error <= 1e-6


def test_gradcheck_preconditions():
    with pytest.raises(ValueError):
        gradcheck(BlockSpec(K.SEPARABLE, 4, 4), eps=0.0)
    with pytest.raises(ValueError):
        gradcheck(BlockSpec(K.SEPARABLE, 128, 128), max_params=10_000)


def test_gradcheck_catches_a_wrong_gradient(monkeypatch):
    from seplab import blocks

    original = blocks.SeparableBlock._body_backward

    def broken(self, cache, grad_out):
        gx, grads = original(self, cache, grad_out)
        grads["pointwise"] = grads["pointwise"] * 1.01
        return gx, grads

    monkeypatch.setattr(blocks.SeparableBlock, "_body_backward", broken)
    assert not gradcheck(BlockSpec(K.SEPARABLE, 4, 4)).passed
