"""Numerical equivalence sweeps between block formulations, and gradient audits."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blocks import (
    Block,
    BlockKind,
    BlockSpec,
    build,
    copy_weights,
    make_block,
    map_weights,
    param_shapes,
    parse_kind,
)
from .conv import ConvParams, conv2d_reference, depthwise_conv2d
from .tensor import Prng, random_normal

__all__ = [
    "EquivalenceReport",
    "GradcheckReport",
    "PAIRS",
    "DEFAULT_PAIRS",
    "CSV_HEADER",
    "sweep_equivalence",
    "sweep_pair",
    "gradcheck",
]

# Verbatim weight copies run the same arithmetic in the same order; mappings
# that regroup a sum (matmul vs path-by-path accumulation) get the looser tier.
TOL_EXACT = 1e-12
TOL_REORDERED = 1e-10

PAIRS: dict[str, tuple[str, str, float]] = {
    "depthwise:grouped": ("depthwise", "grouped", TOL_EXACT),
    "separable:sep-reformulation": ("Separable", "SepReformulation", TOL_EXACT),
    "sep-reformulation:separable": ("SepReformulation", "Separable", TOL_EXACT),
    "separable:hybrid": ("Separable", "HybridInterpretation", TOL_REORDERED),
    "hybrid:separable": ("HybridInterpretation", "Separable", TOL_REORDERED),
    "resnext:resnext-grouped": ("ResNeXt", "ResNeXtGrouped", TOL_REORDERED),
    "resnext-grouped:resnext": ("ResNeXtGrouped", "ResNeXt", TOL_REORDERED),
    # not an equivalence: the intermediate ReLU is expected to break it
    "separable:relu-variant": ("Separable", "SeparableIntermediateRelu", TOL_EXACT),
}
DEFAULT_PAIRS = tuple(name for name in PAIRS if name != "separable:relu-variant")

CSV_HEADER = "pair,cases,max_abs_diff,mean_abs_diff,max_rel_diff,tolerance,verdict,seed"

GRID_CHANNELS = (2, 4, 8)
GRID_SIZES = (5, 8, 16)
GRID_STRIDES = (1, 2)
GRID_KERNELS = (1, 3)


@dataclass(frozen=True)
class EquivalenceReport:
    pair: tuple[str, str]
    cases: int
    max_abs_diff: float
    mean_abs_diff: float
    max_rel_diff: float
    tolerance: float
    seed: int

    @property
    def passed(self) -> bool:
        return self.max_abs_diff <= self.tolerance

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    @property
    def pair_name(self) -> str:
        return f"{self.pair[0]}:{self.pair[1]}"

    def to_csv_row(self) -> str:
        return ",".join(
            [
                self.pair_name,
                str(self.cases),
                repr(self.max_abs_diff),
                repr(self.mean_abs_diff),
                repr(self.max_rel_diff),
                repr(self.tolerance),
                self.verdict,
                str(self.seed),
            ]
        )

    def __str__(self) -> str:
        return (
            f"{self.pair_name:<30} cases={self.cases:<4d} max|d|={self.max_abs_diff:.3e} "
            f"mean|d|={self.mean_abs_diff:.3e} rel={self.max_rel_diff:.3e} "
            f"tol={self.tolerance:.0e} {self.verdict.upper()}"
        )


class _DiffAccumulator:
    def __init__(self):
        self.cases = 0
        self.max_abs = 0.0
        self.abs_total = 0.0
        self.count = 0
        self.max_rel = 0.0

    def add(self, a: np.ndarray, b: np.ndarray) -> None:
        if a.shape != b.shape:
            raise ValueError(f"outputs differ in shape: {a.shape} vs {b.shape}")
        diff = np.abs(a - b).reshape(-1)
        self.cases += 1
        if diff.size == 0:
            return
        case_max = float(diff.max())
        scale = float(np.abs(b).max())
        self.max_abs = max(self.max_abs, case_max)
        self.abs_total += float(np.cumsum(diff)[-1])
        self.count += diff.size
        if case_max > 0.0:
            rel = case_max / scale if scale > 0.0 else float("inf")
            self.max_rel = max(self.max_rel, rel)

    def report(self, pair, tol, seed) -> EquivalenceReport:
        mean = self.abs_total / self.count if self.count else 0.0
        return EquivalenceReport(pair, self.cases, self.max_abs, mean, self.max_rel, tol, seed)


def _random_block(spec: BlockSpec, prng: Prng, std: float) -> Block:
    params = {name: random_normal(prng, shape, 0.0, std) for name, (shape, _) in param_shapes(spec).items()}
    return make_block(spec, params)


def _paired_block(src: Block, dst_kind: BlockKind) -> Block:
    if dst_kind is BlockKind.SEPARABLE_INTERMEDIATE_RELU:
        return copy_weights(src, dst_kind)
    return map_weights(src, dst_kind)


def _default_tol(src_kind, dst_kind) -> float:
    for a, b, tol in PAIRS.values():
        if (a, b) == (src_kind.value, dst_kind.value):
            return tol
    return TOL_REORDERED


def sweep_equivalence(
    src_spec: BlockSpec,
    dst_kind,
    cases: int = 100,
    tol: float | None = None,
    seed: int = 0,
    size: int = 8,
    batch: int = 2,
    weight_std: float = 1.0,
) -> EquivalenceReport:
    """Compare ``src_spec`` blocks with their ``dst_kind`` images on random inputs.

    Each case draws fresh normal(0, ``weight_std``) weights followed by a
    standard-normal input of shape ``(batch, c_in, size, size)``, all from one
    stream seeded by ``seed``.
    """
    dst_kind = parse_kind(dst_kind)
    if cases < 1:
        raise ValueError(f"cases must be >= 1, got {cases}")
    if tol is None:
        tol = _default_tol(src_spec.kind, dst_kind)
    # fail fast on unsupported pairs before spending any cases
    _paired_block(_random_block(src_spec, Prng(0), 0.0), dst_kind)
    prng = Prng(seed)
    acc = _DiffAccumulator()
    for _ in range(cases):
        src = _random_block(src_spec, prng, weight_std)
        x = random_normal(prng, (batch, src_spec.c_in, size, size))
        acc.add(src.forward(x), _paired_block(src, dst_kind).forward(x))
    return acc.report((src_spec.kind.slug, dst_kind.slug), tol, seed)


def _choice(prng: Prng, options):
    return options[int(prng.next_float() * len(options))]


def _draw_spec(prng: Prng, kind: BlockKind) -> tuple[BlockSpec, int]:
    c = _choice(prng, GRID_CHANNELS)
    size = _choice(prng, GRID_SIZES)
    stride = _choice(prng, GRID_STRIDES)
    kernel = _choice(prng, GRID_KERNELS)
    cardinality = None
    if kind in (BlockKind.RESNEXT, BlockKind.RESNEXT_GROUPED):
        cardinality = _choice(prng, [d for d in (1, 2, 4, 8) if c % d == 0])
    return BlockSpec(kind, c, c, kernel=kernel, stride=stride, cardinality=cardinality), size


def sweep_pair(name: str, cases: int = 100, tol: float | None = None, seed: int = 42, batch: int = 2) -> EquivalenceReport:
    """Sweep a named pair from :data:`PAIRS` across randomly drawn shapes.

    Every case draws channels from {2, 4, 8}, spatial size from {5, 8, 16},
    stride from {1, 2} and kernel from {1, 3}, then fresh weights and input.
    """
    if name not in PAIRS:
        raise KeyError(f"unknown pair {name!r}; known pairs: {', '.join(PAIRS)}")
    if cases < 1:
        raise ValueError(f"cases must be >= 1, got {cases}")
    src_name, dst_name, default_tol = PAIRS[name]
    tol = default_tol if tol is None else tol
    prng = Prng(seed)
    acc = _DiffAccumulator()
    if name == "depthwise:grouped":
        for _ in range(cases):
            spec, size = _draw_spec(prng, BlockKind.SEPARABLE)
            w = random_normal(prng, (spec.c_in, 1, spec.kernel, spec.kernel))
            x = random_normal(prng, (batch, spec.c_in, size, size))
            fast = depthwise_conv2d(x, w, spec.stride, spec.padding)
            ref = conv2d_reference(x, ConvParams(w, stride=spec.stride, padding=spec.padding, groups=spec.c_in))
            acc.add(fast, ref)
        return acc.report((src_name, dst_name), tol, seed)
    src_kind, dst_kind = parse_kind(src_name), parse_kind(dst_name)
    for _ in range(cases):
        spec, size = _draw_spec(prng, src_kind)
        src = _random_block(spec, prng, 1.0)
        x = random_normal(prng, (batch, spec.c_in, size, size))
        acc.add(src.forward(x), _paired_block(src, dst_kind).forward(x))
    return acc.report((src_kind.slug, dst_kind.slug), tol, seed)


@dataclass(frozen=True)
class GradcheckReport:
    kind: BlockKind
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-6
    eps: float = 1e-5
    seed: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def __str__(self) -> str:
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        return (
            f"{self.kind.value:<26} max rel err={self.max_error:.3e} (worst: {worst}) "
            f"tol={self.tolerance:.0e} {'PASS' if self.passed else 'FAIL'}"
        )


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # normalised by the tensor's largest gradient so near-zero entries do not dominate
    scale = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()))
    diff = float(np.abs(analytic - numeric).max())
    return diff / scale if scale > 0.0 else diff


def gradcheck(
    spec: BlockSpec,
    eps: float = 1e-5,
    tol: float = 1e-6,
    seed: int = 0,
    size: int = 6,
    batch: int = 2,
    max_params: int = 10_000,
) -> GradcheckReport:
    """Compare analytic gradients of ``sum(forward(x) ** 2)`` with central differences.

    Checks every parameter tensor and the input.  The input is drawn uniformly
    from [-1, 1] and shifted by 0.01 to keep ReLU kinks away from zero.
    """
    if not eps > 0.0:
        raise ValueError(f"eps must be > 0, got {eps}")
    prng = Prng(seed)
    block = build(spec, prng)
    if block.n_params > max_params:
        raise ValueError(f"{spec.kind} has {block.n_params} parameters; gradcheck budget is {max_params}")
    x = 2.0 * prng.uniform_array(batch * spec.c_in * size * size).reshape(batch, spec.c_in, size, size) - 1.0 + 0.01

    def loss(b: Block, inp: np.ndarray) -> float:
        out = b.forward(inp)
        return float(np.sum(out * out))

    out = block.forward(x)
    grad_x, grads = block.backward(x, 2.0 * out)

    errors = {}
    for name, value in block.params.items():
        numeric = np.empty(value.shape)
        flat = numeric.reshape(-1)
        for idx in range(value.size):
            params = dict(block.params)
            bumped = value.copy().reshape(-1)
            orig = bumped[idx]
            bumped[idx] = orig + eps
            params[name] = bumped.reshape(value.shape)
            f_plus = loss(block.with_params(params), x)
            bumped[idx] = orig - eps
            f_minus = loss(block.with_params(params), x)
            flat[idx] = (f_plus - f_minus) / (2.0 * eps)
        errors[name] = _relative_error(grads[name], numeric)

    numeric_x = np.empty(x.shape)
    flat_x = numeric_x.reshape(-1)
    for idx in range(x.size):
        bumped = x.copy().reshape(-1)
        bumped[idx] += eps
        f_plus = loss(block, bumped.reshape(x.shape))
        bumped[idx] -= 2.0 * eps
        f_minus = loss(block, bumped.reshape(x.shape))
        flat_x[idx] = (f_plus - f_minus) / (2.0 * eps)
    errors["input"] = _relative_error(grad_x, numeric_x)
    return GradcheckReport(spec.kind, errors, tol, eps, seed)
