"""Dense NCHW float64 tensors, a portable PRNG, and elementwise/reduction primitives.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 with exactly four
axes ``(n, c, h, w)``.  Every function here returns a fresh array; inputs are
never modified.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Prng",
    "derive_seed",
    "zeros",
    "random_normal",
    "elementwise",
    "reduce",
    "ELEMENTWISE_OPS",
    "REDUCE_KINDS",
]

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # uint64 array arithmetic wraps modulo 2**64, which is what SplitMix64 wants
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class Prng:
    """SplitMix64 generator.

    The stream is fixed: the state advances by the golden-ratio increment and
    each output is the mixed state.  Floats take the top 53 bits, so they lie
    in ``[0, 1)`` and are identical on every IEEE-754 platform.
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK64

    def __repr__(self) -> str:
        return f"Prng(state={self.state:#018x})"

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        return _mix64(self.state)

    def next_float(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def u64_array(self, count: int) -> np.ndarray:
        """Next ``count`` outputs as a uint64 array (same stream as ``next_u64``)."""
        steps = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(_GAMMA)
        self.state = (self.state + count * _GAMMA) & _MASK64
        return _mix64_array(states)

    def uniform_array(self, count: int) -> np.ndarray:
        bits = self.u64_array(count) >> np.uint64(11)
        return bits.astype(np.float64) * (1.0 / (1 << 53))

    def normal_array(self, count: int) -> np.ndarray:
        """Box-Muller normals; consumes two uniforms per pair of outputs.

        For odd ``count`` the second value of the final pair is discarded.
        """
        pairs = (count + 1) // 2
        u = self.uniform_array(2 * pairs)
        # 1 - u lies in (0, 1], keeping the log finite
        radius = np.sqrt(-2.0 * np.log(1.0 - u[0::2]))
        angle = 2.0 * math.pi * u[1::2]
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:count]


def derive_seed(seed: int, *tags: int) -> int:
    """Deterministically derive an independent child seed from ``seed`` and integer tags."""
    s = int(seed) & _MASK64
    for tag in tags:
        s = _mix64((s + (int(tag) + 1) * _GAMMA) & _MASK64)
    return s


def _check_dims(dims) -> tuple[int, int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4:
        raise ValueError(f"expected 4 extents (n, c, h, w), got {dims}")
    if any(d < 0 for d in dims):
        raise ValueError(f"extents must be non-negative, got {dims}")
    return dims


def zeros(n: int, c: int, h: int, w: int) -> np.ndarray:
    return np.zeros(_check_dims((n, c, h, w)), dtype=np.float64)


def random_normal(prng: Prng, dims, mean: float = 0.0, stddev: float = 1.0) -> np.ndarray:
    dims = _check_dims(dims)
    if not stddev >= 0.0:
        raise ValueError(f"stddev must be >= 0, got {stddev}")
    count = math.prod(dims)
    z = prng.normal_array(count)
    return (mean + stddev * z).reshape(dims)


ELEMENTWISE_OPS = ("add", "sub", "mul", "scale", "relu", "copy")


def elementwise(op: str, a: np.ndarray, b: np.ndarray | float | None = None) -> np.ndarray:
    """Apply a pointwise operation.

    ``add``, ``sub`` and ``mul`` take a second tensor of identical shape;
    ``scale`` takes a float; ``relu`` and ``copy`` are unary.
    """
    if op in ("add", "sub", "mul"):
        if not isinstance(b, np.ndarray) or a.shape != b.shape:
            other = getattr(b, "shape", type(b).__name__)
            raise ValueError(f"{op}: shape mismatch {a.shape} vs {other}")
        if op == "add":
            return a + b
        if op == "sub":
            return a - b
        return a * b
    if op == "scale":
        return a * float(b)
    if op == "relu":
        return np.maximum(a, 0.0)
    if op == "copy":
        return a.copy()
    raise ValueError(f"unknown elementwise op {op!r}; expected one of {ELEMENTWISE_OPS}")


REDUCE_KINDS = ("sum", "mean", "global_avg_pool", "argmax_over_channels")


def _sequential_sum(values: np.ndarray) -> float | np.ndarray:
    # cumsum accumulates strictly left to right, unlike np.sum's pairwise scheme
    if values.shape[-1] == 0:
        return np.zeros(values.shape[:-1]) if values.ndim > 1 else 0.0
    acc = np.cumsum(values, axis=-1)[..., -1]
    return float(acc) if np.ndim(acc) == 0 else acc


def reduce(kind: str, x: np.ndarray):
    """Reduce a tensor.

    ``sum``/``mean`` return floats, ``global_avg_pool`` returns ``(n, c, 1, 1)``
    and ``argmax_over_channels`` returns ``(n, 1, h, w)`` channel indices as
    floats.  Sums run in flat index order so repeated calls are bit-stable.
    """
    if kind == "sum":
        return _sequential_sum(x.reshape(-1))
    if kind in ("mean", "argmax_over_channels") and x.size == 0:
        raise ValueError(f"{kind} of an empty tensor")
    if kind == "mean":
        return _sequential_sum(x.reshape(-1)) / x.size
    if kind == "global_avg_pool":
        n, c, h, w = x.shape
        if h * w == 0:
            raise ValueError("global_avg_pool needs a non-empty spatial extent")
        pooled = _sequential_sum(x.reshape(n, c, h * w)) / (h * w)
        return np.asarray(pooled, dtype=np.float64).reshape(n, c, 1, 1)
    if kind == "argmax_over_channels":
        return np.argmax(x, axis=1)[:, None].astype(np.float64)
    raise ValueError(f"unknown reduction {kind!r}; expected one of {REDUCE_KINDS}")
