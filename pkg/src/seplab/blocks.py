"""Executable block formulations and the weight maps between them.

Every block is a small fixed graph over the kernels in :mod:`seplab.conv`.
Blocks own an ordered ``params`` dict of 4-D float64 arrays; ``forward`` and
``backward`` are pure functions of ``(block, x)``.  The ``*_cached`` variants
let a caller run forward once and reuse its intermediates for backward, which
is what the training loop does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .conv import ConvParams, conv2d_backward_from_cache, conv2d_with_cache
from .tensor import Prng, random_normal
from .validation import check_tensor4

__all__ = [
    "BlockKind",
    "BlockSpec",
    "Block",
    "build",
    "map_weights",
    "copy_weights",
    "parse_kind",
    "param_shapes",
    "standard_conv_param_count",
    "MAPPABLE_PAIRS",
]


class BlockKind(str, Enum):
    SEPARABLE = "Separable"
    SEPARABLE_INTERMEDIATE_RELU = "SeparableIntermediateRelu"
    SEP_REFORMULATION = "SepReformulation"
    INCEPTION = "Inception"
    REFORMULATED_INCEPTION = "ReformulatedInception"
    RESNEXT = "ResNeXt"
    RESNEXT_GROUPED = "ResNeXtGrouped"
    HYBRID = "HybridInterpretation"

    def __str__(self) -> str:
        return self.value

    @property
    def slug(self) -> str:
        return _SLUGS[self]


_SLUGS = {
    BlockKind.SEPARABLE: "separable",
    BlockKind.SEPARABLE_INTERMEDIATE_RELU: "relu-variant",
    BlockKind.SEP_REFORMULATION: "sep-reformulation",
    BlockKind.INCEPTION: "inception",
    BlockKind.REFORMULATED_INCEPTION: "reformulated-inception",
    BlockKind.RESNEXT: "resnext",
    BlockKind.RESNEXT_GROUPED: "resnext-grouped",
    BlockKind.HYBRID: "hybrid",
}


def parse_kind(name) -> BlockKind:
    """Accept a ``BlockKind``, its value (``"ResNeXt"``) or its slug (``"resnext"``)."""
    if isinstance(name, BlockKind):
        return name
    text = str(name).strip()
    for kind in BlockKind:
        if text == kind.value or text.lower() == kind.slug or text.lower() == kind.value.lower():
            return kind
    valid = ", ".join(k.value for k in BlockKind)
    raise ValueError(f"unknown block kind {name!r}; expected one of {valid}")


@dataclass(frozen=True)
class BlockSpec:
    kind: BlockKind
    c_in: int
    c_out: int
    kernel: int = 3
    stride: int = 1
    cardinality: int | None = None
    towers: int = 4
    residual: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", parse_kind(self.kind))
        if self.cardinality is None:
            object.__setattr__(self, "cardinality", self.c_in)
        if self.c_in < 1 or self.c_out < 1:
            raise ValueError(f"channel counts must be positive, got c_in={self.c_in}, c_out={self.c_out}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be a positive odd integer, got {self.kernel}")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.cardinality < 1 or self.towers < 1:
            raise ValueError("cardinality and towers must be positive")
        kind = self.kind
        if kind in (BlockKind.RESNEXT, BlockKind.RESNEXT_GROUPED):
            if self.c_in % self.cardinality or self.c_out % self.cardinality:
                raise ValueError(
                    f"cardinality={self.cardinality} must divide c_in={self.c_in} and c_out={self.c_out}"
                )
        if kind is BlockKind.HYBRID and self.cardinality != self.c_in:
            raise ValueError(f"HybridInterpretation needs cardinality == c_in, got {self.cardinality}")
        if kind in (BlockKind.INCEPTION, BlockKind.REFORMULATED_INCEPTION) and self.c_out % self.towers:
            raise ValueError(f"towers={self.towers} must divide c_out={self.c_out}")
        if self.residual and (self.c_in != self.c_out or self.stride != 1):
            raise ValueError("residual blocks need c_in == c_out and stride == 1")

    @property
    def padding(self) -> int:
        return self.kernel // 2


def param_shapes(spec: BlockSpec) -> dict[str, tuple[tuple[int, int, int, int], int]]:
    """Ordered ``name -> (shape, fan_in)`` for every parameter of ``spec``."""
    k, ci, co = spec.kernel, spec.c_in, spec.c_out
    kind = spec.kind
    if kind in (BlockKind.SEPARABLE, BlockKind.SEPARABLE_INTERMEDIATE_RELU):
        return {"depthwise": ((ci, 1, k, k), k * k), "pointwise": ((co, ci, 1, 1), ci)}
    if kind is BlockKind.SEP_REFORMULATION:
        return {"grouped": ((ci, 1, k, k), k * k), "pointwise": ((co, ci, 1, 1), ci)}
    if kind is BlockKind.HYBRID:
        shapes = {f"path{i}": ((1, 1, k, k), k * k) for i in range(ci)}
        shapes["merge"] = ((co, ci, 1, 1), ci)
        return shapes
    if kind is BlockKind.INCEPTION:
        width = co // spec.towers
        shapes = {}
        for t in range(spec.towers):
            shapes[f"tower{t}.reduce"] = ((width, ci, 1, 1), ci)
            shapes[f"tower{t}.conv"] = ((width, width, k, k), width * k * k)
        return shapes
    if kind is BlockKind.REFORMULATED_INCEPTION:
        width = co // spec.towers
        return {"reduce": ((co, ci, 1, 1), ci), "grouped": ((co, width, k, k), width * k * k)}
    card = spec.cardinality
    pin, pout = ci // card, co // card
    if kind is BlockKind.RESNEXT:
        shapes = {f"path{i}": ((pout, pin, k, k), pin * k * k) for i in range(card)}
    else:
        shapes = {"grouped": ((co, pin, k, k), pin * k * k)}
    shapes["projection"] = ((co, co, 1, 1), co)
    return shapes


def standard_conv_param_count(c_in: int, c_out: int, kernel: int = 3) -> int:
    return c_out * c_in * kernel * kernel


def _conv(x, w, stride=1, padding=0, groups=1):
    return conv2d_with_cache(x, ConvParams(w, stride=stride, padding=padding, groups=groups))


def _conv_back(cache, grad):
    gx, gw, _ = conv2d_backward_from_cache(cache, grad)
    return gx, gw


class Block:
    """One block formulation with concrete weights.

    Subclasses implement ``_body`` (forward, returning output and a cache) and
    ``_body_backward``.  The identity skip, when enabled, is added here.
    """

    kind: BlockKind

    def __init__(self, spec: BlockSpec, params: dict[str, np.ndarray]):
        expected = param_shapes(spec)
        if list(params) != list(expected):
            raise ValueError(f"{spec.kind}: expected parameters {list(expected)}, got {list(params)}")
        for name, (shape, _) in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{spec.kind}: parameter {name!r} has shape {params[name].shape}, expected {shape}")
        self.spec = spec
        self.params = {name: np.asarray(v, dtype=np.float64) for name, v in params.items()}

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.spec})"

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def with_params(self, params: dict[str, np.ndarray]) -> "Block":
        return type(self)(self.spec, params)

    def output_shape(self, input_shape) -> tuple[int, int, int, int]:
        n, _, h, w = input_shape
        s, k, p = self.spec.stride, self.spec.kernel, self.spec.padding
        return (n, self.spec.c_out, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def forward_cached(self, x: np.ndarray):
        if x.ndim != 4 or x.shape[1] != self.spec.c_in:
            raise ValueError(f"{self.spec.kind} expects (n, {self.spec.c_in}, h, w) input, got {x.shape}")
        out, cache = self._body(x)
        if self.spec.residual:
            out = out + x
        return out, cache

    def backward_cached(self, cache, grad_out: np.ndarray):
        grad_x, grads = self._body_backward(cache, grad_out)
        if self.spec.residual:
            grad_x = grad_x + grad_out
        return grad_x, {name: grads[name] for name in self.params}

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(check_tensor4(x))[0]

    def backward(self, x: np.ndarray, grad_out: np.ndarray):
        """Return ``(grad_x, {param_name: grad})`` for upstream gradient ``grad_out``."""
        out, cache = self.forward_cached(check_tensor4(x))
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape != out.shape:
            raise ValueError(f"grad_out shape {grad_out.shape} != output shape {out.shape}")
        return self.backward_cached(cache, grad_out)

    def _body(self, x):
        raise NotImplementedError

    def _body_backward(self, cache, grad_out):
        raise NotImplementedError


class SeparableBlock(Block):
    """Depthwise k x k followed by pointwise 1 x 1, optionally with an activation between them.

    ``intermediate`` is ``None`` for the plain block and ``"relu"`` for the
    intermediate-nonlinearity variant; ``"identity"`` turns the variant back
    into the plain computation and exists for ablation tests.
    """

    def __init__(self, spec, params, intermediate: str | None = None):
        super().__init__(spec, params)
        if intermediate is None and spec.kind is BlockKind.SEPARABLE_INTERMEDIATE_RELU:
            intermediate = "relu"
        if intermediate not in (None, "relu", "identity"):
            raise ValueError(f"unknown intermediate activation {intermediate!r}")
        self.intermediate = intermediate

    def with_params(self, params):
        return type(self)(self.spec, params, self.intermediate)

    def _names(self):
        return ("depthwise", "pointwise")

    def _body(self, x):
        spatial, mixing = self._names()
        s = self.spec
        h, c1 = _conv(x, self.params[spatial], s.stride, s.padding, groups=s.c_in)
        mask = None
        if self.intermediate == "relu":
            mask = h > 0
            h = np.maximum(h, 0.0)
        out, c2 = _conv(h, self.params[mixing])
        return out, (c1, mask, c2)

    def _body_backward(self, cache, grad_out):
        spatial, mixing = self._names()
        c1, mask, c2 = cache
        gh, gpw = _conv_back(c2, grad_out)
        if mask is not None:
            gh = gh * mask
        gx, gdw = _conv_back(c1, gh)
        return gx, {spatial: gdw, mixing: gpw}


class SepReformulationBlock(SeparableBlock):
    """Grouped conv with ``groups = c_in`` followed by an ungrouped 1 x 1 conv."""

    def __init__(self, spec, params, intermediate=None):
        super().__init__(spec, params, intermediate)

    def _names(self):
        return ("grouped", "pointwise")


class HybridBlock(Block):
    """``c_in`` single-channel paths, each a k x k conv, merged by scalar-weighted sums.

    Output channel ``j`` is ``sum_i merge[j, i] * path_i(x[:, i])``.  The paths
    are independent, so they are evaluated in one grouped call; the merge is
    accumulated chunk by chunk over path index (``MERGE_CHUNK`` paths at a time).
    """

    MERGE_CHUNK = 4

    def _path_weights(self):
        return np.concatenate([self.params[f"path{i}"] for i in range(self.spec.c_in)])

    def _body(self, x):
        s = self.spec
        paths, cache = _conv(x, self._path_weights(), s.stride, s.padding, groups=s.c_in)
        n, _, oh, ow = paths.shape
        stacked = np.ascontiguousarray(paths.transpose(1, 0, 2, 3)).reshape(s.c_in, -1)
        merge = self.params["merge"][:, :, 0, 0]
        out = np.zeros((s.c_out, stacked.shape[1]))
        for lo in range(0, s.c_in, self.MERGE_CHUNK):
            hi = min(lo + self.MERGE_CHUNK, s.c_in)
            out += merge[:, lo:hi] @ stacked[lo:hi]
        return out.reshape(s.c_out, n, oh, ow).transpose(1, 0, 2, 3), (stacked, cache)

    def _body_backward(self, cache, grad_out):
        stacked, conv_cache = cache
        s = self.spec
        merge = self.params["merge"][:, :, 0, 0]
        n, _, oh, ow = grad_out.shape
        g = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(s.c_out, -1)
        grad_paths = (merge.T @ g).reshape(s.c_in, n, oh, ow).transpose(1, 0, 2, 3)
        grad_x, gw = _conv_back(conv_cache, grad_paths)
        grads = {f"path{i}": gw[i : i + 1] for i in range(s.c_in)}
        grads["merge"] = (g @ stacked.T)[:, :, None, None]
        return grad_x, grads


class InceptionBlock(Block):
    """Homogeneous towers (1 x 1 reduce then k x k conv) concatenated along channels."""

    def _body(self, x):
        s = self.spec
        outs, caches = [], []
        for t in range(s.towers):
            r, c1 = _conv(x, self.params[f"tower{t}.reduce"])
            o, c2 = _conv(r, self.params[f"tower{t}.conv"], s.stride, s.padding)
            outs.append(o)
            caches.append((c1, c2))
        return np.concatenate(outs, axis=1), caches

    def _body_backward(self, cache, grad_out):
        s = self.spec
        width = s.c_out // s.towers
        grad_x = None
        grads = {}
        for t, (c1, c2) in enumerate(cache):
            gr, grads[f"tower{t}.conv"] = _conv_back(c2, grad_out[:, t * width : (t + 1) * width])
            gx, grads[f"tower{t}.reduce"] = _conv_back(c1, gr)
            grad_x = gx if grad_x is None else grad_x + gx
        return grad_x, grads


class ReformulatedInceptionBlock(Block):
    """One shared 1 x 1 conv to ``c_out`` channels, then a k x k conv with ``groups = towers``."""

    def _body(self, x):
        s = self.spec
        r, c1 = _conv(x, self.params["reduce"])
        out, c2 = _conv(r, self.params["grouped"], s.stride, s.padding, groups=s.towers)
        return out, (c1, c2)

    def _body_backward(self, cache, grad_out):
        c1, c2 = cache
        gr, g_grouped = _conv_back(c2, grad_out)
        gx, g_reduce = _conv_back(c1, gr)
        return gx, {"reduce": g_reduce, "grouped": g_grouped}


class ResNeXtBlock(Block):
    """Split into ``cardinality`` channel slabs, k x k conv per slab, concatenate, 1 x 1 project."""

    def _body(self, x):
        s = self.spec
        pin = s.c_in // s.cardinality
        outs, caches = [], []
        for i in range(s.cardinality):
            o, c = _conv(x[:, i * pin : (i + 1) * pin], self.params[f"path{i}"], s.stride, s.padding)
            outs.append(o)
            caches.append(c)
        out, cp = _conv(np.concatenate(outs, axis=1), self.params["projection"])
        return out, (caches, cp)

    def _body_backward(self, cache, grad_out):
        caches, cp = cache
        s = self.spec
        pout = s.c_out // s.cardinality
        gcat, g_proj = _conv_back(cp, grad_out)
        grads = {}
        parts = []
        for i, c in enumerate(caches):
            gx_i, grads[f"path{i}"] = _conv_back(c, gcat[:, i * pout : (i + 1) * pout])
            parts.append(gx_i)
        grads["projection"] = g_proj
        return np.concatenate(parts, axis=1), grads


class ResNeXtGroupedBlock(Block):
    """The single grouped-conv form of :class:`ResNeXtBlock` (``groups = cardinality``)."""

    def _body(self, x):
        s = self.spec
        g, c1 = _conv(x, self.params["grouped"], s.stride, s.padding, groups=s.cardinality)
        out, c2 = _conv(g, self.params["projection"])
        return out, (c1, c2)

    def _body_backward(self, cache, grad_out):
        c1, c2 = cache
        gg, g_proj = _conv_back(c2, grad_out)
        gx, g_grouped = _conv_back(c1, gg)
        return gx, {"grouped": g_grouped, "projection": g_proj}


_CLASSES = {
    BlockKind.SEPARABLE: SeparableBlock,
    BlockKind.SEPARABLE_INTERMEDIATE_RELU: SeparableBlock,
    BlockKind.SEP_REFORMULATION: SepReformulationBlock,
    BlockKind.INCEPTION: InceptionBlock,
    BlockKind.REFORMULATED_INCEPTION: ReformulatedInceptionBlock,
    BlockKind.RESNEXT: ResNeXtBlock,
    BlockKind.RESNEXT_GROUPED: ResNeXtGroupedBlock,
    BlockKind.HYBRID: HybridBlock,
}


def make_block(spec: BlockSpec, params: dict[str, np.ndarray], **kwargs) -> Block:
    return _CLASSES[spec.kind](spec, params, **kwargs)


def build(spec: BlockSpec, prng: Prng, init_scale: float = 1.0, **kwargs) -> Block:
    """Create a block with He-normal weights, drawn from ``prng`` in parameter order.

    ``init_scale`` multiplies every standard deviation (0 gives an all-zero block).
    """
    params = {}
    for name, (shape, fan_in) in param_shapes(spec).items():
        params[name] = random_normal(prng, shape, 0.0, init_scale * math.sqrt(2.0 / fan_in))
    return make_block(spec, params, **kwargs)


def _split_hybrid(spec, params):
    return {"depthwise": np.concatenate([params[f"path{i}"] for i in range(spec.c_in)], axis=0),
            "pointwise": params["merge"]}


_K = BlockKind
MAPPABLE_PAIRS = {
    (_K.SEPARABLE, _K.SEP_REFORMULATION): lambda s, p: {"grouped": p["depthwise"], "pointwise": p["pointwise"]},
    (_K.SEP_REFORMULATION, _K.SEPARABLE): lambda s, p: {"depthwise": p["grouped"], "pointwise": p["pointwise"]},
    (_K.SEPARABLE, _K.HYBRID): lambda s, p: {
        **{f"path{i}": p["depthwise"][i : i + 1] for i in range(s.c_in)},
        "merge": p["pointwise"],
    },
    (_K.HYBRID, _K.SEPARABLE): _split_hybrid,
    (_K.RESNEXT, _K.RESNEXT_GROUPED): lambda s, p: {
        "grouped": np.concatenate([p[f"path{i}"] for i in range(s.cardinality)], axis=0),
        "projection": p["projection"],
    },
    (_K.RESNEXT_GROUPED, _K.RESNEXT): lambda s, p: {
        **{
            f"path{i}": p["grouped"][i * (s.c_out // s.cardinality) : (i + 1) * (s.c_out // s.cardinality)]
            for i in range(s.cardinality)
        },
        "projection": p["projection"],
    },
}


def map_weights(src: Block, dst_kind) -> Block:
    """Re-express ``src`` as an equivalent block of ``dst_kind``.

    The returned block computes the same function as ``src``; only the order
    of floating-point sums may differ.
    """
    dst_kind = parse_kind(dst_kind)
    fn = MAPPABLE_PAIRS.get((src.spec.kind, dst_kind))
    if fn is None:
        raise ValueError(f"no weight mapping from {src.spec.kind} to {dst_kind}")
    params = {name: np.array(v, copy=True) for name, v in fn(src.spec, src.params).items()}
    dst_spec = replace(src.spec, kind=dst_kind)
    return make_block(dst_spec, params)


def copy_weights(src: Block, dst_kind, **kwargs) -> Block:
    """Copy weights verbatim between kinds with identical parameter layouts.

    Unlike :func:`map_weights` this makes no equivalence promise; it is how
    the plain and intermediate-ReLU separable blocks are paired.
    """
    dst_kind = parse_kind(dst_kind)
    dst_spec = replace(src.spec, kind=dst_kind)
    src_shapes = [shape for shape, _ in param_shapes(src.spec).values()]
    dst_names = list(param_shapes(dst_spec))
    dst_shapes = [shape for shape, _ in param_shapes(dst_spec).values()]
    if src_shapes != dst_shapes:
        raise ValueError(f"{src.spec.kind} and {dst_kind} do not share a parameter layout")
    values = [np.array(v, copy=True) for v in src.params.values()]
    return make_block(dst_spec, dict(zip(dst_names, values)), **kwargs)
