"""Stacked-block classifiers, their SGD training loop, and a scikit-learn style estimator.

Network layout (shared by every setup of an experiment)::

    stem 3x3 conv -> ReLU
    stage 0: depth_per_stage blocks at base_width,    each followed by ReLU
    1x1 stride-2 conv -> ReLU
    stage 1: depth_per_stage blocks at 2 * base_width, each followed by ReLU
    1x1 stride-2 conv -> ReLU
    stage 2: depth_per_stage blocks at 4 * base_width, each followed by ReLU
    global average pool -> linear layer to 10 logits

Only the block kind varies between setups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .blocks import (
    MAPPABLE_PAIRS,
    BlockKind,
    BlockSpec,
    build,
    copy_weights,
    make_block,
    map_weights,
    param_shapes,
    parse_kind,
)
from .conv import ConvParams, conv2d_backward_from_cache, conv2d_with_cache
from .data import shuffled_indices
from .tensor import Prng, derive_seed, random_normal
from .validation import check_positive, check_tensor4, check_X_y

__all__ = [
    "NetworkSpec",
    "Network",
    "TrainingDiverged",
    "build_network",
    "transfer_init",
    "softmax_cross_entropy",
    "train",
    "evaluate",
    "SeparableNetClassifier",
]

N_STAGES = 3
RESNEXT_NETWORK_CARDINALITY = 4


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class NetworkSpec:
    kind: BlockKind = BlockKind.SEPARABLE
    base_width: int = 16
    depth_per_stage: int = 1
    kernel: int = 3
    cardinality: int | None = None
    towers: int = 4
    residual: bool = False
    in_channels: int = 3
    n_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "kind", parse_kind(self.kind))
        check_positive(self.base_width, "base_width")
        check_positive(self.depth_per_stage, "depth_per_stage")

    def widths(self) -> list[int]:
        return [self.base_width * 2**s for s in range(N_STAGES)]

    def block_spec(self, width: int) -> BlockSpec:
        cardinality = self.cardinality
        if self.kind in (BlockKind.RESNEXT, BlockKind.RESNEXT_GROUPED) and cardinality is None:
            # cardinality == width would make every path a single-channel depthwise conv
            cardinality = math.gcd(width, RESNEXT_NETWORK_CARDINALITY)
        if self.kind is BlockKind.HYBRID:
            cardinality = width
        return BlockSpec(
            self.kind,
            width,
            width,
            kernel=self.kernel,
            cardinality=cardinality,
            towers=self.towers,
            residual=self.residual,
        )

    def layout(self) -> list[tuple[str, str, object]]:
        """Ordered ``(name, layer_type, config)`` triples."""
        layers: list[tuple[str, str, object]] = [("stem", "conv", (self.base_width, self.in_channels, 3, 1, 1))]
        prev = self.base_width
        for s, width in enumerate(self.widths()):
            if s > 0:
                layers.append((f"down{s}", "conv", (width, prev, 1, 2, 0)))
            for d in range(self.depth_per_stage):
                layers.append((f"stage{s}.block{d}", "block", self.block_spec(width)))
            prev = width
        layers.append(("head", "linear", (self.n_classes, prev)))
        return layers

    def param_shapes(self) -> dict[str, tuple[tuple[int, ...], int]]:
        shapes = {}
        for name, kind, cfg in self.layout():
            if kind == "conv":
                c_out, c_in, k, _, _ = cfg
                shapes[f"{name}.weight"] = ((c_out, c_in, k, k), c_in * k * k)
            elif kind == "block":
                for pname, value in param_shapes(cfg).items():
                    shapes[f"{name}.{pname}"] = value
            else:
                n_out, n_in = cfg
                shapes[f"{name}.weight"] = ((n_out, n_in, 1, 1), n_in)
                shapes[f"{name}.bias"] = ((1, n_out, 1, 1), 0)
        return shapes


class Network:
    """A classifier built from a :class:`NetworkSpec` and a flat parameter dict.

    Parameters are stored under dotted names (``stage1.block0.pointwise``).
    Block objects are views over these arrays, so in-place updates by the
    optimizer are seen by the next forward pass.
    """

    def __init__(self, spec: NetworkSpec, params: dict[str, np.ndarray], intermediate: str | None = None):
        expected = spec.param_shapes()
        if list(params) != list(expected):
            raise ValueError("parameter names do not match the network layout")
        for name, (shape, _) in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.spec = spec
        self.params = params
        self.intermediate = intermediate
        self._layout = spec.layout()
        self._blocks = {}
        for name, kind, cfg in self._layout:
            if kind == "block":
                sub = {p: params[f"{name}.{p}"] for p in param_shapes(cfg)}
                extra = {"intermediate": intermediate} if cfg.kind in _SEPARABLE_KINDS else {}
                self._blocks[name] = make_block(cfg, sub, **extra)

    def __repr__(self) -> str:
        return f"Network({self.spec.kind.value}, params={self.n_params})"

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self) -> "Network":
        return Network(self.spec, {k: v.copy() for k, v in self.params.items()}, self.intermediate)

    def block(self, name: str):
        return self._blocks[name]

    def forward_cached(self, x: np.ndarray):
        caches = []
        h = x
        for name, kind, cfg in self._layout:
            if kind == "conv":
                _, _, k, stride, pad = cfg
                h, c = conv2d_with_cache(h, ConvParams(self.params[f"{name}.weight"], stride=stride, padding=pad))
            elif kind == "block":
                h, c = self._blocks[name].forward_cached(h)
            else:
                pooled = h.mean(axis=(2, 3))
                w = self.params[f"{name}.weight"][:, :, 0, 0]
                logits = pooled @ w.T + self.params[f"{name}.bias"][0, :, 0, 0]
                caches.append((name, kind, (pooled, h.shape)))
                return logits, caches
            mask = h > 0
            h = np.maximum(h, 0.0)
            caches.append((name, kind, (c, mask)))
        raise AssertionError("layout has no head")

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    def backward_cached(self, caches, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        name, _, (pooled, shape) = caches[-1]
        w = self.params[f"{name}.weight"][:, :, 0, 0]
        grads[f"{name}.weight"] = (grad_logits.T @ pooled)[:, :, None, None]
        grads[f"{name}.bias"] = grad_logits.sum(axis=0)[None, :, None, None]
        n, c, h, w_ = shape
        g = np.broadcast_to((grad_logits @ w)[:, :, None, None] / (h * w_), shape)
        for name, kind, (cache, mask) in reversed(caches[:-1]):
            g = g * mask
            if kind == "conv":
                g, gw, _ = conv2d_backward_from_cache(cache, g, input_grad=name != "stem")
                grads[f"{name}.weight"] = gw
            else:
                g, block_grads = self._blocks[name].backward_cached(cache, g)
                for pname, value in block_grads.items():
                    grads[f"{name}.{pname}"] = value
        return {k: grads[k] for k in self.params}


_SEPARABLE_KINDS = (BlockKind.SEPARABLE, BlockKind.SEPARABLE_INTERMEDIATE_RELU, BlockKind.SEP_REFORMULATION)


def build_network(spec: NetworkSpec, prng: Prng, intermediate: str | None = None) -> Network:
    """He-normal initialisation in layout order; the head bias starts at zero."""
    params: dict[str, np.ndarray] = {}
    for name, kind, cfg in spec.layout():
        if kind == "conv":
            c_out, c_in, k, _, _ = cfg
            params[f"{name}.weight"] = random_normal(prng, (c_out, c_in, k, k), 0.0, math.sqrt(2.0 / (c_in * k * k)))
        elif kind == "block":
            for pname, value in build(cfg, prng).params.items():
                params[f"{name}.{pname}"] = value
        else:
            n_out, n_in = cfg
            params[f"{name}.weight"] = random_normal(prng, (n_out, n_in, 1, 1), 0.0, math.sqrt(2.0 / n_in))
            params[f"{name}.bias"] = np.zeros((1, n_out, 1, 1))
    return Network(spec, params, intermediate)


def transfer_init(src: Network, dst: Network, intermediate: str | None = None) -> Network:
    """Give ``dst`` the weights of ``src`` wherever they can be carried over exactly.

    Stem, downsample and head weights are always copied.  Each block is
    weight-mapped when a mapping exists, copied verbatim between the plain
    and intermediate-ReLU separable kinds, and otherwise keeps ``dst``'s own
    weights.
    """
    params = {k: v.copy() for k, v in dst.params.items()}
    for name, kind, cfg in dst.spec.layout():
        if kind == "block":
            src_block = src.block(name)
            dst_kind = cfg.kind
            carried = None
            if src_block.spec.kind is dst_kind:
                carried = src_block.params
            elif (src_block.spec.kind, dst_kind) in MAPPABLE_PAIRS:
                carried = map_weights(src_block, dst_kind).params
            elif src_block.spec.kind in _SEPARABLE_KINDS and dst_kind in _SEPARABLE_KINDS:
                carried = copy_weights(src_block, dst_kind).params
            if carried is not None:
                for pname, value in carried.items():
                    params[f"{name}.{pname}"] = np.array(value, copy=True)
        else:
            for pname in [p for p in params if p.startswith(f"{name}.")]:
                params[pname] = src.params[pname].copy()
    return Network(dst.spec, params, intermediate if intermediate is not None else dst.intermediate)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    log_prob = shifted - np.log(total)
    loss = -float(log_prob[np.arange(n), labels].sum()) / n
    grad = exp / total
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def train(
    net: Network,
    X: np.ndarray,
    y: np.ndarray,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    momentum: float = 0.9,
    seed: int = 0,
) -> list[float]:
    """Mini-batch SGD with momentum, updating ``net`` in place.

    The batch order of epoch ``e`` is a Fisher-Yates shuffle seeded by
    ``derive_seed(seed, e)``.  Returns the mean training loss per epoch and
    raises :class:`TrainingDiverged` on a non-finite loss.
    """
    if len(y) == 0:
        raise ValueError("cannot train on an empty dataset")
    if not learning_rate >= 0.0:
        raise ValueError(f"learning_rate must be >= 0, got {learning_rate}")
    check_positive(batch_size, "batch_size")
    velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
    history = []
    n = len(y)
    for epoch in range(epochs):
        order = shuffled_indices(n, derive_seed(seed, epoch))
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            # overflow is caught below as a non-finite loss
            with np.errstate(over="ignore", invalid="ignore"):
                logits, caches = net.forward_cached(X[idx])
                loss, grad = softmax_cross_entropy(logits, y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
            grads = net.backward_cached(caches, grad)
            for k, p in net.params.items():
                v = velocity[k]
                v *= momentum
                v += grads[k]
                p -= learning_rate * v
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return history


def predict_logits(model, X: np.ndarray, chunk: int = 256) -> np.ndarray:
    forward = model.forward if isinstance(model, Network) else model.decision_function
    return np.concatenate([forward(X[i : i + chunk]) for i in range(0, len(X), chunk)])


def evaluate(model, X: np.ndarray, y: np.ndarray) -> float:
    """Test error in percent: ``100 * misclassified / n`` under argmax of the logits."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("evaluation set is empty")
    pred = np.argmax(predict_logits(model, X), axis=1)
    return 100.0 * int(np.count_nonzero(pred != y)) / len(y)


class SeparableNetClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier whose stages are built from one block formulation.

    Parameters
    ----------
    block_kind : str
        Any :class:`~seplab.blocks.BlockKind` value or slug.
    base_width, depth_per_stage, kernel, cardinality, towers, residual
        Architecture; see :class:`NetworkSpec`.
    epochs, batch_size, learning_rate, momentum
        SGD settings.
    random_state : int
        Seeds the batch order.  Initial weights come from ``init_seed`` if
        given, else from a seed derived from ``random_state``.
    intermediate : {None, "relu", "identity"}
        Overrides the activation inside separable blocks (ablation hook).

    Attributes
    ----------
    network_ : Network
    loss_curve_ : list of float
    classes_ : ndarray of shape (10,)
    """

    def __init__(
        self,
        block_kind="Separable",
        base_width=16,
        depth_per_stage=1,
        kernel=3,
        cardinality=None,
        towers=4,
        residual=False,
        epochs=15,
        batch_size=64,
        learning_rate=0.01,
        momentum=0.9,
        random_state=0,
        init_seed=None,
        intermediate=None,
    ):
        self.block_kind = block_kind
        self.base_width = base_width
        self.depth_per_stage = depth_per_stage
        self.kernel = kernel
        self.cardinality = cardinality
        self.towers = towers
        self.residual = residual
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.random_state = random_state
        self.init_seed = init_seed
        self.intermediate = intermediate

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(
            kind=self.block_kind,
            base_width=self.base_width,
            depth_per_stage=self.depth_per_stage,
            kernel=self.kernel,
            cardinality=self.cardinality,
            towers=self.towers,
            residual=self.residual,
        )

    def init_network(self) -> Network:
        seed = self.init_seed if self.init_seed is not None else derive_seed(self.random_state, 0)
        return build_network(self.network_spec(), Prng(seed), self.intermediate)

    def fit(self, X, y, init_network: Network | None = None):
        """Train from scratch, or from a copy of ``init_network`` when given."""
        X, y = check_X_y(X, y)
        check_positive(self.learning_rate, "learning_rate", allow_zero=True)
        if init_network is None:
            net = self.init_network()
        else:
            if init_network.spec != self.network_spec():
                raise ValueError("init_network does not match this estimator's architecture")
            net = init_network.copy()
            net = Network(net.spec, net.params, self.intermediate)
        self.loss_curve_ = train(
            net,
            X,
            y,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            seed=self.random_state,
        )
        self.network_ = net
        self.classes_ = np.arange(net.spec.n_classes)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = check_tensor4(X, "X")
        if X.shape[1] != self.network_.spec.in_channels:
            raise ValueError(f"expected {self.network_.spec.in_channels} input channels, got {X.shape[1]}")
        return predict_logits(self.network_, X)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        exp = np.exp(logits - logits.max(axis=1, keepdims=True))
        return exp / exp.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def test_error_pct(self, X, y) -> float:
        return evaluate(self, X, y)
