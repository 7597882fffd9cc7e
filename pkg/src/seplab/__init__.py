"""Separable, grouped and multi-path convolution blocks in numpy, with equivalence checks and a trial harness."""

from .blocks import BlockKind, BlockSpec, build, make_block, map_weights, parse_kind
from .conv import ConvParams, conv2d, conv2d_backward, conv2d_reference, depthwise_conv2d, pointwise_conv2d
from .data import Dataset, load_cifar10, sample_split, synthetic_dataset
from .equivalence import gradcheck, sweep_equivalence, sweep_pair
from .experiment import ExperimentConfig, ablate_nonlinearity, parse_config, run_protocol
from .network import Network, NetworkSpec, SeparableNetClassifier, build_network, evaluate, train
from .tensor import Prng

__version__ = "0.1.0"

__all__ = [
    "BlockKind",
    "BlockSpec",
    "ConvParams",
    "Dataset",
    "ExperimentConfig",
    "Network",
    "NetworkSpec",
    "Prng",
    "SeparableNetClassifier",
    "ablate_nonlinearity",
    "build",
    "build_network",
    "conv2d",
    "conv2d_backward",
    "conv2d_reference",
    "depthwise_conv2d",
    "evaluate",
    "gradcheck",
    "load_cifar10",
    "make_block",
    "map_weights",
    "parse_config",
    "parse_kind",
    "pointwise_conv2d",
    "run_protocol",
    "sample_split",
    "sweep_equivalence",
    "sweep_pair",
    "synthetic_dataset",
    "train",
]
