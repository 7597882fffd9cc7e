"""Multi-trial comparison of block formulations against a baseline, plus the ReLU ablation.

Seeding (all derived from ``seed_base``; trial ``t`` uses ``trial_seed = seed_base + t``):

* synthetic data: ``derive_seed(seed_base, DATA_TAG)``
* train/eval split: ``derive_seed(trial_seed, SPLIT_TAG)``
* batch order: ``derive_seed(trial_seed, ORDER_TAG)``
* initial weights of a setup: ``derive_seed(trial_seed, INIT_TAG, kind index)``

Two setups of the same kind therefore start from identical weights, and every
setup of one trial shares its split and batch order.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .blocks import BlockKind, parse_kind
from .data import Dataset, load_cifar10, sample_split, synthetic_dataset
from .network import (
    Network,
    NetworkSpec,
    TrainingDiverged,
    build_network,
    evaluate,
    train,
    transfer_init,
)
from .tensor import Prng, derive_seed

MASK64 = (1 << 64) - 1

DATA_TAG, SPLIT_TAG, ORDER_TAG, INIT_TAG = 1, 2, 3, 4

RESULTS_HEADER = ["setup", "trial", "seed", "test_error_pct"]
SUMMARY_HEADER = ["setup", "mean_abs_diff_pct", "std_abs_diff_pct", "trials_used", "diverged"]
PROVENANCE_HEADER = ["rank", "seed_base", "config_sha256"]

DEFAULT_SETUPS = (
    BlockKind.SEPARABLE,
    BlockKind.INCEPTION,
    BlockKind.RESNEXT,
    BlockKind.REFORMULATED_INCEPTION,
    BlockKind.SEP_REFORMULATION,
    BlockKind.HYBRID,
)
DEFAULT_DATASET = "synthetic:noise=1.0,h=16,w=16"


class ConfigError(ValueError):
    """Malformed or invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    setups: tuple = DEFAULT_SETUPS
    trials: int = 10
    epochs: int = 15
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed_base: int = 0
    dataset: str = DEFAULT_DATASET
    n_train: int = 2000
    n_eval: int = 1000
    deterministic: bool = False
    shared_init: bool = False
    base_width: int = 16
    depth_per_stage: int = 1

    def __post_init__(self):
        try:
            kinds = tuple(parse_kind(k) for k in self.setups)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        object.__setattr__(self, "setups", kinds)
        if not kinds:
            raise ConfigError("setups must name at least the baseline")
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("batch_size", "n_train", "n_eval", "base_width", "depth_per_stage"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0 <= self.seed_base <= MASK64:
            raise ConfigError("seed_base must be a u64")
        _parse_dataset(self.dataset)

    @property
    def baseline(self) -> BlockKind:
        return self.setups[0]

    def setup_labels(self) -> list[str]:
        """Unique row labels; repeated kinds get a ``#k`` suffix."""
        labels, seen = [], {}
        for kind in self.setups:
            seen[kind] = seen.get(kind, 0) + 1
            labels.append(kind.value if seen[kind] == 1 else f"{kind.value}#{seen[kind]}")
        return labels

    def network_spec(self, kind) -> NetworkSpec:
        return NetworkSpec(kind=kind, base_width=self.base_width, depth_per_stage=self.depth_per_stage)

    def trial_seed(self, t: int) -> int:
        return (self.seed_base + t) & MASK64


# -- config file --------------------------------------------------------------

_BOOL = {"true": True, "yes": True, "1": True, "on": True, "false": False, "no": False, "0": False, "off": False}


def _convert(name: str, raw: str):
    kind = {f.name: f.type for f in fields(ExperimentConfig)}[name]
    try:
        if name == "setups":
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        if kind == "bool":
            return _BOOL[raw.lower()]
        if kind == "int":
            return int(raw, 0)
        if kind == "float":
            return float(raw)
        return raw
    except (KeyError, ValueError):
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    known = {f.name for f in fields(ExperimentConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw)
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def config_text(cfg: ExperimentConfig) -> str:
    """Canonical config file text; ``parse_config(config_text(c)) == c``."""
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name == "setups":
            value = ", ".join(k.value for k in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(config_text(cfg).encode("utf-8")).hexdigest()


# -- data ---------------------------------------------------------------------


def _parse_dataset(spec: str) -> tuple[str, dict | list]:
    source, _, rest = spec.partition(":")
    source = source.strip().lower()
    if source == "synthetic":
        opts = {"noise": 1.0, "h": 16, "w": 16}
        for item in filter(None, (s.strip() for s in rest.split(","))):
            key, sep, val = item.partition("=")
            if not sep or key.strip() not in opts:
                raise ConfigError(f"bad synthetic dataset option {item!r}")
            try:
                opts[key.strip()] = type(opts[key.strip()])(val.strip())
            except ValueError:
                raise ConfigError(f"bad synthetic dataset option {item!r}") from None
        return source, opts
    if source == "cifar10":
        paths = [p.strip() for p in rest.split(",") if p.strip()]
        if not paths:
            raise ConfigError("cifar10 dataset needs at least one file path")
        return source, paths
    raise ConfigError(f"dataset must start with 'synthetic' or 'cifar10:', got {spec!r}")


@dataclass(frozen=True)
class DataSource:
    """Pools from which each trial draws its train and eval sets."""

    train_pool: Dataset
    eval_pool: Dataset | None  # None: split train_pool into disjoint parts
    description: str

    def split(self, n_train: int, n_eval: int, seed: int) -> tuple[Dataset, Dataset]:
        if self.eval_pool is None:
            return sample_split(self.train_pool, n_train, n_eval, seed)
        train_set, _ = sample_split(self.train_pool, n_train, 0, derive_seed(seed, 0))
        _, eval_set = sample_split(self.eval_pool, 0, n_eval, derive_seed(seed, 1))
        return train_set, eval_set


def load_dataset(cfg: ExperimentConfig) -> DataSource:
    source, opts = _parse_dataset(cfg.dataset)
    if source == "synthetic":
        n = cfg.n_train + cfg.n_eval
        seed = derive_seed(cfg.seed_base, DATA_TAG)
        d = synthetic_dataset(n, h=opts["h"], w=opts["w"], noise=opts["noise"], seed=seed)
        return DataSource(d, None, f"{d.name}; train/eval split from one pool")
    test_files = [p for p in opts if "test_batch" in Path(p).name]
    train_files = [p for p in opts if p not in test_files]
    if test_files and train_files:
        return DataSource(
            load_cifar10(train_files),
            load_cifar10(test_files),
            f"cifar10; train from {','.join(train_files)}; eval from test set {','.join(test_files)}",
        )
    d = load_cifar10(opts)
    return DataSource(d, None, f"{d.name}; train/eval split from one pool")


# -- trials -------------------------------------------------------------------


@dataclass(frozen=True)
class TrialResult:
    setup: str
    trial: int
    seed: int
    test_error_pct: float  # nan when training diverged

    @property
    def diverged(self) -> bool:
        return math.isnan(self.test_error_pct)


def _kind_index(kind: BlockKind) -> int:
    return list(BlockKind).index(kind)


def _init_network(cfg: ExperimentConfig, kind: BlockKind, trial_seed: int, intermediate=None) -> Network:
    spec = cfg.network_spec(kind)
    net = build_network(spec, Prng(derive_seed(trial_seed, INIT_TAG, _kind_index(kind))), intermediate)
    if cfg.shared_init and kind is not cfg.baseline:
        base = build_network(
            cfg.network_spec(cfg.baseline),
            Prng(derive_seed(trial_seed, INIT_TAG, _kind_index(cfg.baseline))),
        )
        net = transfer_init(base, net, intermediate)
    return net


def _limits(cfg: ExperimentConfig):
    # a single BLAS thread fixes the floating-point reduction order
    return threadpool_limits(1) if cfg.deterministic else nullcontext()


def train_and_evaluate(cfg: ExperimentConfig, net: Network, source: DataSource, trial: int) -> float:
    seed = cfg.trial_seed(trial)
    train_set, eval_set = source.split(cfg.n_train, cfg.n_eval, derive_seed(seed, SPLIT_TAG))
    try:
        train(
            net,
            train_set.images,
            train_set.labels,
            cfg.epochs,
            cfg.batch_size,
            cfg.learning_rate,
            cfg.momentum,
            seed=derive_seed(seed, ORDER_TAG),
        )
    except TrainingDiverged:
        return math.nan
    error = evaluate(net, eval_set.images, eval_set.labels)
    return error if math.isfinite(error) else math.nan


def run_trial(cfg: ExperimentConfig, source: DataSource, setup: int, trial: int) -> TrialResult:
    kind = cfg.setups[setup]
    seed = cfg.trial_seed(trial)
    with _limits(cfg):
        net = _init_network(cfg, kind, seed)
        error = train_and_evaluate(cfg, net, source, trial)
    return TrialResult(cfg.setup_labels()[setup], trial, seed, error)


_WORKER_SOURCE: DataSource | None = None


def _worker_init(source: DataSource) -> None:
    global _WORKER_SOURCE
    _WORKER_SOURCE = source


def _worker_task(args) -> TrialResult:
    cfg, setup, trial = args
    return run_trial(cfg, _WORKER_SOURCE, setup, trial)


def _run_tasks(cfg, source, tasks, jobs, progress=None) -> list[TrialResult]:
    if jobs <= 1:
        out = []
        for setup, trial in tasks:
            out.append(run_trial(cfg, source, setup, trial))
            if progress:
                progress(out[-1])
        return out
    with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init, initargs=(source,)) as pool:
        out = []
        for result in pool.map(_worker_task, [(cfg, s, t) for s, t in tasks]):
            out.append(result)
            if progress:
                progress(result)
        return out


# -- protocol -----------------------------------------------------------------


@dataclass(frozen=True)
class SetupSummary:
    setup: str
    mean_abs_diff_pct: float
    std_abs_diff_pct: float
    trials_used: int
    diverged: int
    rank: int = 0  # 0 for the baseline, else 1 = smallest mean |delta|


@dataclass
class ProtocolResult:
    config: ExperimentConfig
    results: list[TrialResult]
    summary: list[SetupSummary]
    data_description: str = ""
    elapsed_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def row(self, setup: str) -> SetupSummary:
        for s in self.summary:
            if s.setup == setup:
                return s
        raise KeyError(setup)


def abs_diffs(setup_errors, baseline_errors) -> list[float]:
    """Per-trial ``|err - baseline|`` over trials where neither run diverged."""
    return [
        abs(e - b)
        for e, b in zip(setup_errors, baseline_errors)
        if not (math.isnan(e) or math.isnan(b))
    ]


def mean_and_std(values) -> tuple[float, float]:
    """Order-independent mean and population std (``fsum`` is exactly rounded)."""
    if not values:
        return math.nan, math.nan
    n = len(values)
    mean = math.fsum(values) / n
    return mean, math.sqrt(math.fsum((v - mean) ** 2 for v in values) / n)


def summarize(cfg: ExperimentConfig, results: list[TrialResult]) -> list[SetupSummary]:
    labels = cfg.setup_labels()
    errors = {label: [math.nan] * cfg.trials for label in labels}
    for r in results:
        errors[r.setup][r.trial] = r.test_error_pct
    base = errors[labels[0]]
    rows = []
    for label in labels:
        diffs = abs_diffs(errors[label], base)
        mean, std = mean_and_std(diffs)
        n_div = sum(math.isnan(e) for e in errors[label])
        rows.append(SetupSummary(label, mean, std, len(diffs), n_div))
    ranked = sorted(
        range(1, len(rows)),
        key=lambda i: (math.isnan(rows[i].mean_abs_diff_pct), rows[i].mean_abs_diff_pct, i),
    )
    for r, i in enumerate(ranked, 1):
        rows[i] = replace(rows[i], rank=r)
    return rows


def run_protocol(cfg: ExperimentConfig, jobs: int = 1, source: DataSource | None = None, progress=None) -> ProtocolResult:
    """Train every setup for every trial and summarize ``|delta test error|`` against the baseline."""
    start = time.perf_counter()
    source = source or load_dataset(cfg)
    tasks = [(s, t) for t in range(cfg.trials) for s in range(len(cfg.setups))]
    results = _run_tasks(cfg, source, tasks, jobs, progress)
    results.sort(key=lambda r: (r.trial, cfg.setup_labels().index(r.setup)))
    return ProtocolResult(cfg, results, summarize(cfg, results), source.description, time.perf_counter() - start)


# -- nonlinearity ablation ----------------------------------------------------


@dataclass(frozen=True)
class AblationPair:
    trial: int
    seed: int
    plain_error_pct: float
    relu_error_pct: float


@dataclass
class AblationResult:
    pairs: list[AblationPair]
    config: ExperimentConfig

    def _valid(self):
        return [p for p in self.pairs if not (math.isnan(p.plain_error_pct) or math.isnan(p.relu_error_pct))]

    @property
    def mean_plain(self) -> float:
        return mean_and_std([p.plain_error_pct for p in self._valid()])[0]

    @property
    def mean_relu(self) -> float:
        return mean_and_std([p.relu_error_pct for p in self._valid()])[0]

    @property
    def relu_not_better(self) -> int:
        """Pairs where the intermediate-ReLU variant's error is >= the plain variant's."""
        return sum(p.relu_error_pct >= p.plain_error_pct for p in self._valid())

    @property
    def mean_difference_sign(self) -> int:
        """Sign of ``mean_relu - mean_plain``."""
        d = self.mean_relu - self.mean_plain
        return 0 if d == 0 or math.isnan(d) else (1 if d > 0 else -1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "seed", "plain_error_pct", "relu_error_pct"])
        for p in self.pairs:
            w.writerow([p.trial, p.seed, repr(p.plain_error_pct), repr(p.relu_error_pct)])
        return buf.getvalue()


def _ablation_pair(cfg: ExperimentConfig, source: DataSource, trial: int, intermediate) -> AblationPair:
    seed = cfg.trial_seed(trial)
    with _limits(cfg):
        plain = build_network(
            cfg.network_spec(BlockKind.SEPARABLE),
            Prng(derive_seed(seed, INIT_TAG, _kind_index(BlockKind.SEPARABLE))),
            intermediate,
        )
        relu = transfer_init(plain, build_network(cfg.network_spec(BlockKind.SEPARABLE_INTERMEDIATE_RELU), Prng(0)), intermediate)
        errors = [train_and_evaluate(cfg, net, source, trial) for net in (plain, relu)]
    return AblationPair(trial, seed, *errors)


def ablate_nonlinearity(cfg: ExperimentConfig, source: DataSource | None = None, intermediate: str | None = None, progress=None) -> AblationResult:
    """Paired Separable vs SeparableIntermediateRelu trials from identical weights, split and batch order.

    ``intermediate`` overrides the activation inside both blocks; passing
    ``"identity"`` collapses the pair to one network (a test hook).
    """
    source = source or load_dataset(cfg)
    pairs = []
    for t in range(cfg.trials):
        pairs.append(_ablation_pair(cfg, source, t, intermediate))
        if progress:
            progress(pairs[-1])
    return AblationResult(pairs, cfg)


# -- output files -------------------------------------------------------------


def results_csv(results: list[TrialResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_HEADER)
    for r in results:
        w.writerow([r.setup, r.trial, r.seed, repr(float(r.test_error_pct))])
    return buf.getvalue()


def summary_csv(result: ProtocolResult) -> str:
    """Summary rows; each also carries its rank and provenance (seed_base, config hash)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER + PROVENANCE_HEADER)
    digest = config_hash(result.config)
    for s in result.summary:
        w.writerow(
            [
                s.setup,
                repr(float(s.mean_abs_diff_pct)),
                repr(float(s.std_abs_diff_pct)),
                s.trials_used,
                s.diverged,
                s.rank,
                result.config.seed_base,
                digest,
            ]
        )
    return buf.getvalue()


def manifest(result: ProtocolResult) -> dict:
    cfg = result.config
    labels = cfg.setup_labels()
    trials = []
    for t in range(cfg.trials):
        seed = cfg.trial_seed(t)
        trials.append(
            {
                "trial": t,
                "seed": seed,
                "split_seed": derive_seed(seed, SPLIT_TAG),
                "order_seed": derive_seed(seed, ORDER_TAG),
                "init_seeds": {
                    label: derive_seed(seed, INIT_TAG, _kind_index(kind)) for label, kind in zip(labels, cfg.setups)
                },
            }
        )
    return {
        "config": config_text(cfg),
        "config_sha256": config_hash(cfg),
        "data": result.data_description,
        "data_seed": derive_seed(cfg.seed_base, DATA_TAG),
        "trials": trials,
        "diverged_setups": [s.setup for s in result.summary if s.diverged],
        "elapsed_s": round(result.elapsed_s, 3),
        "numpy": np.__version__,
    }


def write_outputs(result: ProtocolResult, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "results": out / "results.csv",
        "summary": out / "summary.csv",
        "manifest": out / "manifest.json",
    }
    paths["results"].write_text(results_csv(result.results), encoding="utf-8")
    paths["summary"].write_text(summary_csv(result), encoding="utf-8")
    paths["manifest"].write_text(json.dumps(manifest(result), indent=2) + "\n", encoding="utf-8")
    return paths
