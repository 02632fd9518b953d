"""
Experiment orchestration: barrier statistics over real and adversarial pairs,
connectivity of real, adversarial and synthetic modes, connectivity in
untrained networks, and the evolution of barriers during training.

Every experiment is a pure function of its ExperimentConfig, its input files and
the root seed; each cell draws from its own spawn_rng(seed, stream, ...) stream
and results are assembled in cell order whatever the worker count.
"""
import csv
import itertools
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Tuple, Type, TypeVar

import numpy as np
from scipy.stats import mannwhitneyu

from . import config
from .attacks import AttackConfig, targeted_optimization
from .connector import ConnectionResult, ConnectorConfig, connect, write_connection_report
from .data_loader import ingest_idx, synth_dataset
from .exceptions import ConfigError, InsufficientDataError, NotConnectedError, ThresholdNotReachedError
from .netcore import LabeledDataset, Network, TrainConfig, batch_losses, predict, train
from .paths import BarrierReport, Path, find_barrier, is_delta_connected, sample_loss_curve
from .storage import read_json_object, write_json
from .synth import FvoConfig, generate_diverse_pair, generate_optimal_input
from .utils import describe, format_real, ordered_map, spawn_rng

logger = logging.getLogger(__name__)

EXPERIMENT_KINDS: Tuple[str, ...] = ("barrier_stats", "untrained", "evolution", "pair_connectivity",
                                     "adversarial_connectivity", "synthetic_connectivity")

# Stream identifiers for spawn_rng(seed, stream, ...).
_REAL_PAIRS, _ADVERSARIAL_PAIRS, _CONNECT_PAIRS, _SYNTH_SEEDS, _EVOLUTION_SEEDS = range(5)

C = TypeVar("C")


# --- Configuration ---

@dataclass
class ExperimentConfig:
    """
    Settings of one experiment run, usually read from a JSON file.

    Nested sections (train, connector, fvo, attack) hold overrides of the
    corresponding dataclass defaults.
    """
    kind: str = "barrier_stats"
    seed: int = 0
    checkpoint: Optional[str] = None
    architecture: str = "cnn"
    data_images: Optional[str] = None
    data_labels: Optional[str] = None
    synth_classes: int = 10
    synth_per_class: int = 100
    synth_spread: float = 0.3
    input_shape: Tuple[int, ...] = (1, config.SYNTH_IMAGE_SIZE, config.SYNTH_IMAGE_SIZE)
    num_classes: int = 10
    classes: Optional[List[int]] = None
    pairs_per_class: int = config.PAIRS_PER_CLASS
    pairs_dropped: int = config.PAIRS_DROPPED_PER_CLASS
    curve_points: int = config.STATS_CURVE_POINTS
    n_pairs: int = 20
    low_loss_threshold: float = config.LOW_LOSS_THRESHOLD
    adversarial: bool = True
    evolution_batches: int = 30
    evolution_epochs: int = 30
    evolution_pairs_per_class: int = 5
    workers: int = 0
    train: Dict[str, Any] = field(default_factory=dict)
    connector: Dict[str, Any] = field(default_factory=dict)
    fvo: Dict[str, Any] = field(default_factory=dict)
    attack: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"kind must be one of {EXPERIMENT_KINDS}, got '{self.kind}'", field="kind")
        if self.pairs_per_class < 1 or not 0 <= self.pairs_dropped < self.pairs_per_class:
            raise ConfigError("need pairs_per_class >= 1 and 0 <= pairs_dropped < pairs_per_class",
                              field="pairs_dropped")
        if self.curve_points < 2:
            raise ConfigError("curve_points must be at least 2", field="curve_points")
        if self.low_loss_threshold <= 0:
            raise ConfigError("low_loss_threshold must be positive", field="low_loss_threshold")
        if self.architecture not in config.ARCHITECTURES:
            raise ConfigError(f"unknown architecture '{self.architecture}'", field="architecture")
        if (self.data_images is None) != (self.data_labels is None):
            raise ConfigError("data_images and data_labels must be given together", field="data_labels")
        # Surface section errors at load time rather than mid-run.
        self.train_config()
        self.connector_config()
        self.fvo_config()
        self.attack_config()

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        for key in values:
            if key not in known:
                raise ConfigError(f"unknown configuration key '{key}'", field=key)
        try:
            return cls(**values)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def train_config(self) -> TrainConfig:
        return _build_section(TrainConfig, "train", {"seed": self.seed, **self.train})

    def connector_config(self) -> ConnectorConfig:
        return _build_section(ConnectorConfig, "connector", self.connector)

    def fvo_config(self, **defaults: Any) -> FvoConfig:
        return _build_section(FvoConfig, "fvo", {**defaults, **self.fvo})

    def attack_config(self) -> AttackConfig:
        return _build_section(AttackConfig, "attack", {"kind": "targeted_opt", **self.attack})

    def class_list(self, num_classes: int) -> List[int]:
        return list(self.classes) if self.classes is not None else list(range(num_classes))

    def check_files(self) -> None:
        """Raises ConfigError naming the first referenced file that does not exist."""
        for name in ("checkpoint", "data_images", "data_labels"):
            path = getattr(self, name)
            if path is not None and not os.path.isfile(path):
                raise ConfigError(f"{name} file '{path}' does not exist", field=name)


def _build_section(cls: Type[C], section: str, values: Dict[str, Any]) -> C:
    known = {f.name: f for f in fields(cls)}
    kwargs: Dict[str, Any] = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown key '{key}' in section '{section}'", field=f"{section}.{key}")
        kwargs[key] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{section}' settings: {e}", field=section) from e


def load_experiment_config(filepath: str, **overrides: Any) -> ExperimentConfig:
    """Reads an experiment config (JSON, parsed leniently); keyword overrides win."""
    values = read_json_object(filepath)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(values)


def load_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    """The IDX pair named in the config, or the seeded synthetic dataset."""
    if cfg.data_images is not None:
        return ingest_idx(cfg.data_images, cfg.data_labels)
    return synth_dataset(cfg.synth_classes, cfg.synth_per_class, cfg.synth_spread, cfg.seed)


# --- Barrier statistics ---

@dataclass
class PairBarrier:
    """One interpolated pair. `second_index` is the adversarial's source index for adversarial pairs."""
    class_id: int
    pair: int
    first_index: int
    second_index: int
    endpoint_loss_diff: float
    barrier: BarrierReport

    def to_dict(self) -> Dict[str, Any]:
        return {"class": self.class_id, "pair": self.pair, "first_index": self.first_index,
                "second_index": self.second_index, "endpoint_loss_diff": self.endpoint_loss_diff,
                **self.barrier.to_dict()}


@dataclass
class BarrierStatsReport:
    scenario: str
    rows: List[PairBarrier]
    pairs_per_class: int
    pairs_dropped: int
    curve_points: int
    seed: int
    failures: int = 0

    @property
    def max_losses(self) -> np.ndarray:
        return np.array([r.barrier.max_loss for r in self.rows])

    @property
    def gaps(self) -> np.ndarray:
        return np.array([r.barrier.gap for r in self.rows])

    def aggregates(self) -> Dict[str, Dict[str, float]]:
        return {"max_loss": describe(self.max_losses), "gap": describe(self.gaps)}

    def to_dict(self) -> Dict[str, Any]:
        return {"scenario": self.scenario, "seed": self.seed, "pairs_per_class": self.pairs_per_class,
                "pairs_dropped": self.pairs_dropped, "curve_points": self.curve_points,
                "count": len(self.rows), "failures": self.failures, "aggregates": self.aggregates(),
                "rows": [r.to_dict() for r in self.rows]}


def low_loss_candidates(net: Network, data: LabeledDataset, threshold: float) -> Dict[int, np.ndarray]:
    """Indices of each class's examples whose own-class loss is at most `threshold`."""
    losses = batch_losses(net, data.inputs, data.labels)
    return {y: np.flatnonzero((data.labels == y) & (losses <= threshold)) for y in range(net.num_classes)}


def _unique_pairs(rng: np.random.Generator, n: int, count: int) -> List[Tuple[int, int]]:
    """
    Draws `count` distinct unordered index pairs from range(n).

    Raises:
        ValueError: If range(n) holds fewer than `count` distinct pairs.
    """
    total = n * (n - 1) // 2
    if count > total:
        raise ValueError(f"{n} items give only {total} distinct pairs; {count} requested")
    if 4 * count > total:
        # Dense request: sample the enumerated pairs without replacement.
        every = list(itertools.combinations(range(n), 2))
        return [every[int(k)] for k in rng.choice(total, size=count, replace=False)]
    chosen: List[Tuple[int, int]] = []
    seen = set()
    # Sparse request: at most a quarter of the pairs are taken, so rejection ends quickly.
    while len(chosen) < count:
        i, j = (int(v) for v in rng.choice(n, size=2, replace=False))
        key = (min(i, j), max(i, j))
        if key not in seen:
            seen.add(key)
            chosen.append((i, j))
    return chosen


def _barrier_row(net: Network, y: int, pair: int, first: int, second: int, a: np.ndarray, b: np.ndarray,
                 curve_points: int) -> PairBarrier:
    curve = sample_loss_curve(net, Path([a, b], y), curve_points)
    report = find_barrier(curve)
    diff = abs(report.endpoint_losses[0] - report.endpoint_losses[1])
    return PairBarrier(y, pair, first, second, diff, report)


def _drop_extreme(rows: List[PairBarrier], dropped: int) -> List[PairBarrier]:
    """Removes the `dropped` rows with the largest endpoint-loss difference, keeping order."""
    if dropped == 0:
        return rows
    ranked = sorted(range(len(rows)), key=lambda i: -rows[i].endpoint_loss_diff)
    excluded = set(ranked[:dropped])
    return [r for i, r in enumerate(rows) if i not in excluded]


def run_barrier_stats(net: Network, data: LabeledDataset, attack_cfg: Optional[AttackConfig],
                      cfg: ExperimentConfig) -> Tuple[BarrierStatsReport, BarrierStatsReport]:
    """
    Barrier heights and gaps for real-real and real-adversarial pairs.

    Per class, cfg.pairs_per_class pairs are drawn at random; after
    interpolation the cfg.pairs_dropped pairs with the largest endpoint-loss
    difference are excluded. Adversarial partners are targeted-optimisation
    adversarials toward the class, built from random correctly classified
    inputs of other classes. With attack_cfg None the adversarial branch
    reuses the real-real draws, so both branches coincide.

    Raises:
        InsufficientDataError: If a class has fewer than cfg.pairs_per_class
            distinct pairs of low-loss examples.
    """
    classes = cfg.class_list(net.num_classes)
    candidates = low_loss_candidates(net, data, cfg.low_loss_threshold)
    for y in classes:
        n = int(candidates[y].size)
        # Real pairs are distinct unordered pairs of candidates.
        if n * (n - 1) // 2 < cfg.pairs_per_class:
            raise InsufficientDataError(f"class {y} has {n} examples with loss <= {cfg.low_loss_threshold}, "
                                        f"giving {n * (n - 1) // 2} distinct pairs; need {cfg.pairs_per_class}")
    predictions = predict(net, data.inputs)
    correct = np.flatnonzero(predictions == data.labels)

    def real_cell(y: int) -> Tuple[List[PairBarrier], int]:
        pool = candidates[y]
        rng = spawn_rng(cfg.seed, _REAL_PAIRS, y)
        rows = [_barrier_row(net, y, p, int(pool[i]), int(pool[j]), data.inputs[pool[i]], data.inputs[pool[j]],
                             cfg.curve_points)
                for p, (i, j) in enumerate(_unique_pairs(rng, pool.size, cfg.pairs_per_class))]
        return _drop_extreme(rows, cfg.pairs_dropped), 0

    def adversarial_cell(y: int) -> Tuple[List[PairBarrier], int]:
        pool = candidates[y]
        sources = correct[data.labels[correct] != y]
        if sources.size == 0:
            raise InsufficientDataError(f"no correctly classified inputs outside class {y} to attack")
        rng = spawn_rng(cfg.seed, _ADVERSARIAL_PAIRS, y)
        rows: List[PairBarrier] = []
        failures = 0
        for p in range(cfg.pairs_per_class):
            a_index = int(pool[rng.integers(pool.size)])
            source_index = int(sources[rng.integers(sources.size)])
            try:
                adv = targeted_optimization(net, data.inputs[source_index], y, attack_cfg)
            except ThresholdNotReachedError as e:
                logger.warning(f"Class {y}, pair {p}: targeted attack failed ({e}); pair skipped")
                failures += 1
                continue
            rows.append(_barrier_row(net, y, p, a_index, source_index, data.inputs[a_index], adv.adversarial,
                                     cfg.curve_points))
        return _drop_extreme(rows, cfg.pairs_dropped), failures

    real = ordered_map(real_cell, classes, cfg.workers)
    adversarial = real if attack_cfg is None else ordered_map(adversarial_cell, classes, cfg.workers)

    def assemble(scenario: str, cells: List[Tuple[List[PairBarrier], int]]) -> BarrierStatsReport:
        rows = [row for cell_rows, _ in cells for row in cell_rows]
        report = BarrierStatsReport(scenario, rows, cfg.pairs_per_class, cfg.pairs_dropped, cfg.curve_points,
                                    cfg.seed, sum(f for _, f in cells))
        logger.info(f"{scenario}: {len(rows)} pairs, median gap {report.aggregates()['gap']['median']:.4g}")
        return report

    return assemble("real_real", real), assemble("real_adversarial", adversarial)


def compare_gaps(real_real: BarrierStatsReport, real_adversarial: BarrierStatsReport) -> Dict[str, float]:
    """One-sided rank-sum test that real-adversarial gaps exceed real-real gaps."""
    rr, ra = real_real.gaps, real_adversarial.gaps
    result: Dict[str, float] = {
        "median_gap_real_real": float(np.median(rr)) if rr.size else float("nan"),
        "median_gap_real_adversarial": float(np.median(ra)) if ra.size else float("nan"),
        "statistic": float("nan"),
        "p_value": float("nan"),
    }
    if rr.size and ra.size:
        test = mannwhitneyu(ra, rr, alternative="greater")
        result["statistic"] = float(test.statistic)
        result["p_value"] = float(test.pvalue)
    return result


def write_barrier_stats(report: BarrierStatsReport, out_dir: str) -> str:
    """Writes `<scenario>_barriers.csv` and `<scenario>_barriers.json`; returns the JSON path."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{report.scenario}_barriers.csv"), "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["class", "pair", "first_index", "second_index", "max_loss", "argmax_alpha", "gap",
                         "endpoint_loss_start", "endpoint_loss_end"])
        for r in report.rows:
            b = r.barrier
            writer.writerow([r.class_id, r.pair, r.first_index, r.second_index, format_real(b.max_loss),
                             format_real(b.argmax_alpha), format_real(b.gap), format_real(b.endpoint_losses[0]),
                             format_real(b.endpoint_losses[1])])
    path = os.path.join(out_dir, f"{report.scenario}_barriers.json")
    write_json(path, report.to_dict())
    return path


# --- Connectivity runs ---

@dataclass
class ConnectivityRow:
    class_id: int
    pair: int
    success: bool
    num_segments: int
    depth_used: int
    primary_connected: bool
    primary_max_loss: float
    final_max_loss: float
    max_orthogonality_residual: float
    delta: float
    result: Optional[ConnectionResult] = field(default=None, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {"class": self.class_id, "pair": self.pair, "success": self.success,
                "num_segments": self.num_segments, "depth_used": self.depth_used,
                "primary_connected": self.primary_connected, "primary_max_loss": self.primary_max_loss,
                "final_max_loss": self.final_max_loss,
                "max_orthogonality_residual": self.max_orthogonality_residual, "delta": self.delta}


@dataclass
class GenerationFailure:
    class_id: int
    pair: int
    reason: str


@dataclass
class ConnectivityReport:
    kind: str
    seed: int
    rows: List[ConnectivityRow]
    failures: List[GenerationFailure] = field(default_factory=list)

    @property
    def success_rate(self) -> float:
        return float(np.mean([r.success for r in self.rows])) if self.rows else float("nan")

    def success_rate_within(self, max_segments: int) -> float:
        if not self.rows:
            return float("nan")
        return float(np.mean([r.success and r.num_segments <= max_segments for r in self.rows]))

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "seed": self.seed, "pairs": len(self.rows),
                "success_rate": self.success_rate, "success_rate_within_4_segments": self.success_rate_within(4),
                "primary_connected_rate": (float(np.mean([r.primary_connected for r in self.rows]))
                                           if self.rows else float("nan")),
                "rows": [r.to_dict() for r in self.rows],
                "failures": [asdict(f) for f in self.failures]}


def _connect_row(net: Network, a: np.ndarray, c: np.ndarray, y: int, pair: int,
                 conn_cfg: ConnectorConfig) -> ConnectivityRow:
    primary = sample_loss_curve(net, Path([a, c], y), conn_cfg.n_primary)
    primary_max = float(np.max(primary.losses))
    try:
        result = connect(net, a, c, y, conn_cfg)
    except NotConnectedError as e:
        logger.warning(f"Class {y}, pair {pair}: {e}")
        return ConnectivityRow(y, pair, False, e.path.num_segments if e.path is not None else 1, conn_cfg.max_depth,
                               is_delta_connected(primary, conn_cfg.delta), primary_max,
                               float(np.max(e.curve.losses)) if e.curve is not None else primary_max,
                               float("nan"), conn_cfg.delta)
    residuals = result.orthogonality_residuals
    return ConnectivityRow(y, pair, True, result.num_segments, result.depth_used,
                           is_delta_connected(primary, conn_cfg.delta), primary_max,
                           float(np.max(result.curve.losses)), max(residuals) if residuals else 0.0,
                           conn_cfg.delta, result)


def _pair_seeds(seed: int, *keys: int) -> Tuple[int, int]:
    first, second = (int(s) for s in spawn_rng(seed, *keys).integers(0, 2 ** 31 - 1, size=2))
    return first, second if second != first else first + 1


def run_pair_connectivity(net: Network, data: LabeledDataset, cfg: ExperimentConfig) -> ConnectivityReport:
    """Connects cfg.n_pairs random same-class pairs of low-loss real inputs."""
    conn_cfg = cfg.connector_config()
    classes = cfg.class_list(net.num_classes)
    candidates = low_loss_candidates(net, data, min(cfg.low_loss_threshold, conn_cfg.delta))
    usable = [y for y in classes if candidates[y].size >= 2]
    if not usable:
        raise InsufficientDataError(f"no class has two examples with loss <= {conn_cfg.delta}")

    def cell(pair: int) -> ConnectivityRow:
        rng = spawn_rng(cfg.seed, _CONNECT_PAIRS, pair)
        y = usable[int(rng.integers(len(usable)))]
        i, j = rng.choice(candidates[y], size=2, replace=False)
        return _connect_row(net, data.inputs[i], data.inputs[j], y, pair, conn_cfg)

    rows = ordered_map(cell, range(cfg.n_pairs), cfg.workers)
    report = ConnectivityReport("pair_connectivity", cfg.seed, rows)
    logger.info(f"Real pairs: {report.success_rate:.2%} connected")
    return report


def run_adversarial_connectivity(net: Network, data: LabeledDataset, attack_cfg: AttackConfig,
                                 cfg: ExperimentConfig) -> ConnectivityReport:
    """
    Connects a low-loss real input A of class y with a targeted adversarial K'
    of class y built from an input of another class.

    The connection threshold is raised to the adversarial's loss when that
    exceeds the configured delta; the row records the delta used.
    """
    conn_cfg = cfg.connector_config()
    classes = cfg.class_list(net.num_classes)
    candidates = low_loss_candidates(net, data, cfg.low_loss_threshold)
    usable = [y for y in classes if candidates[y].size >= 1]
    predictions = predict(net, data.inputs)
    if not usable:
        raise InsufficientDataError(f"no class has an example with loss <= {cfg.low_loss_threshold}")

    def cell(pair: int) -> Optional[ConnectivityRow]:
        rng = spawn_rng(cfg.seed, _ADVERSARIAL_PAIRS, pair)
        y = usable[int(rng.integers(len(usable)))]
        a_index = int(rng.choice(candidates[y]))
        sources = np.flatnonzero((data.labels != y) & (predictions == data.labels))
        if sources.size == 0:
            return None
        source_index = int(rng.choice(sources))
        try:
            adv = targeted_optimization(net, data.inputs[source_index], y, attack_cfg)
        except ThresholdNotReachedError as e:
            logger.warning(f"Pair {pair}: targeted attack toward class {y} failed ({e})")
            return None
        a = data.inputs[a_index]
        endpoint_max = float(np.max(batch_losses(net, np.stack([a, adv.adversarial]), y)))
        pair_cfg = replace(conn_cfg, delta=max(conn_cfg.delta, endpoint_max))
        return _connect_row(net, a, adv.adversarial, y, pair, pair_cfg)

    cells = ordered_map(cell, range(cfg.n_pairs), cfg.workers)
    report = ConnectivityReport("adversarial_connectivity", cfg.seed, [r for r in cells if r is not None],
                                [GenerationFailure(-1, p, "attack failed") for p, r in enumerate(cells) if r is None])
    logger.info(f"Real-adversarial pairs: {report.success_rate:.2%} connected, {len(report.failures)} attack failures")
    return report


def run_synthetic_connectivity(net: Network, cfg: ExperimentConfig) -> ConnectivityReport:
    """
    Per class, connects a smooth optimum of the surrogate objective with a
    high-frequency cross-entropy optimum.
    """
    conn_cfg = cfg.connector_config()
    smooth_cfg = cfg.fvo_config(objective="surrogate", hf_weight=config.FVO_DIVERSITY_HF_WEIGHT)
    noisy_cfg = replace(smooth_cfg, objective="cross_entropy", hf_weight=0.0)

    def cell(y: int) -> Tuple[Optional[ConnectivityRow], Optional[GenerationFailure]]:
        first, second = _pair_seeds(cfg.seed, _SYNTH_SEEDS, y)
        try:
            a = generate_optimal_input(net, y, smooth_cfg, first)
            c = generate_optimal_input(net, y, noisy_cfg, second)
        except ThresholdNotReachedError as e:
            logger.warning(f"Class {y}: synthetic optimum not found ({e})")
            return None, GenerationFailure(y, 0, str(e))
        return _connect_row(net, a.input, c.input, y, 0, replace(conn_cfg, clamp_range=None)), None

    cells = ordered_map(cell, cfg.class_list(net.num_classes), cfg.workers)
    return ConnectivityReport("synthetic_connectivity", cfg.seed, [r for r, _ in cells if r is not None],
                              [f for _, f in cells if f is not None])


def run_untrained_connectivity(seed: int, cfg: ExperimentConfig) -> ConnectivityReport:
    """
    Initialises a fresh network from `seed`, generates a diverse pair of
    synthetic optima per class and connects each pair. Generation failures are
    reported per class.
    """
    net = Network.from_architecture(cfg.architecture, cfg.input_shape, cfg.num_classes, seed)
    fvo_cfg = cfg.fvo_config()
    # Synthetic optima are unbounded, so no clamping to the data range.
    conn_cfg = replace(cfg.connector_config(), clamp_range=None)

    def cell(y: int) -> Tuple[Optional[ConnectivityRow], Optional[GenerationFailure]]:
        try:
            a, c = generate_diverse_pair(net, y, fvo_cfg, _pair_seeds(seed, _SYNTH_SEEDS, y))
        except ThresholdNotReachedError as e:
            logger.warning(f"Class {y}: {e}")
            return None, GenerationFailure(y, 0, str(e))
        return _connect_row(net, a.input, c.input, y, 0, conn_cfg), None

    cells = ordered_map(cell, cfg.class_list(net.num_classes), cfg.workers)
    report = ConnectivityReport("untrained", seed, [r for r, _ in cells if r is not None],
                                [f for _, f in cells if f is not None])
    logger.info(f"Untrained net (seed {seed}): {report.success_rate:.2%} of {len(report.rows)} pairs connected, "
                f"{len(report.failures)} generation failures")
    return report


def write_connectivity_report(report: ConnectivityReport, out_dir: str, curves: bool = True) -> str:
    """Writes `<kind>.json`, `<kind>.csv` and, with `curves`, one connection report per successful pair."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{report.kind}.csv"), "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["class", "pair", "success", "num_segments", "depth_used", "primary_connected",
                         "primary_max_loss", "final_max_loss", "max_orthogonality_residual", "delta"])
        for r in report.rows:
            writer.writerow([r.class_id, r.pair, int(r.success), r.num_segments, r.depth_used,
                             int(r.primary_connected), format_real(r.primary_max_loss),
                             format_real(r.final_max_loss), format_real(r.max_orthogonality_residual),
                             format_real(r.delta)])
    if curves:
        for r in report.rows:
            if r.result is not None:
                write_connection_report(r.result, os.path.join(out_dir, "connections"),
                                        name=f"class{r.class_id}_pair{r.pair}")
    path = os.path.join(out_dir, f"{report.kind}.json")
    write_json(path, report.to_dict())
    return path


# --- Training evolution ---

@dataclass
class EvolutionRow:
    """Averaged primary curves of synthetic pairs at one training checkpoint (index 0 = untrained)."""
    stage: str
    index: int
    mean_curve: np.ndarray
    std_curve: np.ndarray
    mean_max_loss: float
    std_max_loss: float
    n_pairs: int
    failures: int


@dataclass
class EvolutionReport:
    alphas: np.ndarray
    rows: List[EvolutionRow]
    seed: int

    def stage(self, name: str) -> List[EvolutionRow]:
        return [r for r in self.rows if r.stage == name]

    def to_dict(self) -> Dict[str, Any]:
        return {"seed": self.seed, "curve_points": int(self.alphas.size),
                "rows": [{"stage": r.stage, "index": r.index, "mean_max_loss": r.mean_max_loss,
                          "std_max_loss": r.std_max_loss, "n_pairs": r.n_pairs, "failures": r.failures}
                         for r in self.rows]}


def _checkpoint_curves(net: Network, cfg: ExperimentConfig, fvo_cfg: FvoConfig,
                       stage: str, index: int) -> EvolutionRow:
    cells = [(y, p) for y in cfg.class_list(net.num_classes) for p in range(cfg.evolution_pairs_per_class)]

    def cell(key: Tuple[int, int]) -> Optional[np.ndarray]:
        y, p = key
        try:
            a, c = generate_diverse_pair(net, y, fvo_cfg, _pair_seeds(cfg.seed, _EVOLUTION_SEEDS, y, p))
        except ThresholdNotReachedError:
            return None
        return sample_loss_curve(net, Path([a.input, c.input], y), cfg.curve_points).losses

    curves = [c for c in ordered_map(cell, cells, cfg.workers) if c is not None]
    failures = len(cells) - len(curves)
    if curves:
        stacked = np.stack(curves)
        maxima = stacked.max(axis=1)
        row = EvolutionRow(stage, index, stacked.mean(axis=0), stacked.std(axis=0), float(maxima.mean()),
                           float(maxima.std()), len(curves), failures)
    else:
        empty = np.full(cfg.curve_points, np.nan)
        row = EvolutionRow(stage, index, empty, empty.copy(), float("nan"), float("nan"), 0, failures)
    logger.info(f"{stage} {index}: mean barrier {row.mean_max_loss:.4g} over {row.n_pairs} pairs "
                f"({failures} generation failures)")
    return row


def run_training_evolution(data: LabeledDataset, cfg: ExperimentConfig) -> EvolutionReport:
    """
    Trains a fresh network and, after each of the first cfg.evolution_batches
    batches and cfg.evolution_epochs epochs, averages the primary loss curves
    of freshly generated synthetic pairs (loss threshold 0.005). Index 0 of
    both stages is the untrained network.
    """
    num_classes = int(data.labels.max()) + 1 if len(data) else cfg.num_classes
    net = Network.from_architecture(cfg.architecture, data.input_shape, num_classes, cfg.seed)
    fvo_cfg = cfg.fvo_config(loss_threshold=config.EVOLUTION_LOSS_THRESHOLD)
    train_cfg = replace(cfg.train_config(), epochs=cfg.evolution_epochs)

    untrained = _checkpoint_curves(net, cfg, fvo_cfg, "batch", 0)
    batch_rows: List[EvolutionRow] = [untrained]
    epoch_rows: List[EvolutionRow] = [replace(untrained, stage="epoch")]

    def on_batch(global_batch: int, epoch: int, snapshot: Network) -> None:
        if global_batch <= cfg.evolution_batches:
            batch_rows.append(_checkpoint_curves(snapshot, cfg, fvo_cfg, "batch", global_batch))

    def on_epoch(global_batch: int, epoch: int, snapshot: Network) -> None:
        epoch_rows.append(_checkpoint_curves(snapshot, cfg, fvo_cfg, "epoch", epoch))

    train(net, data, train_cfg, on_batch=on_batch, on_epoch=on_epoch)
    if len(batch_rows) < cfg.evolution_batches + 1:
        logger.warning(f"Training produced only {len(batch_rows) - 1} batches; "
                       f"increase evolution_epochs or the dataset size")
    return EvolutionReport(np.linspace(0.0, 1.0, cfg.curve_points), batch_rows + epoch_rows, cfg.seed)


def write_evolution_report(report: EvolutionReport, out_dir: str) -> str:
    """Writes the summary table, the averaged curves and a JSON summary; returns the JSON path."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "evolution_summary.csv"), "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["stage", "index", "mean_max_loss", "std_max_loss", "n_pairs", "failures"])
        for r in report.rows:
            writer.writerow([r.stage, r.index, format_real(r.mean_max_loss), format_real(r.std_max_loss),
                             r.n_pairs, r.failures])
    with open(os.path.join(out_dir, "evolution_curves.csv"), "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["stage", "index", "alpha", "mean_loss", "std_loss"])
        for r in report.rows:
            for alpha, mean, std in zip(report.alphas, r.mean_curve, r.std_curve):
                writer.writerow([r.stage, r.index, format_real(alpha), format_real(mean), format_real(std)])
    path = os.path.join(out_dir, "evolution.json")
    write_json(path, report.to_dict())
    return path

