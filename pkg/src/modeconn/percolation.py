"""
Percolation checks for the geometric picture of input-space connectivity.

Covers the overlapping interval labelling of the output range, a Lipschitz
bound built from layer spectral norms (and the grid pitch it implies), Monte
Carlo site percolation on d-dimensional lattices with a numba union-find
kernel, the mean-field fixed point P = 1 - exp(-qP), and dimension sweeps.
"""
import csv
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numba import njit
from scipy.optimize import bisect

from . import config
from .exceptions import InsufficientDataError, PowerIterationError
from .netcore import Network, linear_map, linear_map_adjoint
from .utils import format_real, ordered_map, spawn_rng

logger = logging.getLogger(__name__)

LATTICE_MODES: Tuple[str, ...] = ("discrete", "threshold")
VACANT: int = -1
SWEEP_COLUMNS: Tuple[str, ...] = ("d", "L", "mode", "param", "q", "largest_frac", "pair_conn", "stderr",
                                  "mean_field_P", "seed")


# --- Output intervals ---

@dataclass
class IntervalLabels:
    """
    The 2/delta - 1 width-delta intervals covering [0, 1], shifted by delta/2.

    Attributes:
        delta: Interval width (1/delta is an integer).
        intervals: Array of shape (n, 2) with rows [lo, hi].
    """
    delta: float
    intervals: np.ndarray

    def __len__(self) -> int:
        return int(self.intervals.shape[0])

    def containing(self, u: float) -> List[int]:
        """Indices of the intervals that hold u."""
        mask = (self.intervals[:, 0] <= u) & (u <= self.intervals[:, 1])
        return np.flatnonzero(mask).tolist()


def interval_labels(delta: float) -> IntervalLabels:
    """
    Raises:
        ValueError: If delta is not positive or 1/delta is not an integer.
    """
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    n = int(round(1.0 / delta))
    if abs(1.0 / delta - n) > 1e-9 * n:
        raise ValueError(f"1/delta must be an integer, got 1/{delta} = {1.0 / delta}")
    count = 2 * n - 1
    lows = np.arange(count) * (0.5 / n)
    highs = lows + 1.0 / n
    highs[-1] = 1.0
    return IntervalLabels(1.0 / n, np.column_stack([lows, highs]))


# --- Lipschitz bound ---

def _power_iteration(apply, adjoint, shape: Tuple[int, ...], seed: int,
                     tol: float = config.POWER_ITERATION_TOL,
                     max_iters: int = config.POWER_ITERATION_MAX_ITERS) -> float:
    """Largest singular value of a linear map given as forward and adjoint callables."""
    v = spawn_rng(seed).standard_normal(shape)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iters):
        w = adjoint(apply(v))
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        new_sigma = math.sqrt(norm)
        v = w / norm
        if abs(new_sigma - sigma) <= tol * new_sigma:
            return new_sigma
        sigma = new_sigma
    raise PowerIterationError(f"power iteration did not converge to {tol} within {max_iters} iterations")


def _conv_norm_bound(weight: np.ndarray, input_hw: Tuple[int, int], padding: int) -> float:
    """
    Upper bound on the operator 2-norm of a zero-padded, possibly strided conv.

    The layer equals a circular convolution on the padded (H + 2p) x (W + 2p)
    grid, restricted to the embedded input and subsampled on the output; both
    restrictions have norm at most 1. The circular convolution is block
    diagonalised by the 2-D DFT, so its norm is the largest singular value of
    the (out, in) kernel spectrum over all frequencies.
    """
    grid = (input_hw[0] + 2 * padding, input_hw[1] + 2 * padding)
    spectrum = np.fft.fft2(weight, s=grid)
    blocks = np.moveaxis(spectrum, (0, 1), (2, 3))
    return float(np.linalg.svd(blocks, compute_uv=False).max())


def layer_spectral_norms(net: Network, seed: int = 0) -> List[float]:
    """
    Operator 2-norm of every weighted layer, in layer order.

    Dense layers use the exact SVD value; convolutions use power iteration on
    the layer's linear map, which approaches the norm from below.
    """
    norms: List[float] = []
    for index, layer in enumerate(net.layers):
        if not layer.has_params:
            continue
        if layer.kind == "dense":
            norm = float(np.linalg.norm(net.params[index]["weight"], 2))
        else:
            norm = _power_iteration(lambda v, i=index: linear_map(net, i, v),
                                    lambda u, i=index: linear_map_adjoint(net, i, u),
                                    net.shapes[index], seed + index)
        logger.debug(f"Layer {index} ({layer.kind}): spectral norm {norm:.6g}")
        norms.append(norm)
    return norms


def layer_norm_bounds(net: Network) -> List[float]:
    """
    Certified upper bounds on the operator 2-norm of every weighted layer.

    Dense layers are exact. A convolution gets the circulant bound of
    `_conv_norm_bound`, which is tight for 1x1 kernels and otherwise exceeds
    the true norm only through boundary and stride effects.
    """
    bounds: List[float] = []
    for index, layer in enumerate(net.layers):
        if not layer.has_params:
            continue
        weight = net.params[index]["weight"]
        if layer.kind == "dense":
            bounds.append(float(np.linalg.norm(weight, 2)))
        else:
            bounds.append(_conv_norm_bound(weight, net.shapes[index][1:], layer.padding))
    return bounds


def lipschitz_bound(net: Network) -> float:
    """
    Upper bound M on the L2 Lipschitz constant of the logit map: the product of
    the weighted layers' certified norm bounds. ReLU, tanh, flatten and
    non-overlapping max-pooling are 1-Lipschitz.
    """
    return float(np.prod(layer_norm_bounds(net)))


def epsilon_grid(lipschitz: float, delta: float, delta_prime: float) -> float:
    """
    Returns eps = (delta - delta') / M: inputs closer than eps have outputs
    closer than delta - delta'.
    """
    if lipschitz <= 0:
        raise ValueError(f"Lipschitz constant must be positive, got {lipschitz}")
    if not 0.0 < delta_prime < delta:
        raise ValueError(f"need 0 < delta' < delta, got delta'={delta_prime}, delta={delta}")
    return (delta - delta_prime) / lipschitz


def cube_side(epsilon: float, input_dim: int) -> float:
    """Side of the grid cubes whose diameter is epsilon."""
    return epsilon / math.sqrt(input_dim)


# --- Lattice simulation ---

@dataclass(frozen=True)
class LatticeConfig:
    """
    Attributes:
        dimension: Lattice dimension d.
        side: Side length L; the lattice has L**d sites.
        mode: "discrete" (labels, each with probability `occupation`, rest vacant)
            or "threshold" (uniform values, neighbours joined when |u - u'| <= delta).
        labels: Number K of discrete labels.
        occupation: Per-label probability p (K * p <= 1); defaults to 1/K.
        delta: Threshold for the threshold mode.
        periodic: Wrap the boundaries.
        trials: Independent lattices to average over.
        seed: Root seed; trial t uses spawn_rng(seed, t).
    """
    dimension: int
    side: int
    mode: str = "discrete"
    labels: int = 2
    occupation: Optional[float] = None
    delta: float = 0.1
    periodic: bool = False
    trials: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if self.side < 2:
            raise ValueError("side must be >= 2")
        if self.mode not in LATTICE_MODES:
            raise ValueError(f"mode must be one of {LATTICE_MODES}, got '{self.mode}'")
        if self.num_sites > config.MAX_LATTICE_SITES:
            raise ValueError(f"{self.side}^{self.dimension} sites exceed the limit of {config.MAX_LATTICE_SITES}")
        if self.labels < 1 or self.trials < 1:
            raise ValueError("labels and trials must be >= 1")
        if self.mode == "discrete" and not 0.0 < self.per_label_probability <= 1.0 / self.labels + 1e-12:
            raise ValueError(f"occupation must lie in (0, 1/labels], got {self.per_label_probability}")
        if self.mode == "threshold" and not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")

    @property
    def num_sites(self) -> int:
        return self.side ** self.dimension

    @property
    def per_label_probability(self) -> float:
        return self.occupation if self.occupation is not None else 1.0 / self.labels

    @property
    def param(self) -> float:
        return self.per_label_probability if self.mode == "discrete" else self.delta

    @property
    def neighbour_match_probability(self) -> float:
        """Probability that a neighbour of an occupied site is compatible with it."""
        if self.mode == "discrete":
            return self.per_label_probability
        return 2.0 * self.delta - self.delta ** 2

    @property
    def q(self) -> float:
        return self.dimension * self.neighbour_match_probability


@dataclass
class PercolationResult:
    """
    Attributes:
        component_sizes: Sizes of all components of the first trial, descending
            (vacant sites are singletons), summing to L**d.
        largest_frac: Mean over trials of the largest component's share of sites.
        pair_conn: Mean over trials of the fraction of compatible site pairs that
            are connected.
        stderr: Standard error of pair_conn over trials (0 for one trial).
    """
    cfg: LatticeConfig
    component_sizes: np.ndarray
    largest_frac: float
    pair_conn: float
    stderr: float
    trial_largest: np.ndarray
    trial_pair_conn: np.ndarray

    @property
    def q(self) -> float:
        return self.cfg.q


@njit(cache=True, nogil=True)
def _find(parent, x):
    root = x
    # Walk to the root, then point every node on the path straight at it.
    while parent[root] != root:
        root = parent[root]
    while x != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


@njit(cache=True, nogil=True)
def _union(parent, rank, a, b):
    ra = _find(parent, a)
    rb = _find(parent, b)
    if ra == rb:
        return
    # Attach the lower-rank root; rank grows only on ties.
    if rank[ra] < rank[rb]:
        parent[ra] = rb
    elif rank[ra] > rank[rb]:
        parent[rb] = ra
    else:
        parent[rb] = ra
        rank[ra] += 1


@njit(cache=True, nogil=True)
def _lattice_roots(values, side, dimension, threshold_mode, delta, periodic):
    n = values.shape[0]
    parent = np.arange(n)
    rank = np.zeros(n, dtype=np.int64)
    for site in range(n):
        if not threshold_mode and values[site] < 0:
            continue
        # Sites are flattened row-major; each site links only to its +1 neighbour
        # per axis, so every lattice edge is visited once.
        stride = 1
        for axis in range(dimension):
            coord = (site // stride) % side
            if coord < side - 1:
                other = site + stride
            elif periodic:
                # Wrap to coordinate 0 on this axis.
                other = site - coord * stride
            else:
                stride *= side
                continue
            if threshold_mode:
                if abs(values[site] - values[other]) <= delta:
                    _union(parent, rank, site, other)
            elif values[other] == values[site]:
                _union(parent, rank, site, other)
            stride *= side
    roots = np.empty(n, dtype=np.int64)
    for site in range(n):
        roots[site] = _find(parent, site)
    return roots


def label_lattice(cfg: LatticeConfig, rng: np.random.Generator) -> np.ndarray:
    """
    Site values in C order over the (L,) * d grid: integer labels (VACANT for
    empty sites) in discrete mode, uniform reals in threshold mode.
    """
    u = rng.random(cfg.num_sites)
    if cfg.mode == "threshold":
        return u
    p = cfg.per_label_probability
    labels = np.floor(u / p)
    labels[labels >= cfg.labels] = VACANT
    return labels


def find_components(values: np.ndarray, cfg: LatticeConfig) -> np.ndarray:
    """Component root of every site under von Neumann adjacency of compatible sites."""
    return _lattice_roots(np.ascontiguousarray(values, dtype=np.float64), cfg.side, cfg.dimension,
                          cfg.mode == "threshold", float(cfg.delta), cfg.periodic)


@njit(cache=True, nogil=True)
def _close_pairs(groups, values, width):
    # groups and values sorted lexicographically by (group, value)
    n = values.shape[0]
    total = 0
    j = 0
    # Two-pointer sweep: j is the first index past i outside its group or width.
    for i in range(n):
        if j < i + 1:
            j = i + 1
        while j < n and groups[j] == groups[i] and values[j] - values[i] <= width:
            j += 1
        total += j - i - 1
    return total


def pair_connectivity(values: np.ndarray, roots: np.ndarray, cfg: LatticeConfig) -> float:
    """
    Fraction of unordered compatible site pairs that lie in one component.
    Returns NaN when there are no compatible pairs.
    """
    if cfg.mode == "discrete":
        occupied = values != VACANT
        _, label_counts = np.unique(values[occupied], return_counts=True)
        _, comp_counts = np.unique(roots[occupied], return_counts=True)
        compatible = int(np.sum(label_counts * (label_counts - 1) // 2))
        connected = int(np.sum(comp_counts * (comp_counts - 1) // 2))
    else:
        compatible = int(_close_pairs(np.zeros(values.size, dtype=np.int64), np.sort(values), cfg.delta))
        order = np.lexsort((values, roots))
        connected = int(_close_pairs(roots[order], values[order], cfg.delta))
    if compatible == 0:
        return float("nan")
    return connected / compatible


def _run_trial(cfg: LatticeConfig, trial: int) -> Tuple[np.ndarray, float, float]:
    values = label_lattice(cfg, spawn_rng(cfg.seed, trial))
    roots = find_components(values, cfg)
    sizes = np.sort(np.bincount(roots)[np.unique(roots)])[::-1]
    return sizes, float(sizes[0]) / cfg.num_sites, pair_connectivity(values, roots, cfg)


def simulate_lattice(cfg: LatticeConfig, workers: int = 0) -> PercolationResult:
    """Runs cfg.trials independent lattices (in parallel when workers allow)."""
    trials = ordered_map(lambda t: _run_trial(cfg, t), range(cfg.trials), workers)
    largest = np.array([t[1] for t in trials])
    pair = np.array([t[2] for t in trials])
    finite = pair[np.isfinite(pair)]
    pair_mean = float(np.mean(finite)) if finite.size else float("nan")
    stderr = float(np.std(finite, ddof=1) / np.sqrt(finite.size)) if finite.size > 1 else 0.0
    logger.debug(f"Lattice d={cfg.dimension} L={cfg.side} {cfg.mode}: largest {np.mean(largest):.4f}, "
                 f"pair connectivity {pair_mean:.4f}")
    return PercolationResult(cfg, trials[0][0], float(np.mean(largest)), pair_mean, stderr, largest, pair)


# --- Mean field ---

def mean_field_P(q: float) -> float:
    """
    The largest root of P = 1 - exp(-qP) in [0, 1]: 0 for q <= 1, the unique
    positive root otherwise (bisection to 1e-13).
    """
    if q < 0:
        raise ValueError(f"q must be non-negative, got {q}")
    if q <= 1.0:
        return 0.0

    def g(p: float) -> float:
        return p + math.expm1(-q * p)

    lo = min(0.5, (q - 1.0) / (q * q))
    if g(lo) >= 0.0:
        return 0.0
    return float(bisect(g, lo, 1.0, xtol=config.MEAN_FIELD_XTOL, maxiter=500))


# --- Sweeps ---

@dataclass
class SweepRow:
    d: int
    L: int
    mode: str
    param: float
    q: float
    largest_frac: float
    pair_conn: float
    stderr: float
    mean_field_P: float
    seed: int

    def values(self) -> List[str]:
        return [str(self.d), str(self.L), self.mode, format_real(self.param), format_real(self.q),
                format_real(self.largest_frac), format_real(self.pair_conn), format_real(self.stderr),
                format_real(self.mean_field_P), str(self.seed)]


def side_for_dimension(dimension: int, max_sites: int) -> int:
    """Largest L with L**dimension <= max_sites (at least 2)."""
    side = max(2, int(round(max_sites ** (1.0 / dimension))))
    while side > 2 and side ** dimension > max_sites:
        side -= 1
    return side


def connectivity_vs_dimension(dimensions: Sequence[int], q: float, mode: str = "discrete",
                              max_sites: int = 10 ** 5, trials: int = 4, seed: int = 0,
                              periodic: bool = False, workers: int = 0) -> List[SweepRow]:
    """
    Pair connectivity at fixed q = d * p for each dimension.

    In discrete mode p = q/d and the lattice carries floor(1/p) labels of
    probability p each. In threshold mode delta solves 2*delta - delta**2 = q/d.
    Cell d uses seed spawn_rng(seed, d); cells run in parallel.
    """
    if max_sites > config.MAX_LATTICE_SITES:
        raise ValueError(f"max_sites may not exceed {config.MAX_LATTICE_SITES}")

    def cell(d: int) -> SweepRow:
        p = q / d
        if not 0.0 < p <= 1.0:
            raise ValueError(f"q={q} gives p={p} outside (0, 1] at d={d}")
        cell_seed = int(spawn_rng(seed, d).integers(0, 2 ** 31 - 1))
        side = side_for_dimension(d, max_sites)
        if mode == "discrete":
            cfg = LatticeConfig(d, side, "discrete", labels=max(1, int(math.floor(1.0 / p + 1e-12))), occupation=p,
                                periodic=periodic, trials=trials, seed=cell_seed)
        else:
            cfg = LatticeConfig(d, side, "threshold", delta=1.0 - math.sqrt(1.0 - p), periodic=periodic,
                                trials=trials, seed=cell_seed)
        result = simulate_lattice(cfg)
        logger.info(f"d={d}, L={side}: pair connectivity {result.pair_conn:.4f} +- {result.stderr:.4f}")
        return SweepRow(d, side, mode, cfg.param, cfg.q, result.largest_frac, result.pair_conn, result.stderr,
                        mean_field_P(cfg.q), cell_seed)

    return ordered_map(cell, list(dimensions), workers)


def fit_exponential_decay(rows: Sequence[SweepRow]) -> Tuple[float, float]:
    """
    Least-squares fit of log(1 - pair_conn) = intercept - rate * d.

    Returns:
        (rate, intercept).

    Raises:
        InsufficientDataError: With fewer than two usable rows (pair_conn < 1).
    """
    usable = [(r.d, r.pair_conn) for r in rows if np.isfinite(r.pair_conn) and r.pair_conn < 1.0]
    if len({d for d, _ in usable}) < 2:
        raise InsufficientDataError("an exponential fit needs at least two dimensions with pair_conn < 1")
    ds = np.array([d for d, _ in usable], dtype=np.float64)
    ys = np.log1p(-np.array([c for _, c in usable]))
    slope, intercept = np.polyfit(ds, ys, 1)
    return float(-slope), float(intercept)


def write_sweep_csv(rows: Sequence[SweepRow], filepath: str) -> None:
    with open(filepath, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow(row.values())
