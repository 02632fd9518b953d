"""
Linear interpolation between inputs, loss-curve sampling along piecewise-linear
paths, barrier identification and delta-connectivity tests.
"""
import csv
import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .netcore import Network, Tensor, batch_losses
from .utils import format_real

logger = logging.getLogger(__name__)


@dataclass
class Path:
    """
    A piecewise-linear path through input space.

    Attributes:
        waypoints: Two or more tensors of one shape; consecutive ones differ
            (a two-point path may be degenerate, with equal endpoints).
        target_class: The class whose loss is measured along the path.
    """
    waypoints: List[Tensor]
    target_class: int

    def __post_init__(self) -> None:
        self.waypoints = [np.asarray(w, dtype=np.float64) for w in self.waypoints]
        if len(self.waypoints) < 2:
            raise ValueError("a path needs at least two waypoints")
        shape = self.waypoints[0].shape
        if any(w.shape != shape for w in self.waypoints):
            raise ValueError("all waypoints must share one shape")
        if len(self.waypoints) > 2:
            for a, b in zip(self.waypoints[:-1], self.waypoints[1:]):
                if np.array_equal(a, b):
                    raise ValueError("consecutive waypoints must be distinct")

    @property
    def num_segments(self) -> int:
        return len(self.waypoints) - 1

    def reversed(self) -> "Path":
        return Path(list(reversed(self.waypoints)), self.target_class)


@dataclass
class LossCurve:
    """
    Losses sampled along a path.

    Attributes:
        alphas: Strictly increasing global positions in [0, 1] (first 0, last 1).
        losses: The loss at each position.
        segments: Index of the path segment each sample belongs to.
        boundaries: Global positions of the waypoints.
    """
    alphas: np.ndarray
    losses: np.ndarray
    segments: np.ndarray
    boundaries: np.ndarray

    def __len__(self) -> int:
        return int(self.alphas.shape[0])

    def segment_max(self) -> List[float]:
        """Highest sampled loss on each segment (joints count for both sides)."""
        maxima: List[float] = []
        for s in range(len(self.boundaries) - 1):
            lo, hi = self.boundaries[s], self.boundaries[s + 1]
            mask = (self.alphas >= lo) & (self.alphas <= hi)
            maxima.append(float(np.max(self.losses[mask])))
        return maxima


@dataclass
class BarrierReport:
    max_loss: float
    argmax_alpha: float
    gap: float
    endpoint_losses: Tuple[float, float]

    def to_dict(self) -> dict:
        return {"max_loss": self.max_loss, "argmax_alpha": self.argmax_alpha, "gap": self.gap,
                "endpoint_loss_start": self.endpoint_losses[0], "endpoint_loss_end": self.endpoint_losses[1]}


def interpolate(x_i: Tensor, x_j: Tensor, alpha: float) -> Tensor:
    """
    Returns alpha * x_i + (1 - alpha) * x_j.

    Note the orientation: alpha = 1 gives x_i and alpha = 0 gives x_j, exactly.

    Raises:
        ValueError: On a shape mismatch or alpha outside [0, 1].
    """
    a = np.asarray(x_i, dtype=np.float64)
    b = np.asarray(x_j, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"cannot interpolate shapes {a.shape} and {b.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return interpolate_many(a, b, np.array([alpha]))[0]


def interpolate_many(x_i: Tensor, x_j: Tensor, alphas: np.ndarray) -> Tensor:
    """Stack of interpolates for several alphas, with exact endpoints."""
    a = np.asarray(x_i, dtype=np.float64)
    b = np.asarray(x_j, dtype=np.float64)
    alphas = np.asarray(alphas, dtype=np.float64)
    shaped = alphas.reshape((-1,) + (1,) * a.ndim)
    points = b + shaped * (a - b)
    points[alphas == 1.0] = a
    points[alphas == 0.0] = b
    return points


def sample_loss_curve(net: Network, path: Path, n_per_segment: int) -> LossCurve:
    """
    Evaluates the loss at n_per_segment uniformly spaced points on every segment.

    Segment s of S covers global positions [s/S, (s+1)/S]. Joints between
    segments are sampled once.

    Args:
        net: The network.
        path: The path; its target_class is the loss label.
        n_per_segment: Points per segment including both ends (>= 2).

    Returns:
        The concatenated LossCurve.
    """
    if n_per_segment < 2:
        raise ValueError("n_per_segment must be at least 2")
    local = np.linspace(0.0, 1.0, n_per_segment)
    n_segments = path.num_segments
    alphas: List[np.ndarray] = []
    segments: List[np.ndarray] = []
    points: List[Tensor] = []
    for s in range(n_segments):
        ts = local if s == 0 else local[1:]
        # Moving from waypoint s to s+1 means weight t on the later waypoint.
        points.append(interpolate_many(path.waypoints[s + 1], path.waypoints[s], ts))
        alphas.append((s + ts) / n_segments)
        segments.append(np.full(ts.shape, s, dtype=np.int64))
    all_alphas = np.concatenate(alphas)
    all_alphas[-1] = 1.0
    losses = batch_losses(net, np.concatenate(points, axis=0), path.target_class)
    boundaries = np.arange(n_segments + 1, dtype=np.float64) / n_segments
    return LossCurve(all_alphas, losses, np.concatenate(segments), boundaries)


def find_barrier(curve: LossCurve) -> BarrierReport:
    """
    Locates the highest sampled loss.

    Ties are broken toward the smallest alpha. The gap is measured against the
    higher endpoint loss and is 0 when the maximum sits on an endpoint.
    """
    if len(curve) == 0:
        raise ValueError("cannot find a barrier on an empty curve")
    index = int(np.argmax(curve.losses))
    max_loss = float(curve.losses[index])
    endpoints = (float(curve.losses[0]), float(curve.losses[-1]))
    interior = 0 < index < len(curve) - 1
    gap = max_loss - max(endpoints) if interior else 0.0
    return BarrierReport(max_loss, float(curve.alphas[index]), max(gap, 0.0), endpoints)


def is_delta_connected(curve: LossCurve, delta: float) -> bool:
    """True iff every sampled loss is <= delta."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    return bool(np.all(curve.losses <= delta))


def difference_pattern(b: Tensor, b_prime: Tensor) -> Tensor:
    """
    The optimised change B' - B scaled to unit max-abs intensity (zeros if B' == B).

    Along the refined segment A -> B' the deviation from the straight chord at
    fraction t of the way to B' equals t * (B' - B), so this pattern appears
    scaled by the interpolation factor.
    """
    diff = np.asarray(b_prime, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    peak = float(np.max(np.abs(diff))) if diff.size else 0.0
    return diff / peak if peak > 0 else np.zeros_like(diff)


def point_at(path: Path, alpha: float) -> Tensor:
    """The point of `path` at global position alpha in [0, 1]."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    n_segments = path.num_segments
    s = min(int(alpha * n_segments), n_segments - 1)
    t = alpha * n_segments - s
    return interpolate(path.waypoints[s + 1], path.waypoints[s], min(max(t, 0.0), 1.0))


def difference_scaling(path: Path, b: Tensor, b_prime: Tensor, alphas: Sequence[float]) -> np.ndarray:
    """
    Intensity of the pattern B' - B in the path's deviation from its end-to-end chord.

    For each alpha the path point's displacement from the first waypoint is
    projected off the chord direction and regressed onto B' - B. On a path
    A -> B' -> C with B on the chord A-C this rises linearly to 1 at the joint
    and falls back to 0 at C.
    """
    start, end = path.waypoints[0], path.waypoints[-1]
    chord = (end - start).ravel()
    pattern = (np.asarray(b_prime, dtype=np.float64) - np.asarray(b, dtype=np.float64)).ravel()
    chord_sq = float(chord @ chord)
    pattern_sq = float(pattern @ pattern)
    if pattern_sq == 0.0:
        return np.zeros(len(alphas))
    scales = np.empty(len(alphas))
    for i, alpha in enumerate(alphas):
        dev = (point_at(path, float(alpha)) - start).ravel()
        if chord_sq > 0.0:
            dev = dev - (float(dev @ chord) / chord_sq) * chord
        scales[i] = float(dev @ pattern) / pattern_sq
    return scales


def write_curve_csv(curve: LossCurve, filepath: str) -> None:
    """Writes `alpha,loss,segment` rows with 17 significant digits."""
    with open(filepath, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["alpha", "loss", "segment"])
        for alpha, loss, segment in zip(curve.alphas, curve.losses, curve.segments):
            writer.writerow([format_real(alpha), format_real(loss), int(segment)])
    logger.debug(f"Wrote {len(curve)} curve points to {filepath}")


def read_curve_csv(filepath: str, boundaries: Sequence[float] = ()) -> LossCurve:
    """Reads a curve written by `write_curve_csv`."""
    alphas: List[float] = []
    losses: List[float] = []
    segments: List[int] = []
    with open(filepath, "r", encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            alphas.append(float(row["alpha"]))
            losses.append(float(row["loss"]))
            segments.append(int(row["segment"]))
    n_segments = (max(segments) + 1) if segments else 1
    bounds = np.asarray(boundaries, dtype=np.float64) if len(boundaries) else \
        np.arange(n_segments + 1, dtype=np.float64) / n_segments
    return LossCurve(np.array(alphas), np.array(losses), np.array(segments, dtype=np.int64), bounds)
