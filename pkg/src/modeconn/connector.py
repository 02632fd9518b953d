"""
Bypasses loss barriers between input-space modes.

The highest-loss interpolant B between two modes A and C is optimised within
the hyperplane orthogonal to the chord C - A, and the resulting B' replaces the
barrier. Applying this recursively to each segment that still exceeds delta
yields a piecewise-linear delta-connected path.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from . import config
from .exceptions import DegenerateChordError, NotConnectedError, OptimizationError
from .netcore import AdamState, Network, Tensor, adam_step, batch_losses, loss_and_input_gradient
from .paths import (LossCurve, Path, find_barrier, interpolate, is_delta_connected,
                    sample_loss_curve, write_curve_csv)
from .storage import save_blob, write_json

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConnectorConfig:
    """
    Settings of the barrier optimisation and of the recursive refinement.

    Attributes:
        lr: Adam learning rate.
        iters: Adam iterations per barrier point.
        lambda_mse: Weight of the mean squared deviation from B.
        lambda_hf: Weight of the high-frequency penalty (useful range 1e-8 to 5e-6).
        delta: Loss threshold of delta-connectivity.
        max_depth: Maximum recursion depth.
        clamp_range: Elementwise bounds applied after each step, or None.
        n_primary: Curve points used on the initial two-waypoint path.
        n_segment: Curve points per segment of refined paths.
    """
    lr: float = config.CONNECTOR_LR
    iters: int = config.CONNECTOR_ITERS
    lambda_mse: float = config.CONNECTOR_LAMBDA_MSE
    lambda_hf: float = config.CONNECTOR_LAMBDA_HF
    delta: float = config.DEFAULT_DELTA
    max_depth: int = config.CONNECTOR_MAX_DEPTH
    clamp_range: Optional[Tuple[float, float]] = config.DATA_RANGE
    n_primary: int = config.PRIMARY_CURVE_POINTS
    n_segment: int = config.SEGMENT_CURVE_POINTS

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.lambda_mse < 0 or self.lambda_hf < 0:
            raise ValueError("lambda_mse and lambda_hf must be non-negative")
        if self.iters < 1 or self.max_depth < 1:
            raise ValueError("iters and max_depth must be positive")
        if self.clamp_range is not None and self.clamp_range[0] >= self.clamp_range[1]:
            raise ValueError("clamp_range must be (lo, hi) with lo < hi")
        lo, hi = config.CONNECTOR_LAMBDA_HF_RANGE
        if self.lambda_hf and not lo <= self.lambda_hf <= hi:
            logger.warning(f"lambda_hf={self.lambda_hf} lies outside the tested range [{lo}, {hi}]")


def hf_penalty(x: Tensor) -> float:
    """
    Sum over channels of squared differences between horizontally and vertically
    adjacent pixels of a (channels, height, width) image.
    """
    img = _as_image(x)
    horizontal = img[:, :, 1:] - img[:, :, :-1]
    vertical = img[:, 1:, :] - img[:, :-1, :]
    return float(np.sum(horizontal * horizontal) + np.sum(vertical * vertical))


def hf_penalty_gradient(x: Tensor) -> Tensor:
    """Gradient of `hf_penalty` with respect to the image."""
    img = _as_image(x)
    grad = np.zeros_like(img)
    horizontal = 2.0 * (img[:, :, 1:] - img[:, :, :-1])
    grad[:, :, 1:] += horizontal
    grad[:, :, :-1] -= horizontal
    vertical = 2.0 * (img[:, 1:, :] - img[:, :-1, :])
    grad[:, 1:, :] += vertical
    grad[:, :-1, :] -= vertical
    return grad


def _as_image(x: Tensor) -> Tensor:
    img = np.asarray(x, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"high-frequency penalty needs a (C, H, W) image, got shape {img.shape}")
    return img


class _Hyperplane:
    """Projection onto {v : v . normal = 0}."""

    def __init__(self, normal: Tensor):
        flat = np.asarray(normal, dtype=np.float64).ravel()
        norm = float(np.linalg.norm(flat))
        if norm == 0.0:
            raise DegenerateChordError("chord endpoints A and C coincide")
        self.unit = flat / norm
        self.norm = norm

    def project(self, v: Tensor) -> Tensor:
        flat = v.ravel()
        return (flat - (flat @ self.unit) * self.unit).reshape(v.shape)

    def residual(self, v: Tensor) -> float:
        """|v . n| / (|v| |n|) for the unit normal n; 0 for v == 0."""
        flat = v.ravel()
        size = float(np.linalg.norm(flat))
        return abs(float(flat @ self.unit)) / size if size > 0 else 0.0


def penalized_objective(net: Network, x: Tensor, anchor: Tensor, y: int, lambda_mse: float,
                        lambda_hf: float) -> Tuple[float, float, Tensor]:
    """
    Cross-entropy plus lambda_mse * MSE(x, anchor) plus lambda_hf * hf_penalty(x).

    Returns:
        (cross-entropy, total objective, gradient of the total with respect to x).
    """
    loss, grad = loss_and_input_gradient(net, x, y)
    diff = x - anchor
    total = loss + lambda_mse * float(np.mean(diff * diff))
    grad = grad + lambda_mse * 2.0 * diff / diff.size
    if lambda_hf:
        total += lambda_hf * hf_penalty(x)
        grad = grad + lambda_hf * hf_penalty_gradient(x)
    return loss, total, grad


def _clamp_on_plane(x: Tensor, anchor: Tensor, plane: _Hyperplane, bounds: Tuple[float, float],
                    rounds: int = 10) -> Tensor:
    # Alternate between the box and the hyperplane; the last operation is always
    # the projection, so the orthogonality constraint holds exactly.
    lo, hi = bounds
    for _ in range(rounds):
        clipped = np.clip(x, lo, hi)
        x = anchor + plane.project(clipped - anchor)
        if np.all(x >= lo - 1e-12) and np.all(x <= hi + 1e-12):
            break
    return x


def optimize_barrier_point(net: Network, a: Tensor, c: Tensor, b: Tensor, y: int,
                           cfg: ConnectorConfig) -> Tensor:
    """
    Optimises a barrier point within the hyperplane orthogonal to the chord A -> C.

    The objective is cross-entropy + lambda_mse * MSE(B', B) + lambda_hf * hf_penalty(B').
    Each Adam step uses the gradient projected onto the hyperplane, and the
    cumulative displacement B' - B is projected again after every update. The
    iterate with the lowest objective whose loss does not exceed loss(B) is
    returned (B itself if none improves).

    Args:
        net: The frozen network.
        a: Start of the chord.
        c: End of the chord.
        b: The barrier point (normally on the chord).
        y: The class whose loss is minimised.
        cfg: Optimisation settings.

    Returns:
        The optimised point B'.

    Raises:
        DegenerateChordError: If A == C.
        OptimizationError: If the objective becomes non-finite.
    """
    anchor = np.asarray(b, dtype=np.float64)
    plane = _Hyperplane(np.asarray(c, dtype=np.float64) - np.asarray(a, dtype=np.float64))
    x = anchor.copy()
    state = AdamState.zeros(anchor.shape)

    start_loss, best_total, _ = penalized_objective(net, anchor, anchor, y, cfg.lambda_mse, cfg.lambda_hf)
    best = anchor.copy()
    for it in range(cfg.iters + 1):
        loss, total, grad = penalized_objective(net, x, anchor, y, cfg.lambda_mse, cfg.lambda_hf)
        if not (np.isfinite(total) and np.all(np.isfinite(grad))):
            raise OptimizationError(f"barrier objective became non-finite at iteration {it}")
        # Only iterates that do not raise the loss above B's may replace it.
        if total < best_total and loss <= start_loss:
            best_total = total
            best = x.copy()
        if it == cfg.iters:
            break
        # Adam rescales per coordinate, so its step leaves the plane even for a
        # projected gradient; re-project the whole displacement from B.
        state, step = adam_step(state, plane.project(grad), cfg.lr)
        x = anchor + plane.project(x + step - anchor)
        if cfg.clamp_range is not None:
            x = _clamp_on_plane(x, anchor, plane, cfg.clamp_range)
    logger.debug(f"Barrier point: loss {start_loss:.6g} -> objective {best_total:.6g}")
    return best


@dataclass
class Refinement:
    """One barrier bypass: the point B found on a segment and its replacement B'."""
    level: int
    alpha: float
    b: Tensor
    b_prime: Tensor
    loss_b: float
    loss_b_prime: float
    orthogonality_residual: float

    def to_dict(self) -> Dict[str, Any]:
        return {"level": self.level, "alpha": self.alpha, "loss_b": self.loss_b,
                "loss_b_prime": self.loss_b_prime, "orthogonality_residual": self.orthogonality_residual,
                "pattern_max_abs_change": float(np.max(np.abs(self.b_prime - self.b))) if self.b.size else 0.0}


@dataclass
class ConnectionResult:
    """
    Outcome of `connect`.

    Attributes:
        path: The delta-connected piecewise-linear path, A first and C last.
        curve: Loss curve sampled along the path.
        primary_curve: Loss curve of the straight segment A -> C.
        depth_used: Deepest recursion level at which a barrier was optimised.
        refinements: Every barrier bypass performed, in path order.
    """
    path: Path
    curve: LossCurve
    primary_curve: LossCurve
    depth_used: int
    refinements: List[Refinement] = field(default_factory=list)

    @property
    def orthogonality_residuals(self) -> List[float]:
        return [r.orthogonality_residual for r in self.refinements]

    @property
    def num_segments(self) -> int:
        return self.path.num_segments


def connect(net: Network, a: Tensor, c: Tensor, y: int, cfg: ConnectorConfig) -> ConnectionResult:
    """
    Builds a delta-connected piecewise-linear path between two modes.

    The segment is sampled; if it is not delta-connected its highest-loss point B
    is replaced by B' (see `optimize_barrier_point`) and both halves are refined
    recursively, up to cfg.max_depth levels.

    Args:
        net: The frozen network.
        a: First mode (loss <= cfg.delta).
        c: Second mode (loss <= cfg.delta).
        y: The class.
        cfg: Settings.

    Returns:
        A ConnectionResult whose path starts at `a` and ends at `c` exactly.

    Raises:
        ValueError: If an endpoint is not a mode.
        NotConnectedError: If depth runs out; it carries the best path and curve.
    """
    a = np.asarray(a, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    endpoint_losses = batch_losses(net, np.stack([a, c]), y)
    if np.any(endpoint_losses > cfg.delta):
        raise ValueError(f"endpoint losses {endpoint_losses.tolist()} exceed delta={cfg.delta}; "
                         f"both endpoints must be modes")

    primary = sample_loss_curve(net, Path([a, c], y), cfg.n_primary)
    refinements: List[Refinement] = []
    deepest = [0]

    def bridge(start: Tensor, end: Tensor, level: int, curve: Optional[LossCurve]) -> Tuple[List[Tensor], bool]:
        if curve is None:
            curve = sample_loss_curve(net, Path([start, end], y), cfg.n_segment)
        if is_delta_connected(curve, cfg.delta):
            return [start, end], True
        if level >= cfg.max_depth:
            return [start, end], False
        barrier = find_barrier(curve)
        b = interpolate(end, start, barrier.argmax_alpha)
        b_prime = optimize_barrier_point(net, start, end, b, y, cfg)
        loss_b_prime = float(batch_losses(net, b_prime[None], y)[0])
        plane = _Hyperplane(end - start)
        refinements.append(Refinement(level + 1, barrier.argmax_alpha, b, b_prime, barrier.max_loss,
                                      loss_b_prime, plane.residual(b_prime - b)))
        deepest[0] = max(deepest[0], level + 1)
        logger.info(f"Level {level + 1}: barrier {barrier.max_loss:.4g} at alpha={barrier.argmax_alpha:.3f} "
                    f"-> B' loss {loss_b_prime:.4g}")
        if np.array_equal(b_prime, start) or np.array_equal(b_prime, end):
            return [start, end], False
        if loss_b_prime > cfg.delta:
            return [start, b_prime, end], False
        left, left_ok = bridge(start, b_prime, level + 1, None)
        right, right_ok = bridge(b_prime, end, level + 1, None)
        return left + right[1:], left_ok and right_ok

    if np.array_equal(a, c):
        waypoints, ok = [a, c], True
    else:
        waypoints, ok = bridge(a, c, 0, primary)
    waypoints[0], waypoints[-1] = a, c
    path = Path(waypoints, y)
    curve = primary if path.num_segments == 1 else sample_loss_curve(net, path, cfg.n_segment)
    ok = ok and is_delta_connected(curve, cfg.delta)
    refinements.sort(key=lambda r: _position_key(path, r.b_prime))

    if not ok:
        raise NotConnectedError(f"path not delta-connected (delta={cfg.delta}) within depth {cfg.max_depth}",
                                path=path, curve=curve)
    logger.info(f"Connected with {path.num_segments} segment(s), depth {deepest[0]}, "
                f"max loss {float(np.max(curve.losses)):.3g}")
    return ConnectionResult(path, curve, primary, deepest[0], refinements)


def _position_key(path: Path, point: Tensor) -> int:
    for index, waypoint in enumerate(path.waypoints):
        if np.array_equal(waypoint, point):
            return index
    return len(path.waypoints)


def write_connection_report(result: ConnectionResult, out_dir: str, name: str = "connection",
                            extra: Optional[Dict[str, Any]] = None) -> str:
    """
    Writes the waypoints blob, the curve CSV and a JSON report into `out_dir`.

    Returns:
        The path of the JSON report.
    """
    os.makedirs(out_dir, exist_ok=True)
    blob_file = f"{name}_waypoints.bin"
    curve_file = f"{name}_curve.csv"
    primary_file = f"{name}_primary_curve.csv"
    save_blob(os.path.join(out_dir, blob_file), {"kind": "waypoints", "target_class": result.path.target_class},
              [(f"waypoint_{i}", w) for i, w in enumerate(result.path.waypoints)])
    write_curve_csv(result.curve, os.path.join(out_dir, curve_file))
    write_curve_csv(result.primary_curve, os.path.join(out_dir, primary_file))
    report: Dict[str, Any] = {
        "target_class": result.path.target_class,
        "num_segments": result.num_segments,
        "depth_used": result.depth_used,
        "segment_max_loss": result.curve.segment_max(),
        "primary_barrier": find_barrier(result.primary_curve).to_dict(),
        "final_barrier": find_barrier(result.curve).to_dict(),
        "refinements": [r.to_dict() for r in result.refinements],
        "waypoints_file": blob_file,
        "curve_file": curve_file,
        "primary_curve_file": primary_file,
    }
    if extra:
        report.update(extra)
    report_path = os.path.join(out_dir, f"{name}.json")
    write_json(report_path, report)
    return report_path

