"""
Synthetic class-optimal inputs by feature visualisation by optimisation (FVO).

Starting from small Gaussian noise, an input is optimised with Adam until its
cross-entropy for the chosen class falls below a threshold. The driving
objective is either the cross-entropy itself or a surrogate built from the dot
product and cosine similarity between the logits and the one-hot target. An
optional high-frequency penalty diversifies the optima.
"""
import logging
from dataclasses import asdict, dataclass, replace
from typing import Any, Dict, Tuple

import numpy as np

from . import config
from .connector import hf_penalty, hf_penalty_gradient
from .exceptions import ThresholdNotReachedError
from .netcore import (AdamState, Network, Tensor, adam_step, cross_entropy, forward_logits, input_vjp,
                      loss_and_input_gradient)
from .storage import save_blob, write_json
from .utils import spawn_rng

logger = logging.getLogger(__name__)

OBJECTIVES: Tuple[str, ...] = ("cross_entropy", "surrogate")


@dataclass(frozen=True)
class FvoConfig:
    init_std: float = config.FVO_INIT_STD
    lr: float = config.FVO_LR
    weight_decay: float = config.FVO_WEIGHT_DECAY
    max_iters: int = config.FVO_MAX_ITERS
    loss_threshold: float = config.FVO_LOSS_THRESHOLD
    hf_weight: float = 0.0
    objective: str = "cross_entropy"

    def __post_init__(self) -> None:
        if self.init_std <= 0:
            raise ValueError("init_std must be positive")
        if self.loss_threshold <= 0:
            raise ValueError("loss_threshold must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.hf_weight < 0 or self.weight_decay < 0:
            raise ValueError("hf_weight and weight_decay must be non-negative")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got '{self.objective}'")


@dataclass
class SyntheticInput:
    """A generated optimum with its cross-entropy and the iterations it took."""
    input: Tensor
    target_class: int
    loss: float
    iterations: int
    seed: int
    cfg: FvoConfig


def surrogate_objective(logits: Tensor, y: int) -> float:
    """
    0.5 * (logits . t) * sqrt(max(0, cos(logits, t))) with t the one-hot of y.

    The value is to be maximised. A zero logit vector gives 0.
    """
    z = np.asarray(logits, dtype=np.float64)
    norm = float(np.linalg.norm(z))
    if norm == 0.0:
        return 0.0
    dot = float(z[y])
    cosine = dot / norm
    return 0.5 * dot * float(np.sqrt(max(0.0, cosine)))


def surrogate_gradient(logits: Tensor, y: int) -> Tensor:
    """Gradient of `surrogate_objective` with respect to the logits (zero where cos <= 0)."""
    z = np.asarray(logits, dtype=np.float64)
    norm = float(np.linalg.norm(z))
    grad = np.zeros_like(z)
    if norm == 0.0 or z[y] <= 0.0:
        return grad
    # On cos > 0 the objective is 0.5 * z_y^1.5 * |z|^-0.5.
    zy = float(z[y])
    grad -= 0.25 * zy ** 1.5 * norm ** -2.5 * z
    grad[y] += 0.75 * zy ** 0.5 * norm ** -0.5
    return grad


def _driving_gradient(net: Network, x: Tensor, y: int, objective: str) -> Tuple[float, Tensor]:
    """Returns (cross-entropy at x, gradient of the minimised objective)."""
    if objective == "cross_entropy":
        return loss_and_input_gradient(net, x, y)
    logits = forward_logits(net, x)
    cotangent = -surrogate_gradient(logits, y)
    if logits[y] <= 0.0:
        # The surrogate is flat while the target logit is non-positive; push the logit up directly.
        cotangent = np.zeros_like(logits)
        cotangent[y] = -0.5
    _, grad = input_vjp(net, x, cotangent)
    return cross_entropy(logits, y), grad


def generate_optimal_input(net: Network, y: int, cfg: FvoConfig, seed: int) -> SyntheticInput:
    """
    Optimises Gaussian noise into an input whose cross-entropy for class y is at
    most cfg.loss_threshold.

    Weight decay acts on the input itself. Optimisation stops as soon as the
    threshold is met; the result is a pure function of (net, y, cfg, seed).

    Raises:
        ValueError: If y is not a class of the network.
        ThresholdNotReachedError: If max_iters pass first; carries the best input.
    """
    if not 0 <= y < net.num_classes:
        raise ValueError(f"class {y} out of range for {net.num_classes} classes")
    rng = spawn_rng(seed, y)
    x = rng.normal(0.0, cfg.init_std, size=net.input_shape)
    state = AdamState.zeros(x.shape)
    best_x, best_loss = x.copy(), float("inf")

    for it in range(cfg.max_iters):
        loss, grad = _driving_gradient(net, x, y, cfg.objective)
        if loss < best_loss:
            best_x, best_loss = x.copy(), loss
        if loss <= cfg.loss_threshold:
            logger.debug(f"Class {y}, seed {seed}: loss {loss:.3g} after {it} iterations")
            return SyntheticInput(x, y, loss, it, seed, cfg)
        if cfg.weight_decay:
            grad = grad + cfg.weight_decay * x
        if cfg.hf_weight:
            grad = grad + cfg.hf_weight * hf_penalty_gradient(x)
        state, step = adam_step(state, grad, cfg.lr)
        x = x + step

    final_loss = cross_entropy(forward_logits(net, x), y)
    if final_loss < best_loss:
        best_x, best_loss = x.copy(), final_loss
    if best_loss <= cfg.loss_threshold:
        return SyntheticInput(best_x, y, best_loss, cfg.max_iters, seed, cfg)
    raise ThresholdNotReachedError(
        f"class {y}: loss {best_loss:.3g} above threshold {cfg.loss_threshold} after {cfg.max_iters} iterations",
        best_input=best_x, best_loss=best_loss, iterations=cfg.max_iters)


def generate_diverse_pair(net: Network, y: int, cfg: FvoConfig,
                          seeds: Tuple[int, int]) -> Tuple[SyntheticInput, SyntheticInput]:
    """
    Two optima of class y: the first without and the second with the
    high-frequency penalty (cfg.hf_weight, or the default diversity weight when
    cfg.hf_weight is 0).
    """
    first_seed, second_seed = seeds
    if first_seed == second_seed:
        raise ValueError("a diverse pair needs two distinct seeds")
    weight = cfg.hf_weight or config.FVO_DIVERSITY_HF_WEIGHT
    plain = generate_optimal_input(net, y, replace(cfg, hf_weight=0.0), first_seed)
    smooth = generate_optimal_input(net, y, replace(cfg, hf_weight=weight), second_seed)
    return plain, smooth


def save_synthetic(result: SyntheticInput, blob_path: str) -> None:
    """Writes the input as a tensor blob plus a JSON sidecar next to it."""
    meta: Dict[str, Any] = {
        "kind": "synthetic_input",
        "target_class": result.target_class,
        "loss": result.loss,
        "iterations": result.iterations,
        "seed": result.seed,
        "config": asdict(result.cfg),
    }
    save_blob(blob_path, meta, [("input", result.input)])
    if result.input.ndim == 3:
        meta["hf_penalty"] = hf_penalty(result.input)
    write_json(blob_path + ".json", meta)
