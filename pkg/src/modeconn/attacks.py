"""
Adversarial example generation.

Implements the untargeted benchmark attacks (FGSM, BIM, PGD, DeepFool and
Carlini-Wagner L2) and a targeted input-optimisation attack that drives a
source image of one class to a low loss for another class while staying close
to the source.
"""
import logging
import os
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import config
from .connector import penalized_objective
from .exceptions import ThresholdNotReachedError
from .netcore import (AdamState, Network, Tensor, adam_step, forward_logits, input_gradient, input_vjp,
                      logit_jacobian)
from .storage import save_blob, write_json
from .utils import ordered_map, spawn_rng

logger = logging.getLogger(__name__)

ATTACK_KINDS: Tuple[str, ...] = ("fgsm", "bim", "pgd", "deepfool", "cw", "targeted_opt")
Bounds = Optional[Tuple[float, float]]


@dataclass(frozen=True)
class AttackConfig:
    """
    Budget of one attack kind. Only the fields of `kind` are used.

    `cw_c` of None selects the constant by binary search over config.CW_C_RANGE.
    """
    kind: str = "fgsm"
    epsilon: float = 0.1
    steps: int = 10
    step_size: float = 0.01
    cw_c: Optional[float] = None
    cw_steps: int = 100
    cw_lr: float = 0.01
    deepfool_steps: int = config.DEEPFOOL_MAX_ITERS
    overshoot: float = config.DEEPFOOL_OVERSHOOT
    targeted_lr: float = config.TARGETED_LR
    lambda_dev: float = config.TARGETED_LAMBDA_DEV
    lambda_hf: float = config.TARGETED_LAMBDA_HF
    targeted_iters: int = config.TARGETED_ITERS
    targeted_threshold: float = config.TARGETED_LOSS_THRESHOLD
    clip_range: Bounds = config.DATA_RANGE

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"attack kind must be one of {ATTACK_KINDS}, got '{self.kind}'")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1 or self.cw_steps < 1 or self.deepfool_steps < 1 or self.targeted_iters < 1:
            raise ValueError("step counts must be >= 1")


@dataclass
class AdversarialExample:
    source: Tensor
    adversarial: Tensor
    source_class: int
    predicted_class: int
    linf: float
    l2: float
    success: bool
    kind: str
    target_class: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "source_class": self.source_class, "predicted_class": self.predicted_class,
                "target_class": self.target_class, "linf": self.linf, "l2": self.l2, "success": self.success}


def make_example(net: Network, source: Tensor, adversarial: Tensor, source_class: int, kind: str,
                 target_class: Optional[int] = None) -> AdversarialExample:
    """Builds an AdversarialExample, deciding success from the network's prediction."""
    predicted = int(np.argmax(forward_logits(net, adversarial)))
    diff = (adversarial - source).ravel()
    if target_class is None:
        success = predicted != source_class
    else:
        success = predicted == target_class
    return AdversarialExample(np.asarray(source), adversarial, int(source_class), predicted,
                              float(np.max(np.abs(diff))) if diff.size else 0.0,
                              float(np.linalg.norm(diff)), bool(success), kind, target_class)


def _signed_step(origin: Tensor, current: Tensor, grad: Tensor, step_size: float, epsilon: float,
                 clip_range: Bounds) -> Tensor:
    candidate = current + step_size * np.sign(grad)
    candidate = np.clip(candidate, origin - epsilon, origin + epsilon)
    if clip_range is not None:
        candidate = np.clip(candidate, clip_range[0], clip_range[1])
    return candidate


def fgsm(net: Network, x: Tensor, y: int, epsilon: float,
         clip_range: Bounds = config.DATA_RANGE) -> AdversarialExample:
    """x + epsilon * sign(grad_x loss), clipped to the epsilon-ball and the data range."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    adv = _signed_step(x, x, input_gradient(net, x, y), epsilon, epsilon, clip_range)
    return make_example(net, x, adv, y, "fgsm")


def _iterate(net: Network, x: Tensor, start: Tensor, y: int, epsilon: float, step_size: float, steps: int,
             clip_range: Bounds) -> Tensor:
    adv = start
    for _ in range(steps):
        adv = _signed_step(x, adv, input_gradient(net, adv, y), step_size, epsilon, clip_range)
    return adv


def bim(net: Network, x: Tensor, y: int, epsilon: float, step_size: float, steps: int,
        clip_range: Bounds = config.DATA_RANGE) -> AdversarialExample:
    """Iterated signed steps, each clipped into the epsilon-ball around x and the data range."""
    if epsilon < 0 or steps < 1:
        raise ValueError("epsilon must be >= 0 and steps >= 1")
    x = np.asarray(x, dtype=np.float64)
    return make_example(net, x, _iterate(net, x, x, y, epsilon, step_size, steps, clip_range), y, "bim")


def pgd(net: Network, x: Tensor, y: int, epsilon: float, step_size: float, steps: int, seed: int,
        clip_range: Bounds = config.DATA_RANGE) -> AdversarialExample:
    """BIM started from a uniformly random point of the epsilon-ball; deterministic per seed."""
    if epsilon < 0 or steps < 1:
        raise ValueError("epsilon must be >= 0 and steps >= 1")
    x = np.asarray(x, dtype=np.float64)
    start = x + spawn_rng(seed).uniform(-epsilon, epsilon, size=x.shape)
    if clip_range is not None:
        start = np.clip(start, clip_range[0], clip_range[1])
    return make_example(net, x, _iterate(net, x, start, y, epsilon, step_size, steps, clip_range), y, "pgd")


def deepfool(net: Network, x: Tensor, steps_max: int = config.DEEPFOOL_MAX_ITERS,
             overshoot: float = config.DEEPFOOL_OVERSHOOT, clip_range: Bounds = None) -> AdversarialExample:
    """
    DeepFool: repeatedly step to the closest hyperplane of the linearised
    decision boundaries until the predicted class changes.

    The accumulated perturbation is scaled by (1 + overshoot). The source class
    is the network's own prediction on x; `success` is False if the class has
    not changed after steps_max iterations.
    """
    x0 = np.asarray(x, dtype=np.float64)
    logits = forward_logits(net, x0)
    original = int(np.argmax(logits))
    r_total = np.zeros_like(x0)
    current = x0
    for _ in range(steps_max):
        logits, jac = logit_jacobian(net, current)
        if int(np.argmax(logits)) != original:
            break
        w = jac - jac[original]
        f = logits - logits[original]
        best_pert, best_dir = np.inf, None
        for k in range(net.num_classes):
            if k == original:
                continue
            w_norm = float(np.linalg.norm(w[k]))
            if w_norm == 0.0:
                continue
            pert = abs(float(f[k])) / w_norm
            if pert < best_pert:
                best_pert, best_dir = pert, w[k] / w_norm
        if best_dir is None:
            logger.warning("DeepFool: all logit differences have zero gradient; stopping")
            break
        r_total = r_total + (best_pert + 1e-4) * best_dir
        current = x0 + (1.0 + overshoot) * r_total
        if clip_range is not None:
            current = np.clip(current, clip_range[0], clip_range[1])
    return make_example(net, x0, current, original, "deepfool")


def _cw_run(net: Network, x: Tensor, y: int, c: float, steps: int, lr: float,
            kappa: float) -> Tuple[Optional[Tensor], Tensor]:
    """One C&W optimisation at a fixed c. Returns (best successful iterate or None, last iterate)."""
    # Pull the start off 0 and 1 so arctanh stays finite.
    squeezed = np.clip(x, config.CW_SQUEEZE, 1.0 - config.CW_SQUEEZE)
    w = np.arctanh(2.0 * squeezed - 1.0)
    state = AdamState.zeros(w.shape)
    best, best_l2 = None, np.inf
    onehot_y = np.eye(net.num_classes)[y]
    adv = 0.5 * (np.tanh(w) + 1.0)
    for step in range(steps + 1):
        tanh_w = np.tanh(w)
        adv = 0.5 * (tanh_w + 1.0)
        logits = forward_logits(net, adv)
        others = logits.copy()
        others[y] = -np.inf
        runner_up = int(np.argmax(others))
        # Keep the closest misclassified iterate, not the last one.
        if int(np.argmax(logits)) != y:
            l2 = float(np.linalg.norm(adv - x))
            if l2 < best_l2:
                best, best_l2 = adv.copy(), l2
        if step == steps:
            break
        grad_adv = 2.0 * (adv - x)
        # Hinge on the strongest competing logit; no gradient once it leads by kappa.
        margin = logits[y] - logits[runner_up] + kappa
        if c and margin > 0:
            _, margin_grad = input_vjp(net, adv, onehot_y - np.eye(net.num_classes)[runner_up])
            grad_adv = grad_adv + c * margin_grad
        # Chain rule through adv = (tanh(w) + 1) / 2.
        state, update = adam_step(state, grad_adv * 0.5 * (1.0 - tanh_w * tanh_w), lr)
        w = w + update
    return best, adv


def cw(net: Network, x: Tensor, y: int, c: Optional[float] = None, steps: int = 100, lr: float = 0.01,
       kappa: float = config.CW_KAPPA) -> AdversarialExample:
    """
    Carlini-Wagner L2 attack in tanh space.

    Minimises |adv - x|^2 + c * max(0, z_y - max_{j != y} z_j + kappa) with Adam
    over w, where adv = (tanh(w) + 1) / 2, and returns the successful iterate
    with the smallest L2 distance. With c None, c is chosen by a geometric binary
    search over config.CW_C_RANGE (config.CW_SEARCH_STEPS rounds).
    """
    x = np.asarray(x, dtype=np.float64)
    if c is not None:
        best, last = _cw_run(net, x, y, c, steps, lr, kappa)
        return make_example(net, x, best if best is not None else last, y, "cw")

    lo, hi = config.CW_C_RANGE
    found: Optional[Tensor] = None
    fallback: Tensor = x
    for _ in range(config.CW_SEARCH_STEPS):
        c_try = float(np.sqrt(lo * hi))
        # Success shrinks the upper end of c, failure raises the lower end.
        best, last = _cw_run(net, x, y, c_try, steps, lr, kappa)
        fallback = last
        if best is not None:
            if found is None or np.linalg.norm(best - x) < np.linalg.norm(found - x):
                found = best
            hi = c_try
        else:
            lo = c_try
    return make_example(net, x, found if found is not None else fallback, y, "cw")


def targeted_optimization(net: Network, source: Tensor, target_class: int, cfg: AttackConfig) -> AdversarialExample:
    """
    Drives `source` to a low cross-entropy for `target_class` while penalising
    its mean squared deviation from the source and its high-frequency content.

    Returns the first iterate whose target-class loss is at most
    cfg.targeted_threshold, however large its penalties.

    Raises:
        ValueError: If the source is already predicted as the target class.
        ThresholdNotReachedError: If the target-class loss stays above
            cfg.targeted_threshold; carries the best input.
    """
    source = np.asarray(source, dtype=np.float64)
    source_class = int(np.argmax(forward_logits(net, source)))
    if source_class == target_class:
        raise ValueError(f"source is already classified as the target class {target_class}")
    lambda_hf = cfg.lambda_hf if source.ndim == 3 else 0.0
    x = source.copy()
    state = AdamState.zeros(x.shape)
    best, best_loss = x.copy(), np.inf
    for it in range(cfg.targeted_iters + 1):
        loss, _, grad = penalized_objective(net, x, source, target_class, cfg.lambda_dev, lambda_hf)
        # The penalties shape the descent only; acceptance looks at the target-class loss alone.
        if loss < best_loss:
            best, best_loss = x.copy(), loss
        if loss <= cfg.targeted_threshold:
            logger.debug(f"Target class {target_class}: loss {loss:.3g} after {it} iterations")
            return make_example(net, source, x, source_class, "targeted_opt", target_class)
        if it == cfg.targeted_iters:
            break
        state, step = adam_step(state, grad, cfg.targeted_lr)
        x = x + step
        if cfg.clip_range is not None:
            x = np.clip(x, cfg.clip_range[0], cfg.clip_range[1])
    raise ThresholdNotReachedError(
        f"targeted attack reached loss {best_loss:.3g} > {cfg.targeted_threshold} for class {target_class}",
        best_input=best, best_loss=best_loss, iterations=cfg.targeted_iters)


def run_attack(net: Network, x: Tensor, y: int, cfg: AttackConfig, seed: int = 0,
               target_class: Optional[int] = None) -> AdversarialExample:
    """Dispatches one input to the attack named by cfg.kind."""
    if cfg.kind == "fgsm":
        return fgsm(net, x, y, cfg.epsilon, cfg.clip_range)
    if cfg.kind == "bim":
        return bim(net, x, y, cfg.epsilon, cfg.step_size, cfg.steps, cfg.clip_range)
    if cfg.kind == "pgd":
        return pgd(net, x, y, cfg.epsilon, cfg.step_size, cfg.steps, seed, cfg.clip_range)
    if cfg.kind == "deepfool":
        return deepfool(net, x, cfg.deepfool_steps, cfg.overshoot, cfg.clip_range)
    if cfg.kind == "cw":
        return cw(net, x, y, cfg.cw_c, cfg.cw_steps, cfg.cw_lr)
    if target_class is None:
        # First class after y, cyclically, that differs from the current prediction;
        # y itself only when no other class qualifies.
        predicted = int(np.argmax(forward_logits(net, x)))
        order = [(int(y) + step) % net.num_classes for step in range(1, net.num_classes + 1)]
        target_class = next(k for k in order if k != predicted)
    return targeted_optimization(net, x, target_class, cfg)


def run_batch(net: Network, inputs: Tensor, labels: Sequence[int], cfg: AttackConfig, seed: int,
              workers: int = 0) -> List[AdversarialExample]:
    """
    Attacks every input independently (in parallel when workers allow).

    Input i uses the stream spawn_rng(seed, i), so results do not depend on
    the number of workers. A targeted run that misses its loss threshold is
    kept as an example built from its best iterate.
    """
    def attack_one(index: int) -> AdversarialExample:
        sub_seed = int(spawn_rng(seed, index).integers(0, 2 ** 31 - 1))
        x, y = inputs[index], int(labels[index])
        if cfg.kind != "targeted_opt":
            return run_attack(net, x, y, cfg, sub_seed)
        predicted = int(np.argmax(forward_logits(net, x)))
        choices = [k for k in range(net.num_classes) if k not in (y, predicted)] or \
            [k for k in range(net.num_classes) if k != predicted]
        target = int(spawn_rng(seed, index, 1).choice(choices))
        try:
            return targeted_optimization(net, x, target, cfg)
        except ThresholdNotReachedError as e:
            logger.warning(f"Input {index}: {e}")
            return make_example(net, x, e.best_input, predicted, "targeted_opt", target)

    examples = ordered_map(attack_one, range(len(labels)), workers)
    rate = float(np.mean([e.success for e in examples])) if examples else float("nan")
    logger.info(f"{cfg.kind}: {len(examples)} inputs attacked, success rate {rate:.3f}")
    return examples


def write_attack_manifest(examples: List[AdversarialExample], cfg: AttackConfig, out_dir: str,
                          seed: int, name: Optional[str] = None) -> str:
    """
    Writes the adversarials as one stacked tensor blob and a JSON manifest of
    per-example norms, classes and success flags.

    Returns:
        The manifest path.
    """
    name = name or cfg.kind
    os.makedirs(out_dir, exist_ok=True)
    blob_file = f"{name}_adversarials.bin"
    if examples:
        save_blob(os.path.join(out_dir, blob_file), {"kind": "adversarials", "attack": cfg.kind},
                  [("sources", np.stack([e.source for e in examples])),
                   ("adversarials", np.stack([e.adversarial for e in examples]))])
    manifest: Dict[str, Any] = {
        "attack": cfg.kind,
        "config": asdict(cfg),
        "seed": seed,
        "count": len(examples),
        "success_rate": float(np.mean([e.success for e in examples])) if examples else None,
        "examples": [e.to_dict() for e in examples],
        "tensors_file": blob_file if examples else None,
    }
    path = os.path.join(out_dir, f"{name}_manifest.json")
    write_json(path, manifest)
    return path
