"""
Command-line entry point for the mode connectivity laboratory.

Every subcommand writes its artifacts plus a `manifest.json` (command, config,
seed, content hashes of the input files, timings) into its output directory.
On failure the process exits non-zero and prints a JSON error document to
stderr. Run as `python -m src.modeconn.main <command> --help`.
"""
import argparse
import json
import logging
import os
import re
import sys
import time
from dataclasses import asdict
from typing import Any, Callable, Dict, List, NoReturn, Optional, Sequence, Tuple

import numpy as np

from . import config
from .attacks import ATTACK_KINDS, AttackConfig, run_batch, write_attack_manifest
from .connector import ConnectorConfig, connect, write_connection_report
from .data_loader import ingest_idx, synth_dataset
from .detector import (NATURAL, DetectorConfig, evaluate, fit, load_detector, save_detector, select_templates,
                       write_evaluation_csv)
from .exceptions import ConfigError, ModeConnError, NotConnectedError, UsageError
from .experiments import (ExperimentConfig, compare_gaps, load_dataset, load_experiment_config, run_adversarial_connectivity,
                          run_barrier_stats, run_pair_connectivity, run_synthetic_connectivity,
                          run_training_evolution, run_untrained_connectivity, write_barrier_stats,
                          write_connectivity_report, write_evolution_report)
from .netcore import LabeledDataset, Network, TrainConfig, accuracy, load_checkpoint, predict, save_checkpoint, train
from .paths import Path, find_barrier, sample_loss_curve, write_curve_csv
from .percolation import (connectivity_vs_dimension, cube_side, epsilon_grid, fit_exponential_decay,
                          layer_norm_bounds, layer_spectral_norms, mean_field_P, write_sweep_csv)
from .storage import content_hash, load_blob, read_json_object, require_field, write_json
from .synth import FvoConfig, generate_optimal_input, save_synthetic
from .utils import spawn_rng

logger = logging.getLogger(__name__)

CommandResult = Tuple[Dict[str, Any], List[str]]


# --- Shared argument groups ---

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out-dir", default=None, help="Output directory (default: output/<command>)")
    parser.add_argument("--seed", type=int, default=None, help="Root seed (default 0, or the config's seed)")
    parser.add_argument("--workers", type=int, default=0, help=f"Worker threads (default: ${config.THREADS_ENV_VAR})")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    parser.add_argument("--quiet", action="store_true", help="Log warnings and errors only")


def _add_data(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("dataset (IDX files, or a synthetic dataset when omitted)")
    group.add_argument("--data-images", default=None)
    group.add_argument("--data-labels", default=None)
    group.add_argument("--synth-classes", type=int, default=10)
    group.add_argument("--synth-per-class", type=int, default=100)
    group.add_argument("--synth-spread", type=float, default=0.3)


def _add_checkpoint(parser: argparse.ArgumentParser, required: bool = True) -> None:
    parser.add_argument("--checkpoint", required=required, default=None, help="Network checkpoint (MCNET1 blob)")


def _dataset(args: argparse.Namespace) -> Tuple[LabeledDataset, List[str]]:
    if (args.data_images is None) != (args.data_labels is None):
        raise ConfigError("--data-images and --data-labels must be given together", field="data_labels")
    if args.data_images is not None:
        return ingest_idx(args.data_images, args.data_labels), [args.data_images, args.data_labels]
    return synth_dataset(args.synth_classes, args.synth_per_class, args.synth_spread, args.seed), []


def _network(args: argparse.Namespace) -> Network:
    if not os.path.isfile(args.checkpoint):
        raise ConfigError(f"checkpoint '{args.checkpoint}' does not exist", field="checkpoint")
    return load_checkpoint(args.checkpoint)


def _load_input(source: str, data: Optional[LabeledDataset]) -> Tuple[np.ndarray, Optional[int]]:
    """An input given as a dataset index or as a tensor blob path (first tensor of the blob)."""
    if source.isdigit():
        if data is None:
            raise ConfigError(f"input '{source}' is an index but no dataset is available", field="input")
        index = int(source)
        if index >= len(data):
            raise ConfigError(f"index {index} out of range for {len(data)} inputs", field="input")
        return data.inputs[index], int(data.labels[index])
    if not os.path.isfile(source):
        raise ConfigError(f"input file '{source}' does not exist", field="input")
    header, tensors = load_blob(source)
    target = header.get("target_class")
    return tensors[0][1], (int(target) if target is not None else None)


def _load_attack_manifest(path: str) -> Tuple[str, np.ndarray]:
    """Successful adversarials listed in an attack manifest."""
    manifest = read_json_object(path)
    attack = require_field(manifest, "attack", str, path)
    if not manifest.get("tensors_file"):
        return attack, np.zeros((0,))
    _, tensors = load_blob(os.path.join(os.path.dirname(path), require_field(manifest, "tensors_file", str, path)))
    adversarials = require_field(dict(tensors), "adversarials", np.asarray, path)
    success = require_field(manifest, "examples", lambda v: np.array([bool(e["success"]) for e in v], dtype=bool),
                            path)
    if success.size != adversarials.shape[0]:
        raise ConfigError(f"{path} lists {success.size} examples for {adversarials.shape[0]} adversarials",
                          field="examples")
    return attack, adversarials[success]


def _sample_naturals(net: Network, data: LabeledDataset, count: int, seed: int) -> np.ndarray:
    correct = np.flatnonzero(predict(net, data.inputs) == data.labels)
    if count < correct.size:
        correct = np.sort(spawn_rng(seed, 7).choice(correct, size=count, replace=False))
    return data.inputs[correct]


# --- Commands ---

def cmd_train(args: argparse.Namespace, out_dir: str) -> CommandResult:
    data, inputs = _dataset(args)
    num_classes = args.num_classes or int(data.labels.max()) + 1
    net = Network.from_architecture(args.arch, data.input_shape, num_classes, args.seed)
    opt = TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed)
    trained, log = train(net, data, opt)
    checkpoint = os.path.join(out_dir, "network.bin")
    save_checkpoint(trained, checkpoint)
    train_accuracy = accuracy(trained, data)
    logger.info(f"Training accuracy {train_accuracy:.4f}")
    write_json(os.path.join(out_dir, "training_log.json"),
               [{"batch": e.batch, "epoch": e.epoch, "loss": e.loss} for e in log])
    return {"architecture": args.arch, "train": asdict(opt),
            "train_accuracy": train_accuracy, "num_params": trained.num_params}, inputs


def cmd_connect(args: argparse.Namespace, out_dir: str) -> CommandResult:
    net = _network(args)
    data, inputs = _dataset(args)
    a, label_a = _load_input(args.a, data)
    c, _ = _load_input(args.c, data)
    y = args.target_class if args.target_class is not None else label_a
    if y is None:
        raise ConfigError("the class cannot be inferred from the inputs; pass --class", field="class")
    clamp = None if args.no_clamp else config.DATA_RANGE
    cfg = ConnectorConfig(lr=args.lr, iters=args.iters, lambda_mse=args.lambda_mse, lambda_hf=args.lambda_hf,
                          delta=args.delta, max_depth=args.max_depth, clamp_range=clamp)
    summary: Dict[str, Any] = {"class": y, "connector": asdict(cfg)}
    try:
        result = connect(net, a, c, y, cfg)
    except NotConnectedError as e:
        write_curve_csv(e.curve, os.path.join(out_dir, "best_curve.csv"))
        raise
    write_connection_report(result, out_dir)
    summary.update({"num_segments": result.num_segments, "depth_used": result.depth_used,
                    "orthogonality_residuals": result.orthogonality_residuals})
    return summary, [args.checkpoint] + inputs + [s for s in (args.a, args.c) if not s.isdigit()]


def cmd_curve(args: argparse.Namespace, out_dir: str) -> CommandResult:
    net = _network(args)
    data, inputs = _dataset(args)
    a, label_a = _load_input(args.a, data)
    c, _ = _load_input(args.c, data)
    y = args.target_class if args.target_class is not None else label_a
    if y is None:
        raise ConfigError("the class cannot be inferred from the inputs; pass --class", field="class")
    curve = sample_loss_curve(net, Path([a, c], y), args.points)
    write_curve_csv(curve, os.path.join(out_dir, "curve.csv"))
    barrier = find_barrier(curve)
    write_json(os.path.join(out_dir, "barrier.json"), barrier.to_dict())
    return {"class": y, "points": args.points, "barrier": barrier.to_dict()}, \
        [args.checkpoint] + inputs + [s for s in (args.a, args.c) if not s.isdigit()]


def cmd_fvo(args: argparse.Namespace, out_dir: str) -> CommandResult:
    if args.checkpoint is not None:
        net, inputs = _network(args), [args.checkpoint]
    else:
        shape = (1, config.SYNTH_IMAGE_SIZE, config.SYNTH_IMAGE_SIZE)
        net, inputs = Network.from_architecture(args.arch, shape, args.num_classes, args.seed), []
    cfg = FvoConfig(lr=args.lr, max_iters=args.max_iters, loss_threshold=args.threshold,
                    hf_weight=args.hf_weight, objective=args.objective)
    result = generate_optimal_input(net, args.target_class, cfg, args.seed)
    save_synthetic(result, os.path.join(out_dir, f"synthetic_class{args.target_class}.bin"))
    return {"class": args.target_class, "loss": result.loss, "iterations": result.iterations,
            "objective": cfg.objective, "hf_weight": cfg.hf_weight}, inputs


def cmd_attack(args: argparse.Namespace, out_dir: str) -> CommandResult:
    net = _network(args)
    data, inputs = _dataset(args)
    count = min(args.limit, len(data)) if args.limit else len(data)
    cfg = AttackConfig(kind=args.kind, epsilon=args.epsilon, steps=args.steps, step_size=args.step_size,
                       cw_c=args.cw_c, cw_steps=args.cw_steps)
    examples = run_batch(net, data.inputs[:count], data.labels[:count], cfg, args.seed, args.workers)
    write_attack_manifest(examples, cfg, out_dir, args.seed)
    rate = float(np.mean([e.success for e in examples])) if examples else float("nan")
    return {"attack": cfg.kind, "count": count, "success_rate": rate,
            "epsilon": cfg.epsilon, "steps": cfg.steps, "step_size": cfg.step_size}, [args.checkpoint] + inputs


def cmd_detect_fit(args: argparse.Namespace, out_dir: str) -> CommandResult:
    net = _network(args)
    data, inputs = _dataset(args)
    templates = select_templates(net, data)
    naturals = _sample_naturals(net, data, args.naturals, args.seed)
    adversarial_sets = [_load_attack_manifest(p) for p in args.attacks]
    adversarials = np.concatenate([a for _, a in adversarial_sets if a.size]) if adversarial_sets else np.zeros((0,))
    cfg = DetectorConfig(n_curve=args.curve_points, ablate_logits=args.ablate_logits, seed=args.seed)
    model = fit(net, templates, naturals, adversarials, cfg, args.workers)
    save_detector(model, out_dir)
    return {"k": model.k, "validation_accuracy": model.validation_accuracy, "naturals": len(naturals),
            "adversarials": {kind: int(len(a)) for kind, a in adversarial_sets},
            "balance": len(adversarials) / max(1, len(naturals) + len(adversarials)),
            "n_curve": cfg.n_curve, "ablate_logits": cfg.ablate_logits}, \
        [args.checkpoint] + inputs + list(args.attacks)


def cmd_detect_eval(args: argparse.Namespace, out_dir: str) -> CommandResult:
    net = _network(args)
    data, inputs = _dataset(args)
    model = load_detector(args.detector)
    naturals = _sample_naturals(net, data, args.naturals, args.seed)
    batches: List[np.ndarray] = [naturals]
    kinds: List[str] = [NATURAL] * len(naturals)
    for path in args.attacks:
        kind, adversarials = _load_attack_manifest(path)
        if adversarials.size:
            batches.append(adversarials)
            kinds.extend([kind] * len(adversarials))
    rows = evaluate(model, net, np.concatenate(batches), kinds, args.workers)
    write_evaluation_csv(rows, os.path.join(out_dir, "detection.csv"))
    return {"rows": [asdict(r) for r in rows]}, \
        [args.checkpoint, args.detector] + inputs + list(args.attacks)


def _experiment_config(args: argparse.Namespace, kind: Optional[str]) -> ExperimentConfig:
    overrides = {"kind": kind, "seed": args.seed, "checkpoint": args.checkpoint, "workers": args.workers or None}
    if args.config is not None:
        if not os.path.isfile(args.config):
            raise ConfigError(f"config file '{args.config}' does not exist", field="config")
        cfg = load_experiment_config(args.config, **overrides)
    else:
        cfg = ExperimentConfig.from_dict({k: v for k, v in overrides.items() if v is not None})
    cfg.check_files()
    args.seed = cfg.seed
    return cfg


def _experiment_inputs(args: argparse.Namespace, cfg: ExperimentConfig) -> List[str]:
    return [p for p in (args.config, cfg.checkpoint, cfg.data_images, cfg.data_labels) if p is not None]


def _require_checkpoint(cfg: ExperimentConfig) -> Network:
    if cfg.checkpoint is None:
        raise ConfigError(f"experiment '{cfg.kind}' needs a checkpoint", field="checkpoint")
    return load_checkpoint(cfg.checkpoint)


def cmd_barrier_stats(args: argparse.Namespace, out_dir: str) -> CommandResult:
    cfg = _experiment_config(args, "barrier_stats")
    net = _require_checkpoint(cfg)
    real_real, real_adv = run_barrier_stats(net, load_dataset(cfg), cfg.attack_config() if cfg.adversarial else None,
                                            cfg)
    write_barrier_stats(real_real, out_dir)
    write_barrier_stats(real_adv, out_dir)
    comparison = compare_gaps(real_real, real_adv)
    write_json(os.path.join(out_dir, "comparison.json"), comparison)
    return {"experiment": cfg.to_dict(), "comparison": comparison}, _experiment_inputs(args, cfg)


def cmd_evolve(args: argparse.Namespace, out_dir: str) -> CommandResult:
    cfg = _experiment_config(args, "evolution")
    report = run_training_evolution(load_dataset(cfg), cfg)
    write_evolution_report(report, out_dir)
    return {"experiment": cfg.to_dict()}, _experiment_inputs(args, cfg)


def cmd_experiment(args: argparse.Namespace, out_dir: str) -> CommandResult:
    if args.config is None:
        raise ConfigError("the experiment command needs --config", field="config")
    cfg = _experiment_config(args, None)
    if cfg.kind == "barrier_stats":
        return cmd_barrier_stats(args, out_dir)
    if cfg.kind == "evolution":
        return cmd_evolve(args, out_dir)
    if cfg.kind == "untrained":
        report = run_untrained_connectivity(cfg.seed, cfg)
    elif cfg.kind == "pair_connectivity":
        report = run_pair_connectivity(_require_checkpoint(cfg), load_dataset(cfg), cfg)
    elif cfg.kind == "adversarial_connectivity":
        report = run_adversarial_connectivity(_require_checkpoint(cfg), load_dataset(cfg), cfg.attack_config(), cfg)
    else:
        report = run_synthetic_connectivity(_require_checkpoint(cfg), cfg)
    write_connectivity_report(report, out_dir)
    return {"experiment": cfg.to_dict(), "success_rate": report.success_rate}, _experiment_inputs(args, cfg)


def cmd_percolate(args: argparse.Namespace, out_dir: str) -> CommandResult:
    rows = connectivity_vs_dimension(args.dims, args.q, args.mode, args.max_sites, args.trials, args.seed,
                                     args.periodic, args.workers)
    write_sweep_csv(rows, os.path.join(out_dir, "sweep.csv"))
    summary: Dict[str, Any] = {"q": args.q, "mode": args.mode, "dims": list(args.dims), "trials": args.trials,
                               "max_sites": args.max_sites, "periodic": args.periodic,
                               "mean_field_P": mean_field_P(args.q)}
    try:
        rate, intercept = fit_exponential_decay(rows)
        summary["decay_fit"] = {"rate": rate, "intercept": intercept}
    except ModeConnError as e:
        logger.warning(f"No exponential fit: {e}")
        summary["decay_fit"] = None
    write_json(os.path.join(out_dir, "sweep_summary.json"), summary)
    return summary, []


def cmd_lipschitz(args: argparse.Namespace, out_dir: str) -> CommandResult:
    net = _network(args)
    norms = layer_spectral_norms(net, args.seed)
    bounds = layer_norm_bounds(net)
    bound = float(np.prod(bounds))
    result: Dict[str, Any] = {"layer_spectral_norms": norms, "layer_norm_bounds": bounds, "lipschitz_bound": bound}
    if args.delta is not None and args.delta_prime is not None:
        eps = epsilon_grid(bound, args.delta, args.delta_prime)
        result.update({"delta": args.delta, "delta_prime": args.delta_prime, "epsilon": eps,
                       "cube_side": cube_side(eps, int(np.prod(net.input_shape)))})
    write_json(os.path.join(out_dir, "lipschitz.json"), result)
    return result, [args.checkpoint]


# --- Parser ---

class JsonErrorParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of printing usage and exiting."""

    _ARGUMENT = re.compile(r"argument ([^:]+):")
    _LISTED = re.compile(r"(?:unrecognized arguments|the following arguments are required): (\S+?),?(?:\s|$)")

    def error(self, message: str) -> NoReturn:
        # The culprit appears as "argument X:" or as the first name after "...: ".
        match = self._ARGUMENT.search(message) or self._LISTED.search(message)
        field = match.group(1).split("/")[0] if match else None
        raise UsageError(f"{self.prog}: {message}", field=field)


def build_parser() -> argparse.ArgumentParser:
    parser = JsonErrorParser(prog="modeconn", description="Input-space mode connectivity laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train a reference network")
    _add_common(p)
    _add_data(p)
    p.add_argument("--arch", choices=sorted(config.ARCHITECTURES), default="cnn")
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--epochs", type=int, default=config.DEFAULT_EPOCHS)
    p.add_argument("--lr", type=float, default=config.DEFAULT_TRAIN_LR)
    p.add_argument("--batch-size", type=int, default=config.DEFAULT_BATCH_SIZE)
    p.set_defaults(handler=cmd_train)

    for name, handler, help_text in (("connect", cmd_connect, "Connect two modes by barrier optimisation"),
                                     ("curve", cmd_curve, "Sample the loss along a straight path")):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        _add_data(p)
        _add_checkpoint(p)
        p.add_argument("--a", required=True, help="Dataset index or tensor blob of the first input")
        p.add_argument("--c", required=True, help="Dataset index or tensor blob of the second input")
        p.add_argument("--class", dest="target_class", type=int, default=None)
        if name == "connect":
            p.add_argument("--delta", type=float, default=config.DEFAULT_DELTA)
            p.add_argument("--lr", type=float, default=config.CONNECTOR_LR)
            p.add_argument("--iters", type=int, default=config.CONNECTOR_ITERS)
            p.add_argument("--lambda-mse", type=float, default=config.CONNECTOR_LAMBDA_MSE)
            p.add_argument("--lambda-hf", type=float, default=config.CONNECTOR_LAMBDA_HF)
            p.add_argument("--max-depth", type=int, default=config.CONNECTOR_MAX_DEPTH)
            p.add_argument("--no-clamp", action="store_true", help="Do not clamp to the data range")
        else:
            p.add_argument("--points", type=int, default=config.PRIMARY_CURVE_POINTS)
        p.set_defaults(handler=handler)

    p = sub.add_parser("fvo", help="Generate a class-optimal input from noise")
    _add_common(p)
    _add_checkpoint(p, required=False)
    p.add_argument("--arch", choices=sorted(config.ARCHITECTURES), default="cnn",
                   help="Architecture of the untrained network used without --checkpoint")
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--class", dest="target_class", type=int, required=True)
    p.add_argument("--objective", choices=("cross_entropy", "surrogate"), default="cross_entropy")
    p.add_argument("--hf-weight", type=float, default=0.0)
    p.add_argument("--lr", type=float, default=config.FVO_LR)
    p.add_argument("--max-iters", type=int, default=config.FVO_MAX_ITERS)
    p.add_argument("--threshold", type=float, default=config.FVO_LOSS_THRESHOLD)
    p.set_defaults(handler=cmd_fvo)

    p = sub.add_parser("attack", help="Run an adversarial attack over a dataset")
    _add_common(p)
    _add_data(p)
    _add_checkpoint(p)
    p.add_argument("--kind", choices=ATTACK_KINDS, required=True)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--step-size", type=float, default=0.01)
    p.add_argument("--cw-c", type=float, default=None, help="C&W constant (binary search when omitted)")
    p.add_argument("--cw-steps", type=int, default=100)
    p.add_argument("--limit", type=int, default=200, help="Attack the first N inputs (0 for all)")
    p.set_defaults(handler=cmd_attack)

    p = sub.add_parser("detect-fit", help="Fit the loss-curve adversarial detector")
    _add_common(p)
    _add_data(p)
    _add_checkpoint(p)
    p.add_argument("--attacks", nargs="+", required=True, help="Attack manifests with training adversarials")
    p.add_argument("--naturals", type=int, default=200)
    p.add_argument("--curve-points", type=int, default=config.DETECTOR_CURVE_POINTS)
    p.add_argument("--ablate-logits", action="store_true", help="Use the loss curve only")
    p.set_defaults(handler=cmd_detect_fit)

    p = sub.add_parser("detect-eval", help="Evaluate a fitted detector per attack")
    _add_common(p)
    _add_data(p)
    _add_checkpoint(p)
    p.add_argument("--detector", required=True, help="Detector JSON written by detect-fit")
    p.add_argument("--attacks", nargs="+", required=True, help="Attack manifests with test adversarials")
    p.add_argument("--naturals", type=int, default=200)
    p.set_defaults(handler=cmd_detect_eval)

    for name, handler, help_text in (("barrier-stats", cmd_barrier_stats, "Real-real vs real-adversarial barriers"),
                                     ("evolve", cmd_evolve, "Barrier evolution during training"),
                                     ("experiment", cmd_experiment, "Run any experiment kind from a config file")):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        _add_checkpoint(p, required=False)
        p.add_argument("--config", default=None, help="Experiment config (JSON)")
        p.set_defaults(handler=handler)

    p = sub.add_parser("percolate", help="Site percolation sweep over dimensions at fixed q")
    _add_common(p)
    p.add_argument("--dims", type=int, nargs="+", default=[2, 3, 4, 5, 6, 7])
    p.add_argument("--q", type=float, default=2.0)
    p.add_argument("--mode", choices=("discrete", "threshold"), default="discrete")
    p.add_argument("--max-sites", type=int, default=10 ** 5)
    p.add_argument("--trials", type=int, default=4)
    p.add_argument("--periodic", action="store_true")
    p.set_defaults(handler=cmd_percolate)

    p = sub.add_parser("lipschitz", help="Lipschitz bound and grid pitch of a network")
    _add_common(p)
    _add_checkpoint(p)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--delta-prime", type=float, default=None)
    p.set_defaults(handler=cmd_lipschitz)
    return parser


_CONFIG_COMMANDS: Tuple[str, ...] = ("barrier-stats", "evolve", "experiment")


def _args_for_manifest(args: argparse.Namespace) -> Dict[str, Any]:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("handler", "verbose", "quiet", "workers")}


def _write_manifest(out_dir: str, args: argparse.Namespace, result: Dict[str, Any], inputs: Sequence[str],
                    started: float, finished: float) -> None:
    manifest: Dict[str, Any] = {
        "command": args.command,
        "config": _args_for_manifest(args),
        "seed": args.seed,
        "inputs": {path: content_hash(path) for path in inputs if os.path.isfile(path)},
        "result": result,
        "timings": {"started": started, "finished": finished, "seconds": finished - started},
    }
    write_json(os.path.join(out_dir, "manifest.json"), manifest)


def _error_document(error: BaseException) -> str:
    return json.dumps({"error": type(error).__name__, "message": str(error),
                       "field": getattr(error, "field", None)}, sort_keys=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parses arguments, runs one subcommand and returns the exit status."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(_error_document(e), file=sys.stderr)
        return 2
    if args.seed is None and args.command not in _CONFIG_COMMANDS:
        args.seed = 0
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=config.LOG_FORMAT)
    if args.workers:
        os.environ[config.THREADS_ENV_VAR] = str(args.workers)

    out_dir = args.out_dir or os.path.join(config.OUTPUT_DIR, args.command)
    handler: Callable[[argparse.Namespace, str], CommandResult] = args.handler
    started = time.time()
    try:
        os.makedirs(out_dir, exist_ok=True)
        logger.info(f"Running '{args.command}' with seed {args.seed}; writing to {out_dir}")
        result, inputs = handler(args, out_dir)
        _write_manifest(out_dir, args, result, inputs, started, time.time())
    except (ModeConnError, OSError, ValueError) as e:
        logger.error(f"Command '{args.command}' failed: {e}")
        print(_error_document(e), file=sys.stderr)
        return 1
    logger.info(f"Command '{args.command}' finished in {time.time() - started:.1f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
