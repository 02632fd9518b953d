"""
Configuration settings for the input-space mode connectivity laboratory.

This module defines constants for directory locations, default hyperparameters,
the declared desk-scale architectures and environment variable names used
throughout the package. Paths are constructed dynamically relative to the
project's root directory.
"""
import os
from typing import Any, Dict, List, Optional, Tuple

# --- Directory Paths ---
# Assumes this config.py file is located at: <root>/src/modeconn/config.py
_THIS_FILE_DIR: str = os.path.dirname(os.path.abspath(__file__))
_SRC_DIR: str = os.path.dirname(_THIS_FILE_DIR)
PROJECT_ROOT_DIR: str = os.path.dirname(_SRC_DIR)

DATA_DIR: str = os.path.join(PROJECT_ROOT_DIR, "data")
OUTPUT_DIR: str = os.path.join(PROJECT_ROOT_DIR, "output")

# --- Environment ---
THREADS_ENV_VAR: str = "MODECONN_THREADS"
DEFAULT_THREADS: int = 1

# --- Logging ---
LOG_FORMAT: str = '%(asctime)s - %(levelname)s - %(message)s'

# --- Data ---
DATA_RANGE: Tuple[float, float] = (0.0, 1.0)
IDX_IMAGE_MAGIC: int = 0x00000803
IDX_LABEL_MAGIC: int = 0x00000801
SYNTH_IMAGE_SIZE: int = 28

# --- Training (Adam) ---
DEFAULT_TRAIN_LR: float = 0.001
DEFAULT_BATCH_SIZE: int = 64
DEFAULT_EPOCHS: int = 5
ADAM_BETA1: float = 0.9
ADAM_BETA2: float = 0.999
ADAM_EPS: float = 1e-8

# --- Paths and barriers ---
DEFAULT_DELTA: float = 0.001
PRIMARY_CURVE_POINTS: int = 1000
SEGMENT_CURVE_POINTS: int = 500
STATS_CURVE_POINTS: int = 250
# Admission threshold for "low-loss" real examples (one decade above 1e-4).
LOW_LOSS_THRESHOLD: float = 1e-3

# --- Barrier optimisation ---
CONNECTOR_LR: float = 0.005
CONNECTOR_ITERS: int = 1024
CONNECTOR_LAMBDA_MSE: float = 0.1
CONNECTOR_LAMBDA_HF: float = 1e-7
CONNECTOR_LAMBDA_HF_RANGE: Tuple[float, float] = (1e-8, 5e-6)
CONNECTOR_MAX_DEPTH: int = 4
ORTHOGONALITY_TOL: float = 1e-6

# --- Feature visualisation by optimisation ---
FVO_INIT_STD: float = 0.01
FVO_LR: float = 0.05
FVO_WEIGHT_DECAY: float = 1e-7
FVO_MAX_ITERS: int = 4096
FVO_LOSS_THRESHOLD: float = 0.0005
FVO_DIVERSITY_HF_WEIGHT: float = 2.5e-7
EVOLUTION_LOSS_THRESHOLD: float = 0.005

# --- Attacks ---
TARGETED_LR: float = 0.005
TARGETED_LAMBDA_DEV: float = 0.1
TARGETED_LAMBDA_HF: float = 1e-8
TARGETED_ITERS: int = 512
TARGETED_LOSS_THRESHOLD: float = 0.01
DEEPFOOL_OVERSHOOT: float = 0.02
DEEPFOOL_MAX_ITERS: int = 50
CW_SQUEEZE: float = 1e-6
CW_C_RANGE: Tuple[float, float] = (1e-3, 1e2)
CW_SEARCH_STEPS: int = 5
CW_KAPPA: float = 0.0

# --- Detector ---
DETECTOR_CURVE_POINTS: int = 50
DETECTOR_K_GRID: List[int] = list(range(1, 32, 2))
DETECTOR_VALIDATION_FRACTION: float = 0.25

# --- Barrier statistics protocol ---
PAIRS_PER_CLASS: int = 7
PAIRS_DROPPED_PER_CLASS: int = 2

# --- Percolation ---
POWER_ITERATION_TOL: float = 1e-9
POWER_ITERATION_MAX_ITERS: int = 20000
MAX_LATTICE_SITES: int = 10 ** 7
MEAN_FIELD_XTOL: float = 1e-13

# --- Declared architectures ---
# Layer dictionaries are expanded into LayerSpec objects by netcore.build_layers.
# "dense" and "conv2d" input widths are inferred from the preceding layer.
REFERENCE_CNN: List[Dict[str, Any]] = [
    {"kind": "conv2d", "out_channels": 16, "kernel_size": 3, "stride": 1, "padding": 1},
    {"kind": "relu"},
    {"kind": "maxpool2d", "kernel_size": 2},
    {"kind": "conv2d", "out_channels": 32, "kernel_size": 3, "stride": 1, "padding": 1},
    {"kind": "relu"},
    {"kind": "maxpool2d", "kernel_size": 2},
    {"kind": "flatten"},
    {"kind": "dense", "out_features": 128},
    {"kind": "relu"},
    {"kind": "dense", "out_features": None},  # None -> num_classes
]

REFERENCE_MLP: List[Dict[str, Any]] = [
    {"kind": "flatten"},
    {"kind": "dense", "out_features": 256},
    {"kind": "relu"},
    {"kind": "dense", "out_features": 128},
    {"kind": "relu"},
    {"kind": "dense", "out_features": None},
]

ARCHITECTURES: Dict[str, List[Dict[str, Any]]] = {
    "cnn": REFERENCE_CNN,
    "mlp": REFERENCE_MLP,
}


def worker_count(explicit: Optional[int] = None) -> int:
    """
    Resolves the size of the worker pool.

    Args:
        explicit: A value requested by the caller, if any.

    Returns:
        The explicit value when given, otherwise the value of MODECONN_THREADS,
        otherwise DEFAULT_THREADS. Always at least 1.
    """
    if explicit is not None:
        return max(1, int(explicit))
    raw: Optional[str] = os.environ.get(THREADS_ENV_VAR)
    if not raw:
        return DEFAULT_THREADS
    try:
        return max(1, int(raw))
    except ValueError:
        return DEFAULT_THREADS
