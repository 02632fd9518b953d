"""
Adversarial-input detection from loss-curve signatures.

Each input is featurised by the loss curve along the straight line from the
input to a low-loss template of its predicted class, concatenated with its
logits sorted in descending order. A k-nearest-neighbour classifier on
standardised features separates natural inputs from adversarial ones.
"""
import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import train_test_split
from sklearn.neighbors import KNeighborsClassifier
from sklearn.preprocessing import StandardScaler

from . import config
from .exceptions import ConfigError, DetectorNotFittedError, InsufficientDataError, MissingClassError
from .netcore import LabeledDataset, Network, Tensor, batch_losses, forward_logits
from .paths import Path, sample_loss_curve
from .storage import load_blob, read_json_object, require_field, save_blob, write_json
from .utils import format_real, ordered_map

logger = logging.getLogger(__name__)

NATURAL: str = "natural"
NATURAL_LABEL: int = 0
ADVERSARIAL_LABEL: int = 1


@dataclass
class TemplateSet:
    """
    One low-loss reference input per class.

    Attributes:
        inputs: Array of shape (num_classes,) + input_shape.
        losses: Cross-entropy of each template under its own class.
        indices: Position of each template in the dataset it was chosen from.
    """
    inputs: np.ndarray
    losses: np.ndarray
    indices: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(self.inputs.shape[0])

    def max_loss(self) -> float:
        return float(np.max(self.losses))


@dataclass
class FeatureVector:
    curve_losses: np.ndarray
    sorted_logits: np.ndarray
    predicted_class: int

    def as_array(self, ablate_logits: bool = False) -> np.ndarray:
        if ablate_logits:
            return self.curve_losses.copy()
        return np.concatenate([self.curve_losses, self.sorted_logits])


@dataclass(frozen=True)
class DetectorConfig:
    n_curve: int = config.DETECTOR_CURVE_POINTS
    k_grid: Tuple[int, ...] = tuple(config.DETECTOR_K_GRID)
    validation_fraction: float = config.DETECTOR_VALIDATION_FRACTION
    ablate_logits: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_curve < 2:
            raise ValueError("n_curve must be at least 2")
        if not self.k_grid or any(k < 1 or k % 2 == 0 for k in self.k_grid):
            raise ValueError("k_grid must hold positive odd integers")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")


@dataclass
class DetectorModel:
    """
    A fitted detector. The scaler is fitted on the training features only.
    """
    templates: TemplateSet
    cfg: DetectorConfig
    k: int
    scaler: StandardScaler
    knn: Optional[KNeighborsClassifier]
    train_features: np.ndarray
    train_labels: np.ndarray
    validation_accuracy: float = float("nan")
    k_scores: Dict[int, float] = field(default_factory=dict)

    @property
    def is_fitted(self) -> bool:
        return self.knn is not None


@dataclass
class EvaluationRow:
    attack: str
    accuracy: float
    auc: float
    n: int


def select_templates(net: Network, train_data: LabeledDataset) -> TemplateSet:
    """
    Picks, for every class, the training input with the smallest cross-entropy
    under its own label.

    Raises:
        MissingClassError: If some class has no training example.
    """
    losses = batch_losses(net, train_data.inputs, train_data.labels)
    inputs: List[Tensor] = []
    template_losses: List[float] = []
    indices: List[int] = []
    for y in range(net.num_classes):
        members = train_data.class_indices(y)
        if members.size == 0:
            raise MissingClassError(f"class {y} has no training example to serve as template")
        best = int(members[np.argmin(losses[members])])
        inputs.append(train_data.inputs[best])
        template_losses.append(float(losses[best]))
        indices.append(best)
    templates = TemplateSet(np.stack(inputs), np.array(template_losses), np.array(indices, dtype=np.int64))
    if templates.max_loss() > config.LOW_LOSS_THRESHOLD:
        logger.warning(f"Highest template loss {templates.max_loss():.3g} exceeds {config.LOW_LOSS_THRESHOLD}")
    return templates


def featurize(net: Network, x: Tensor, templates: TemplateSet,
              n_curve: int = config.DETECTOR_CURVE_POINTS) -> FeatureVector:
    """
    Loss curve from x (alpha = 0) to the template of x's predicted class
    (alpha = 1), measured for that class, plus the logits sorted descending.
    """
    x = np.asarray(x, dtype=np.float64)
    logits = forward_logits(net, x)
    y = int(np.argmax(logits))
    curve = sample_loss_curve(net, Path([x, templates.inputs[y]], y), n_curve)
    return FeatureVector(curve.losses, np.sort(logits)[::-1].copy(), y)


def featurize_many(net: Network, xs: Tensor, templates: TemplateSet, cfg: DetectorConfig,
                   workers: int = 0) -> np.ndarray:
    """Feature matrix of shape (len(xs), n_curve [+ num_classes])."""
    vectors = ordered_map(lambda x: featurize(net, x, templates, cfg.n_curve).as_array(cfg.ablate_logits),
                          list(xs), workers)
    if not vectors:
        width = cfg.n_curve + (0 if cfg.ablate_logits else net.num_classes)
        return np.zeros((0, width))
    return np.stack(vectors)


def _knn(k: int) -> KNeighborsClassifier:
    return KNeighborsClassifier(n_neighbors=k, weights="uniform", metric="euclidean")


def fit_features(features: np.ndarray, labels: np.ndarray, templates: TemplateSet,
                 cfg: DetectorConfig) -> DetectorModel:
    """
    Fits the standardisation and the KNN on precomputed features.

    k is chosen from cfg.k_grid by accuracy on a stratified validation split
    (ties go to the smaller k); the final model is refitted on all features.

    Raises:
        InsufficientDataError: If either label is absent.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=2)
    if counts[NATURAL_LABEL] == 0 or counts[ADVERSARIAL_LABEL] == 0:
        raise InsufficientDataError(f"detector needs both natural and adversarial examples, got counts {counts.tolist()}")

    k_scores: Dict[int, float] = {}
    n_val = int(round(cfg.validation_fraction * len(labels)))
    if counts.min() >= 2 and n_val >= 2 and len(labels) - n_val >= 2:
        x_tr, x_val, y_tr, y_val = train_test_split(features, labels, test_size=n_val, stratify=labels,
                                                    random_state=cfg.seed)
        scaler = StandardScaler().fit(x_tr)
        z_tr, z_val = scaler.transform(x_tr), scaler.transform(x_val)
        for k in cfg.k_grid:
            if k > len(y_tr):
                break
            k_scores[k] = float(np.mean(_knn(k).fit(z_tr, y_tr).predict(z_val) == y_val))
    if k_scores:
        best_k = max(k_scores, key=lambda k: (k_scores[k], -k))
    else:
        logger.warning(f"Too few examples ({len(labels)}) for a validation split; using k={min(cfg.k_grid)}")
        best_k = min(cfg.k_grid)
    best_k = min(best_k, len(labels))

    scaler = StandardScaler().fit(features)
    knn = _knn(best_k).fit(scaler.transform(features), labels)
    val_acc = k_scores.get(best_k, float("nan"))
    logger.info(f"Detector fitted on {len(labels)} examples ({counts[0]} natural, {counts[1]} adversarial), "
                f"k={best_k}, validation accuracy {val_acc:.3f}")
    return DetectorModel(templates, cfg, best_k, scaler, knn, features, labels, val_acc, k_scores)


def fit(net: Network, templates: TemplateSet, naturals: Tensor, adversarials: Tensor,
        cfg: DetectorConfig, workers: int = 0) -> DetectorModel:
    """Featurises both sets and fits the detector on them."""
    if len(naturals) == 0 or len(adversarials) == 0:
        raise InsufficientDataError("detector needs at least one natural and one adversarial input")
    features = np.concatenate([featurize_many(net, naturals, templates, cfg, workers),
                               featurize_many(net, adversarials, templates, cfg, workers)])
    labels = np.concatenate([np.full(len(naturals), NATURAL_LABEL), np.full(len(adversarials), ADVERSARIAL_LABEL)])
    return fit_features(features, labels, templates, cfg)


def score_features(model: DetectorModel, features: np.ndarray) -> np.ndarray:
    """Fraction of adversarial labels among the k nearest training features."""
    if not model.is_fitted:
        raise DetectorNotFittedError("the detector has not been fitted")
    z = model.scaler.transform(np.atleast_2d(np.asarray(features, dtype=np.float64)))
    proba = model.knn.predict_proba(z)
    column = list(model.knn.classes_).index(ADVERSARIAL_LABEL)
    return proba[:, column]


def predict(model: DetectorModel, net: Network, x: Tensor) -> Tuple[float, bool]:
    """
    Returns:
        (score in [0, 1], True when the input is flagged adversarial, i.e. score >= 0.5).
    """
    if not model.is_fitted:
        raise DetectorNotFittedError("the detector has not been fitted")
    vector = featurize(net, x, model.templates, model.cfg.n_curve).as_array(model.cfg.ablate_logits)
    score = float(score_features(model, vector)[0])
    return score, score >= 0.5


def roc_auc(labels: Sequence[int], scores: Sequence[float]) -> float:
    """ROC AUC with ties counted half; NaN when only one label is present."""
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        return float("nan")
    return float(roc_auc_score(labels, np.asarray(scores, dtype=np.float64)))


def evaluate_scores(kinds: Sequence[str], scores: np.ndarray) -> List[EvaluationRow]:
    """
    Per-attack figures: each attack's inputs against all natural inputs, then
    a pooled row ("all") over everything.
    """
    kinds = np.asarray(kinds)
    scores = np.asarray(scores, dtype=np.float64)
    labels = (kinds != NATURAL).astype(np.int64)
    predictions = (scores >= 0.5).astype(np.int64)

    def row(name: str, mask: np.ndarray) -> EvaluationRow:
        accuracy = float(np.mean(predictions[mask] == labels[mask])) if mask.any() else float("nan")
        return EvaluationRow(name, accuracy, roc_auc(labels[mask], scores[mask]), int(mask.sum()))

    natural_mask = kinds == NATURAL
    rows = [row(str(kind), natural_mask | (kinds == kind))
            for kind in sorted(set(kinds.tolist()) - {NATURAL})]
    rows.append(row("all", np.ones(len(kinds), dtype=bool)))
    return rows


def evaluate(model: DetectorModel, net: Network, inputs: Tensor, kinds: Sequence[str],
             workers: int = 0) -> List[EvaluationRow]:
    """Scores a labeled test set; `kinds` holds "natural" or the attack name for each input."""
    if len(inputs) != len(kinds):
        raise ValueError(f"{len(inputs)} inputs but {len(kinds)} kind labels")
    features = featurize_many(net, inputs, model.templates, model.cfg, workers)
    rows = evaluate_scores(kinds, score_features(model, features))
    for r in rows:
        logger.info(f"Detection on {r.attack}: accuracy {r.accuracy:.3f}, AUC {r.auc:.3f} (n={r.n})")
    return rows


def write_evaluation_csv(rows: Sequence[EvaluationRow], filepath: str) -> None:
    with open(filepath, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["attack", "accuracy", "auc", "n"])
        for r in rows:
            writer.writerow([r.attack, format_real(r.accuracy), format_real(r.auc), r.n])


def save_detector(model: DetectorModel, out_dir: str, name: str = "detector") -> str:
    """
    Persists the detector as a JSON document (standardisation, k, template
    references) plus a tensor blob holding the training features and templates.

    Returns:
        The JSON path.
    """
    if not model.is_fitted:
        raise DetectorNotFittedError("cannot save an unfitted detector")
    os.makedirs(out_dir, exist_ok=True)
    blob_name = f"{name}_features.bin"
    save_blob(os.path.join(out_dir, blob_name), {"kind": "detector"},
              [("features", model.train_features),
               ("labels", model.train_labels.astype(np.float64)),
               ("templates", model.templates.inputs)], dtype="float64")
    document: Dict[str, Any] = {
        "format": "modeconn-detector",
        "k": model.k,
        "n_curve": model.cfg.n_curve,
        "k_grid": list(model.cfg.k_grid),
        "validation_fraction": model.cfg.validation_fraction,
        "ablate_logits": model.cfg.ablate_logits,
        "seed": model.cfg.seed,
        "mean": model.scaler.mean_.tolist(),
        "scale": model.scaler.scale_.tolist(),
        "validation_accuracy": model.validation_accuracy,
        "k_scores": {str(k): v for k, v in model.k_scores.items()},
        "template_losses": model.templates.losses.tolist(),
        "template_indices": model.templates.indices.tolist(),
        "features_file": blob_name,
    }
    path = os.path.join(out_dir, f"{name}.json")
    write_json(path, document)
    return path


def load_detector(json_path: str) -> DetectorModel:
    """
    Restores a detector saved by `save_detector`.

    The KNN is refitted on the stored features, which are kept at float64, so
    the restored detector scores exactly like the one that was saved.

    Raises:
        ConfigError: If the document or its feature blob lacks a field or holds
            one of the wrong type; `field` names it.
    """
    document = read_json_object(json_path)
    if document.get("format") != "modeconn-detector":
        raise ConfigError(f"{json_path} does not hold a detector", field="format")
    blob_name = require_field(document, "features_file", str, json_path)
    _, tensors = load_blob(os.path.join(os.path.dirname(json_path), blob_name))
    arrays = dict(tensors)
    features = require_field(arrays, "features", np.asarray, blob_name)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ConfigError(f"{blob_name}: features must be a non-empty matrix", field="features")
    labels = require_field(arrays, "labels", lambda a: a.astype(np.int64), blob_name)
    template_inputs = require_field(arrays, "templates", np.asarray, blob_name)

    try:
        cfg = DetectorConfig(require_field(document, "n_curve", int, json_path),
                             require_field(document, "k_grid", lambda v: tuple(int(k) for k in v), json_path),
                             require_field(document, "validation_fraction", float, json_path),
                             require_field(document, "ablate_logits", bool, json_path),
                             require_field(document, "seed", int, json_path))
    except ValueError as e:
        raise ConfigError(f"{json_path} holds invalid detector settings: {e}") from e
    scaler = StandardScaler()
    scaler.mean_ = require_field(document, "mean", lambda v: np.asarray(v, dtype=np.float64), json_path)
    scaler.scale_ = require_field(document, "scale", lambda v: np.asarray(v, dtype=np.float64), json_path)
    if scaler.mean_.shape != (features.shape[1],) or scaler.scale_.shape != (features.shape[1],):
        raise ConfigError(f"{json_path}: standardisation does not match {features.shape[1]} features", field="mean")
    scaler.var_ = scaler.scale_ ** 2
    scaler.n_features_in_ = features.shape[1]
    scaler.n_samples_seen_ = features.shape[0]
    k = require_field(document, "k", int, json_path)
    if not 1 <= k <= features.shape[0]:
        raise ConfigError(f"{json_path}: k={k} is out of range for {features.shape[0]} stored features", field="k")
    knn = _knn(k).fit(scaler.transform(features), labels)
    templates = TemplateSet(template_inputs,
                            require_field(document, "template_losses", np.asarray, json_path),
                            require_field(document, "template_indices",
                                          lambda v: np.asarray(v, dtype=np.int64), json_path))
    return DetectorModel(templates, cfg, k, scaler, knn, features, labels,
                         require_field(document, "validation_accuracy", float, json_path),
                         require_field(document, "k_scores",
                                       lambda v: {int(k_): float(s) for k_, s in v.items()}, json_path))
