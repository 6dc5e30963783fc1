"""
Soft-label distillation: K-class targets built from (score, confidence) pairs
and a linear multinomial student trained with KL soft-label loss.
"""
import logging
import math
from typing import List, Sequence, Tuple

import numpy as np
from marshmallow import ValidationError
from scipy.special import log_softmax, rel_entr, softmax

from .metrics import metric_report
from .types import (
    Dataset,
    DistillReport,
    MeasurementRecord,
    SoftTarget,
    StudentModel,
    ToleranceConfig,
    TrainConfig,
)


LOG = logging.getLogger(__name__)

SCALE_MAX = 100.0
# 0, 10, ..., 100 grid
ROUND_GRID_CLASSES = 11


def default_class_count(name: str) -> int:
    """
    FOMC stance uses the 11-point round grid, everything else 10 bins.
    """
    return ROUND_GRID_CLASSES if "fomc" in name.lower() else 10


def _check_k(k: int) -> None:
    if k < 2:
        raise ValidationError("Class count must be at least 2.", field_name="k")


def score_to_class(y: float, k: int) -> int:
    """
    Map a 0-100 score to a class index.

    k = 11 uses the round grid with half-up rounding (55 -> 6),
    any other k uses equal-width bins with the top edge in the last bin.
    """
    _check_k(k)
    if not (math.isfinite(y) and 0 <= y <= SCALE_MAX):
        raise ValidationError(
            f"Score must be within 0-{SCALE_MAX:g}, got {y}.", field_name="y"
        )
    if k == ROUND_GRID_CLASSES:
        return int(math.floor(y / 10 + 0.5))
    return min(max(int(math.floor(y * k / SCALE_MAX)), 0), k - 1)


def class_center(j: int, k: int) -> float:
    """
    Score represented by class `j`: grid value for k = 11, bin center otherwise.
    """
    if k == ROUND_GRID_CLASSES:
        return 10.0 * j
    return (j + 0.5) * SCALE_MAX / k


def soft_target(y_pred: float, confidence: float, k: int) -> SoftTarget:
    """
    The class of `y_pred` gets `confidence`, the rest share the remaining mass.
    """
    if not (math.isfinite(confidence) and 0 <= confidence <= 1):
        raise ValidationError(
            "Confidence must be within 0-1.", field_name="confidence"
        )
    j = score_to_class(y_pred, k)
    probs = np.full(k, (1 - confidence) / (k - 1))
    probs[j] = confidence
    return SoftTarget(probs=probs, k=k)


def kl_soft_loss(student_probs: Sequence[float], target: SoftTarget) -> float:
    """
    KL(target || student) with 0 * ln(0) = 0.
    """
    student = np.asarray(student_probs, dtype=np.float64)
    if student.shape != (target.k,):
        raise ValidationError(
            f"Student distribution must have {target.k} entries.",
            field_name="student_probs",
        )
    if np.any(student <= 0) or not np.all(np.isfinite(student)):
        raise ValidationError(
            "Student probabilities must be positive.", field_name="student_probs"
        )
    return float(np.sum(rel_entr(target.probs, student)))


def augment(features: np.ndarray) -> np.ndarray:
    """
    Append the bias column.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return np.hstack([features, np.ones((features.shape[0], 1))])


def student_loss_and_grad(
    weights: np.ndarray,
    features: np.ndarray,
    targets: np.ndarray,
    temperature: float = 1.0,
) -> Tuple[float, np.ndarray]:
    """
    Mean KL soft-label loss over a batch and its gradient w.r.t. `weights`.

    Parameters
    ----------
    weights : np.ndarray, [k, d + 1] shape
    features : np.ndarray, [n, d + 1] shape
        Features with the bias column.
    targets : np.ndarray, [n, k] shape
        Soft targets, one row per sample.
    """
    logits = features @ weights.T / temperature
    log_probs = log_softmax(logits, axis=1)
    loss = np.sum(rel_entr(targets, 1.0)) - np.sum(targets * log_probs)
    gradient = (np.exp(log_probs) - targets).T @ features / temperature
    n = features.shape[0]
    return float(loss / n), gradient / n


def _stack_targets(targets: Sequence[SoftTarget]) -> np.ndarray:
    ks = {target.k for target in targets}
    if len(ks) != 1:
        raise ValidationError(
            "All soft targets must share the class count.", field_name="targets"
        )
    return np.vstack([target.probs for target in targets])


def learning_rate_schedule(cfg: TrainConfig, total_steps: int) -> np.ndarray:
    """
    Per-step learning rate: linear ramp over the first
    ceil(warmup_fraction * total_steps) steps, constant afterwards.
    """
    warmup_steps = math.ceil(cfg.warmup_fraction * total_steps)
    if warmup_steps == 0:
        return np.full(total_steps, cfg.learning_rate)
    steps = np.arange(1, total_steps + 1, dtype=np.float64)
    return cfg.learning_rate * np.minimum(1.0, steps / warmup_steps)


def train_student(
    features: np.ndarray, targets: Sequence[SoftTarget], cfg: TrainConfig
) -> StudentModel:
    """
    Minibatch gradient descent on the mean KL soft-label loss.

    Weights start at zero, batches are drawn from a seeded permutation every
    epoch and each batch gradient is L2-clipped at `cfg.grad_clip`. The step
    size follows `learning_rate_schedule` and weight decay is added after
    clipping, bias column excluded. The model after the last epoch is returned;
    `loss_history` holds the full training loss before training and after
    every epoch.

    Raises
    ------
    ValidationError
        If shapes don't match or there are fewer samples than `cfg.batch_size`.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValidationError("Features must be a matrix.", field_name="features")
    n, d = features.shape
    if len(targets) != n:
        raise ValidationError(
            f"Got {n} feature rows for {len(targets)} targets.", field_name="features"
        )
    if n < cfg.batch_size:
        raise ValidationError(
            f"At least {cfg.batch_size} samples are required, got {n}.",
            field_name="features",
        )
    target_probs = _stack_targets(targets)
    k = target_probs.shape[1]

    x = augment(features)
    weights = np.zeros((k, d + 1))
    rng = np.random.default_rng(cfg.seed)
    decay_mask = np.ones_like(weights)
    decay_mask[:, -1] = 0.0

    schedule = learning_rate_schedule(cfg, cfg.epochs * math.ceil(n / cfg.batch_size))
    step = 0

    loss, _ = student_loss_and_grad(weights, x, target_probs, cfg.temperature)
    history: List[float] = [loss]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            _, gradient = student_loss_and_grad(
                weights, x[batch], target_probs[batch], cfg.temperature
            )
            norm = np.linalg.norm(gradient)
            if norm > cfg.grad_clip:
                gradient = gradient * (cfg.grad_clip / norm)
            gradient = gradient + cfg.weight_decay * weights * decay_mask
            weights = weights - schedule[step] * gradient
            step += 1

        loss, _ = student_loss_and_grad(weights, x, target_probs, cfg.temperature)
        history.append(loss)
        LOG.debug(f"Epoch {epoch}/{cfg.epochs}: loss {loss:.6f}")

    LOG.info(f"Student trained for {cfg.epochs} epochs, final loss {history[-1]:.6f}")
    return StudentModel(
        weights=weights,
        k=k,
        d=d,
        temperature=cfg.temperature,
        loss_history=tuple(history),
    )


def student_probabilities(model: StudentModel, features: np.ndarray) -> np.ndarray:
    x = augment(features)
    if x.shape[1] != model.d + 1:
        raise ValidationError(
            f"Expected {model.d} features, got {x.shape[1] - 1}.",
            field_name="features",
        )
    # inference is at temperature 1
    return softmax(x @ model.weights.T, axis=1)


def student_predict(
    model: StudentModel, features: Sequence[float]
) -> Tuple[float, float, np.ndarray]:
    """
    Predicted score (center of the argmax class), its probability as the
    confidence, and the full class distribution.
    """
    probs = student_probabilities(model, np.asarray(features, dtype=np.float64))[0]
    j = int(np.argmax(probs))
    return class_center(j, model.k), float(probs[j]), probs


def student_dataset(
    model: StudentModel, dataset: Dataset, features: np.ndarray, name: str
) -> Dataset:
    probs = student_probabilities(model, features)
    classes = np.argmax(probs, axis=1)
    return Dataset(
        records=tuple(
            MeasurementRecord(
                id=record.id,
                y_true=record.y_true,
                y_pred=class_center(int(j), model.k),
                confidence=float(row[j]),
                group_key=record.group_key,
            )
            for record, j, row in zip(dataset, classes, probs)
        ),
        name=name,
    )


def distill_pipeline(
    dataset: Dataset,
    features: np.ndarray,
    k: int,
    cfg: TrainConfig,
    tol: ToleranceConfig,
) -> DistillReport:
    """
    Split, build soft targets from the teacher, train the student and
    compare teacher and student calibration on the held-out part.
    """
    _check_k(k)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != len(dataset):
        raise ValidationError(
            "Feature rows must be aligned with dataset records.",
            field_name="features",
        )

    n = len(dataset)
    order = np.random.default_rng(cfg.seed).permutation(n)
    n_train = int(round(cfg.split_fraction * n))
    if n_train < 1 or n_train >= n:
        raise ValidationError(
            f"Split of {n} records leaves an empty part.", field_name="split_fraction"
        )
    train_ix, eval_ix = np.sort(order[:n_train]), np.sort(order[n_train:])
    train = dataset.subset(train_ix, name=f"{dataset.name}-train")
    held_out = dataset.subset(eval_ix, name=f"{dataset.name}-teacher")

    targets = [soft_target(r.y_pred, r.confidence, k) for r in train]
    model = train_student(features[train_ix], targets, cfg)

    student = student_dataset(
        model, held_out, features[eval_ix], name=f"{dataset.name}-student"
    )
    teacher_report = metric_report(held_out, tol)
    student_report = metric_report(student, tol)
    LOG.info(
        f"Distilled {dataset.name}: T-ECE teacher {teacher_report.t_ece:.4f}, "
        f"student {student_report.t_ece:.4f}"
    )
    return DistillReport(
        k=k,
        n_train=n_train,
        n_eval=n - n_train,
        teacher=teacher_report,
        student=student_report,
        delta_t_ece=student_report.t_ece - teacher_report.t_ece,
        delta_brier=student_report.brier - teacher_report.brier,
        loss_history=model.loss_history,
        model=model,
    )
