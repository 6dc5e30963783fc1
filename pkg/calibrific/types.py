import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from marshmallow import ValidationError

from .settings import config


class EmptyInputError(Exception):
    """
    Raises when a metric or a fit is requested on an empty input.
    """


class UndefinedCorrelationError(Exception):
    """
    Raises when a rank correlation is undefined (constant or too short input).
    """


class DegenerateFitError(Exception):
    """
    Raises when a calibrator can't be fitted, e.g. only one outcome class.
    """


class DegenerateRegressorError(Exception):
    """
    Raises when the regressor of OLS has zero variance.
    """


class InsufficientDataError(Exception):
    """
    Raises when there are too few observations for a regression.
    """


class MissingEvidenceError(ValidationError):
    """
    Raises when records lack the raw evidence a confidence proxy requires.
    """

    def __init__(self, method: str, ids: Sequence[str]):
        self.ids: List[str] = list(ids)
        super().__init__(
            f"Records lack evidence for the {method} proxy: {', '.join(self.ids)}",
            field_name="records",
        )


class ProxyMethod(str, Enum):
    verbal = "verbal"
    resampling = "resampling"
    logit_geom = "logit_geom"
    p_true = "p_true"


class CalibratorKind(str, Enum):
    platt = "platt"
    beta = "beta"
    isotonic = "isotonic"
    temperature = "temperature"


@dataclass(frozen=True)
class ToleranceConfig:
    """
    Tolerance `epsilon` (score units) and the number of equal-width
    confidence bins used by every calibration metric.
    """

    epsilon: float = 10.0
    num_bins: int = 10
    scale_max: float = 100.0

    def __post_init__(self):
        if not math.isfinite(self.epsilon) or self.epsilon <= 0:
            raise ValidationError("Tolerance must be positive.", field_name="epsilon")
        if self.epsilon > self.scale_max:
            raise ValidationError(
                f"Tolerance must not exceed the scale maximum {self.scale_max}.",
                field_name="epsilon",
            )
        if self.num_bins < 1:
            raise ValidationError(
                "Number of bins must be at least 1.", field_name="num_bins"
            )

    @classmethod
    def default(cls, **overrides) -> "ToleranceConfig":
        values = dict(
            epsilon=float(config.tolerance.epsilon),
            num_bins=int(config.tolerance.num_bins),
            scale_max=float(config.tolerance.scale_max),
        )
        values.update({key: val for key, val in overrides.items() if val is not None})
        return cls(**values)


# Binary tolerance-correctness indicator, 0 or 1.
CorrectnessOutcome = int


@dataclass(frozen=True)
class MeasurementRecord:
    """
    One measured instance: human score, model score, confidence that the model
    score lies within the tolerance, and optional raw evidence for proxies.
    """

    id: str
    y_true: float
    y_pred: float
    confidence: float
    samples: Optional[Tuple[float, ...]] = None
    token_probs: Optional[Tuple[float, ...]] = None
    logit_true: Optional[float] = None
    logit_false: Optional[float] = None
    group_key: Optional[str] = None


@dataclass(frozen=True)
class Dataset:
    records: Tuple[MeasurementRecord, ...]
    name: str = "dataset"

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        duplicates = []
        for record in self.records:
            if record.id in seen:
                duplicates.append(record.id)
            seen.add(record.id)
        if duplicates:
            raise ValidationError(
                f"Duplicate record ids: {', '.join(duplicates)}", field_name="id"
            )

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[MeasurementRecord]:
        return iter(self.records)

    @property
    def ids(self) -> List[str]:
        return [record.id for record in self.records]

    @property
    def y_true(self) -> np.ndarray:
        return np.array([record.y_true for record in self.records], dtype=np.float64)

    @property
    def y_pred(self) -> np.ndarray:
        return np.array([record.y_pred for record in self.records], dtype=np.float64)

    @property
    def confidence(self) -> np.ndarray:
        return np.array(
            [record.confidence for record in self.records], dtype=np.float64
        )

    def with_confidences(self, confidences: Sequence[float]) -> "Dataset":
        """
        Return a copy of the dataset with confidences replaced.
        """
        if len(confidences) != len(self.records):
            raise ValidationError(
                "Confidence vector length does not match the dataset.",
                field_name="confidence",
            )
        return replace(
            self,
            records=tuple(
                replace(record, confidence=float(conf))
                for record, conf in zip(self.records, confidences)
            ),
        )

    def subset(self, indexes: Sequence[int], name: Optional[str] = None) -> "Dataset":
        return Dataset(
            records=tuple(self.records[ix] for ix in indexes),
            name=self.name if name is None else name,
        )


@dataclass(frozen=True)
class ReliabilityBin:
    lower: float
    upper: float
    count: int
    mean_confidence: Optional[float] = None
    tolerance_accuracy: Optional[float] = None


@dataclass(frozen=True)
class MetricReport:
    t_ece: float
    brier: float
    mh: Optional[float]
    bins: List[ReliabilityBin]
    n: int
    mh_error: Optional[str] = None
    dataset: Optional[str] = None
    epsilon: Optional[float] = None


@dataclass(frozen=True)
class MacroSummary:
    """
    Macro average over several datasets; MH is averaged over the reports
    where it is defined.
    """

    t_ece: float
    brier: float
    mh: Optional[float]
    n_datasets: int
    epsilon: Optional[float] = None


@dataclass(frozen=True)
class ProxyOutput:
    measurement: float
    confidence: float
    method: ProxyMethod


@dataclass(frozen=True)
class CalibratorModel:
    """
    Fitted calibration map. `params` holds the parametric coefficients
    (platt: A, B; beta: a, b, c; temperature: T), `knots` the isotonic
    (confidence, calibrated) pairs.
    """

    kind: CalibratorKind
    params: Dict[str, float] = field(default_factory=dict)
    knots: Tuple[Tuple[float, float], ...] = ()
    clip_delta: float = 1e-6


@dataclass(frozen=True)
class MethodResult:
    method: str
    t_ece: Optional[float] = None
    brier: Optional[float] = None
    nll: Optional[float] = None
    spread: Optional[float] = None
    collapsed: bool = False
    error: Optional[str] = None

    @property
    def succeeded(self) -> bool:
        return self.error is None


@dataclass(frozen=True)
class CalibrationComparison:
    original: MethodResult
    methods: Dict[str, MethodResult]
    models: Dict[str, CalibratorModel] = field(default_factory=dict)

    @property
    def collapsed_methods(self) -> List[str]:
        return [name for name, result in self.methods.items() if result.collapsed]


@dataclass(frozen=True)
class RegressionResult:
    beta: float
    intercept: float
    se_beta: float
    t_stat: float
    r_squared: float
    n: int


@dataclass(frozen=True)
class DailyStance:
    group_key: str
    stance: float
    n_sentences: int
    hawk: int = 0
    dove: int = 0


@dataclass(frozen=True, eq=False)
class SoftTarget:
    probs: np.ndarray
    k: int

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.shape != (self.k,):
            raise ValidationError(
                f"Soft target must have {self.k} entries.", field_name="probs"
            )
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValidationError(
                "Soft target must be a probability vector.", field_name="probs"
            )
        object.__setattr__(self, "probs", probs)


@dataclass(frozen=True, eq=False)
class StudentModel:
    """
    Linear multinomial student: `weights` has shape (k, d + 1),
    the last column is the bias.
    """

    weights: np.ndarray
    k: int
    d: int
    temperature: float = 1.0
    loss_history: Tuple[float, ...] = ()

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        if weights.shape != (self.k, self.d + 1):
            raise ValidationError(
                f"Weights must have shape ({self.k}, {self.d + 1}).",
                field_name="weights",
            )
        if not np.all(np.isfinite(weights)):
            raise ValidationError("Weights must be finite.", field_name="weights")
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_flat(
        cls, values: Sequence[float], k: int, d: int, temperature: float = 1.0
    ) -> "StudentModel":
        flat = np.asarray(values, dtype=np.float64)
        if flat.size != k * (d + 1):
            raise ValidationError(
                f"Expected {k * (d + 1)} weights, got {flat.size}.",
                field_name="weights",
            )
        return cls(weights=flat.reshape(k, d + 1), k=k, d=d, temperature=temperature)


@dataclass(frozen=True)
class DistillReport:
    """
    Teacher and student metrics on the held-out split, deltas are
    student minus teacher (negative is an improvement).
    """

    k: int
    n_train: int
    n_eval: int
    teacher: MetricReport
    student: MetricReport
    delta_t_ece: float
    delta_brier: float
    loss_history: Tuple[float, ...] = ()
    model: Optional[StudentModel] = None


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 2e-3
    batch_size: int = 16
    temperature: float = 1.0
    grad_clip: float = 1.0
    split_fraction: float = 0.8
    seed: int = 0
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1

    def __post_init__(self):
        for name in ("epochs", "learning_rate", "batch_size", "temperature", "grad_clip"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive.", field_name=name)
        if not 0 < self.split_fraction < 1:
            raise ValidationError(
                "Split fraction must be within (0, 1).", field_name="split_fraction"
            )
        if self.weight_decay < 0:
            raise ValidationError(
                "Weight decay must be nonnegative.", field_name="weight_decay"
            )
        if not 0 <= self.warmup_fraction < 1:
            raise ValidationError(
                "Warmup fraction must be within [0, 1).", field_name="warmup_fraction"
            )

    @classmethod
    def default(cls, **overrides) -> "TrainConfig":
        section = config.distill
        values = dict(
            epochs=int(section.epochs),
            learning_rate=float(section.learning_rate),
            batch_size=int(section.batch_size),
            temperature=float(section.temperature),
            grad_clip=float(section.grad_clip),
            split_fraction=float(section.split_fraction),
            seed=int(section.seed),
            weight_decay=float(section.weight_decay),
            warmup_fraction=float(section.warmup_fraction),
        )
        values.update({key: val for key, val in overrides.items() if val is not None})
        return cls(**values)
