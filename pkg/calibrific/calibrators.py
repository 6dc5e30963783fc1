"""
Post-hoc confidence calibrators: Platt, Beta, Isotonic and Temperature scaling.

Each calibrator maps raw confidence to the probability that the prediction is
within the tolerance; the outcome of every training record is its tolerance
correctness.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from scipy.special import expit, logit
from sklearn.linear_model import LogisticRegression

from .dataset_loader import correctness
from .metrics import brier, t_ece
from .settings import config
from .types import (
    CalibrationComparison,
    CalibratorKind,
    CalibratorModel,
    Dataset,
    DegenerateFitError,
    EmptyInputError,
    MethodResult,
    ToleranceConfig,
)


LOG = logging.getLogger(__name__)


def clip_confidence(confidence: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(np.asarray(confidence, dtype=np.float64), delta, 1 - delta)


def bernoulli_nll(
    confidence: np.ndarray, outcomes: np.ndarray, delta: Optional[float] = None
) -> float:
    """
    Mean negative log-likelihood of 0/1 `outcomes` under `confidence`.
    """
    delta = config.calibration.clip_delta if delta is None else delta
    p = clip_confidence(confidence, delta)
    return float(-np.mean(outcomes * np.log(p) + (1 - outcomes) * np.log1p(-p)))


class Calibrator(ABC):
    """
    Base class that defines common interface for calibrators.
    """

    kind: CalibratorKind
    # single-class training data can't identify a parametric map
    needs_both_classes = True

    def fit(self, train: Dataset, cfg: ToleranceConfig) -> CalibratorModel:
        if len(train) == 0:
            raise EmptyInputError(f"Training set {train.name} is empty.")
        outcomes = correctness(train, cfg.epsilon)
        if self.needs_both_classes:
            if len(train) < 2:
                raise DegenerateFitError(
                    f"{self.kind.value} calibration needs at least two records."
                )
            if outcomes.min() == outcomes.max():
                raise DegenerateFitError(
                    f"{self.kind.value} calibration needs both correct and "
                    "incorrect records in the training set."
                )
        model = self.fit_arrays(train.confidence, outcomes)
        LOG.info(
            f"Fitted {self.kind.value} calibrator on {len(train)} records: "
            f"{model.params or f'{len(model.knots)} knots'}"
        )
        return model

    @abstractmethod
    def fit_arrays(
        self, confidence: np.ndarray, outcomes: np.ndarray
    ) -> CalibratorModel:
        ...

    @abstractmethod
    def transform(self, model: CalibratorModel, confidence: np.ndarray) -> np.ndarray:
        ...


class PlattCalibrator(Calibrator):
    """
    sigmoid(A * logit(c) + B), maximum likelihood on raw 0/1 targets.
    """

    kind = CalibratorKind.platt

    def fit_arrays(
        self, confidence: np.ndarray, outcomes: np.ndarray
    ) -> CalibratorModel:
        delta = config.calibration.clip_delta
        z = logit(clip_confidence(confidence, delta)).reshape(-1, 1)
        regression = LogisticRegression(
            penalty=None,
            tol=config.calibration.gradient_tol,
            max_iter=config.calibration.max_iter,
        )
        regression.fit(z, outcomes)
        return CalibratorModel(
            kind=self.kind,
            params={
                "A": float(regression.coef_[0, 0]),
                "B": float(regression.intercept_[0]),
            },
            clip_delta=delta,
        )

    def transform(self, model: CalibratorModel, confidence: np.ndarray) -> np.ndarray:
        z = logit(clip_confidence(confidence, model.clip_delta))
        return expit(model.params["A"] * z + model.params["B"])


class BetaCalibrator(Calibrator):
    """
    sigmoid(a * ln(c) - b * ln(1 - c) + c0) with a, b >= 0.

    The bounds are enforced by L-BFGS-B, which projects every step onto the
    feasible box, so an active constraint ends exactly at 0.
    """

    kind = CalibratorKind.beta

    def fit_arrays(
        self, confidence: np.ndarray, outcomes: np.ndarray
    ) -> CalibratorModel:
        delta = config.calibration.clip_delta
        features = self.features(clip_confidence(confidence, delta))
        targets = outcomes.astype(np.float64)

        def objective(weights: np.ndarray) -> Tuple[float, np.ndarray]:
            scores = features @ weights
            loss = np.mean(np.logaddexp(0, scores) - targets * scores)
            gradient = features.T @ (expit(scores) - targets) / len(targets)
            return float(loss), gradient

        result = minimize(
            objective,
            # the identity map
            x0=np.array([1.0, 1.0, 0.0]),
            jac=True,
            method="L-BFGS-B",
            bounds=[(0, None), (0, None), (None, None)],
            options={
                "gtol": config.calibration.gradient_tol,
                "maxiter": config.calibration.max_iter,
            },
        )
        if not result.success:
            LOG.warning(f"Beta calibration did not converge: {result.message}")

        a, b, c = result.x
        return CalibratorModel(
            kind=self.kind,
            params={"a": max(float(a), 0.0), "b": max(float(b), 0.0), "c": float(c)},
            clip_delta=delta,
        )

    @staticmethod
    def features(confidence: np.ndarray) -> np.ndarray:
        return np.column_stack(
            [np.log(confidence), -np.log1p(-confidence), np.ones_like(confidence)]
        )

    def transform(self, model: CalibratorModel, confidence: np.ndarray) -> np.ndarray:
        features = self.features(clip_confidence(confidence, model.clip_delta))
        params = model.params
        return expit(features @ np.array([params["a"], params["b"], params["c"]]))


class IsotonicCalibrator(Calibrator):
    """
    Monotone least-squares fit with the pool-adjacent-violators algorithm.

    Knots are the ends of the pooled blocks, the map interpolates linearly
    between them and clamps outside the training range.

    See also
    --------
    https://en.wikipedia.org/wiki/Isotonic_regression
    """

    kind = CalibratorKind.isotonic
    needs_both_classes = False

    def fit_arrays(
        self, confidence: np.ndarray, outcomes: np.ndarray
    ) -> CalibratorModel:
        blocks = pool_adjacent_violators(confidence, outcomes.astype(np.float64))
        knots: List[Tuple[float, float]] = []
        for lower, upper, value in blocks:
            knots.append((lower, value))
            if upper > lower:
                knots.append((upper, value))
        return CalibratorModel(
            kind=self.kind,
            knots=tuple(knots),
            clip_delta=config.calibration.clip_delta,
        )

    def transform(self, model: CalibratorModel, confidence: np.ndarray) -> np.ndarray:
        xs, ys = zip(*model.knots)
        return np.interp(np.asarray(confidence, dtype=np.float64), xs, ys)


def pool_adjacent_violators(
    x: np.ndarray, y: np.ndarray, weights: Optional[np.ndarray] = None
) -> List[Tuple[float, float, float]]:
    """
    Solve min sum w (f(x) - y)^2 over nondecreasing f.

    Returns
    -------
    List of (x_min, x_max, value) blocks sorted by x.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    weights = np.ones_like(y) if weights is None else np.asarray(weights, np.float64)
    if x.size == 0:
        raise EmptyInputError("Isotonic regression needs at least one point.")

    # equal x values are pooled up front
    unique_x, inverse = np.unique(x, return_inverse=True)
    pooled_weight = np.bincount(inverse, weights=weights)
    pooled_value = np.bincount(inverse, weights=weights * y) / pooled_weight

    # block stack: [x_min, x_max, weight, value]
    stack: List[List[float]] = []
    for x_i, w_i, v_i in zip(unique_x, pooled_weight, pooled_value):
        stack.append([x_i, x_i, w_i, v_i])
        while len(stack) > 1 and stack[-2][3] > stack[-1][3]:
            right = stack.pop()
            left = stack[-1]
            weight = left[2] + right[2]
            left[3] = (left[2] * left[3] + right[2] * right[3]) / weight
            left[2] = weight
            left[1] = right[1]

    return [(float(lo), float(hi), float(value)) for lo, hi, _, value in stack]


class TemperatureCalibrator(Calibrator):
    """
    sigmoid(logit(c) / T), T found by a bounded scalar search over ln T.
    """

    kind = CalibratorKind.temperature

    def fit_arrays(
        self, confidence: np.ndarray, outcomes: np.ndarray
    ) -> CalibratorModel:
        section = config.calibration
        z = logit(clip_confidence(confidence, section.clip_delta))

        def objective(log_t: float) -> float:
            scores = z / np.exp(log_t)
            return float(np.mean(np.logaddexp(0, scores) - outcomes * scores))

        bound = section.temperature_log_bound
        result = minimize_scalar(
            objective,
            bounds=(-bound, bound),
            method="bounded",
            options={"xatol": section.temperature_xtol},
        )
        return CalibratorModel(
            kind=self.kind,
            params={"T": float(np.exp(result.x))},
            clip_delta=section.clip_delta,
        )

    def transform(self, model: CalibratorModel, confidence: np.ndarray) -> np.ndarray:
        z = logit(clip_confidence(confidence, model.clip_delta))
        return expit(z / model.params["T"])


CALIBRATORS: Dict[CalibratorKind, Calibrator] = {
    calibrator.kind: calibrator
    for calibrator in (
        PlattCalibrator(),
        BetaCalibrator(),
        IsotonicCalibrator(),
        TemperatureCalibrator(),
    )
}


def fit(kind: CalibratorKind, train: Dataset, cfg: ToleranceConfig) -> CalibratorModel:
    return CALIBRATORS[CalibratorKind(kind)].fit(train, cfg)


def fit_platt(train: Dataset, cfg: ToleranceConfig) -> CalibratorModel:
    return fit(CalibratorKind.platt, train, cfg)


def fit_beta(train: Dataset, cfg: ToleranceConfig) -> CalibratorModel:
    return fit(CalibratorKind.beta, train, cfg)


def fit_isotonic(train: Dataset, cfg: ToleranceConfig) -> CalibratorModel:
    return fit(CalibratorKind.isotonic, train, cfg)


def fit_temperature(train: Dataset, cfg: ToleranceConfig) -> CalibratorModel:
    return fit(CalibratorKind.temperature, train, cfg)


def calibrate(model: CalibratorModel, confidence: np.ndarray) -> np.ndarray:
    calibrated = CALIBRATORS[model.kind].transform(model, confidence)
    return np.clip(calibrated, 0.0, 1.0)


def apply(model: CalibratorModel, dataset: Dataset) -> Dataset:
    """
    Replace confidences with calibrated ones, scores are untouched.
    """
    return dataset.with_confidences(calibrate(model, dataset.confidence))


def evaluate(
    method: str, dataset: Dataset, cfg: ToleranceConfig
) -> MethodResult:
    return MethodResult(
        method=method,
        t_ece=t_ece(dataset, cfg),
        brier=brier(dataset, cfg),
        nll=bernoulli_nll(dataset.confidence, correctness(dataset, cfg.epsilon)),
        spread=float(np.std(dataset.confidence)),
    )


def compare_calibrators(
    train: Dataset,
    test: Dataset,
    cfg: ToleranceConfig,
    collapse_spread: Optional[float] = None,
) -> CalibrationComparison:
    """
    Fit every calibrator on `train` and evaluate them with the uncalibrated
    confidences on `test`.

    A fit failure is recorded in its method result and doesn't stop the
    other methods. A method is flagged as collapsed when its calibrated
    confidences spread less than `collapse_spread` while the original spread
    is at least twice as large.
    """
    if len(test) == 0:
        raise EmptyInputError(f"Test set {test.name} is empty.")
    if collapse_spread is None:
        collapse_spread = config.calibration.collapse_spread

    original = evaluate("original", test, cfg)
    methods: Dict[str, MethodResult] = {}
    models: Dict[str, CalibratorModel] = {}

    for kind, calibrator in CALIBRATORS.items():
        try:
            model = calibrator.fit(train, cfg)
        except (DegenerateFitError, EmptyInputError) as error:
            LOG.warning(f"Calibrator {kind.value} failed: {error}")
            methods[kind.value] = MethodResult(method=kind.value, error=str(error))
            continue

        result = evaluate(kind.value, apply(model, test), cfg)
        collapsed = (
            result.spread < collapse_spread and original.spread >= 2 * result.spread
        )
        if collapsed:
            LOG.warning(
                f"Calibrator {kind.value} collapsed confidences toward the base "
                f"rate (spread {result.spread:.4f} vs {original.spread:.4f})."
            )
        methods[kind.value] = replace(result, collapsed=collapsed)
        models[kind.value] = model

    return CalibrationComparison(original=original, methods=methods, models=models)
