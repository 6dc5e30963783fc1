"""
Daily stance aggregation, confidence filtering and simple OLS, plus a seeded
simulation showing how a miscalibrated confidence filter attenuates the slope.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from marshmallow import ValidationError
from scipy.stats import linregress

from .settings import config
from .types import (
    DailyStance,
    Dataset,
    DegenerateRegressorError,
    InsufficientDataError,
    MeasurementRecord,
    RegressionResult,
    ToleranceConfig,
)


LOG = logging.getLogger(__name__)

NEUTRAL_STANCE = 50.0
MIN_OBSERVATIONS = 3


def confidence_filter(dataset: Dataset, threshold: float) -> Dataset:
    """
    Keep records with confidence >= `threshold`, order preserved.
    """
    if not (math.isfinite(threshold) and 0 <= threshold <= 1):
        raise ValidationError(
            "Threshold must be within 0-1.", field_name="threshold"
        )
    return Dataset(
        records=tuple(record for record in dataset if record.confidence >= threshold),
        name=dataset.name,
    )


def daily_stance(dataset: Dataset) -> List[DailyStance]:
    """
    Per group: (hawkish - dovish) / total, where hawkish is y_pred > 50,
    dovish is y_pred < 50 and neutral sentences only count in the total.
    Groups are returned in order of first appearance.
    """
    missing = [record.id for record in dataset if record.group_key is None]
    if missing:
        raise ValidationError(
            f"Records lack group_key: {', '.join(missing)}", field_name="group_key"
        )

    counts: Dict[str, List[int]] = {}
    for record in dataset:
        hawk_dove_total = counts.setdefault(record.group_key, [0, 0, 0])
        hawk_dove_total[0] += record.y_pred > NEUTRAL_STANCE
        hawk_dove_total[1] += record.y_pred < NEUTRAL_STANCE
        hawk_dove_total[2] += 1

    return [
        DailyStance(
            group_key=key,
            stance=(hawk - dove) / total,
            n_sentences=total,
            hawk=hawk,
            dove=dove,
        )
        for key, (hawk, dove, total) in counts.items()
    ]


def ols(x: Sequence[float], y: Sequence[float]) -> RegressionResult:
    """
    Simple regression y = intercept + beta * x via scipy.stats.linregress, with
    homoskedastic standard errors.

    Raises
    ------
    ValidationError
        If lengths differ or values aren't finite.
    InsufficientDataError
        If there are fewer than 3 observations.
    DegenerateRegressorError
        If x is constant.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError(
            f"Regressor and outcome differ in length ({x.size} vs {y.size}).",
            field_name="x",
        )
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValidationError("Observations must be finite.", field_name="x")
    n = x.size
    if n < MIN_OBSERVATIONS:
        raise InsufficientDataError(
            f"OLS needs at least {MIN_OBSERVATIONS} observations, got {n}."
        )

    if np.ptp(x) == 0:
        raise DegenerateRegressorError("Regressor has zero variance.")

    fit = linregress(x, y)
    beta = float(fit.slope)
    se_beta = float(fit.stderr)
    if se_beta > 0:
        t_stat = beta / se_beta
    else:
        # exact fit
        t_stat = 0.0 if beta == 0 else math.copysign(math.inf, beta)

    return RegressionResult(
        beta=beta,
        intercept=float(fit.intercept),
        se_beta=se_beta,
        t_stat=t_stat,
        r_squared=min(1.0, float(fit.rvalue) ** 2),
        n=n,
    )


def stance_regression(
    dataset: Dataset, covariates: Mapping[str, float]
) -> Tuple[RegressionResult, List[str]]:
    """
    Regress daily stance on the covariate of the same group.
    Groups without a covariate are skipped and returned.
    """
    stances = daily_stance(dataset)
    matched = [s for s in stances if s.group_key in covariates]
    unmatched = [s.group_key for s in stances if s.group_key not in covariates]
    if unmatched:
        LOG.warning(f"No covariate for groups: {', '.join(unmatched)}")
    if len(matched) < MIN_OBSERVATIONS:
        raise InsufficientDataError(
            f"Only {len(matched)} groups matched a covariate, "
            f"at least {MIN_OBSERVATIONS} are required."
        )
    result = ols(
        [covariates[s.group_key] for s in matched], [s.stance for s in matched]
    )
    return result, unmatched


@dataclass(frozen=True)
class AttenuationResult:
    truth: RegressionResult
    unfiltered: RegressionResult
    filtered: RegressionResult


def attenuation_dataset(
    generator_seed: int,
    n_days: int,
    sentences_per_day: int,
    noise_sd: Optional[float] = None,
    covariate_effect: Optional[float] = None,
    sentence_sd: Optional[float] = None,
) -> Tuple[Dataset, Dict[str, float]]:
    """
    Simulate sentences whose true stance is driven by a daily covariate.

    Model scores add noise to the true scores and confidence is high for
    near-neutral scores, so a confidence filter keeps mostly sentences that
    carry little of the covariate signal.
    """
    section = config.regress
    noise_sd = section.noise_sd if noise_sd is None else noise_sd
    covariate_effect = (
        section.covariate_effect if covariate_effect is None else covariate_effect
    )
    sentence_sd = section.sentence_sd if sentence_sd is None else sentence_sd
    if n_days < 1 or sentences_per_day < 1:
        raise ValidationError(
            "Days and sentences per day must be positive.", field_name="n_days"
        )
    if noise_sd < 0 or sentence_sd < 0:
        raise ValidationError("Noise must be nonnegative.", field_name="noise_sd")

    rng = np.random.default_rng(generator_seed)
    covariate = rng.normal(0, 1, size=n_days)
    shape = (n_days, sentences_per_day)
    y_true = np.clip(
        NEUTRAL_STANCE
        + covariate_effect * covariate[:, None]
        + rng.normal(0, sentence_sd, size=shape),
        0,
        100,
    )
    y_pred = np.clip(y_true + rng.normal(0, 1, size=shape) * noise_sd, 0, 100)
    extremity = np.abs(y_pred - NEUTRAL_STANCE) / NEUTRAL_STANCE
    confidence = np.clip(
        0.97 - 0.6 * extremity + rng.normal(0, 0.04, size=shape), 0, 1
    )

    keys = [f"day-{d:04d}" for d in range(n_days)]
    records = tuple(
        MeasurementRecord(
            id=f"{keys[d]}-{s:03d}",
            y_true=float(y_true[d, s]),
            y_pred=float(y_pred[d, s]),
            confidence=float(confidence[d, s]),
            group_key=keys[d],
        )
        for d in range(n_days)
        for s in range(sentences_per_day)
    )
    dataset = Dataset(records=records, name=f"attenuation-{generator_seed}")
    return dataset, dict(zip(keys, covariate.astype(float)))


def attenuation_experiment(
    generator_seed: int,
    n_days: int,
    sentences_per_day: int,
    filter_threshold: float,
    tol: ToleranceConfig,
    noise_sd: Optional[float] = None,
) -> AttenuationResult:
    """
    Regress daily stance on the covariate three ways: with the true scores,
    with all model scores and with model scores passing the confidence filter.

    Raises
    ------
    InsufficientDataError
        If fewer than 3 days keep at least one sentence after filtering.
    """
    dataset, covariates = attenuation_dataset(
        generator_seed, n_days, sentences_per_day, noise_sd=noise_sd
    )
    truth_dataset = Dataset(
        records=tuple(
            MeasurementRecord(
                id=record.id,
                y_true=record.y_true,
                y_pred=record.y_true,
                confidence=1.0,
                group_key=record.group_key,
            )
            for record in dataset
        ),
        name=f"{dataset.name}-truth",
    )
    filtered = confidence_filter(dataset, filter_threshold)

    truth, _ = stance_regression(truth_dataset, covariates)
    unfiltered, _ = stance_regression(dataset, covariates)
    filtered_result, _ = stance_regression(filtered, covariates)

    accuracy = np.mean(np.abs(dataset.y_pred - dataset.y_true) <= tol.epsilon)
    LOG.info(
        f"Attenuation run {generator_seed}: {len(filtered)}/{len(dataset)} "
        f"sentences pass threshold {filter_threshold}, tolerance accuracy "
        f"{accuracy:.3f}; beta truth {truth.beta:.4f}, unfiltered "
        f"{unfiltered.beta:.4f}, filtered {filtered_result.beta:.4f}"
    )
    return AttenuationResult(
        truth=truth, unfiltered=unfiltered, filtered=filtered_result
    )
