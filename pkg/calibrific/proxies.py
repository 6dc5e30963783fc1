"""
Confidence proxies built from raw model evidence.
"""
import logging
import math
from dataclasses import replace
from typing import Callable, Dict, List, Sequence

import numpy as np
from marshmallow import ValidationError
from scipy.special import expit

from .types import (
    Dataset,
    EmptyInputError,
    MeasurementRecord,
    MissingEvidenceError,
    ProxyMethod,
    ProxyOutput,
    ToleranceConfig,
)


LOG = logging.getLogger(__name__)


def resampling_confidence(samples: Sequence[float], epsilon: float) -> ProxyOutput:
    """
    Find the densest window [s, s + 2 * epsilon] anchored at a sample value.

    Confidence is the share of samples inside the window, measurement
    is their mean. Ties go to the smallest anchor.

    Raises
    ------
    EmptyInputError
        If there are no samples.
    ValidationError
        If epsilon is not positive or a sample isn't finite.
    """
    values = np.sort(np.asarray(samples, dtype=np.float64))
    if values.size == 0:
        raise EmptyInputError("Resampling needs at least one sample.")
    if not epsilon > 0:
        raise ValidationError("Tolerance must be positive.", field_name="epsilon")
    if not np.all(np.isfinite(values)):
        raise ValidationError("Samples must be finite.", field_name="samples")

    window_ends = np.searchsorted(values, values + 2 * epsilon, side="right")
    counts = window_ends - np.arange(values.size)
    # argmax returns the first maximum, i.e. the leftmost anchor
    start = int(np.argmax(counts))
    window = values[start : window_ends[start]]

    return ProxyOutput(
        measurement=float(window.mean()),
        confidence=float(counts[start] / values.size),
        method=ProxyMethod.resampling,
    )


def logit_geometric_mean(token_probs: Sequence[float]) -> float:
    """
    Geometric mean of token probabilities, computed in log space.
    """
    probs = np.asarray(token_probs, dtype=np.float64)
    if probs.size == 0:
        raise EmptyInputError("Geometric mean needs at least one token probability.")
    if not np.all(np.isfinite(probs)) or np.any(probs <= 0) or np.any(probs > 1):
        raise ValidationError(
            "Token probabilities must be within (0, 1].", field_name="token_probs"
        )
    return float(np.exp(np.mean(np.log(probs))))


def p_true_confidence(logit_true: float, logit_false: float) -> float:
    """
    Softmax probability of the "True" token over the True/False pair.
    """
    if not (math.isfinite(logit_true) and math.isfinite(logit_false)):
        raise ValidationError("Logits must be finite.", field_name="logits")
    return float(expit(logit_true - logit_false))


def _verbal(record: MeasurementRecord, cfg: ToleranceConfig) -> MeasurementRecord:
    return record


def _resampling(record: MeasurementRecord, cfg: ToleranceConfig) -> MeasurementRecord:
    output = resampling_confidence(record.samples, cfg.epsilon)
    return replace(record, y_pred=output.measurement, confidence=output.confidence)


def _logit_geom(record: MeasurementRecord, cfg: ToleranceConfig) -> MeasurementRecord:
    return replace(record, confidence=logit_geometric_mean(record.token_probs))


def _p_true(record: MeasurementRecord, cfg: ToleranceConfig) -> MeasurementRecord:
    return replace(
        record, confidence=p_true_confidence(record.logit_true, record.logit_false)
    )


PROXIES: Dict[
    ProxyMethod, Callable[[MeasurementRecord, ToleranceConfig], MeasurementRecord]
] = {
    ProxyMethod.verbal: _verbal,
    ProxyMethod.resampling: _resampling,
    ProxyMethod.logit_geom: _logit_geom,
    ProxyMethod.p_true: _p_true,
}


def has_evidence(record: MeasurementRecord, method: ProxyMethod) -> bool:
    if method is ProxyMethod.resampling:
        return bool(record.samples)
    if method is ProxyMethod.logit_geom:
        return bool(record.token_probs)
    if method is ProxyMethod.p_true:
        return record.logit_true is not None and record.logit_false is not None
    return True


def attach_proxy(
    dataset: Dataset, method: ProxyMethod, cfg: ToleranceConfig
) -> Dataset:
    """
    Replace record confidences (and for resampling the measurement too)
    with the proxy computed from the record evidence.

    Raises
    ------
    MissingEvidenceError
        Listing every record that lacks the evidence `method` needs.
    """
    method = ProxyMethod(method)
    missing: List[str] = [
        record.id for record in dataset if not has_evidence(record, method)
    ]
    if missing:
        raise MissingEvidenceError(method.value, missing)

    proxy = PROXIES[method]
    records = tuple(proxy(record, cfg) for record in dataset)
    LOG.info(f"Attached {method.value} confidence to {len(records)} records.")
    return Dataset(records=records, name=dataset.name)
