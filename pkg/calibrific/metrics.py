"""
Tolerance-based calibration metrics.

A record is correct when its prediction lies within the tolerance of the human
score, the metrics compare stated confidence with that binary outcome.
"""
import logging
from typing import List, Optional, Sequence

import numpy as np
from marshmallow import ValidationError
from scipy.stats import spearmanr

from .dataset_loader import correctness
from .types import (
    Dataset,
    EmptyInputError,
    MacroSummary,
    MetricReport,
    ReliabilityBin,
    ToleranceConfig,
    UndefinedCorrelationError,
)


LOG = logging.getLogger(__name__)


def _ensure_not_empty(dataset: Dataset) -> None:
    if len(dataset) == 0:
        raise EmptyInputError(f"Dataset {dataset.name} is empty.")


def bin_edges(num_bins: int) -> np.ndarray:
    return np.arange(num_bins + 1) / num_bins


def bin_indexes(confidence: np.ndarray, num_bins: int) -> np.ndarray:
    """
    Zero-based bin of every confidence. Bins are right-closed,
    the first bin also holds confidence 0.
    """
    edges = bin_edges(num_bins)
    indexes = np.searchsorted(edges, confidence, side="left") - 1
    return np.clip(indexes, 0, num_bins - 1)


def reliability_bins(dataset: Dataset, cfg: ToleranceConfig) -> List[ReliabilityBin]:
    """
    Partition records into `cfg.num_bins` equal-width confidence bins and
    compute mean confidence and tolerance accuracy of every bin.
    Empty bins are kept with count 0.
    """
    _ensure_not_empty(dataset)
    confidence = dataset.confidence
    outcomes = correctness(dataset, cfg.epsilon)
    indexes = bin_indexes(confidence, cfg.num_bins)
    edges = bin_edges(cfg.num_bins)

    bins: List[ReliabilityBin] = []
    for m in range(cfg.num_bins):
        members = indexes == m
        count = int(members.sum())
        bins.append(
            ReliabilityBin(
                lower=float(edges[m]),
                upper=float(edges[m + 1]),
                count=count,
                mean_confidence=float(confidence[members].mean()) if count else None,
                tolerance_accuracy=float(outcomes[members].mean()) if count else None,
            )
        )
    return bins


def t_ece_from_bins(bins: Sequence[ReliabilityBin]) -> float:
    n = sum(b.count for b in bins)
    if n == 0:
        raise EmptyInputError("All bins are empty.")
    return float(
        sum(
            b.count / n * abs(b.tolerance_accuracy - b.mean_confidence)
            for b in bins
            if b.count
        )
    )


def t_ece(dataset: Dataset, cfg: ToleranceConfig) -> float:
    """
    Tolerance-based expected calibration error: count-weighted mean over
    non-empty bins of |tolerance accuracy - mean confidence|.
    """
    return t_ece_from_bins(reliability_bins(dataset, cfg))


def brier(dataset: Dataset, cfg: ToleranceConfig) -> float:
    """
    Mean squared difference between confidence and the tolerance outcome.
    """
    _ensure_not_empty(dataset)
    outcomes = correctness(dataset, cfg.epsilon)
    return float(np.mean((dataset.confidence - outcomes) ** 2))


def mh_spearman(y_pred: Sequence[float], y_true: Sequence[float]) -> float:
    """
    Spearman rank correlation between model and human scores.

    Ties get the average of their rank span (scipy.stats.spearmanr), so the
    coefficient is the Pearson correlation of the ranks.

    Raises
    ------
    ValidationError
        If the lists differ in length.
    UndefinedCorrelationError
        If there are fewer than two values or a list is constant.
    """
    pred = np.asarray(y_pred, dtype=np.float64)
    true = np.asarray(y_true, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValidationError(
            f"Score lists differ in length ({pred.size} vs {true.size}).",
            field_name="scores",
        )
    if pred.size < 2:
        raise UndefinedCorrelationError("At least two scores are required.")

    if np.ptp(pred) == 0 or np.ptp(true) == 0:
        raise UndefinedCorrelationError("Correlation is undefined for constant scores.")
    rho = float(spearmanr(pred, true).statistic)
    return min(1.0, max(-1.0, rho))


def metric_report(dataset: Dataset, cfg: ToleranceConfig) -> MetricReport:
    """
    Compute every metric on the same inputs. An undefined rank correlation
    does not fail the report, it's recorded in `mh_error`.
    """
    bins = reliability_bins(dataset, cfg)
    mh: Optional[float] = None
    mh_error: Optional[str] = None
    try:
        mh = mh_spearman(dataset.y_pred, dataset.y_true)
    except UndefinedCorrelationError as error:
        mh_error = str(error)
        LOG.debug(f"MH correlation unavailable for {dataset.name}: {error}")

    return MetricReport(
        t_ece=t_ece_from_bins(bins),
        brier=brier(dataset, cfg),
        mh=mh,
        bins=bins,
        n=len(dataset),
        mh_error=mh_error,
        dataset=dataset.name,
        epsilon=cfg.epsilon,
    )


def macro_average(reports: Sequence[MetricReport]) -> MacroSummary:
    """
    Unweighted mean of the metrics over several datasets audited
    with the same tolerance.
    """
    if not reports:
        raise EmptyInputError("No reports to average.")
    defined_mh = [report.mh for report in reports if report.mh is not None]
    return MacroSummary(
        t_ece=float(np.mean([report.t_ece for report in reports])),
        brier=float(np.mean([report.brier for report in reports])),
        mh=float(np.mean(defined_mh)) if defined_mh else None,
        n_datasets=len(reports),
        epsilon=reports[0].epsilon,
    )
