import logging
import math

import numpy as np
import pytest
from marshmallow import ValidationError

from calibrific.regress import (
    attenuation_dataset,
    attenuation_experiment,
    confidence_filter,
    daily_stance,
    ols,
    stance_regression,
)
from calibrific.schema import AttenuationReportSchema
from calibrific.types import (
    Dataset,
    DegenerateRegressorError,
    InsufficientDataError,
)


@pytest.fixture
def stance_dataset(make_record):
    rows = [
        ("d1", 80, 0.95),
        ("d1", 20, 0.5),
        ("d1", 50, 0.99),
        ("d2", 90, 0.92),
        ("d2", 70, 0.3),
        ("d3", 10, 0.9),
        ("d3", 30, 0.91),
        ("d3", 60, 0.2),
        ("d4", 55, 0.97),
    ]
    return Dataset(
        records=tuple(
            make_record(ix, y_pred=y_pred, confidence=confidence, group_key=key)
            for ix, (key, y_pred, confidence) in enumerate(rows)
        ),
        name="stance",
    )


def test_ols_hand_computed():
    result = ols([1, 2, 3, 4, 5], [2, 4, 5, 4, 5])
    assert result.beta == pytest.approx(0.6, abs=1e-12)
    assert result.intercept == pytest.approx(2.2, abs=1e-12)
    assert result.se_beta == pytest.approx(math.sqrt(0.08), abs=1e-12)
    assert result.t_stat == pytest.approx(0.6 / math.sqrt(0.08), abs=1e-12)
    assert result.r_squared == pytest.approx(0.6, abs=1e-12)
    assert result.n == 5


def test_ols_residual_identities():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(3, 50))
        x = rng.normal(0, 5, size=n)
        y = 2 - 0.5 * x + rng.normal(0, 1, size=n)
        result = ols(x, y)
        residuals = y - result.intercept - result.beta * x
        assert residuals.sum() == pytest.approx(0, abs=1e-9)
        assert (x * residuals).sum() == pytest.approx(0, abs=1e-8)
        assert 0 <= result.r_squared <= 1
        assert result.beta == pytest.approx(np.polyfit(x, y, 1)[0])


def test_ols_exact_fit():
    result = ols([1, 2, 3], [3, 5, 7])
    assert result.beta == pytest.approx(2)
    assert result.r_squared == pytest.approx(1)
    assert result.t_stat > 1e6

    flat = ols([1, 2, 3], [4, 4, 4])
    assert flat.beta == 0
    assert flat.t_stat == 0
    assert flat.r_squared == 0


@pytest.mark.parametrize(
    "x, y, error",
    [
        ([1, 2], [1, 2], InsufficientDataError),
        ([2, 2, 2], [1, 2, 3], DegenerateRegressorError),
        ([1, 2, 3], [1, 2], ValidationError),
        ([1, 2, math.nan], [1, 2, 3], ValidationError),
    ],
)
def test_ols_errors(x, y, error):
    with pytest.raises(error):
        ols(x, y)


def test_confidence_filter(stance_dataset):
    filtered = confidence_filter(stance_dataset, 0.9)
    assert filtered.ids == ["r-0000", "r-0002", "r-0003", "r-0005", "r-0006", "r-0008"]
    assert confidence_filter(stance_dataset, 0.0) == stance_dataset
    assert len(confidence_filter(stance_dataset, 1.0)) == 0


@pytest.mark.parametrize("threshold", [-0.1, 1.1, math.nan, 90])
def test_confidence_filter_invalid(stance_dataset, threshold):
    with pytest.raises(ValidationError):
        confidence_filter(stance_dataset, threshold)


def test_daily_stance(stance_dataset):
    stances = daily_stance(stance_dataset)
    assert [s.group_key for s in stances] == ["d1", "d2", "d3", "d4"]
    d1, d2, d3, d4 = stances
    # a score of exactly 50 is neutral
    assert (d1.hawk, d1.dove, d1.n_sentences) == (1, 1, 3)
    assert d1.stance == 0
    assert d2.stance == 1
    assert d3.stance == pytest.approx(-1 / 3)
    assert d4.stance == 1


def test_daily_stance_requires_group_key(make_record):
    dataset = Dataset(records=(make_record(0, group_key="d1"), make_record(1)))
    with pytest.raises(ValidationError) as error:
        daily_stance(dataset)
    assert "r-0001" in str(error.value.messages)


def test_stance_regression_unmatched(stance_dataset, caplog):
    covariates = {"d1": 0.0, "d2": 1.0, "d3": -1.0}
    with caplog.at_level(logging.WARNING, logger="calibrific"):
        result, unmatched = stance_regression(stance_dataset, covariates)
    assert unmatched == ["d4"]
    assert "d4" in caplog.text
    assert result.n == 3
    assert result.beta == pytest.approx(ols([0, 1, -1], [0, 1, -1 / 3]).beta)


def test_stance_regression_too_few_days(stance_dataset):
    with pytest.raises(InsufficientDataError):
        stance_regression(stance_dataset, {"d1": 0.0, "d2": 1.0})


def test_attenuation_dataset_is_deterministic():
    first, covariates = attenuation_dataset(3, 10, 5)
    again, covariates_again = attenuation_dataset(3, 10, 5)
    assert first == again
    assert covariates == covariates_again
    assert len(first) == 50
    assert set(covariates) == {r.group_key for r in first}
    assert np.all((first.confidence >= 0) & (first.confidence <= 1))
    assert np.all((first.y_pred >= 0) & (first.y_pred <= 100))


def test_attenuation_ordering(tol):
    ordered_beta = ordered_r_squared = 0
    for seed in range(100):
        result = attenuation_experiment(seed, 200, 20, 0.9, tol)
        betas = [abs(r.beta) for r in (result.truth, result.unfiltered, result.filtered)]
        ordered_beta += betas[0] > betas[1] > betas[2]
        ordered_r_squared += (
            result.truth.r_squared
            > result.unfiltered.r_squared
            > result.filtered.r_squared
        )
    assert ordered_beta >= 95
    assert ordered_r_squared >= 95


@pytest.mark.parametrize("seed", [0, 7])
def test_attenuation_without_noise_or_filter(seed, tol):
    result = attenuation_experiment(seed, 40, 10, 0.0, tol, noise_sd=0.0)
    assert result.unfiltered == result.truth
    assert result.filtered == result.truth


def test_attenuation_report(tol):
    result = attenuation_experiment(0, 50, 20, 0.9, tol)
    data = AttenuationReportSchema().dump(result)
    assert set(data) == {"truth", "unfiltered", "filtered"}
    assert set(data["truth"]) == {
        "beta",
        "intercept",
        "se_beta",
        "t_stat",
        "r_squared",
        "n",
    }
    assert data["truth"]["n"] == 50
