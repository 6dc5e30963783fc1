import math

import numpy as np
import pytest
from marshmallow import ValidationError

from calibrific.proxies import (
    attach_proxy,
    logit_geometric_mean,
    p_true_confidence,
    resampling_confidence,
)
from calibrific.types import (
    Dataset,
    EmptyInputError,
    MissingEvidenceError,
    ProxyMethod,
)


def best_window(samples, epsilon):
    """
    Scan every anchored window [s, s + 2 eps] one by one.
    """
    best = None
    for anchor in sorted(samples):
        inside = [s for s in samples if anchor <= s <= anchor + 2 * epsilon]
        if best is None or len(inside) > len(best):
            best = inside
    return best


def exhaustive_window(samples, epsilon):
    best = best_window(samples, epsilon)
    return len(best) / len(samples), sum(best) / len(best)


@pytest.mark.parametrize(
    "samples, epsilon, confidence, measurement",
    [
        ([42] * 5, 10, 1.0, 42),
        ([0, 100], 10, 0.5, 0),
        ([40, 42, 44, 90], 5, 0.75, 42),
        ([10, 20, 30], 10, 1.0, 20),
        ([30, 10, 20, 90, 95], 2.5, 0.4, 92.5),
    ],
)
def test_resampling(samples, epsilon, confidence, measurement):
    output = resampling_confidence(samples, epsilon)
    assert output.confidence == pytest.approx(confidence)
    assert output.measurement == pytest.approx(measurement)
    assert output.method is ProxyMethod.resampling


def test_resampling_matches_exhaustive_scan():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        samples = rng.integers(0, 101, size=int(rng.integers(1, 25))).tolist()
        epsilon = float(rng.choice([1, 2.5, 5, 10]))
        output = resampling_confidence(samples, epsilon)
        confidence, measurement = exhaustive_window(samples, epsilon)
        assert output.confidence == pytest.approx(confidence, abs=1e-12)
        assert output.measurement == pytest.approx(measurement, abs=1e-9)


def test_resampling_duplicate_never_decreases_confidence():
    rng = np.random.default_rng(2)
    for _ in range(100):
        samples = rng.uniform(0, 100, size=10).tolist()
        output = resampling_confidence(samples, 5)
        window = best_window(samples, 5)
        assert min(window) <= output.measurement <= max(window)
        for sample in window:
            more = resampling_confidence(samples + [sample], 5)
            assert more.confidence >= output.confidence


def test_resampling_empty():
    with pytest.raises(EmptyInputError):
        resampling_confidence([], 10)


@pytest.mark.parametrize(
    "samples, epsilon", [([1, math.nan], 10), ([1, 2], 0), ([1, 2], -1)]
)
def test_resampling_invalid(samples, epsilon):
    with pytest.raises(ValidationError):
        resampling_confidence(samples, epsilon)


@pytest.mark.parametrize(
    "token_probs, expected",
    [([1.0, 1.0], 1.0), ([0.5], 0.5), ([0.9, 0.4, 0.6], 0.216 ** (1 / 3))],
)
def test_logit_geometric_mean(token_probs, expected):
    assert logit_geometric_mean(token_probs) == pytest.approx(expected, abs=1e-9)


def test_logit_geometric_mean_properties():
    rng = np.random.default_rng(3)
    for _ in range(100):
        probs = rng.uniform(0.01, 1, size=int(rng.integers(1, 10)))
        value = logit_geometric_mean(probs)
        assert probs.min() - 1e-12 <= value <= probs.max() + 1e-12
        assert logit_geometric_mean(rng.permutation(probs)) == pytest.approx(value)


@pytest.mark.parametrize("token_probs", [[0.5, 0.0], [0.5, -0.1], [1.5], [math.nan]])
def test_logit_geometric_mean_invalid(token_probs):
    with pytest.raises(ValidationError):
        logit_geometric_mean(token_probs)


def test_logit_geometric_mean_empty():
    with pytest.raises(EmptyInputError):
        logit_geometric_mean([])


@pytest.mark.parametrize(
    "logit_true, logit_false, expected",
    [
        (0.3, 0.3, 0.5),
        (math.log(3) + 1.0, 1.0, 0.75),
        (100.0, 0.0, 1.0),
        (0.0, 100.0, 0.0),
    ],
)
def test_p_true(logit_true, logit_false, expected):
    assert p_true_confidence(logit_true, logit_false) == pytest.approx(
        expected, abs=1e-9
    )


def test_p_true_complement():
    rng = np.random.default_rng(4)
    for a, b in rng.normal(0, 10, size=(100, 2)):
        assert p_true_confidence(a, b) + p_true_confidence(b, a) == pytest.approx(1)


@pytest.mark.parametrize("logits", [(math.inf, 0.0), (0.0, math.nan)])
def test_p_true_invalid(logits):
    with pytest.raises(ValidationError):
        p_true_confidence(*logits)


@pytest.fixture
def evidence_dataset(make_record):
    return Dataset(
        records=(
            make_record(
                0,
                y_true=40,
                y_pred=70,
                confidence=0.2,
                samples=(40.0, 42.0, 44.0, 90.0),
                token_probs=(0.9, 0.4, 0.6),
                logit_true=2.0,
                logit_false=2.0,
            ),
            make_record(
                1,
                y_true=80,
                y_pred=80,
                confidence=0.9,
                samples=(80.0,),
                token_probs=(0.5,),
                logit_true=1.0,
                logit_false=0.0,
            ),
        ),
        name="evidence",
    )


def test_attach_verbal(evidence_dataset, tol):
    assert attach_proxy(evidence_dataset, ProxyMethod.verbal, tol) == evidence_dataset


def test_attach_resampling(evidence_dataset, tol):
    attached = attach_proxy(evidence_dataset, "resampling", tol)
    assert attached.name == "evidence"
    for before, after in zip(evidence_dataset, attached):
        expected = resampling_confidence(before.samples, tol.epsilon)
        assert after.confidence == expected.confidence
        assert after.y_pred == expected.measurement
        assert after.y_true == before.y_true


def test_attach_logit_geom_and_p_true(evidence_dataset, tol):
    geom = attach_proxy(evidence_dataset, ProxyMethod.logit_geom, tol)
    assert geom.confidence == pytest.approx([0.216 ** (1 / 3), 0.5])
    assert geom.y_pred.tolist() == evidence_dataset.y_pred.tolist()

    p_true = attach_proxy(evidence_dataset, ProxyMethod.p_true, tol)
    assert p_true.confidence == pytest.approx([0.5, 1 / (1 + math.exp(-1))])


def test_attach_missing_evidence(evidence_dataset, make_record, tol):
    dataset = Dataset(
        records=evidence_dataset.records
        + (make_record(2), make_record(3, token_probs=(0.5,))),
    )
    with pytest.raises(MissingEvidenceError) as error:
        attach_proxy(dataset, ProxyMethod.logit_geom, tol)
    assert error.value.ids == ["r-0002"]
    assert "r-0002" in str(error.value.messages)
