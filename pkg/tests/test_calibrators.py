import itertools

import numpy as np
import pytest
from marshmallow import ValidationError
from scipy.special import expit, logit
from scipy.stats import spearmanr
from sklearn.isotonic import IsotonicRegression

from calibrific import calibrators
from calibrific.calibrators import (
    apply,
    bernoulli_nll,
    calibrate,
    compare_calibrators,
    fit_beta,
    fit_isotonic,
    fit_platt,
    fit_temperature,
    pool_adjacent_violators,
)
from calibrific.dataset_loader import correctness
from calibrific.metrics import t_ece
from calibrific.schema import CalibrationComparisonSchema, CalibratorModelSchema
from calibrific.synth import MiscalibrationProfile, generate
from calibrific.types import (
    CalibratorKind,
    CalibratorModel,
    Dataset,
    DegenerateFitError,
    EmptyInputError,
    ToleranceConfig,
)


GRID = np.round(np.arange(0, 1.0001, 0.05), 2)


def fitted_values(x, blocks):
    values = np.empty(len(x))
    for ix, x_i in enumerate(x):
        for lower, upper, value in blocks:
            if lower <= x_i <= upper:
                values[ix] = value
                break
    return values


def grid_optimum(x, y):
    """
    Least squared error over nondecreasing fits taking values on GRID,
    by dynamic programming over points sorted by x (equal x share a value).
    """
    unique_x = np.unique(x)
    groups = [y[x == value] for value in unique_x]
    best = np.zeros(len(GRID))
    for group in groups:
        cost = np.array([np.sum((group - level) ** 2) for level in GRID])
        best = cost + np.minimum.accumulate(best)
    return best.min()


@pytest.fixture(scope="module")
def overconfident():
    profile = MiscalibrationProfile.parse("overconfident_power:2")
    return (
        generate(profile, 50000, 10, seed=1, name="train"),
        generate(profile, 50000, 10, seed=2, name="test"),
    )


def test_pava_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        x = rng.integers(0, 6, size=n).astype(float)
        y = rng.integers(0, 2, size=n).astype(float)
        blocks = pool_adjacent_violators(x, y)
        fit = fitted_values(x, blocks)
        assert np.all(np.diff([value for _, _, value in blocks]) >= 0)
        assert np.sum((fit - y) ** 2) <= grid_optimum(x, y) + 1e-12


def test_pava_matches_sklearn():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(2, 200))
        x = rng.uniform(size=n).round(2)
        y = rng.uniform(size=n)
        weights = rng.uniform(0.5, 2, size=n)
        blocks = pool_adjacent_violators(x, y, weights)
        expected = IsotonicRegression().fit(x, y, sample_weight=weights).predict(x)
        assert fitted_values(x, blocks) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize(
    "y, expected",
    [
        ([1, 2, 3], [(0, 0, 1), (1, 1, 2), (2, 2, 3)]),
        ([3, 2, 1], [(0, 2, 2)]),
        ([1, 3, 2, 4], [(0, 0, 1), (1, 2, 2.5), (3, 3, 4)]),
        ([2, 2], [(0, 0, 2), (1, 1, 2)]),
    ],
)
def test_pava_blocks(y, expected):
    blocks = pool_adjacent_violators(np.arange(len(y)), np.array(y, dtype=float))
    assert blocks == [tuple(map(float, block)) for block in expected]


def test_pava_empty():
    with pytest.raises(EmptyInputError):
        pool_adjacent_violators(np.array([]), np.array([]))


def test_isotonic_is_monotone_and_beats_identity(bernoulli_dataset, tol):
    train = bernoulli_dataset(lambda c: c ** 3, 2000, seed=4)
    model = fit_isotonic(train, tol)
    xs = [x for x, _ in model.knots]
    ys = [y for _, y in model.knots]
    assert xs == sorted(xs)
    assert ys == sorted(ys)

    grid = np.linspace(0, 1, 1001)
    assert np.all(np.diff(calibrate(model, grid)) >= 0)

    outcomes = correctness(train, tol.epsilon)
    calibrated = apply(model, train).confidence
    assert np.sum((calibrated - outcomes) ** 2) <= np.sum(
        (train.confidence - outcomes) ** 2
    )


def test_isotonic_clamps_outside_training_range(make_dataset, tol):
    model = fit_isotonic(make_dataset([0.3, 0.6], [0, 1]), tol)
    assert calibrate(model, np.array([0.0, 0.3, 0.45, 0.6, 1.0])).tolist() == (
        pytest.approx([0.0, 0.0, 0.5, 1.0, 1.0])
    )


def test_identity_maps(tol):
    confidence = np.array([0.0, 1e-9, 0.2, 0.5, 0.9, 1.0])
    clipped = np.clip(confidence, 1e-6, 1 - 1e-6)
    platt = CalibratorModel(kind=CalibratorKind.platt, params={"A": 1.0, "B": 0.0})
    temperature = CalibratorModel(kind=CalibratorKind.temperature, params={"T": 1.0})
    beta = CalibratorModel(
        kind=CalibratorKind.beta, params={"a": 1.0, "b": 1.0, "c": 0.0}
    )
    for model in (platt, temperature, beta):
        assert calibrate(model, confidence) == pytest.approx(clipped, abs=1e-9)


def test_platt_and_beta_fix_overconfidence(overconfident, tol):
    train, test = overconfident
    assert t_ece(test, tol) > 0.10
    for fitter in (fit_platt, fit_beta):
        model = fitter(train, tol)
        assert t_ece(apply(model, test), tol) < 0.05


def test_temperature_keeps_ranking_and_lowers_nll(overconfident, tol):
    train, test = overconfident
    model = fit_temperature(train, tol)
    calibrated = apply(model, test).confidence
    outcomes = correctness(test, tol.epsilon)
    assert bernoulli_nll(calibrated, outcomes) < bernoulli_nll(test.confidence, outcomes)
    assert spearmanr(test.confidence, calibrated)[0] == pytest.approx(1.0)

    grid = np.linspace(0.001, 0.999, 999)
    assert np.all(np.diff(calibrate(model, grid)) > 0)


def test_temperature_recovery(bernoulli_dataset, tol):
    train = bernoulli_dataset(lambda c: expit(logit(c) / 2), 50000, seed=6)
    model = fit_temperature(train, tol)
    assert 1.8 <= model.params["T"] <= 2.2


@pytest.fixture(scope="module")
def identity_fits(bernoulli_dataset):
    tol = ToleranceConfig(epsilon=10.0, num_bins=10)
    train = bernoulli_dataset(lambda c: c, 200000, seed=21)
    return {
        "platt": fit_platt(train, tol),
        "beta": fit_beta(train, tol),
        "temperature": fit_temperature(train, tol),
    }


@pytest.mark.parametrize("name", ["platt", "beta"])
def test_calibrated_data_fits_near_identity(identity_fits, name):
    grid = np.linspace(0.1, 0.9, 9)
    assert calibrate(identity_fits[name], grid) == pytest.approx(grid, abs=0.02)


def test_calibrated_data_keeps_unit_temperature(identity_fits):
    assert 0.9 <= identity_fits["temperature"].params["T"] <= 1.1


def test_beta_handles_underconfidence(bernoulli_dataset, tol):
    train = bernoulli_dataset(np.sqrt, 100000, seed=22)
    test = bernoulli_dataset(np.sqrt, 100000, seed=23)
    beta = t_ece(apply(fit_beta(train, tol), test), tol)
    platt = t_ece(apply(fit_platt(train, tol), test), tol)
    assert beta <= platt + 0.01


@pytest.mark.parametrize("fitter", [fit_platt, fit_beta, fit_temperature])
def test_fit_does_not_lose_to_identity(overconfident, fitter, tol):
    train, _ = overconfident
    outcomes = correctness(train, tol.epsilon)
    calibrated = apply(fitter(train, tol), train).confidence
    identity = bernoulli_nll(train.confidence, outcomes)
    assert bernoulli_nll(calibrated, outcomes) <= identity + 1e-6


def test_temperature_trails_on_overconfidence(overconfident, tol):
    train, test = overconfident
    methods = compare_calibrators(train, test, tol).methods
    assert methods["temperature"].t_ece > methods["platt"].t_ece
    assert methods["temperature"].t_ece > methods["beta"].t_ece


@pytest.mark.parametrize("fitter", [fit_platt, fit_beta])
def test_parametric_maps_stay_inside_open_interval(overconfident, fitter, tol):
    train, _ = overconfident
    model = fitter(train.subset(range(5000)), tol)
    values = calibrate(model, np.linspace(0, 1, 101))
    assert np.all((values > 0) & (values < 1))


def test_beta_bounds_are_active(bernoulli_dataset, tol):
    # decreasing accuracy asks for negative a and b
    train = bernoulli_dataset(lambda c: 1 - c, 5000, seed=9)
    model = fit_beta(train, tol)
    assert model.params["a"] == 0
    assert model.params["b"] == 0
    base_rate = correctness(train, tol.epsilon).mean()
    assert expit(model.params["c"]) == pytest.approx(base_rate, abs=1e-3)


@pytest.mark.parametrize("fitter", [fit_platt, fit_beta, fit_temperature])
def test_parametric_fit_needs_both_classes(make_dataset, fitter, tol):
    with pytest.raises(DegenerateFitError):
        fitter(make_dataset([0.2, 0.5, 0.9], [1, 1, 1]), tol)


@pytest.mark.parametrize(
    "fitter", [fit_platt, fit_beta, fit_isotonic, fit_temperature]
)
def test_fit_empty(fitter, tol):
    with pytest.raises(EmptyInputError):
        fitter(Dataset(records=()), tol)


def test_collapse_on_base_rate_data(tol):
    profile = MiscalibrationProfile.parse("base_rate:0.3")
    train = generate(profile, 20000, 10, seed=1, name="train")
    test = generate(profile, 20000, 10, seed=2, name="test")
    comparison = compare_calibrators(train, test, tol)

    assert comparison.original.spread > 0.15
    assert comparison.methods["platt"].spread < 0.05
    assert comparison.methods["platt"].collapsed
    assert "platt" in comparison.collapsed_methods
    assert not comparison.original.collapsed


def test_compare_without_collapse(overconfident, tol):
    train, test = overconfident
    comparison = compare_calibrators(train, test, tol)
    assert set(comparison.methods) == {"platt", "beta", "isotonic", "temperature"}
    assert comparison.collapsed_methods == []
    assert all(result.succeeded for result in comparison.methods.values())
    assert comparison.methods["platt"].t_ece < comparison.original.t_ece


def test_compare_with_single_class(make_dataset, tol):
    train = make_dataset([0.2, 0.5, 0.9], [1, 1, 1])
    test = make_dataset([0.3, 0.7], [1, 0])
    comparison = compare_calibrators(train, test, tol)
    for name in ("platt", "beta", "temperature"):
        assert not comparison.methods[name].succeeded
        assert name not in comparison.models
    assert comparison.methods["isotonic"].succeeded
    assert list(comparison.models) == ["isotonic"]

    data = CalibrationComparisonSchema().dump(comparison)
    assert data["methods"]["platt"]["error"]
    assert data["methods"]["isotonic"]["t_ece"] is not None
    assert "models" not in data


@pytest.mark.parametrize("kind", list(CalibratorKind))
def test_model_serialization(overconfident, kind, tol):
    train, test = overconfident
    model = calibrators.fit(kind, train.subset(range(2000)), tol)
    loaded = CalibratorModelSchema().load(CalibratorModelSchema().dump(model))
    assert loaded.kind is kind
    confidence = test.confidence[:500]
    assert calibrate(loaded, confidence) == pytest.approx(
        calibrate(model, confidence), abs=1e-12
    )


@pytest.mark.parametrize(
    "data",
    [
        {"kind": "platt", "params": {"A": 1.0}},
        {"kind": "beta", "params": {"a": -1.0, "b": 1.0, "c": 0.0}},
        {"kind": "temperature", "params": {"T": 0.0}},
        {"kind": "isotonic", "knots": []},
        {"kind": "isotonic", "knots": [[0.5, 0.6], [0.4, 0.7]]},
        {"kind": "unknown"},
    ],
)
def test_model_validation(data):
    with pytest.raises(ValidationError):
        CalibratorModelSchema().load(data)


def test_calibrated_values_stay_in_unit_interval(overconfident, tol):
    train, _ = overconfident
    grid = np.linspace(0, 1, 101)
    for kind in CalibratorKind:
        model = calibrators.fit(kind, train.subset(range(5000)), tol)
        values = calibrate(model, grid)
        assert np.all((values >= 0) & (values <= 1))


def test_pava_exhaustive_small():
    # all 0/1 outcome patterns on 4 distinct points
    for y in itertools.product([0.0, 1.0], repeat=4):
        y = np.array(y)
        x = np.arange(4, dtype=float)
        fit = fitted_values(x, pool_adjacent_violators(x, y))
        assert np.sum((fit - y) ** 2) <= grid_optimum(x, y) + 1e-12
        assert np.all(np.diff(fit) >= 0)
