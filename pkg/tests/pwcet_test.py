"""Tests of the exponential-tail pWCET estimation."""

import math

import numpy as np
import pytest

from hpc_rtms.pwcet import (
    ExceedanceRangeError,
    PwcetError,
    SampleSet,
    SampleSizeError,
    TailFitError,
    TailModel,
    cv_test,
    estimate,
    fit_report_columns,
    fit_report_row,
    fit_tail,
    met,
    pwcet_column,
    pwcet_quantile,
    read_samples,
    relative_increase,
)


@pytest.fixture
def exponential_samples():
    return SampleSet(values=np.random.default_rng(2024).exponential(1.0, 10000), label="exp")


def test_unit_exponential_quantile():
    """A unit-rate tail from zero exceeded with probability 1e-6 sits at ln(1e6) = 13.8155."""
    model = TailModel(threshold=0.0, sigma=1.0, n_total=100, n_exceed=100, cv=1.0, passed=True)
    assert pwcet_quantile(model, 1e-6) == pytest.approx(13.8155, abs=1e-4)


def test_exponential_samples_fit_their_tail(exponential_samples):
    """Exponential data passes the CV test and the fitted scale and pWCET are within 10% of the truth."""
    model = fit_tail(exponential_samples)
    assert model.passed
    assert model.sigma == pytest.approx(1.0, rel=0.1)
    assert pwcet_quantile(model, 1e-6) == pytest.approx(math.log(1e6), rel=0.1)


def test_cv_test_accepts_exponential_and_rejects_uniform():
    """Exponential exceedances have CV ~ 1, uniform ones ~ 0.58."""
    rng = np.random.default_rng(1)
    exponential = rng.exponential(2.0, 2000)
    assert cv_test(exponential, float(np.quantile(exponential, 0.9))).passed
    uniform = rng.uniform(1.0, 2.0, 2000)
    result = cv_test(uniform, float(np.quantile(uniform, 0.9)))
    assert not result.passed
    assert result.cv == pytest.approx(1 / math.sqrt(3), abs=0.1)


def test_light_tail_is_fitted_but_flagged():
    """When no threshold passes the CV test the closest one is kept and the fit is flagged."""
    model = fit_tail(np.random.default_rng(3).uniform(1.0, 2.0, 2000))
    assert not model.passed
    assert model.sigma > 0


def test_constant_samples_have_no_tail():
    """Deterministic execution times leave nothing to fit."""
    with pytest.raises(TailFitError):
        fit_tail(np.full(100, 5.0))


def test_too_few_samples():
    """Tail fitting needs at least 30 samples; MET of nothing is undefined."""
    with pytest.raises(SampleSizeError):
        fit_tail(np.arange(1.0, 20.0))
    with pytest.raises(SampleSizeError):
        met([])


def test_pwcet_bounds_the_observed_maximum(exponential_samples):
    """At a 1e-6 exceedance the pWCET lies above the maximum of 10000 samples."""
    result = estimate(exponential_samples, 1e-6)
    assert result.value >= result.met == met(exponential_samples)
    assert result.relative_increase > 0


def test_scaling_samples_scales_the_estimate(exponential_samples):
    """Multiplying every time by a constant multiplies the pWCET by it."""
    base = estimate(exponential_samples, 1e-6).value
    assert estimate(exponential_samples.scaled(3.0), 1e-6).value == pytest.approx(3.0 * base, rel=1e-9)


def test_smaller_exceedance_gives_larger_pwcet(exponential_samples):
    """The pWCET grows as the tolerated exceedance shrinks."""
    model = fit_tail(exponential_samples)
    values = [pwcet_quantile(model, p) for p in (1e-3, 1e-6, 1e-9, 1e-12)]
    assert values == sorted(values)
    assert len(set(values)) == len(values)


def test_exceedance_inside_the_body(exponential_samples):
    """The tail model does not extrapolate below its threshold; the estimate falls back to the data."""
    model = fit_tail(exponential_samples)
    with pytest.raises(ExceedanceRangeError):
        pwcet_quantile(model, 0.5)
    with pytest.raises(ExceedanceRangeError):
        pwcet_quantile(model, 0.0)
    assert estimate(exponential_samples, 0.5).value == pytest.approx(np.median(exponential_samples.values))


def test_non_positive_times_are_rejected():
    """Execution times are positive."""
    with pytest.raises(PwcetError):
        SampleSet(values=np.array([1.0, 0.0]))


def test_read_plain_samples(tmp_path):
    """A text file holds one value per line and is labelled by its stem."""
    path = tmp_path / "kernel-a.txt"
    path.write_text("1.5\n2.5\n\n3.0\n", encoding="utf-8")
    samples = read_samples(path)
    assert list(samples) == ["kernel-a"]
    assert samples["kernel-a"].values.tolist() == [1.5, 2.5, 3.0]


def test_read_labelled_csv(tmp_path):
    """A CSV yields one sample set per label, in order of first appearance."""
    path = tmp_path / "samples.csv"
    path.write_text("label,value\nz,1\na,2\nz,3\n", encoding="utf-8")
    samples = read_samples(path)
    assert list(samples) == ["z", "a"]
    assert samples["z"].values.tolist() == [1.0, 3.0]


def test_fit_report_row(exponential_samples):
    """A report row carries the fit, the MET, the pWCET and the relative increase."""
    row = fit_report_row(exponential_samples, 1e-6)
    assert list(row) == fit_report_columns(1e-6)
    assert pwcet_column(1e-6) == "pwcet_1e-6"
    assert row["n"] == 10000
    assert row["pass"]
    assert row["rel_increase"] == pytest.approx((row["pwcet_1e-6"] - row["met"]) / row["met"])


def test_fit_report_row_without_a_tail():
    """Constant samples still get a row, flagged as not passing."""
    row = fit_report_row(SampleSet(values=np.full(50, 2.0), label="flat"), 1e-6)
    assert row["label"] == "flat"
    assert row["pass"] is False
    assert row["met"] == 2.0
    assert math.isnan(row["sigma"])


def test_relative_increase():
    """A pWCET of 1.2 s over a MET of 1 s is a 20% increase; a non-positive MET is refused."""
    assert relative_increase(1.2, 1.0) == pytest.approx(0.2)
    with pytest.raises(PwcetError):
        relative_increase(1.0, 0.0)


SEEDS = range(100)


@pytest.mark.slow
def test_exponential_tail_estimates_across_seeds():
    """Over 100 seeds of 10^4 unit exponentials, the tail passes the CV test and the 1e-6 quantile lands
    within 10% of ln(1e6) in at least 95 of them."""
    passed = accurate = 0
    for seed in SEEDS:
        model = fit_tail(np.random.default_rng(seed).exponential(1.0, 10000))
        passed += model.passed
        accurate += abs(pwcet_quantile(model, 1e-6) - math.log(1e6)) <= 0.1 * math.log(1e6)
    assert passed >= 95
    assert accurate >= 95


@pytest.mark.slow
def test_cv_test_rejects_light_and_heavy_tails_across_seeds():
    """Uniform samples never pass, and Pareto samples with infinite variance fail in at least 95 of 100 seeds."""
    uniform_passed = heavy_passed = 0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        uniform_passed += fit_tail(rng.uniform(1.0, 2.0, 10000)).passed
        heavy_passed += fit_tail(1.0 + rng.pareto(2.0, 10000)).passed
    assert uniform_passed == 0
    assert heavy_passed <= 5


@pytest.mark.slow
def test_pwcet_stays_above_the_observed_maximum_across_seeds():
    """For 1000-sample exponential sets, pWCET(1e-6) >= MET in at least 99 of 100 seeds."""
    covered = 0
    for seed in SEEDS:
        result = estimate(np.random.default_rng(seed).exponential(1.0, 1000), 1e-6)
        covered += result.value >= result.met
    assert covered >= 99


def test_relative_increase_grows_with_the_spread():
    """Shifted exponential families with CV 0.2, 0.1 and 0.05 give strictly decreasing median increases."""
    medians = []
    for cv in (0.2, 0.1, 0.05):
        scale = cv / (1.0 - cv)
        increases = [
            estimate(1.0 + scale * np.random.default_rng(seed).exponential(1.0, 1000), 1e-6).relative_increase
            for seed in range(20)
        ]
        medians.append(float(np.median(increases)))
    assert medians[0] > medians[1] > medians[2] > 0
