"""Measurement-based probabilistic timing analysis with an exponential-tail fit gated by a CV test."""

from __future__ import annotations

import math
from dataclasses import dataclass
from logging import Logger, getLogger
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

DEFAULT_EXCEEDANCE = 1e-6
MIN_SAMPLES = 30
MIN_EXCEEDANCES = 10
TAIL_FRACTIONS = (0.10, 0.08, 0.06, 0.04, 0.02)
CV_Z = 1.96

_logger: Logger = getLogger(__name__)


class PwcetError(ValueError):
    """Base class for timing-analysis input errors."""


class SampleSizeError(PwcetError):
    """Raised for empty or too small sample sets."""


class TailFitError(PwcetError):
    """Raised when no threshold leaves enough distinct exceedances to fit a tail."""


class ExceedanceRangeError(PwcetError):
    """Raised when the requested exceedance probability lies inside the observed body."""


@dataclass(frozen=True)
class SampleSet:
    """Execution-time measurements taken under one condition."""

    values: np.ndarray
    label: str = ""

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if values.size and np.any(values <= 0):
            raise PwcetError(f"Sample set {self.label!r} holds non-positive execution times")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.size)

    def scaled(self, factor: float) -> "SampleSet":
        """Same measurements multiplied by a positive factor."""
        return SampleSet(values=self.values * factor, label=self.label)


@dataclass(frozen=True)
class CvTestResult:
    """Coefficient of variation of the exceedances and whether it is compatible with an exponential tail."""

    cv: float
    passed: bool
    n_exceed: int


@dataclass(frozen=True)
class TailModel:
    """Exponential tail above threshold u: P(X > x) = p_u * exp(-(x - u) / sigma)."""

    threshold: float
    sigma: float
    n_total: int
    n_exceed: int
    cv: float
    passed: bool

    @property
    def p_u(self) -> float:
        """Empirical probability of exceeding the threshold."""
        return self.n_exceed / self.n_total


@dataclass(frozen=True)
class PwcetEstimate:
    """pWCET at an exceedance probability, next to the MET of the same samples."""

    exceedance: float
    value: float
    met: float

    @property
    def relative_increase(self) -> float:
        """(pWCET - MET) / MET."""
        return relative_increase(self.value, self.met)


def _values(samples: SampleSet | Sequence[float] | np.ndarray) -> np.ndarray:
    if isinstance(samples, SampleSet):
        return samples.values
    return np.asarray(samples, dtype=float).reshape(-1)


def met(samples: SampleSet | Sequence[float] | np.ndarray) -> float:
    """Maximum observed execution time."""
    values = _values(samples)
    if values.size == 0:
        raise SampleSizeError("MET of an empty sample set is undefined")
    return float(values.max())


def cv_test(samples: SampleSet | Sequence[float] | np.ndarray, threshold: float) -> CvTestResult:
    """CV of the exceedances over a threshold; passes when |cv - 1| <= 1.96 / sqrt(n_exceed)."""
    values = _values(samples)
    excess = values[values > threshold] - threshold
    if excess.size < MIN_EXCEEDANCES:
        raise TailFitError(f"Only {excess.size} exceedances of {threshold:g}, need {MIN_EXCEEDANCES}")
    mean = float(excess.mean())
    cv = float(excess.std(ddof=1) / mean) if mean > 0 else 0.0
    return CvTestResult(cv=cv, passed=abs(cv - 1.0) <= CV_Z / math.sqrt(excess.size), n_exceed=int(excess.size))


def candidate_thresholds(values: np.ndarray) -> List[float]:
    """Thresholds leaving 10%, 8%, 6%, 4% and 2% of the samples in the tail (at least 10 of them)."""
    ordered = np.sort(values)
    size = ordered.size
    thresholds = []
    for fraction in TAIL_FRACTIONS:
        tail = min(max(int(math.ceil(fraction * size)), MIN_EXCEEDANCES), size - 1)
        thresholds.append(float(ordered[size - tail - 1]))
    return thresholds


def fit_tail(samples: SampleSet | Sequence[float] | np.ndarray) -> TailModel:
    """Fit an exponential tail, taking the largest candidate tail whose CV test passes.

    When no candidate passes, the one with the smallest |cv - 1| is kept and the model is flagged with
    `passed=False`.
    """
    values = _values(samples)
    if values.size < MIN_SAMPLES:
        raise SampleSizeError(f"Tail fitting needs at least {MIN_SAMPLES} samples, got {values.size}")
    best: Tuple[float, float, CvTestResult] | None = None
    for threshold in candidate_thresholds(values):
        try:
            result = cv_test(values, threshold)
        except TailFitError:
            continue
        if result.passed:
            best = (0.0, threshold, result)
            break
        distance = abs(result.cv - 1.0)
        if best is None or distance < best[0]:
            best = (distance, threshold, result)
    if best is None:
        raise TailFitError("No threshold leaves enough exceedances; the samples are (nearly) constant")
    _, threshold, result = best
    sigma = float((values[values > threshold] - threshold).mean())
    if sigma <= 0:
        raise TailFitError("Degenerate tail with zero mean exceedance")
    if not result.passed:
        label = samples.label if isinstance(samples, SampleSet) else ""
        _logger.warning(f"CV test failed for every threshold{f' ({label})' if label else ''}; best cv={result.cv:.3f}")
    return TailModel(
        threshold=threshold,
        sigma=sigma,
        n_total=int(values.size),
        n_exceed=result.n_exceed,
        cv=result.cv,
        passed=result.passed,
    )


def pwcet_quantile(model: TailModel, exceedance: float = DEFAULT_EXCEEDANCE) -> float:
    """Execution time exceeded with probability `exceedance` under the fitted tail."""
    if exceedance <= 0:
        raise ExceedanceRangeError(f"Exceedance probability must be positive, got {exceedance}")
    if exceedance > model.p_u:
        raise ExceedanceRangeError(
            f"Exceedance {exceedance:g} lies inside the observed body (p_u={model.p_u:g}); "
            "use the empirical quantile instead"
        )
    return model.threshold + model.sigma * math.log(model.p_u / exceedance)


def empirical_quantile(samples: SampleSet | Sequence[float] | np.ndarray, exceedance: float) -> float:
    """Empirical value exceeded with the given probability."""
    values = _values(samples)
    if values.size == 0:
        raise SampleSizeError("Empirical quantile of an empty sample set")
    return float(np.quantile(values, 1.0 - exceedance))


def relative_increase(pwcet_value: float, met_value: float) -> float:
    """(pWCET - MET) / MET."""
    if met_value <= 0:
        raise PwcetError(f"MET must be positive, got {met_value}")
    return (pwcet_value - met_value) / met_value


def estimate(
    samples: SampleSet | Sequence[float] | np.ndarray, exceedance: float = DEFAULT_EXCEEDANCE
) -> PwcetEstimate:
    """Fit and evaluate in one go; falls back to the empirical quantile inside the observed body."""
    model = fit_tail(samples)
    try:
        value = pwcet_quantile(model, exceedance)
    except ExceedanceRangeError:
        value = empirical_quantile(samples, exceedance)
    return PwcetEstimate(exceedance=exceedance, value=value, met=met(samples))


def read_samples(path: Path) -> Dict[str, SampleSet]:
    """Read execution-time samples.

    A plain text file holds one value per line and is labelled with its file stem. A CSV with `label` and
    `value` columns yields one sample set per label, in order of first appearance.
    """
    if path.suffix.lower() == ".csv":
        frame = pd.read_csv(path, dtype={"label": str})
        if not {"label", "value"}.issubset(frame.columns):
            raise PwcetError(f"{path} must have 'label' and 'value' columns")
        return {
            str(label): SampleSet(values=group["value"].to_numpy(dtype=float), label=str(label))
            for label, group in frame.groupby("label", sort=False)
        }
    text = path.read_text(encoding="utf-8")
    values = np.array([float(line) for line in text.split() if line.strip()], dtype=float)
    return {path.stem: SampleSet(values=values, label=path.stem)}


def pwcet_column(exceedance: float = DEFAULT_EXCEEDANCE) -> str:
    """Name of the fit-report column holding the pWCET, e.g. `pwcet_1e-6`."""
    return "pwcet_" + np.format_float_scientific(exceedance, trim="-", exp_digits=1)


def fit_report_columns(exceedance: float = DEFAULT_EXCEEDANCE) -> List[str]:
    """Fit-report header for an exceedance probability."""
    return ["label", "n", "u", "sigma", "cv", "pass", "met", pwcet_column(exceedance), "rel_increase"]


def fit_report_row(samples: SampleSet, exceedance: float = DEFAULT_EXCEEDANCE) -> dict:
    """One row of the fit report.

    Sample sets without a usable tail (e.g. constant times) still get a row: `pass` is false and only
    `n` and `met` are filled.
    """
    observed = met(samples)
    try:
        model = fit_tail(samples)
    except TailFitError as exception:
        _logger.warning(f"No tail fit for {samples.label!r}: {exception}")
        row = dict.fromkeys(fit_report_columns(exceedance), math.nan)
        row.update({"label": samples.label, "n": len(samples), "pass": False, "met": observed})
        return row
    try:
        value = pwcet_quantile(model, exceedance)
    except ExceedanceRangeError:
        value = empirical_quantile(samples, exceedance)
    return {
        "label": samples.label,
        "n": len(samples),
        "u": model.threshold,
        "sigma": model.sigma,
        "cv": model.cv,
        "pass": model.passed,
        "met": observed,
        pwcet_column(exceedance): value,
        "rel_increase": relative_increase(value, observed),
    }
