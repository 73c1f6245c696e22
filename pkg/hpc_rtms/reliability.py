"""Fault model, failure-time predictor, checkpoint policies and cost parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from logging import Logger, getLogger
from typing import List, Optional, Tuple

import numpy as np
from typing_extensions import Self

DEFAULT_CHECKPOINT_RANGE = (0.015, 0.02)
DEFAULT_RESTORE_RANGE = (0.15, 0.20)
DEFAULT_INTERVAL_FACTOR = 20.0
DEFAULT_HEDGE_FRACTION = 0.9
DEFAULT_SAFETY_MARGIN = 0.0

_logger: Logger = getLogger(__name__)


class ReliabilityError(ValueError):
    """Raised for invalid reliability parameters."""


@dataclass(frozen=True)
class FaultModel:
    """MTTF at a reference temperature and its exponential thermal sensitivity."""

    base_mttf: float
    t_ref: float = 328.0
    beta: float = 0.0

    def __post_init__(self) -> None:
        if self.base_mttf <= 0:
            raise ReliabilityError(f"Base MTTF must be positive, got {self.base_mttf}")
        if self.beta < 0:
            raise ReliabilityError(f"Thermal sensitivity must be >= 0, got {self.beta}")

    @classmethod
    def from_rate(cls, rate: float, t_ref: float = 328.0, beta: float = 0.0) -> Self:
        """Fault model whose failure rate at the reference temperature is `rate`."""
        return cls(base_mttf=math.inf if rate == 0 else 1.0 / rate, t_ref=t_ref, beta=beta)


def effective_failure_rate(model: FaultModel, temp: float) -> float:
    """Failure rate in 1/s at a temperature in kelvin."""
    if temp <= 0:
        raise ReliabilityError(f"Temperature must be positive kelvin, got {temp}")
    return (1.0 / model.base_mttf) * math.exp(model.beta * (temp - model.t_ref))


class FailureTrace:
    """Homogeneous Poisson failure times, extended on demand.

    Times are cumulative unit-exponential gaps divided by the rate, drawn in fixed chunks, so a given
    generator always yields the same prefix however far a run reads, and traces at different rates are
    coupled through the same gaps.
    """

    CHUNK = 64

    def __init__(self, rng: np.random.Generator, rate: float) -> None:
        if rate < 0:
            raise ReliabilityError(f"Failure rate must be >= 0, got {rate}")
        self.rate = rate
        self._rng = rng
        self._times = np.empty(0)
        self._cumulative = 0.0

    def _extend(self) -> None:
        gaps = self._rng.standard_exponential(self.CHUNK)
        cumulative = self._cumulative + np.cumsum(gaps)
        self._cumulative = float(cumulative[-1])
        self._times = np.concatenate([self._times, cumulative / self.rate])

    def next_after(self, time: float) -> Optional[float]:
        """Earliest failure strictly after `time`, None for a failure-free process."""
        if self.rate == 0:
            return None
        while self._times.size == 0 or self._times[-1] <= time:
            self._extend()
        return float(self._times[np.searchsorted(self._times, time, side="right")])

    def until(self, horizon: float) -> np.ndarray:
        """Every failure time <= horizon."""
        if self.rate == 0:
            return np.empty(0)
        while self._times.size == 0 or self._times[-1] <= horizon:
            self._extend()
        return self._times[: np.searchsorted(self._times, horizon, side="right")].copy()


def draw_failures(rng: np.random.Generator, rate: float, horizon: float) -> np.ndarray:
    """Ordered failure times of a Poisson process with the given rate, truncated at horizon."""
    return FailureTrace(rng, rate).until(horizon)


@dataclass(frozen=True)
class Predictor:
    """Failure-time predictor with a bounded relative error uniform on [-epsilon, +epsilon]."""

    epsilon: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon < 1.0:
            raise ReliabilityError(f"Prediction error bound must be in [0, 1), got {self.epsilon}")


@dataclass(frozen=True)
class Prediction:
    """A predicted time to failure, made at `reference`."""

    reference: float
    time_to_failure: float

    @property
    def failure_time(self) -> float:
        """Absolute predicted failure instant."""
        return self.reference + self.time_to_failure


def predict(true_time_to_failure: float, predictor: Predictor, rng: np.random.Generator) -> float:
    """Predicted time to failure: true * (1 + delta), delta uniform on [-epsilon, +epsilon].

    One uniform is consumed whatever epsilon is, so runs at different error bounds stay paired.
    """
    if true_time_to_failure <= 0:
        raise ReliabilityError(f"True time to failure must be positive, got {true_time_to_failure}")
    delta = predictor.epsilon * (2.0 * float(rng.random()) - 1.0)
    return true_time_to_failure * (1.0 + delta)


class PolicyKind(str, Enum):
    """Checkpoint policy family."""

    RESTART_ONLY = "restart-only"
    FIXED_RATE = "fixed-rate"
    PREDICTION_BASED = "prediction-based"
    ERROR_TOLERANT = "error-tolerant"


@dataclass(frozen=True)
class CheckpointPolicy:
    """A checkpoint policy and its parameters.

    `interval` is measured in seconds of work since the last durable point; when unset the fixed-rate
    interval is `interval_factor` times the job's checkpoint duration. A proximity checkpoint completes at the
    predicted failure, or `safety_margin` checkpoint durations before it when a margin is set.
    """

    kind: PolicyKind
    interval: Optional[float] = None
    interval_factor: float = DEFAULT_INTERVAL_FACTOR
    fraction: float = DEFAULT_HEDGE_FRACTION
    safety_margin: float = DEFAULT_SAFETY_MARGIN

    def __post_init__(self) -> None:
        if self.interval is not None and self.interval <= 0:
            raise ReliabilityError(f"Fixed-rate interval must be positive, got {self.interval}")
        if self.interval_factor <= 0:
            raise ReliabilityError(f"Interval factor must be positive, got {self.interval_factor}")
        if not 0.0 < self.fraction < 1.0:
            raise ReliabilityError(f"Error-tolerant fraction must be in (0, 1), got {self.fraction}")
        if self.safety_margin < 0:
            raise ReliabilityError(f"Safety margin must be >= 0, got {self.safety_margin}")

    @property
    def name(self) -> str:
        """Policy name as used in reports."""
        return self.kind.value

    @property
    def uses_predictions(self) -> bool:
        """True for the policies driven by failure predictions."""
        return self.kind in (PolicyKind.PREDICTION_BASED, PolicyKind.ERROR_TOLERANT)

    @classmethod
    def restart_only(cls) -> Self:
        return cls(PolicyKind.RESTART_ONLY)

    @classmethod
    def fixed_rate(cls, interval: Optional[float] = None, interval_factor: float = DEFAULT_INTERVAL_FACTOR) -> Self:
        return cls(PolicyKind.FIXED_RATE, interval=interval, interval_factor=interval_factor)

    @classmethod
    def prediction_based(cls, safety_margin: float = DEFAULT_SAFETY_MARGIN) -> Self:
        return cls(PolicyKind.PREDICTION_BASED, safety_margin=safety_margin)

    @classmethod
    def error_tolerant(
        cls, fraction: float = DEFAULT_HEDGE_FRACTION, safety_margin: float = DEFAULT_SAFETY_MARGIN
    ) -> Self:
        return cls(PolicyKind.ERROR_TOLERANT, fraction=fraction, safety_margin=safety_margin)

    @classmethod
    def from_name(cls, name: str, **options: float) -> Self:
        """Build a policy from its report name."""
        try:
            kind = PolicyKind(name)
        except ValueError as exception:
            allowed = ", ".join(member.value for member in PolicyKind)
            raise ReliabilityError(f"Unknown checkpoint policy {name!r}, expected one of {allowed}") from exception
        return cls(kind, **options)  # type: ignore[arg-type]


@dataclass(frozen=True)
class CostParams:
    """Checkpoint and restore costs of one job, as fractions of its T_ideal."""

    checkpoint_fraction: float
    restore_fraction: float

    def __post_init__(self) -> None:
        if not 0.0 < self.checkpoint_fraction < 1.0:
            raise ReliabilityError(f"Checkpoint fraction must be in (0, 1), got {self.checkpoint_fraction}")
        if not 0.0 <= self.restore_fraction < 1.0:
            raise ReliabilityError(f"Restore fraction must be in [0, 1), got {self.restore_fraction}")
        # r = 0 is accepted as a calibration stress case.
        if self.restore_fraction > 0 and self.checkpoint_fraction >= self.restore_fraction:
            raise ReliabilityError("Checkpoint fraction must be smaller than restore fraction")


@dataclass(frozen=True)
class CostRanges:
    """Ranges the per-job cost fractions are drawn from.

    `permanent_state_fraction` models fine-grain accelerator checkpointing: only the user-declared
    permanent state is saved, scaling the checkpoint fraction down.
    """

    checkpoint: Tuple[float, float] = DEFAULT_CHECKPOINT_RANGE
    restore: Tuple[float, float] = DEFAULT_RESTORE_RANGE
    permanent_state_fraction: Optional[float] = None

    def __post_init__(self) -> None:
        for name, (low, high) in (("checkpoint", self.checkpoint), ("restore", self.restore)):
            if low > high or low < 0:
                raise ReliabilityError(f"Invalid {name} range [{low}, {high}]")
        if self.permanent_state_fraction is not None and not 0.0 < self.permanent_state_fraction <= 1.0:
            raise ReliabilityError("Permanent state fraction must be in (0, 1]")

    def draw(self, rng: np.random.Generator) -> CostParams:
        """One draw per job: c uniform in the checkpoint range, r uniform in the restore range."""
        checkpoint = float(rng.uniform(*self.checkpoint))
        restore = float(rng.uniform(*self.restore))
        if self.permanent_state_fraction is not None:
            checkpoint *= self.permanent_state_fraction
        return CostParams(checkpoint_fraction=checkpoint, restore_fraction=restore)


RUNNING = "running"
CHECKPOINTING = "checkpointing"
RESTORING = "restoring"
DONE = "done"


@dataclass
class ExecState:
    """Execution state of one job under the checkpoint/restore automaton."""

    t_ideal: float
    checkpoint_time: float
    restore_time: float
    progress: float = 0.0
    durable_progress: float = 0.0
    mode: str = RUNNING
    t_exe: float = 0.0
    hedged: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.durable_progress <= self.progress <= self.t_ideal + 1e-9:
            raise ReliabilityError(
                f"Need 0 <= durable ({self.durable_progress}) <= progress ({self.progress}) <= T_ideal"
            )


@dataclass
class RunMetrics:
    """Outcome of one job execution."""

    job_id: str
    t_ideal: float
    t_exe: float = 0.0
    failures: int = 0
    checkpoints: int = 0
    restores: int = 0
    aborted_checkpoints: int = 0
    lost_work: float = 0.0
    running_time: float = 0.0
    checkpoint_time: float = 0.0
    restore_time: float = 0.0
    deadline_met: bool = True
    policy: str = ""
    epsilon: float = 0.0
    aborted: bool = False
    checkpoint_costs: List[float] = field(default_factory=list)
    restore_costs: List[float] = field(default_factory=list)

    @property
    def overhead(self) -> float:
        """Slowdown over a failure-free, checkpoint-free execution: (T_exe - T_ideal) / T_ideal."""
        if self.aborted:
            return math.inf
        if self.failures == 0 and self.checkpoints == 0 and self.restores == 0 and self.aborted_checkpoints == 0:
            return 0.0
        return max(0.0, (self.t_exe - self.t_ideal) / self.t_ideal)

    def as_row(self) -> dict:
        """Row of the per-job metrics CSV."""
        return {
            "job_id": self.job_id,
            "policy": self.policy,
            "epsilon": self.epsilon,
            "t_ideal_s": self.t_ideal,
            "t_exe_s": self.t_exe,
            "overhead": self.overhead,
            "failures": self.failures,
            "checkpoints": self.checkpoints,
            "deadline_met": self.deadline_met,
        }


METRICS_CSV_COLUMNS = [
    "job_id",
    "policy",
    "epsilon",
    "t_ideal_s",
    "t_exe_s",
    "overhead",
    "failures",
    "checkpoints",
    "deadline_met",
]


def _secures_enough(state: ExecState, now: float, start: float) -> bool:
    """A checkpoint is worth taking only if it saves at least as much work as it costs."""
    return state.progress + (start - now) - state.durable_progress >= state.checkpoint_time


def _proximity_start(policy: CheckpointPolicy, state: ExecState, now: float, prediction: Prediction) -> float:
    lead = state.checkpoint_time * (1.0 + policy.safety_margin)
    return max(now, prediction.failure_time - lead)


def next_checkpoint(
    policy: CheckpointPolicy,
    state: ExecState,
    now: float,
    prediction: Optional[Prediction],
) -> Optional[float]:
    """Time at which the next checkpoint should start for a running job, or None.

    `state.progress` must be the progress reached at `now`.
    """
    if policy.kind is PolicyKind.RESTART_ONLY:
        return None
    if policy.kind is PolicyKind.FIXED_RATE:
        interval = policy.interval if policy.interval is not None else policy.interval_factor * state.checkpoint_time
        return now + max(0.0, state.durable_progress + interval - state.progress)
    if prediction is None:
        return None
    if policy.kind is PolicyKind.ERROR_TOLERANT and not state.hedged:
        hedge = max(now, prediction.reference + policy.fraction * prediction.time_to_failure)
        if _secures_enough(state, now, hedge):
            return hedge
    start = _proximity_start(policy, state, now, prediction)
    return start if _secures_enough(state, now, start) else None
