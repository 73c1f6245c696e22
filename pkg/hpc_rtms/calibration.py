"""Replicated isolated-job reliability experiments and failure-rate calibration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from logging import Logger, getLogger
from typing import List, Optional, Tuple

import numpy as np

from hpc_rtms.engine import RandomStreams
from hpc_rtms.execution import DEFAULT_GUARD_FACTOR, NonterminatingRunError, execute_job
from hpc_rtms.reliability import (
    CheckpointPolicy,
    CostParams,
    CostRanges,
    FailureTrace,
    PolicyKind,
    Predictor,
    RunMetrics,
)
from hpc_rtms.workload import WorkloadParams, WorkloadTrace, generate_workload

RATE_BOUNDS = (1e-8, 1e-1)
DEFAULT_TARGET = 1.0
DEFAULT_TOLERANCE = 0.05


class CalibrationError(RuntimeError):
    """Raised when no failure rate reaches the target slowdown."""


@dataclass(frozen=True)
class ReliabilityScenario:
    """Isolated-job experiment: every job of a replica's workload runs alone on its own failure process."""

    workload: WorkloadParams = field(default_factory=WorkloadParams)
    costs: CostRanges = field(default_factory=CostRanges)
    replicas: int = 20
    seed: int = 0
    guard_factor: float = DEFAULT_GUARD_FACTOR

    def __post_init__(self) -> None:
        if self.replicas < 1:
            raise ValueError(f"Need at least one replica, got {self.replicas}")


@dataclass(frozen=True)
class ReplicaResult:
    """Per-job metrics of one replica and its mean slowdown."""

    replica: int
    metrics: Tuple[RunMetrics, ...]

    @property
    def overhead(self) -> float:
        """Mean per-job slowdown; infinite if any job hit the nontermination guard."""
        if not self.metrics:
            return 0.0
        return float(np.mean([metric.overhead for metric in self.metrics]))

    @property
    def deadline_miss_fraction(self) -> float:
        """Fraction of jobs that missed their deadline."""
        if not self.metrics:
            return 0.0
        return sum(not metric.deadline_met for metric in self.metrics) / len(self.metrics)


class ReliabilityExperiment:
    """Paired-seed runner: the same replica index sees the same jobs, costs and failure traces for every
    policy, error bound and (through common unit gaps) failure rate."""

    def __init__(self, scenario: ReliabilityScenario) -> None:
        self.scenario = scenario
        self._streams = RandomStreams(scenario.seed)
        self._logger: Logger = getLogger(__name__)

    @cached_property
    def workloads(self) -> List[WorkloadTrace]:
        """One generated workload per replica."""
        return [
            generate_workload(self._streams.stream("workload", replica), self.scenario.workload)
            for replica in range(self.scenario.replicas)
        ]

    @cached_property
    def costs(self) -> List[List[CostParams]]:
        """Per-replica, per-job cost draws."""
        return [
            [self.scenario.costs.draw(self._streams.stream("costs", replica, index)) for index in range(len(trace))]
            for replica, trace in enumerate(self.workloads)
        ]

    def run_replica(self, replica: int, policy: CheckpointPolicy, epsilon: float, rate: float) -> ReplicaResult:
        """Execute every job of one replica."""
        predictor = Predictor(epsilon)
        metrics = []
        for index, job in enumerate(self.workloads[replica].jobs):
            failures = FailureTrace(self._streams.stream("faults", replica, index), rate)
            rng = self._streams.stream("prediction", replica, index)
            try:
                metric = execute_job(
                    job,
                    policy,
                    self.costs[replica][index],
                    failures,
                    predictor,
                    rng,
                    guard_factor=self.scenario.guard_factor,
                )
            except NonterminatingRunError:
                self._logger.warning(f"Replica {replica} job {job.job_id} aborted at rate {rate:.3g}/s")
                metric = RunMetrics(job_id=job.job_id, t_ideal=job.t_ideal, policy=policy.name, epsilon=epsilon)
                metric.aborted = True
                metric.deadline_met = False
            metrics.append(metric)
        return ReplicaResult(replica=replica, metrics=tuple(metrics))

    def run(self, policy: CheckpointPolicy, epsilon: float, rate: float) -> List[ReplicaResult]:
        """Execute every replica."""
        return [self.run_replica(replica, policy, epsilon, rate) for replica in range(self.scenario.replicas)]

    def median_overhead(self, policy: CheckpointPolicy, epsilon: float, rate: float) -> float:
        """Median over replicas of the replica mean slowdown."""
        return float(np.median([result.overhead for result in self.run(policy, epsilon, rate)]))


@dataclass(frozen=True)
class CalibrationResult:
    """Calibrated rate and the slowdown it achieves."""

    rate: float
    overhead: float
    evaluations: Tuple[Tuple[float, float], ...]


def calibrate_failure_rate(
    scenario: ReliabilityScenario,
    target: float = DEFAULT_TARGET,
    tolerance: float = DEFAULT_TOLERANCE,
    bounds: Tuple[float, float] = RATE_BOUNDS,
    max_evaluations: int = 60,
    initial_rate: Optional[float] = None,
) -> CalibrationResult:
    """Find the failure rate at which the restart-only median slowdown is target +/- tolerance.

    Starts from one failure per mean T_ideal, doubles or halves until the target is bracketed inside
    `bounds`, then bisects geometrically. Slowdown is non-decreasing in the rate because failure traces at
    different rates share their unit gaps.
    """
    logger = getLogger(__name__)
    experiment = ReliabilityExperiment(scenario)
    policy = CheckpointPolicy(PolicyKind.RESTART_ONLY)
    evaluations: List[Tuple[float, float]] = []
    low_bound, high_bound = bounds

    def evaluate(rate: float) -> float:
        if len(evaluations) >= max_evaluations:
            raise CalibrationError(f"No rate within tolerance after {max_evaluations} evaluations: {evaluations}")
        overhead = experiment.median_overhead(policy, 0.0, rate)
        evaluations.append((rate, overhead))
        logger.info(f"Calibration: rate={rate:.6g}/s median slowdown={overhead:.4f}")
        return overhead

    def accept(rate: float, overhead: float) -> CalibrationResult:
        return CalibrationResult(rate=rate, overhead=overhead, evaluations=tuple(evaluations))

    guess = initial_rate if initial_rate is not None else 1.0 / scenario.workload.mean_t_ideal
    guess = min(max(guess, low_bound), high_bound)
    value = evaluate(guess)
    if abs(value - target) <= tolerance:
        return accept(guess, value)

    low: Optional[float] = None
    high: Optional[float] = None
    rate = guess
    if value < target:
        low = rate
        while high is None:
            if rate >= high_bound:
                raise CalibrationError(
                    f"No bracketing rate in [{low_bound:g}, {high_bound:g}]/s: slowdown {value:.4f} at the upper bound"
                )
            rate = min(rate * 2.0, high_bound)
            value = evaluate(rate)
            if abs(value - target) <= tolerance:
                return accept(rate, value)
            if value < target:
                low = rate
            else:
                high = rate
    else:
        high = rate
        while low is None:
            if rate <= low_bound:
                raise CalibrationError(
                    f"No bracketing rate in [{low_bound:g}, {high_bound:g}]/s: slowdown {value:.4f} at the lower bound"
                )
            rate = max(rate / 2.0, low_bound)
            value = evaluate(rate)
            if abs(value - target) <= tolerance:
                return accept(rate, value)
            if value > target:
                high = rate
            else:
                low = rate

    while True:
        rate = math.sqrt(low * high)
        value = evaluate(rate)
        if abs(value - target) <= tolerance:
            return accept(rate, value)
        if value < target:
            low = rate
        else:
            high = rate
