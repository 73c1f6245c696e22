"""Single-job checkpoint/restore execution automaton."""

from __future__ import annotations

import math
from logging import Logger, getLogger
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from hpc_rtms.engine import Event, SimTrace, Simulation
from hpc_rtms.reliability import (
    CHECKPOINTING,
    DONE,
    RESTORING,
    RUNNING,
    CheckpointPolicy,
    CostParams,
    ExecState,
    FailureTrace,
    PolicyKind,
    Prediction,
    Predictor,
    RunMetrics,
    next_checkpoint,
    predict,
)
from hpc_rtms.types import EventKind
from hpc_rtms.workload import Job

DEFAULT_GUARD_FACTOR = 1000.0
CHECKPOINT_END_TOLERANCE = 1e-9

NextFailure = Callable[[], Optional[float]]
DoneCallback = Callable[["JobExecution"], None]

JOB_EVENT_KINDS = (
    EventKind.CHECKPOINT_START,
    EventKind.CHECKPOINT_DONE,
    EventKind.RESTORE_DONE,
    EventKind.JOB_DONE,
    EventKind.PREDICTION_REARM,
)


class NonterminatingRunError(RuntimeError):
    """Raised when a job's execution time exceeds the guard multiple of its T_ideal."""


class JobExecution:
    """Drives one job through running, checkpointing and restoring on a shared simulation.

    The owner routes the job's events (`JOB_EVENT_KINDS`, matched on `payload["job_id"]`) to `handle`
    and delivers failures through `on_failure`. `next_failure` returns the true next failure instant
    after now on the job's node; predictions are drawn from it at every re-arm point.
    """

    def __init__(  # pylint: disable=too-many-arguments
        self,
        sim: Simulation,
        job: Job,
        policy: CheckpointPolicy,
        costs: CostParams,
        predictor: Predictor,
        rng: np.random.Generator,
        next_failure: NextFailure,
        *,
        on_done: Optional[DoneCallback] = None,
        resume_progress: float = 0.0,
        guard_factor: float = DEFAULT_GUARD_FACTOR,
    ) -> None:
        self.sim = sim
        self.job = job
        self.policy = policy
        self.costs = costs
        self.predictor = predictor
        self._rng = rng
        self._next_failure = next_failure
        self._on_done = on_done
        self._guard_factor = guard_factor
        self.state = ExecState(
            t_ideal=job.t_ideal,
            checkpoint_time=costs.checkpoint_fraction * job.t_ideal,
            restore_time=costs.restore_fraction * job.t_ideal,
            progress=resume_progress,
            durable_progress=resume_progress,
        )
        self.metrics = RunMetrics(
            job_id=job.job_id,
            t_ideal=job.t_ideal,
            policy=policy.name,
            epsilon=predictor.epsilon,
        )
        self.prediction: Optional[Prediction] = None
        self._start: float = 0.0
        self._last_update: float = 0.0
        self._mode_since: float = 0.0
        self._pending: dict[EventKind, Event] = {}
        self._logger: Logger = getLogger(__name__)

    @property
    def finished(self) -> bool:
        """True once the job completed or was evicted."""
        return self.state.mode == DONE

    def _payload(self, **extra: object) -> dict:
        return {"job_id": self.job.job_id, "t_ideal": self.job.t_ideal, **extra}

    def _schedule(self, time: float, kind: EventKind, **extra: object) -> None:
        self.sim.cancel(self._pending.get(kind))
        self._pending[kind] = self.sim.schedule(time, kind, self._payload(**extra))

    def _cancel(self, *kinds: EventKind) -> None:
        for kind in kinds:
            self.sim.cancel(self._pending.pop(kind, None))

    def _sync_progress(self) -> None:
        now = self.sim.now
        if self.state.mode == RUNNING:
            elapsed = now - self._last_update
            self.state.progress = min(self.state.t_ideal, self.state.progress + elapsed)
            self.metrics.running_time += elapsed
        self._last_update = now
        self.state.t_exe = now - self._start

    def _check_guard(self) -> None:
        if self.sim.now - self._start > self._guard_factor * self.job.t_ideal:
            message = (
                f"Job {self.job.job_id} exceeded {self._guard_factor:g} x T_ideal "
                f"(T_exe={self.sim.now - self._start:.1f} s, T_ideal={self.job.t_ideal:.1f} s, "
                f"failures={self.metrics.failures}, policy={self.policy.name})"
            )
            self._logger.critical(message)
            raise NonterminatingRunError(message)

    def start(self, *, restore_first: bool = False) -> None:
        """Begin execution at the current simulated time."""
        self._start = self.sim.now
        self._last_update = self.sim.now
        if restore_first:
            self._begin_restore()
        else:
            self._resume()

    def _resume(self) -> None:
        self.state.mode = RUNNING
        self._last_update = self.sim.now
        self._schedule(self.sim.now + (self.state.t_ideal - self.state.progress), EventKind.JOB_DONE)
        if self.policy.uses_predictions:
            self._schedule(self.sim.now, EventKind.PREDICTION_REARM)
        else:
            self._plan_checkpoint()

    def _plan_checkpoint(self) -> None:
        start = next_checkpoint(self.policy, self.state, self.sim.now, self.prediction)
        done_at = self.sim.now + (self.state.t_ideal - self.state.progress)
        if start is not None and start < done_at:
            self._schedule(start, EventKind.CHECKPOINT_START)

    def _rearm(self) -> None:
        now = self.sim.now
        failure_time = self._next_failure()
        if failure_time is None or failure_time <= now:
            self.prediction = None
        else:
            predicted = predict(failure_time - now, self.predictor, self._rng)
            self.prediction = Prediction(reference=now, time_to_failure=predicted)
        self._plan_checkpoint()

    def rearm(self) -> None:
        """Draw a fresh prediction now; used when the node's failure process changed under the job."""
        if self.state.mode == RUNNING and self.policy.uses_predictions:
            self._schedule(self.sim.now, EventKind.PREDICTION_REARM)

    def _begin_restore(self) -> None:
        self.state.mode = RESTORING
        self._mode_since = self.sim.now
        self._schedule(self.sim.now + self.state.restore_time, EventKind.RESTORE_DONE, cost=self.state.restore_time)

    def handle(self, event: Event) -> None:
        """Process one of this job's own events."""
        if self._pending.get(event.kind) is not event or self.finished:
            return
        del self._pending[event.kind]
        self._sync_progress()
        if event.kind is EventKind.PREDICTION_REARM:
            self._rearm()
        elif event.kind is EventKind.CHECKPOINT_START:
            self._cancel(EventKind.JOB_DONE)
            self.state.mode = CHECKPOINTING
            self._mode_since = self.sim.now
            self._schedule(
                self.sim.now + self.state.checkpoint_time,
                EventKind.CHECKPOINT_DONE,
                cost=self.state.checkpoint_time,
            )
        elif event.kind is EventKind.CHECKPOINT_DONE:
            self._complete_checkpoint()
            self._resume()
        elif event.kind is EventKind.RESTORE_DONE:
            self.metrics.restores += 1
            self.metrics.restore_time += self.sim.now - self._mode_since
            self.metrics.restore_costs.append(self.sim.now - self._mode_since)
            self._check_guard()
            self._resume()
        elif event.kind is EventKind.JOB_DONE:
            self.state.progress = self.state.t_ideal
            self._finish()

    def _complete_checkpoint(self) -> None:
        self.state.durable_progress = self.state.progress
        self.metrics.checkpoints += 1
        self.metrics.checkpoint_time += self.sim.now - self._mode_since
        self.metrics.checkpoint_costs.append(self.sim.now - self._mode_since)
        if self.policy.kind is PolicyKind.ERROR_TOLERANT:
            self.state.hedged = True

    def _complete_due_checkpoint(self) -> None:
        """A checkpoint ending at the interruption instant is durable, whichever event was queued first."""
        done = self._pending.get(EventKind.CHECKPOINT_DONE)
        if self.state.mode != CHECKPOINTING or done is None:
            return
        now = self.sim.now
        if done.time > now and not math.isclose(done.time, now, rel_tol=CHECKPOINT_END_TOLERANCE):
            return
        self.sim.cancel(self._pending.pop(EventKind.CHECKPOINT_DONE))
        self._sync_progress()
        self._complete_checkpoint()
        self.state.mode = RUNNING
        self._last_update = now

    def _interrupt(self) -> None:
        """Stop whatever the job is doing and fall back to its durable progress."""
        self._sync_progress()
        self._cancel(*JOB_EVENT_KINDS)
        if self.state.mode == CHECKPOINTING:
            self.metrics.aborted_checkpoints += 1
            self.metrics.checkpoint_time += self.sim.now - self._mode_since
        elif self.state.mode == RESTORING:
            self.metrics.restore_time += self.sim.now - self._mode_since
        if self.policy.kind is PolicyKind.RESTART_ONLY:
            self.state.durable_progress = 0.0
        self.metrics.lost_work += self.state.progress - self.state.durable_progress
        self.state.progress = self.state.durable_progress
        self.state.hedged = False
        self.prediction = None

    def on_failure(self) -> None:
        """A failure hit the job: discard in-flight work and restore from the durable point."""
        if self.finished:
            return
        self.metrics.failures += 1
        self._complete_due_checkpoint()
        self._interrupt()
        self._logger.debug(
            f"Job {self.job.job_id} failed at t={self.sim.now:.3f}, rolling back to {self.state.progress:.3f}"
        )
        self._check_guard()
        self._begin_restore()

    def evict(self) -> float:
        """Node went down: stop the job and return the durable progress it keeps."""
        if not self.finished:
            self.metrics.failures += 1
            self._complete_due_checkpoint()
            self._interrupt()
            self.state.mode = DONE
            self.metrics.t_exe = self.state.t_exe
        return self.state.durable_progress

    def _finish(self) -> None:
        self._cancel(*JOB_EVENT_KINDS)
        self.state.mode = DONE
        self.metrics.t_exe = self.state.t_exe
        self.metrics.deadline_met = self.metrics.t_exe <= self.job.timing.deadline
        if self._on_done is not None:
            self._on_done(self)


FailureTimes = Union[FailureTrace, Sequence[float], np.ndarray]


def _failure_lookup(failure_times: FailureTimes) -> Callable[[float], Optional[float]]:
    if isinstance(failure_times, FailureTrace):
        return failure_times.next_after
    times = np.asarray(failure_times, dtype=float)

    def next_after(time: float) -> Optional[float]:
        index = int(np.searchsorted(times, time, side="right"))
        return float(times[index]) if index < times.size else None

    return next_after


def execute_job_traced(  # pylint: disable=too-many-arguments
    job: Job,
    policy: CheckpointPolicy,
    costs: CostParams,
    failure_times: FailureTimes,
    predictor: Predictor,
    rng: np.random.Generator,
    *,
    guard_factor: float = DEFAULT_GUARD_FACTOR,
    record_trace: bool = True,
) -> Tuple[RunMetrics, SimTrace]:
    """Run one job from t=0 against a node failure trace and return its metrics and event trace."""
    sim = Simulation(record_trace=record_trace)
    next_after = _failure_lookup(failure_times)
    execution = JobExecution(
        sim,
        job,
        policy,
        costs,
        predictor,
        rng,
        lambda: next_after(sim.now),
        on_done=lambda _: sim.stop(),
        guard_factor=guard_factor,
    )
    for kind in JOB_EVENT_KINDS:
        sim.on(kind, execution.handle)

    def on_failure(_: Event) -> None:
        execution.on_failure()
        upcoming = next_after(sim.now)
        if upcoming is not None and not execution.finished:
            sim.schedule(upcoming, EventKind.FAILURE, {"node": "node-0", "device": None})

    sim.on(EventKind.FAILURE, on_failure)
    first = next_after(-1.0)
    if first is not None:
        sim.schedule(max(first, 0.0), EventKind.FAILURE, {"node": "node-0", "device": None})
    execution.start()
    sim.run_until(float("inf"))
    return execution.metrics, sim.trace


def execute_job(  # pylint: disable=too-many-arguments
    job: Job,
    policy: CheckpointPolicy,
    costs: CostParams,
    failure_times: FailureTimes,
    predictor: Predictor,
    rng: np.random.Generator,
    *,
    guard_factor: float = DEFAULT_GUARD_FACTOR,
) -> RunMetrics:
    """Run one job against a node failure trace and return its metrics."""
    metrics, _ = execute_job_traced(
        job, policy, costs, failure_times, predictor, rng, guard_factor=guard_factor, record_trace=False
    )
    return metrics
