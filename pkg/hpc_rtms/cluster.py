"""Whole-cluster run: arrivals, dispatch, mapping, admission, execution, node failures and thermal coupling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from logging import Logger, getLogger
from typing import Dict, List, Optional, Set, Tuple

import numpy as np

from hpc_rtms.engine import Event, RandomStreams, SimTrace, Simulation
from hpc_rtms.execution import DEFAULT_GUARD_FACTOR, JOB_EVENT_KINDS, JobExecution
from hpc_rtms.platform import Topology, discover
from hpc_rtms.reliability import CheckpointPolicy, CostParams, CostRanges, FaultModel, Predictor, RunMetrics
from hpc_rtms.reliability import effective_failure_rate, predict
from hpc_rtms.rtms import (
    Decision,
    DeviceTable,
    GlobalManagerState,
    LocalManager,
    MappingDecision,
    NoCompatibleNodeError,
    PwcetTable,
    RecoveryAction,
    RtmsParams,
    admit,
    dispatch,
    release_commitment,
)
from hpc_rtms.thermal import (
    DEFAULT_AMBIENT_K,
    DEFAULT_HEAT_CAPACITY,
    DEFAULT_LATERAL_CONDUCTANCE,
    DEFAULT_VERTICAL_CONDUCTANCE,
    ThermalGrid,
    advance_temp,
    steady_state_temp,
)
from hpc_rtms.types import EventKind
from hpc_rtms.workload import Job, WorkloadTrace

DONE = "done"
REJECTED = "rejected"
QUEUED = "queued"
RUNNING = "running"

SUMMARY_COLUMNS = [
    "arrived",
    "done",
    "rejected",
    "unfinished",
    "throughput_per_h",
    "median_overhead",
    "deadline_miss_fraction",
    "failures",
    "peak_temp_k",
]


@dataclass(frozen=True)
class ThermalParams:
    """Thermal coupling of node load to node failure rate.

    In `steady` mode every TempStep jumps to the steady state of the current power map; `transient` mode
    integrates the RC network over the step with explicit updates of `dt` seconds.
    """

    enabled: bool = True
    step: float = 60.0
    mode: str = "steady"
    dt: float = 0.05
    ambient: float = DEFAULT_AMBIENT_K
    lateral_conductance: float = DEFAULT_LATERAL_CONDUCTANCE
    vertical_conductance: float = DEFAULT_VERTICAL_CONDUCTANCE
    heat_capacity: float = DEFAULT_HEAT_CAPACITY

    def __post_init__(self) -> None:
        if self.step <= 0 or self.dt <= 0:
            raise ValueError("Thermal step and dt must be positive")
        if self.mode not in ("steady", "transient"):
            raise ValueError(f"Unknown thermal mode {self.mode!r}")

    def grid(self) -> ThermalGrid:
        """An idle grid at ambient temperature."""
        return ThermalGrid(
            ambient=self.ambient,
            lateral_conductance=self.lateral_conductance,
            vertical_conductance=self.vertical_conductance,
            heat_capacity=self.heat_capacity,
        )


@dataclass
class JobRecord:
    """Lifecycle of one job in a cluster run."""

    job_id: str
    arrival: float
    status: str = QUEUED
    node: str = ""
    start: Optional[float] = None
    end: Optional[float] = None
    segments: int = 0
    reason: str = ""


@dataclass(frozen=True)
class DeviceSegment:
    """A device held by a job over [start, end)."""

    job_id: str
    device_id: str
    start: float
    end: float


@dataclass(frozen=True)
class ClusterSummary:
    """Headline figures of a cluster run."""

    arrived: int
    done: int
    rejected: int
    unfinished: int
    throughput_per_h: float
    median_overhead: float
    deadline_miss_fraction: float
    failures: int
    peak_temp_k: float

    def as_row(self) -> dict:
        return {column: getattr(self, column) for column in SUMMARY_COLUMNS}


@dataclass
class ClusterResult:
    """Everything a cluster run produces."""

    metrics: List[RunMetrics]
    decisions: List[Decision]
    records: Dict[str, JobRecord]
    segments: List[DeviceSegment]
    summary: ClusterSummary
    trace: SimTrace = field(default_factory=SimTrace)


class ClusterSimulation:  # pylint: disable=too-many-instance-attributes
    """Runs the global manager and one local manager per node inside a single simulation."""

    def __init__(  # pylint: disable=too-many-arguments
        self,
        topology: Topology,
        workload: WorkloadTrace,
        policy: CheckpointPolicy,
        *,
        epsilon: float = 0.0,
        costs: CostRanges = CostRanges(),
        fault_model: Optional[FaultModel] = None,
        rtms: RtmsParams = RtmsParams(),
        thermal: ThermalParams = ThermalParams(),
        seed: int = 0,
        horizon: float = math.inf,
        record_trace: bool = True,
        guard_factor: float = DEFAULT_GUARD_FACTOR,
    ) -> None:
        self.topology = topology
        self.workload = workload
        self.policy = policy
        self.predictor = Predictor(epsilon)
        self.fault_model = fault_model
        self.params = rtms
        self.thermal = thermal
        self.horizon = horizon
        self.guard_factor = guard_factor
        self.sim = Simulation(record_trace=record_trace)
        self._streams = RandomStreams(seed)
        self._logger: Logger = getLogger(__name__)

        self.views = discover(topology)
        self.devices = DeviceTable(topology.devices)
        self.global_state = GlobalManagerState(loads={node_id: 0.0 for node_id in topology.node_ids})
        self.locals = {
            node_id: LocalManager(node_id, self.views[node_id], self.devices, rtms) for node_id in topology.node_ids
        }
        self.pwcet = PwcetTable(rtms.pwcet_samples)

        self._jobs: Dict[str, Job] = {job.job_id: job for job in workload.jobs}
        self._index: Dict[str, int] = {job.job_id: index for index, job in enumerate(workload.jobs)}
        self._costs: Dict[str, CostParams] = {
            job.job_id: costs.draw(self._streams.stream("costs", index)) for index, job in enumerate(workload.jobs)
        }
        self.records: Dict[str, JobRecord] = {}
        self.decisions: List[Decision] = []
        self.segments: List[DeviceSegment] = []
        self._open: Dict[str, Dict[str, float]] = {}
        self._executions: Dict[str, JobExecution] = {}
        self._history: Dict[str, List[RunMetrics]] = {}
        self._resume: Dict[str, float] = {}
        self._admitted: Set[str] = set()
        self._finished: List[RunMetrics] = []

        self._node_rng = {
            node_id: self._streams.stream("node-faults", index) for index, node_id in enumerate(topology.node_ids)
        }
        self._dispatch_rng = self._streams.stream("dispatch-prediction")
        self._rates: Dict[str, float] = {node_id: self._base_rate() for node_id in topology.node_ids}
        self._pending_failure: Dict[str, Optional[Event]] = {node_id: None for node_id in topology.node_ids}
        self._grids: Dict[str, ThermalGrid] = {node_id: thermal.grid() for node_id in topology.node_ids}
        self._peak_temp = thermal.ambient
        self._failures = 0
        self._last_time = 0.0

        for kind in JOB_EVENT_KINDS:
            self.sim.on(kind, self._route)
        self.sim.on(EventKind.JOB_ARRIVAL, self._on_arrival)
        self.sim.on(EventKind.FAILURE, self._on_failure)
        self.sim.on(EventKind.NODE_REPAIRED, self._on_repaired)
        self.sim.on(EventKind.TEMP_STEP, self._on_temp_step)

    def _base_rate(self) -> float:
        if self.fault_model is None or math.isinf(self.fault_model.base_mttf):
            return 0.0
        return effective_failure_rate(self.fault_model, self.thermal.ambient)

    # bookkeeping

    def _decide(self, job_id: str, event: str, node: str, detail: str = "") -> None:
        self.decisions.append(Decision(time=self.sim.now, job_id=job_id, event=event, node=node, detail=detail))

    def _terminal(self) -> int:
        return sum(record.status in (DONE, REJECTED) for record in self.records.values())

    def _check_complete(self) -> None:
        if self._terminal() == len(self._jobs):
            self.sim.stop()

    def _open_segments(self, job_id: str, device_ids: Tuple[str, ...]) -> None:
        self._open[job_id] = {device_id: self.sim.now for device_id in device_ids}

    def _close_segments(self, job_id: str) -> None:
        for device_id, start in self._open.pop(job_id, {}).items():
            self.segments.append(DeviceSegment(job_id=job_id, device_id=device_id, start=start, end=self.sim.now))

    def _excluded_devices(self) -> Set[str]:
        return set(self.devices.faulty)

    def _touching(self, node_id: str) -> List[str]:
        """Running jobs dispatched to a node or holding one of its devices."""
        node_devices = {device.id for device in self.topology.nodes[self.topology.index_of(node_id)].devices}
        touching = []
        for job_id in sorted(self._executions):
            mapping = self._mapping(job_id)
            if mapping is not None and (mapping.node_id == node_id or node_devices & set(mapping.device_ids)):
                touching.append(job_id)
        return touching

    def _mapping(self, job_id: str) -> Optional[MappingDecision]:
        node_id = self.records[job_id].node
        return self.locals[node_id].state.mappings.get(job_id) if node_id else None

    # arrivals, dispatch and start

    def _on_arrival(self, event: Event) -> None:
        job = self._jobs[event.payload["job_id"]]
        self.records[job.job_id] = JobRecord(job_id=job.job_id, arrival=self.sim.now)
        self._dispatch(job)

    def _refresh_predictions(self) -> None:
        if not self.params.proactive:
            return
        for node_id, pending in self._pending_failure.items():
            if pending is None:
                self.global_state.predicted_failures[node_id] = None
                continue
            time_to_failure = pending.time - self.sim.now
            if time_to_failure <= 0:
                self.global_state.predicted_failures[node_id] = self.sim.now
                continue
            predicted = predict(time_to_failure, self.predictor, self._dispatch_rng)
            self.global_state.predicted_failures[node_id] = self.sim.now + predicted

    def _dispatch(self, job: Job, detail: str = "") -> None:
        self._refresh_predictions()
        try:
            node_id = dispatch(
                self.global_state,
                job,
                self.views,
                self.params,
                now=self.sim.now,
                restore_fraction=self._costs[job.job_id].restore_fraction,
                excluded=self._excluded_devices(),
            )
        except NoCompatibleNodeError as exception:
            if self.global_state.down or self.devices.faulty:
                self.global_state.pending.append(job)
                self._logger.info(f"Job {job.job_id} waits for a repair: {exception}")
                return
            self._reject(job, "", str(exception))
            return
        self.records[job.job_id].node = node_id
        self._decide(job.job_id, "dispatch", node_id, detail)
        self.locals[node_id].enqueue(job)
        self._try_start()

    def _reject(self, job: Job, node_id: str, detail: str) -> None:
        record = self.records[job.job_id]
        record.status = REJECTED
        record.reason = detail
        release_commitment(self.global_state, job.job_id)
        self._decide(job.job_id, "reject", node_id, detail)
        if job.job_class.value == "urgent":
            self._logger.warning(f"Urgent job {job.job_id} rejected at t={self.sim.now:.1f}: {detail}")
        else:
            self._logger.info(f"Job {job.job_id} rejected: {detail}")
        self._check_complete()

    def _try_start(self) -> None:
        progress = True
        while progress:
            progress = False
            for node_id, local in self.locals.items():
                if node_id in self.global_state.down:
                    continue
                for job, mapping in local.next_mappings():
                    progress = True
                    self._admit_and_start(local, job, mapping)

    def _admit_and_start(self, local: LocalManager, job: Job, mapping: MappingDecision) -> None:
        mapped = job.mapped(mapping.t_ideal)
        self._decide(
            job.job_id,
            "map",
            local.node_id,
            f"devices={'|'.join(mapping.device_ids)};t_ideal={mapping.t_ideal:.6f}",
        )
        if job.job_id not in self._admitted:
            rng = self._streams.stream("pwcet", self._index[job.job_id], self.records[job.job_id].segments)
            self.pwcet.build(mapped, mapping, self.topology, rng, job.timing.exceedance)
            decision = admit(mapped, mapping, self.pwcet)
            if not decision.accepted:
                self._reject(job, local.node_id, f"pwcet={decision.pwcet:.6f};deadline={decision.deadline:.6f}")
                return
            self._admitted.add(job.job_id)
            self._decide(job.job_id, "admit", local.node_id, f"pwcet={decision.pwcet:.6f}")
        local.start(mapping)
        self._start_execution(mapped, mapping)

    def _start_execution(self, job: Job, mapping: MappingDecision, restore: bool = False) -> None:
        record = self.records[job.job_id]
        resume = self._resume.pop(job.job_id, 0.0) * job.t_ideal
        execution = JobExecution(
            self.sim,
            job,
            self.policy,
            self._costs[job.job_id],
            self.predictor,
            self._streams.stream("prediction", self._index[job.job_id], record.segments),
            lambda node_id=mapping.node_id: self._next_failure_time(node_id),
            on_done=self._on_job_done,
            resume_progress=resume,
            guard_factor=self.guard_factor,
        )
        self._executions[job.job_id] = execution
        record.status = RUNNING
        record.segments += 1
        if record.start is None:
            record.start = self.sim.now
        self._open_segments(job.job_id, mapping.device_ids)
        execution.start(restore_first=restore or resume > 0)

    def _route(self, event: Event) -> None:
        execution = self._executions.get(event.payload.get("job_id", ""))
        if execution is not None:
            execution.handle(event)

    def _merged_metrics(self, job_id: str, latest: RunMetrics) -> RunMetrics:
        record = self.records[job_id]
        previous = self._history.pop(job_id, [])
        merged = replace(
            latest,
            failures=latest.failures + sum(m.failures for m in previous),
            checkpoints=latest.checkpoints + sum(m.checkpoints for m in previous),
            restores=latest.restores + sum(m.restores for m in previous),
            aborted_checkpoints=latest.aborted_checkpoints + sum(m.aborted_checkpoints for m in previous),
            lost_work=latest.lost_work + sum(m.lost_work for m in previous),
            checkpoint_costs=[c for m in previous for c in m.checkpoint_costs] + latest.checkpoint_costs,
            restore_costs=[c for m in previous for c in m.restore_costs] + latest.restore_costs,
        )
        merged.t_exe = self.sim.now - (record.start if record.start is not None else self.sim.now)
        merged.deadline_met = self.sim.now - record.arrival <= self._jobs[job_id].timing.deadline
        return merged

    def _on_job_done(self, execution: JobExecution) -> None:
        job_id = execution.job.job_id
        record = self.records[job_id]
        self._executions.pop(job_id)
        self._close_segments(job_id)
        self.locals[record.node].finish(job_id)
        release_commitment(self.global_state, job_id)
        record.status = DONE
        record.end = self.sim.now
        self._last_time = self.sim.now
        self._finished.append(self._merged_metrics(job_id, execution.metrics))
        self._logger.debug(f"Job {job_id} done at t={self.sim.now:.3f}")
        self._try_start()
        self._check_complete()

    # failures

    def _next_failure_time(self, node_id: str) -> Optional[float]:
        pending = self._pending_failure.get(node_id)
        return None if pending is None else pending.time

    def _schedule_failure(self, node_id: str) -> None:
        self.sim.cancel(self._pending_failure[node_id])
        self._pending_failure[node_id] = None
        rate = self._rates[node_id]
        if rate <= 0 or node_id in self.global_state.down:
            return
        rng = self._node_rng[node_id]
        time = self.sim.now + float(rng.standard_exponential()) / rate
        scope = float(rng.random())
        devices = self.topology.nodes[self.topology.index_of(node_id)].devices
        device: Optional[str] = None
        down = False
        if scope < self.params.device_fault_fraction and devices:
            device = devices[int(rng.integers(len(devices)))].id
        elif scope < self.params.device_fault_fraction + self.params.node_down_fraction:
            down = True
        self._pending_failure[node_id] = self.sim.schedule(
            time, EventKind.FAILURE, {"node": node_id, "device": device, "down": down}
        )

    def inject_failure(self, time: float, node_id: str, *, device: Optional[str] = None, down: bool = False) -> None:
        """Replace a node's next drawn failure with a scripted one: a crash, a fault of `device`, or an outage."""
        self.sim.cancel(self._pending_failure[node_id])
        self._pending_failure[node_id] = self.sim.schedule(
            time, EventKind.FAILURE, {"node": node_id, "device": device, "down": down}
        )

    def _on_failure(self, event: Event) -> None:
        node_id = event.payload["node"]
        if self._pending_failure.get(node_id) is not event:
            return
        self._pending_failure[node_id] = None
        self._failures += 1
        if event.payload.get("down"):
            self._node_down(node_id)
        elif event.payload.get("device"):
            self._schedule_failure(node_id)
            self._device_fault(event.payload["device"])
        else:
            self._schedule_failure(node_id)
            for job_id in self._touching(node_id):
                local = self.locals[self.records[job_id].node]
                local.on_failure(job_id)
                self._executions[job_id].on_failure()

    def _device_fault(self, device_id: str) -> None:
        holder = self.devices.holder(device_id)
        if holder is None:
            self._take_offline(device_id)
            return
        local = self.locals[self.records[holder].node]
        action = local.on_failure(holder, failed_device=device_id)
        self._take_offline(device_id)
        if action is not RecoveryAction.FAILOVER:
            self._executions[holder].on_failure()
            return
        mapping = local.state.mappings[holder]
        self._decide(holder, "failover", local.node_id, f"from={device_id};to={'|'.join(mapping.device_ids)}")
        self._relaunch(holder, mapping)

    def _relaunch(self, job_id: str, mapping: MappingDecision) -> None:
        """Restart a job's execution on a new mapping from its durable fraction of work."""
        execution = self._executions.pop(job_id)
        durable = execution.evict()
        self._resume[job_id] = durable / execution.job.t_ideal
        self._history.setdefault(job_id, []).append(execution.metrics)
        self._close_segments(job_id)
        self._start_execution(self._jobs[job_id].mapped(mapping.t_ideal), mapping, restore=True)

    def _take_offline(self, device_id: str) -> None:
        self.devices.faulty.add(device_id)
        node_id = self.topology.device(device_id).node_id
        self.sim.schedule_in(self.params.repair_time, EventKind.NODE_REPAIRED, {"node": node_id, "device": device_id})

    def _node_down(self, node_id: str) -> None:
        self.global_state.down.add(node_id)
        node_devices = [device.id for device in self.topology.nodes[self.topology.index_of(node_id)].devices]
        self.devices.faulty.update(node_devices)
        self._logger.warning(f"Node {node_id} down at t={self.sim.now:.1f} for {self.params.repair_time:.0f} s")
        evicted: List[Job] = []
        for job_id in self._touching(node_id):
            local = self.locals[self.records[job_id].node]
            local.on_failure(job_id, node_down=True)
            execution = self._executions.pop(job_id)
            durable = execution.evict()
            self._resume[job_id] = durable / execution.job.t_ideal
            self._history.setdefault(job_id, []).append(execution.metrics)
            self._close_segments(job_id)
            local.finish(job_id)
            release_commitment(self.global_state, job_id)
            self.records[job_id].status = QUEUED
            evicted.append(self._jobs[job_id])
        queued = self.locals[node_id].state.queue
        self.locals[node_id].state.queue = []
        for job in queued:
            release_commitment(self.global_state, job.job_id)
        self.sim.schedule_in(self.params.repair_time, EventKind.NODE_REPAIRED, {"node": node_id, "device": None})
        for job in evicted + queued:
            self._dispatch(job, detail=f"redispatch after {node_id} down")
        self._try_start()

    def _on_repaired(self, event: Event) -> None:
        node_id = event.payload["node"]
        device_id = event.payload.get("device")
        if device_id is not None:
            if node_id not in self.global_state.down:
                self.devices.faulty.discard(device_id)
        else:
            self.global_state.down.discard(node_id)
            for device in self.topology.nodes[self.topology.index_of(node_id)].devices:
                self.devices.faulty.discard(device.id)
            self._schedule_failure(node_id)
            self._logger.info(f"Node {node_id} repaired at t={self.sim.now:.1f}")
        waiting = list(self.global_state.pending)
        self.global_state.pending.clear()
        for job in waiting:
            self._dispatch(job, detail="after repair")
        self._try_start()

    # thermal coupling

    def _on_temp_step(self, _: Event) -> None:
        busy = self.devices.busy
        for node in self.topology.nodes:
            grid = self._grids[node.id].with_device_power(node.devices, busy)
            if self.thermal.mode == "steady":
                grid = replace(grid, temperature=steady_state_temp(grid))
            else:
                grid = advance_temp(grid, self.thermal.step, self.thermal.dt)
            self._grids[node.id] = grid
            hottest = float(np.max(grid.temperature))
            self._peak_temp = max(self._peak_temp, hottest)
            if self.fault_model is None or math.isinf(self.fault_model.base_mttf):
                continue
            rate = effective_failure_rate(self.fault_model, hottest)
            if not math.isclose(rate, self._rates[node.id], rel_tol=1e-12):
                self._rates[node.id] = rate
                if node.id not in self.global_state.down:
                    self._schedule_failure(node.id)
                    for job_id in self._touching(node.id):
                        self._executions[job_id].rearm()
        if self._terminal() < len(self._jobs):
            self.sim.schedule_in(self.thermal.step, EventKind.TEMP_STEP)

    # run

    def run(self) -> ClusterResult:
        """Simulate until every job is done or rejected, or until the horizon."""
        for job in self.workload.jobs:
            self.sim.schedule(job.arrival, EventKind.JOB_ARRIVAL, {"job_id": job.job_id})
        for node_id in self.topology.node_ids:
            if self._pending_failure[node_id] is None:
                self._schedule_failure(node_id)
        if self.thermal.enabled and self._jobs:
            self.sim.schedule(0.0, EventKind.TEMP_STEP)
        if self._jobs:
            self.sim.run_until(self.horizon)
        self._logger.info(
            f"Cluster run finished at t={self.sim.now:.1f}: {len(self._finished)} done, "
            f"{sum(r.status == REJECTED for r in self.records.values())} rejected"
        )
        return ClusterResult(
            metrics=sorted(self._finished, key=lambda metric: self._index[metric.job_id]),
            decisions=self.decisions,
            records=self.records,
            segments=self.segments,
            summary=self.summary(),
            trace=self.sim.trace,
        )

    def summary(self) -> ClusterSummary:
        """Conservation counts and headline metrics."""
        arrived = len(self.records)
        done = list(self._finished)
        rejected = sum(record.status == REJECTED for record in self.records.values())
        makespan = self._last_time
        return ClusterSummary(
            arrived=arrived,
            done=len(done),
            rejected=rejected,
            unfinished=arrived - len(done) - rejected,
            throughput_per_h=3600.0 * len(done) / makespan if makespan > 0 else 0.0,
            median_overhead=float(np.median([metric.overhead for metric in done])) if done else 0.0,
            deadline_miss_fraction=sum(not metric.deadline_met for metric in done) / len(done) if done else 0.0,
            failures=self._failures,
            peak_temp_k=self._peak_temp,
        )
