"""Two-layer run-time management: global dispatch and admission, per-node kernel mapping and recovery."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from logging import Logger, getLogger
from typing import Deque, Dict, Iterable, List, Mapping, Optional, Set, Tuple

import numpy as np

from hpc_rtms.platform import Device, GlobalResourceView, Topology, ViewEntry
from hpc_rtms.pwcet import (
    DEFAULT_EXCEEDANCE,
    PwcetEstimate,
    SampleSet,
    TailFitError,
    estimate,
    met,
)
from hpc_rtms.reliability import DEFAULT_RESTORE_RANGE
from hpc_rtms.types import DeviceKind
from hpc_rtms.workload import Implementation, Job, KernelSpec, sample_exec_times

DEFAULT_HOP_LATENCY_FRACTION = 0.01
DEFAULT_PWCET_SAMPLES = 1000
DECISION_LOG_COLUMNS = ["time", "job_id", "event", "node", "detail"]


class RtmsError(RuntimeError):
    """Base class for resource-management failures."""


class NoCompatibleNodeError(RtmsError):
    """Raised when no node can reach devices for every kernel of a job."""


class MissingPwcetError(RtmsError, LookupError):
    """Raised when admission asks for a pWCET estimate that was never computed."""


class DoubleBookingError(RtmsError):
    """Raised when a device would serve two jobs at once."""


@dataclass(frozen=True)
class RtmsParams:
    """Tunables of both management layers.

    `hop_latency` fixes an absolute per-hop penalty in seconds; when unset each hop costs
    `hop_latency_fraction` of the kernel's mean time on the device.
    """

    hop_latency_fraction: float = DEFAULT_HOP_LATENCY_FRACTION
    hop_latency: Optional[float] = None
    proactive: bool = True
    power_weight: float = 0.0
    pwcet_samples: int = DEFAULT_PWCET_SAMPLES
    device_fault_fraction: float = 0.0
    node_down_fraction: float = 0.0
    repair_time: float = 3600.0

    def __post_init__(self) -> None:
        if self.hop_latency_fraction < 0 or (self.hop_latency is not None and self.hop_latency < 0):
            raise ValueError("Hop latency must be >= 0")
        if self.power_weight < 0:
            raise ValueError(f"Power weight must be >= 0, got {self.power_weight}")
        if self.pwcet_samples < 30:
            raise ValueError(f"pWCET needs at least 30 samples per mapping, got {self.pwcet_samples}")
        if not 0.0 <= self.device_fault_fraction <= 1.0 or not 0.0 <= self.node_down_fraction <= 1.0:
            raise ValueError("Failure scope fractions must be in [0, 1]")
        if self.device_fault_fraction + self.node_down_fraction > 1.0:
            raise ValueError("Device-fault and node-down fractions must sum to at most 1")
        if self.repair_time <= 0:
            raise ValueError(f"Repair time must be positive, got {self.repair_time}")

    def hop_penalty(self, hops: int, mean_time: float) -> float:
        """Access penalty in seconds for a device `hops` away."""
        if self.hop_latency is not None:
            return hops * self.hop_latency
        return hops * self.hop_latency_fraction * mean_time


@dataclass(frozen=True)
class KernelAssignment:
    """Placement of one kernel."""

    kernel_id: str
    implementation: Implementation
    device_id: str
    mean_time: float
    hop_penalty: float

    @property
    def cost(self) -> float:
        """Expected time including remote access."""
        return self.mean_time + self.hop_penalty


@dataclass(frozen=True)
class MappingDecision:
    """Kernel placements of a job and the T_ideal they imply."""

    job_id: str
    node_id: str
    assignments: Tuple[KernelAssignment, ...]

    @property
    def t_ideal(self) -> float:
        """Sum of chosen mean times and hop penalties."""
        return math.fsum(assignment.cost for assignment in self.assignments)

    @property
    def device_ids(self) -> Tuple[str, ...]:
        """Distinct devices in kernel order."""
        return tuple(dict.fromkeys(assignment.device_id for assignment in self.assignments))

    @property
    def key(self) -> Tuple[str, Tuple[str, ...]]:
        """pWCET table key."""
        return self.job_id, tuple(assignment.device_id for assignment in self.assignments)

    def with_device(self, kernel_id: str, entry: ViewEntry, params: RtmsParams) -> "MappingDecision":
        """Copy with one kernel moved onto another device of the same kind."""
        assignments = []
        for assignment in self.assignments:
            if assignment.kernel_id == kernel_id:
                mean_time = assignment.implementation.mean_time(entry.device)
                assignment = KernelAssignment(
                    kernel_id=kernel_id,
                    implementation=assignment.implementation,
                    device_id=entry.device.id,
                    mean_time=mean_time,
                    hop_penalty=params.hop_penalty(entry.hops, mean_time),
                )
            assignments.append(assignment)
        return MappingDecision(job_id=self.job_id, node_id=self.node_id, assignments=tuple(assignments))


class DeviceTable:
    """Cluster-wide device allocation: which job holds a device, and which devices are out of service."""

    def __init__(self, devices: Iterable[Device]) -> None:
        self._holder: Dict[str, Optional[str]] = {device.id: None for device in devices}
        self.faulty: Set[str] = set()

    def holder(self, device_id: str) -> Optional[str]:
        return self._holder[device_id]

    @property
    def busy(self) -> Set[str]:
        """Allocated devices."""
        return {device_id for device_id, job_id in self._holder.items() if job_id is not None}

    @property
    def unavailable(self) -> Set[str]:
        """Allocated or out-of-service devices."""
        return self.busy | self.faulty

    def allocate(self, job_id: str, device_ids: Iterable[str], keep: Iterable[str] = ()) -> None:
        """Give devices to a job; devices in `keep` were already the job's and may be out of service."""
        device_ids = list(device_ids)
        kept = set(keep)
        for device_id in device_ids:
            holder = self._holder[device_id]
            if holder is not None and holder != job_id:
                raise DoubleBookingError(f"Device {device_id} held by {holder}, requested by {job_id}")
            if device_id in self.faulty and device_id not in kept:
                raise DoubleBookingError(f"Device {device_id} is out of service, requested by {job_id}")
        for device_id in device_ids:
            self._holder[device_id] = job_id

    def release(self, job_id: str) -> List[str]:
        """Free every device held by a job."""
        released = [device_id for device_id, holder in self._holder.items() if holder == job_id]
        for device_id in released:
            self._holder[device_id] = None
        return released


@dataclass(frozen=True)
class Decision:
    """One line of the scheduler decision log."""

    time: float
    job_id: str
    event: str
    node: str
    detail: str = ""

    def as_row(self) -> dict:
        return {"time": self.time, "job_id": self.job_id, "event": self.event, "node": self.node, "detail": self.detail}


def _best_entry(
    kernel: KernelSpec, entries: Iterable[ViewEntry], params: RtmsParams
) -> Optional[Tuple[float, ViewEntry, Implementation, float, float]]:
    best = None
    for entry in entries:
        implementation = kernel.implementation_for(entry.device.kind)
        if implementation is None:
            continue
        mean_time = implementation.mean_time(entry.device)
        penalty = params.hop_penalty(entry.hops, mean_time)
        candidate = (mean_time + penalty, entry, implementation, mean_time, penalty)
        if best is None or (candidate[0], entry.hops, entry.device.id) < (best[0], best[1].hops, best[1].device.id):
            best = candidate
    return best


def t_ideal_lower_bound(job: Job, view: GlobalResourceView, params: RtmsParams, excluded: Set[str]) -> Optional[float]:
    """Best-case T_ideal from a node, ignoring device occupancy; None if some kernel has no usable device."""
    entries = [entry for entry in view.entries if entry.device.id not in excluded]
    total = 0.0
    for kernel in job.kernels:
        best = _best_entry(kernel, entries, params)
        if best is None:
            return None
        total += best[0]
    return total


def _best_case_energy(job: Job, view: GlobalResourceView, params: RtmsParams, excluded: Set[str]) -> float:
    entries = [entry for entry in view.entries if entry.device.id not in excluded]
    energy = 0.0
    for kernel in job.kernels:
        best = _best_entry(kernel, entries, params)
        if best is not None:
            energy += best[1].device.busy_w * best[0]
    return energy


@dataclass
class GlobalManagerState:
    """Cluster-level bookkeeping."""

    loads: Dict[str, float]
    pending: Deque[Job] = field(default_factory=deque)
    predicted_failures: Dict[str, Optional[float]] = field(default_factory=dict)
    assignments: Dict[str, str] = field(default_factory=dict)
    committed: Dict[str, float] = field(default_factory=dict)
    down: Set[str] = field(default_factory=set)

    def __post_init__(self) -> None:
        if any(load < 0 for load in self.loads.values()):
            raise ValueError("Node loads must be >= 0")


def dispatch(  # pylint: disable=too-many-arguments
    state: GlobalManagerState,
    job: Job,
    views: Mapping[str, GlobalResourceView],
    params: RtmsParams,
    *,
    now: float = 0.0,
    restore_fraction: float = sum(DEFAULT_RESTORE_RANGE) / 2.0,
    excluded: Optional[Set[str]] = None,
) -> str:
    """Pick the node with the lowest score and commit the job's work to it.

    score = load + T_ideal lower bound, plus restore_fraction x T_ideal when the node's predicted failure
    falls inside the job's expected span, plus power_weight x best-case energy. Ties go to the smallest
    node id.
    """
    excluded = excluded or set()
    scores: List[Tuple[float, str, float]] = []
    for node_id, view in views.items():
        if node_id in state.down:
            continue
        bound = t_ideal_lower_bound(job, view, params, excluded)
        if bound is None:
            continue
        load = state.loads.get(node_id, 0.0)
        score = load + bound
        predicted = state.predicted_failures.get(node_id)
        if params.proactive and predicted is not None and now + load <= predicted <= now + load + bound:
            score += restore_fraction * bound
        if params.power_weight:
            score += params.power_weight * _best_case_energy(job, view, params, excluded)
        scores.append((score, node_id, bound))
    if not scores:
        raise NoCompatibleNodeError(
            f"Job {job.job_id}: no reachable node offers devices for kernels needing "
            f"{[sorted(kind.value for kind in kernel.kinds) for kernel in job.kernels]}"
        )
    _, node_id, bound = min(scores)
    state.loads[node_id] = state.loads.get(node_id, 0.0) + bound
    state.committed[job.job_id] = bound
    state.assignments[job.job_id] = node_id
    return node_id


def release_commitment(state: GlobalManagerState, job_id: str) -> None:
    """Remove a job's committed work from its node's load."""
    node_id = state.assignments.pop(job_id, None)
    committed = state.committed.pop(job_id, 0.0)
    if node_id is not None:
        state.loads[node_id] = max(0.0, state.loads.get(node_id, 0.0) - committed)


def map_kernels(job: Job, node_id: str, view: GlobalResourceView, params: RtmsParams) -> Optional[MappingDecision]:
    """Place every kernel on the free compatible device with the lowest mean time plus hop penalty.

    Kernels of one job run one after the other, so they may share a device. Returns None when some kernel
    has no free compatible device; the caller queues the job.
    """
    free = view.free_entries()
    assignments = []
    for kernel in job.kernels:
        best = _best_entry(kernel, free, params)
        if best is None:
            return None
        _, entry, implementation, mean_time, penalty = best
        assignments.append(
            KernelAssignment(
                kernel_id=kernel.kernel_id,
                implementation=implementation,
                device_id=entry.device.id,
                mean_time=mean_time,
                hop_penalty=penalty,
            )
        )
    return MappingDecision(job_id=job.job_id, node_id=node_id, assignments=tuple(assignments))


def blocking_kinds(job: Job, view: GlobalResourceView) -> Set[DeviceKind]:
    """Kinds a job waits for: those of every kernel that has no free compatible device."""
    free_kinds = {entry.device.kind for entry in view.free_entries()}
    blocked: Set[DeviceKind] = set()
    for kernel in job.kernels:
        if not free_kinds.intersection(kernel.kinds):
            blocked.update(kernel.kinds)
    return blocked


class PwcetTable:
    """pWCET estimates per (job, mapping), fitted on simulated job execution times.

    Each sample is one whole-job run (every kernel plus hop penalties), so the exceedance applies per job.
    Deterministic executions have no tail to fit and use their constant time.
    """

    def __init__(self, samples: int = DEFAULT_PWCET_SAMPLES) -> None:
        self.samples = samples
        self._entries: Dict[Tuple[Tuple[str, Tuple[str, ...]], float], PwcetEstimate] = {}
        self._logger: Logger = getLogger(__name__)

    def __len__(self) -> int:
        return len(self._entries)

    def job_samples(
        self, job: Job, mapping: MappingDecision, topology: Topology, rng: np.random.Generator
    ) -> SampleSet:
        """Simulated end-to-end execution times of a job under a mapping."""
        kernels = {kernel.kernel_id: kernel for kernel in job.kernels}
        total = np.zeros(self.samples)
        for assignment in mapping.assignments:
            device = topology.device(assignment.device_id)
            total += sample_exec_times(
                kernels[assignment.kernel_id], assignment.implementation, device, rng, self.samples
            )
            total += assignment.hop_penalty
        return SampleSet(values=total, label=job.job_id)

    def build(
        self,
        job: Job,
        mapping: MappingDecision,
        topology: Topology,
        rng: np.random.Generator,
        exceedance: float = DEFAULT_EXCEEDANCE,
    ) -> PwcetEstimate:
        """Fit and store the estimate of a mapping, reusing a stored one."""
        key = (mapping.key, exceedance)
        if key in self._entries:
            return self._entries[key]
        samples = self.job_samples(job, mapping, topology, rng)
        try:
            result = estimate(samples, exceedance)
        except TailFitError:
            observed = met(samples)
            result = PwcetEstimate(exceedance=exceedance, value=observed, met=observed)
        self._entries[key] = result
        self._logger.debug(f"pWCET({exceedance:g}) of {job.job_id} on {mapping.device_ids}: {result.value:.3f} s")
        return result

    def lookup(self, mapping: MappingDecision, exceedance: float) -> PwcetEstimate:
        """Stored estimate of a mapping."""
        try:
            return self._entries[(mapping.key, exceedance)]
        except KeyError as exception:
            raise MissingPwcetError(
                f"No pWCET estimate for job {mapping.job_id} on {mapping.device_ids} at {exceedance:g}"
            ) from exception


@dataclass(frozen=True)
class AdmissionDecision:
    """Admission outcome with the figures it was based on."""

    accepted: bool
    pwcet: float
    deadline: float


def admit(job: Job, mapping: MappingDecision, table: PwcetTable) -> AdmissionDecision:
    """Accept iff the pWCET at exceedance 1 - p fits within the job's deadline."""
    result = table.lookup(mapping, job.timing.exceedance)
    return AdmissionDecision(
        accepted=result.value <= job.timing.deadline, pwcet=result.value, deadline=job.timing.deadline
    )


class RecoveryAction(str, Enum):
    """What a local manager does about a failure hitting one of its jobs."""

    RESTORE = "restore"
    FAILOVER = "failover"
    REDISPATCH = "redispatch"


@dataclass
class LocalManagerState:
    """Node-level bookkeeping."""

    node_id: str
    queue: List[Job] = field(default_factory=list)
    mappings: Dict[str, MappingDecision] = field(default_factory=dict)


class LocalManager:
    """Maps and starts the jobs dispatched to one node and picks the recovery for failures."""

    def __init__(self, node_id: str, view: GlobalResourceView, devices: DeviceTable, params: RtmsParams) -> None:
        self.state = LocalManagerState(node_id=node_id)
        self.view = view
        self.devices = devices
        self.params = params
        self._logger: Logger = getLogger(__name__)

    @property
    def node_id(self) -> str:
        return self.state.node_id

    def current_view(self) -> GlobalResourceView:
        """The node's view with allocated and out-of-service devices marked busy."""
        return self.view.with_status(self.devices.unavailable)

    def enqueue(self, job: Job) -> None:
        self.state.queue.append(job)

    def next_mappings(self) -> List[Tuple[Job, MappingDecision]]:
        """Pop queued jobs that can be mapped now, first come first served per device kind.

        A job that cannot be mapped blocks the kinds it waits for; later jobs needing only blocked kinds
        stay behind it. Devices of returned mappings are not yet allocated.
        """
        ready: List[Tuple[Job, MappingDecision]] = []
        blocked: Set[DeviceKind] = set()
        claimed: Set[str] = set()
        remaining: List[Job] = []
        for job in self.state.queue:
            if any(set(kernel.kinds) <= blocked for kernel in job.kernels):
                remaining.append(job)
                continue
            view = self.view.with_status(self.devices.unavailable | claimed)
            mapping = map_kernels(job, self.node_id, view, self.params)
            if mapping is None:
                blocked |= blocking_kinds(job, view)
                remaining.append(job)
                continue
            claimed.update(mapping.device_ids)
            ready.append((job, mapping))
        self.state.queue = remaining
        return ready

    def start(self, mapping: MappingDecision) -> None:
        """Allocate a mapping's devices."""
        self.devices.allocate(mapping.job_id, mapping.device_ids)
        self.state.mappings[mapping.job_id] = mapping

    def finish(self, job_id: str) -> List[str]:
        """Release a job's devices."""
        self.state.mappings.pop(job_id, None)
        return self.devices.release(job_id)

    def on_failure(self, job_id: str, failed_device: Optional[str] = None, node_down: bool = False) -> RecoveryAction:
        """Choose the recovery for a running job.

        Node-down sends the job back to the global queue. A device fault moves the affected kernels to a
        free device of the same kind when one exists. Otherwise the job restores in place.
        """
        if node_down:
            return RecoveryAction.REDISPATCH
        mapping = self.state.mappings.get(job_id)
        if failed_device is None or mapping is None or failed_device not in mapping.device_ids:
            return RecoveryAction.RESTORE
        view = self.view.with_status(self.devices.unavailable | {failed_device})
        kind = self.view.entry(failed_device).device.kind
        replicas = sorted(view.free_entries(kind), key=lambda entry: (entry.hops, entry.device.id))
        if not replicas:
            return RecoveryAction.RESTORE
        replica = replicas[0]
        remapped = mapping
        for assignment in mapping.assignments:
            if assignment.device_id == failed_device:
                remapped = remapped.with_device(assignment.kernel_id, replica, self.params)
        held = self.devices.release(job_id)
        self.devices.allocate(job_id, remapped.device_ids, keep=held)
        self.state.mappings[job_id] = remapped
        self._logger.info(f"Job {job_id}: device {failed_device} failed, kernels moved to {replica.device.id}")
        return RecoveryAction.FAILOVER
