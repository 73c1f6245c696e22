"""Test Configuration."""

from typing import Callable, Dict, Optional, Sequence

import pytest

from hpc_rtms.calibration import CalibrationResult, ReliabilityExperiment, ReliabilityScenario, calibrate_failure_rate
from hpc_rtms.platform import Device, Node, Topology
from hpc_rtms.types import DeviceKind, JobClass
from hpc_rtms.workload import (
    NO_JITTER,
    Implementation,
    Job,
    KernelSpec,
    Recipe,
    RecipeEntry,
    TimingRequirement,
    WorkloadParams,
)

JobFactory = Callable[..., Job]


@pytest.fixture
def make_job() -> JobFactory:
    """Factory of single-chain jobs with deterministic kernels."""

    def factory(
        job_id: str = "job-0",
        t_ideal: float = 1000.0,
        *,
        arrival: float = 0.0,
        deadline: float = 86400.0,
        job_class: JobClass = JobClass.BATCH,
        kernels: Optional[Sequence[Dict[DeviceKind, float]]] = None,
    ) -> Job:
        kernel_times = kernels if kernels is not None else [{DeviceKind.CPU: t_ideal}]
        kernel_specs = tuple(
            KernelSpec(
                kernel_id=f"{job_id}-k{index}",
                implementations=tuple(
                    Implementation(kind=kind, base_time=base_time, jitter=NO_JITTER)
                    for kind, base_time in times.items()
                ),
            )
            for index, times in enumerate(kernel_times)
        )
        recipe = Recipe(
            application=job_id,
            entries=tuple(
                RecipeEntry(kernel_id=kernel.kernel_id, preferred_kinds=tuple(kernel.kinds)) for kernel in kernel_specs
            ),
        )
        return Job(
            job_id=job_id,
            arrival=arrival,
            kernels=kernel_specs,
            recipe=recipe,
            t_ideal=t_ideal,
            timing=TimingRequirement(deadline=deadline),
            job_class=job_class,
        )

    return factory


def build_node(node_id: str, *kinds: DeviceKind, speed: Optional[Dict[DeviceKind, float]] = None) -> Node:
    """A node with one device per listed kind, ids like `n0-gpu` (repeated kinds get a suffix)."""
    devices = []
    for index, kind in enumerate(kinds):
        suffix = "" if kinds.count(kind) == 1 else f"-{index}"
        devices.append(
            Device(
                id=f"{node_id}-{kind.value.lower()}{suffix}",
                kind=kind,
                node_id=node_id,
                speed_factor=(speed or {}).get(kind, 1.0),
                idle_w=1.0,
                busy_w=8.0,
            )
        )
    return Node(id=node_id, devices=tuple(devices))


@pytest.fixture
def two_node_topology() -> Topology:
    """Two linked nodes, each with a CPU and a GPU."""
    return Topology.line(
        [build_node("n0", DeviceKind.CPU, DeviceKind.GPU), build_node("n1", DeviceKind.CPU, DeviceKind.GPU)]
    )


@pytest.fixture
def small_workload() -> WorkloadParams:
    """About twenty short jobs per replica."""
    return WorkloadParams(mean_t_ideal=100.0, window_factor=20.0)


@pytest.fixture
def make_node() -> Callable[..., Node]:
    """Factory of nodes with one device per listed kind."""
    return build_node


FULL_SCENARIO = ReliabilityScenario(replicas=20, seed=0)


@pytest.fixture(scope="session")
def calibration() -> CalibrationResult:
    """Failure rate calibrated on the full twenty-replica scenario, shared by the slow experiment tests."""
    return calibrate_failure_rate(FULL_SCENARIO)


@pytest.fixture(scope="session")
def full_experiment() -> ReliabilityExperiment:
    """Twenty replicas of about two hundred jobs, generated once."""
    return ReliabilityExperiment(FULL_SCENARIO)
