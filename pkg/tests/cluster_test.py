"""Tests of whole-cluster runs."""

from collections import defaultdict

import numpy as np
import pytest

from hpc_rtms.cluster import DONE, REJECTED, ClusterSimulation, ThermalParams
from hpc_rtms.config import default_topology
from hpc_rtms.platform import Device, Node, Topology
from hpc_rtms.reliability import CheckpointPolicy, CostRanges, FaultModel
from hpc_rtms.rtms import RtmsParams
from hpc_rtms.types import DeviceKind, EventKind, JobClass
from hpc_rtms.workload import WorkloadTrace, generate_workload

NO_THERMAL = ThermalParams(enabled=False)
FAST_PWCET = RtmsParams(pwcet_samples=100)
FIXED_COSTS = CostRanges(checkpoint=(0.02, 0.02), restore=(0.2, 0.2))


def _assert_no_overlap(segments):
    by_device = defaultdict(list)
    for segment in segments:
        by_device[segment.device_id].append(segment)
    for device_segments in by_device.values():
        ordered = sorted(device_segments, key=lambda segment: (segment.start, segment.end))
        for before, after in zip(ordered, ordered[1:]):
            assert after.start >= before.end, f"{before} overlaps {after}"


def _assert_conserved(summary):
    assert summary.arrived == summary.done + summary.rejected + summary.unfinished


def test_single_job_without_failures(two_node_topology, make_job):
    """One job alone on a healthy cluster runs in exactly its T_ideal."""
    workload = WorkloadTrace(jobs=(make_job("a", 100.0),), window=100.0)
    result = ClusterSimulation(
        two_node_topology, workload, CheckpointPolicy.prediction_based(), thermal=NO_THERMAL, rtms=FAST_PWCET
    ).run()
    (metrics,) = result.metrics
    assert metrics.overhead == 0.0
    assert metrics.t_exe == pytest.approx(100.0)
    assert result.records["a"].status == DONE
    assert [decision.event for decision in result.decisions] == ["dispatch", "map", "admit"]
    assert result.summary.done == 1
    assert result.summary.throughput_per_h == pytest.approx(36.0)
    assert result.summary.peak_temp_k == NO_THERMAL.ambient


def test_urgent_job_over_its_deadline_is_rejected(two_node_topology, make_job):
    """An urgent job needing 2000 s cannot meet a 900 s deadline; a batch job alongside still runs."""
    jobs = (
        make_job("urgent", 2000.0, deadline=900.0, job_class=JobClass.URGENT),
        make_job("batch", 2000.0, arrival=1.0),
    )
    workload = WorkloadTrace(jobs=jobs, window=10.0)
    result = ClusterSimulation(
        two_node_topology, workload, CheckpointPolicy.fixed_rate(), thermal=NO_THERMAL, rtms=FAST_PWCET
    ).run()
    assert result.records["urgent"].status == REJECTED
    assert "deadline" in result.records["urgent"].reason
    assert result.records["batch"].status == DONE
    assert (result.summary.arrived, result.summary.done, result.summary.rejected) == (2, 1, 1)
    _assert_conserved(result.summary)


def test_jobs_queue_for_a_shared_device(make_node, make_job):
    """Two GPU-only jobs on a one-GPU cluster run one after the other."""
    topology = Topology.line([make_node("n0", DeviceKind.CPU, DeviceKind.GPU)])
    gpu = [{DeviceKind.GPU: 50.0}]
    jobs = (make_job("a", 50.0, kernels=gpu), make_job("b", 50.0, arrival=10.0, kernels=gpu))
    workload = WorkloadTrace(jobs=jobs, window=10.0)
    result = ClusterSimulation(
        topology, workload, CheckpointPolicy.restart_only(), thermal=NO_THERMAL, rtms=FAST_PWCET
    ).run()
    assert result.records["b"].start == pytest.approx(50.0)
    assert result.records["b"].end == pytest.approx(100.0)
    _assert_no_overlap(result.segments)


def test_horizon_leaves_jobs_unfinished(two_node_topology, make_job):
    """Stopping before a job ends reports it as unfinished."""
    workload = WorkloadTrace(jobs=(make_job("a", 100.0),), window=100.0)
    result = ClusterSimulation(
        two_node_topology, workload, CheckpointPolicy.restart_only(), thermal=NO_THERMAL, rtms=FAST_PWCET, horizon=50.0
    ).run()
    assert result.summary.unfinished == 1
    assert result.summary.done == 0
    _assert_conserved(result.summary)


@pytest.fixture
def faulty_cluster(small_workload):
    """Twenty jobs on the default two-node cluster with frequent failures of every scope."""

    def build(seed=0, **rtms):
        workload = generate_workload(np.random.default_rng(seed), small_workload)
        params = {"pwcet_samples": 100, "repair_time": 100.0, **rtms}
        return ClusterSimulation(
            default_topology(),
            workload,
            CheckpointPolicy.fixed_rate(),
            epsilon=0.05,
            fault_model=FaultModel.from_rate(1 / 200.0),
            rtms=RtmsParams(**params),
            thermal=NO_THERMAL,
            seed=seed,
        )

    return build


def test_node_down_evicts_and_redispatches(faulty_cluster):
    """Jobs on a node that goes down move elsewhere, keep their durable progress, and all finish."""
    simulation = faulty_cluster(node_down_fraction=1.0)
    result = simulation.run()
    assert any(record.segments > 1 for record in result.records.values())
    assert any("down" in decision.detail for decision in result.decisions if decision.event == "dispatch")
    assert result.summary.unfinished == 0
    assert result.summary.failures > 0
    _assert_conserved(result.summary)
    _assert_no_overlap(result.segments)


def test_mixed_failure_scopes_keep_devices_exclusive(faulty_cluster):
    """Crashes, device faults and node outages never put two jobs on one device."""
    result = faulty_cluster(seed=3, device_fault_fraction=0.4, node_down_fraction=0.2).run()
    _assert_no_overlap(result.segments)
    _assert_conserved(result.summary)
    assert len(result.metrics) == result.summary.done
    assert all(metric.t_exe > 0 for metric in result.metrics)


def test_cluster_runs_are_reproducible(faulty_cluster):
    """Same seed, same decisions and summary."""
    first = faulty_cluster(seed=5, device_fault_fraction=0.3, node_down_fraction=0.3).run()
    second = faulty_cluster(seed=5, device_fault_fraction=0.3, node_down_fraction=0.3).run()
    assert [d.as_row() for d in first.decisions] == [d.as_row() for d in second.decisions]
    assert first.summary == second.summary


def test_thermal_coupling_heats_nodes(make_job):
    """Busy devices warm their node above ambient and temperature updates are traced."""
    workload = WorkloadTrace(jobs=(make_job("a", 300.0),), window=300.0)
    thermal = ThermalParams(step=30.0)
    result = ClusterSimulation(
        default_topology(),
        workload,
        CheckpointPolicy.prediction_based(),
        fault_model=FaultModel.from_rate(1e-4, beta=0.05),
        thermal=thermal,
        rtms=FAST_PWCET,
    ).run()
    assert result.summary.peak_temp_k > thermal.ambient
    assert len(result.trace.of_kind(EventKind.TEMP_STEP)) >= 10
    assert result.trace.is_ordered()
    _assert_conserved(result.summary)


def _gpu_node(*speeds):
    devices = tuple(
        Device(id=f"n0-gpu{index}", kind=DeviceKind.GPU, node_id="n0", speed_factor=speed)
        for index, speed in enumerate(speeds)
    )
    return Topology.line([Node(id="n0", devices=devices)])


def test_device_failover_runs_at_the_new_mapping_speed(make_job):
    """A kernel moved from a 2x GPU to a 1x GPU restores and runs for the slower mapping's T_ideal."""
    workload = WorkloadTrace(jobs=(make_job("a", 100.0, kernels=[{DeviceKind.GPU: 200.0}]),), window=100.0)
    simulation = ClusterSimulation(
        _gpu_node(2.0, 1.0),
        workload,
        CheckpointPolicy.restart_only(),
        costs=FIXED_COSTS,
        thermal=NO_THERMAL,
        rtms=FAST_PWCET,
    )
    simulation.inject_failure(50.0, "n0", device="n0-gpu0")
    result = simulation.run()
    assert "failover" in [decision.event for decision in result.decisions]
    # 50 s on the fast GPU are lost, then a 40 s restore and 200 s of work on the slow one
    assert result.records["a"].end == pytest.approx(290.0)
    (metrics,) = result.metrics
    assert (metrics.failures, metrics.restores) == (1, 1)
    assert metrics.restore_costs == pytest.approx([40.0])
    assert "n0-gpu0" in simulation.devices.faulty
    segments = [(segment.device_id, segment.start, segment.end) for segment in result.segments]
    assert segments == [("n0-gpu0", 0.0, 50.0), ("n0-gpu1", 50.0, pytest.approx(290.0))]


def test_device_fault_without_spare_restores_in_place_and_repairs(make_job):
    """With no spare GPU the job restores on its device, which is taken out of service until repaired."""
    workload = WorkloadTrace(jobs=(make_job("a", 100.0, kernels=[{DeviceKind.GPU: 100.0}]),), window=100.0)
    simulation = ClusterSimulation(
        _gpu_node(1.0),
        workload,
        CheckpointPolicy.restart_only(),
        costs=FIXED_COSTS,
        thermal=NO_THERMAL,
        rtms=RtmsParams(pwcet_samples=100, repair_time=100.0),
    )
    simulation.inject_failure(50.0, "n0", device="n0-gpu0")
    result = simulation.run()
    assert result.records["a"].end == pytest.approx(170.0)
    (repaired,) = result.trace.of_kind(EventKind.NODE_REPAIRED)
    assert repaired.time == pytest.approx(150.0)
    assert repaired.payload["device"] == "n0-gpu0"
    assert not simulation.devices.faulty


def test_device_fault_blocks_the_device_for_other_jobs(make_job):
    """A job queued behind a faulted device cannot start on it before the repair."""
    gpu = [{DeviceKind.GPU: 100.0}]
    jobs = (make_job("a", 100.0, kernels=gpu), make_job("b", 100.0, arrival=10.0, kernels=gpu))
    simulation = ClusterSimulation(
        _gpu_node(1.0),
        WorkloadTrace(jobs=jobs, window=10.0),
        CheckpointPolicy.restart_only(),
        costs=FIXED_COSTS,
        thermal=NO_THERMAL,
        rtms=RtmsParams(pwcet_samples=100, repair_time=500.0),
    )
    simulation.inject_failure(50.0, "n0", device="n0-gpu0")
    result = simulation.run()
    assert result.records["a"].end == pytest.approx(170.0)
    assert result.records["b"].start == pytest.approx(550.0)
    _assert_no_overlap(result.segments)
