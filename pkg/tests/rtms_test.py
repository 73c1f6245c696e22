"""Tests of global dispatch, admission, kernel mapping and local recovery."""

import numpy as np
import pytest

from hpc_rtms.platform import Topology, discover
from hpc_rtms.rtms import (
    DeviceTable,
    DoubleBookingError,
    GlobalManagerState,
    LocalManager,
    MissingPwcetError,
    NoCompatibleNodeError,
    PwcetTable,
    RecoveryAction,
    RtmsParams,
    admit,
    dispatch,
    map_kernels,
    release_commitment,
    t_ideal_lower_bound,
)
from hpc_rtms.types import DeviceKind, JobClass
from hpc_rtms.workload import generate_workload

PARAMS = RtmsParams()


def _state(topology):
    return GlobalManagerState(loads={node_id: 0.0 for node_id in topology.node_ids})


def test_dispatch_breaks_ties_by_node_id(two_node_topology, make_job):
    """Equal scores go to the smallest node id; the next job goes where the load is lower."""
    views = discover(two_node_topology)
    state = _state(two_node_topology)
    assert dispatch(state, make_job("a", 100.0), views, PARAMS) == "n0"
    assert state.loads["n0"] == pytest.approx(100.0)
    assert dispatch(state, make_job("b", 100.0), views, PARAMS) == "n1"
    release_commitment(state, "a")
    assert state.loads["n0"] == 0.0
    assert dispatch(state, make_job("c", 100.0), views, PARAMS) == "n0"


def test_dispatch_avoids_a_node_predicted_to_fail(two_node_topology, make_job):
    """A failure predicted inside the job's span adds a restore penalty to that node."""
    views = discover(two_node_topology)
    state = _state(two_node_topology)
    state.predicted_failures["n0"] = 50.0
    assert dispatch(state, make_job("a", 100.0), views, PARAMS, now=0.0, restore_fraction=0.2) == "n1"

    passive = _state(two_node_topology)
    passive.predicted_failures["n0"] = 50.0
    assert dispatch(passive, make_job("a", 100.0), views, RtmsParams(proactive=False)) == "n0"

    late = _state(two_node_topology)
    late.predicted_failures["n0"] = 500.0
    assert dispatch(late, make_job("a", 100.0), views, PARAMS) == "n0"


def test_dispatch_skips_down_nodes(two_node_topology, make_job):
    """A node that is down receives nothing; with every node down the job cannot be placed."""
    views = discover(two_node_topology)
    state = _state(two_node_topology)
    state.down.add("n0")
    assert dispatch(state, make_job("a", 100.0), views, PARAMS) == "n1"
    state.down.add("n1")
    with pytest.raises(NoCompatibleNodeError):
        dispatch(state, make_job("b", 100.0), views, PARAMS)


def test_energy_term_prefers_frugal_nodes(make_node, make_job):
    """With a power weight the node whose best device draws less wins, even if slightly slower."""
    topology = Topology.line([make_node("n0", DeviceKind.GPU), make_node("n1", DeviceKind.FPGA)])
    job = make_job("a", 10.0, kernels=[{DeviceKind.GPU: 10.0, DeviceKind.FPGA: 10.5}])
    views = discover(topology)
    assert dispatch(_state(topology), job, views, PARAMS) == "n0"
    hungry = Topology.from_dict(
        {
            "nodes": [
                {"id": "n0", "devices": [{"id": "n0-gpu", "kind": "GPU", "busy_w": 300.0}]},
                {"id": "n1", "devices": [{"id": "n1-fpga", "kind": "FPGA", "busy_w": 20.0}]},
            ],
            "links": [["n0", "n1"]],
        }
    )
    assert dispatch(_state(hungry), job, discover(hungry), RtmsParams(power_weight=0.01, hop_latency=1.0)) == "n1"


def test_remote_gpu_beats_local_cpu(make_node, make_job):
    """A kernel ten times faster on a GPU one hop away is mapped there with a 1% hop penalty."""
    topology = Topology.line([make_node("n0", DeviceKind.CPU), make_node("n1", DeviceKind.GPU)])
    job = make_job("a", 100.0, kernels=[{DeviceKind.CPU: 100.0, DeviceKind.GPU: 10.0}])
    mapping = map_kernels(job, "n0", discover(topology)["n0"], PARAMS)
    (assignment,) = mapping.assignments
    assert assignment.device_id == "n1-gpu"
    assert assignment.hop_penalty == pytest.approx(0.1)
    assert mapping.t_ideal == pytest.approx(10.1)


def test_fast_remote_fpga_beats_local_cpu(make_node, make_job):
    """An FPGA three times faster one hop away costs 10/3 x 1.01 against 10 s on the local CPU."""
    topology = Topology.line(
        [make_node("n0", DeviceKind.CPU), make_node("n1", DeviceKind.FPGA, speed={DeviceKind.FPGA: 3.0})]
    )
    job = make_job("a", 10.0, kernels=[{DeviceKind.CPU: 10.0, DeviceKind.FPGA: 10.0}])
    view = discover(topology)["n0"]
    mapping = map_kernels(job, "n0", view, PARAMS)
    assert mapping.device_ids == ("n1-fpga",)
    assert mapping.t_ideal == pytest.approx(10.0 / 3.0 * 1.01)
    assert t_ideal_lower_bound(job, view, PARAMS, set()) == pytest.approx(mapping.t_ideal)


def test_mapping_waits_when_devices_are_busy(two_node_topology, make_job):
    """With every GPU busy a GPU-only kernel cannot be mapped."""
    view = discover(two_node_topology)["n0"].with_status({"n0-gpu", "n1-gpu"})
    job = make_job("a", 10.0, kernels=[{DeviceKind.GPU: 10.0}])
    assert map_kernels(job, "n0", view, PARAMS) is None


def test_absolute_hop_latency(make_node, make_job):
    """A fixed per-hop latency replaces the proportional penalty."""
    topology = Topology.line([make_node("n0", DeviceKind.CPU), make_node("n1", DeviceKind.GPU)])
    job = make_job("a", 10.0, kernels=[{DeviceKind.GPU: 10.0}])
    mapping = map_kernels(job, "n0", discover(topology)["n0"], RtmsParams(hop_latency=2.0))
    assert mapping.t_ideal == pytest.approx(12.0)


@pytest.mark.parametrize(("t_ideal", "accepted"), [(800.0, True), (1000.0, False)])
def test_admission_against_the_deadline(two_node_topology, make_job, t_ideal, accepted):
    """With a 900 s deadline a job whose pWCET is 800 s is admitted and one at 1000 s is not."""
    job = make_job("a", t_ideal, deadline=900.0, job_class=JobClass.URGENT)
    mapping = map_kernels(job, "n0", discover(two_node_topology)["n0"], PARAMS)
    table = PwcetTable(samples=100)
    table.build(job, mapping, two_node_topology, np.random.default_rng(0), job.timing.exceedance)
    decision = admit(job, mapping, table)
    assert decision.accepted is accepted
    assert decision.pwcet == pytest.approx(t_ideal)
    assert decision.deadline == 900.0


def test_admission_needs_an_estimate(two_node_topology, make_job):
    """Admitting a mapping whose pWCET was never computed is an error."""
    job = make_job("a", 100.0)
    mapping = map_kernels(job, "n0", discover(two_node_topology)["n0"], PARAMS)
    with pytest.raises(MissingPwcetError):
        admit(job, mapping, PwcetTable())


def test_pwcet_table_reuses_estimates(two_node_topology, small_workload):
    """The same job and mapping are fitted once; noisy jobs get a pWCET above their mean time."""
    job = generate_workload(np.random.default_rng(1), small_workload).jobs[0]
    mapping = map_kernels(job, "n0", discover(two_node_topology)["n0"], PARAMS)
    table = PwcetTable(samples=500)
    first = table.build(job, mapping, two_node_topology, np.random.default_rng(2), 1e-6)
    second = table.build(job, mapping, two_node_topology, np.random.default_rng(3), 1e-6)
    assert first is second
    assert len(table) == 1
    assert first.value > mapping.t_ideal


def test_device_table_rejects_double_booking(two_node_topology):
    """A device serves one job at a time, and out-of-service devices serve none."""
    table = DeviceTable(two_node_topology.devices)
    table.allocate("a", ["n0-gpu"])
    with pytest.raises(DoubleBookingError):
        table.allocate("b", ["n0-gpu"])
    table.faulty.add("n1-gpu")
    with pytest.raises(DoubleBookingError):
        table.allocate("b", ["n1-gpu"])
    assert table.release("a") == ["n0-gpu"]
    table.allocate("b", ["n0-gpu"])
    assert table.holder("n0-gpu") == "b"


def _local(topology, node_id="n0"):
    devices = DeviceTable(topology.devices)
    return LocalManager(node_id, discover(topology)[node_id], devices, PARAMS), devices


def test_local_queue_is_first_come_first_served_per_kind(make_node, make_job):
    """A job waiting for the GPU holds back later GPU jobs but not CPU jobs."""
    topology = Topology.line([make_node("n0", DeviceKind.CPU, DeviceKind.GPU)])
    local, _ = _local(topology)
    gpu = {DeviceKind.GPU: 10.0}
    for job in (
        make_job("a", 10.0, kernels=[gpu]),
        make_job("b", 10.0, kernels=[gpu]),
        make_job("c", 10.0, kernels=[{DeviceKind.CPU: 10.0}]),
        make_job("d", 10.0, kernels=[gpu]),
    ):
        local.enqueue(job)
    ready = local.next_mappings()
    assert [job.job_id for job, _ in ready] == ["a", "c"]
    for _, mapping in ready:
        local.start(mapping)
    assert [job.job_id for job in local.state.queue] == ["b", "d"]
    local.finish("a")
    assert [job.job_id for job, _ in local.next_mappings()] == ["b"]


def test_device_fault_fails_over_to_a_replica(make_node, make_job):
    """A fault on a held GPU moves the kernel to the other GPU."""
    topology = Topology.line([make_node("n0", DeviceKind.GPU, DeviceKind.GPU)])
    local, devices = _local(topology)
    local.enqueue(make_job("a", 10.0, kernels=[{DeviceKind.GPU: 10.0}]))
    ((_, mapping),) = local.next_mappings()
    local.start(mapping)
    assert mapping.device_ids == ("n0-gpu-0",)
    assert local.on_failure("a", failed_device="n0-gpu-0") is RecoveryAction.FAILOVER
    assert local.state.mappings["a"].device_ids == ("n0-gpu-1",)
    assert devices.holder("n0-gpu-1") == "a"
    assert devices.holder("n0-gpu-0") is None


def test_device_fault_without_replica_restores(make_node, make_job):
    """With no free device of the same kind the job restores in place."""
    topology = Topology.line([make_node("n0", DeviceKind.GPU)])
    local, devices = _local(topology)
    local.enqueue(make_job("a", 10.0, kernels=[{DeviceKind.GPU: 10.0}]))
    ((_, mapping),) = local.next_mappings()
    local.start(mapping)
    assert local.on_failure("a", failed_device="n0-gpu") is RecoveryAction.RESTORE
    assert devices.holder("n0-gpu") == "a"


def test_node_failure_recovery(two_node_topology, make_job):
    """A node crash restores in place; a node going down sends the job back to the global manager."""
    local, _ = _local(two_node_topology)
    local.enqueue(make_job("a", 10.0))
    ((_, mapping),) = local.next_mappings()
    local.start(mapping)
    assert local.on_failure("a") is RecoveryAction.RESTORE
    assert local.on_failure("a", node_down=True) is RecoveryAction.REDISPATCH
