"""Experiment and topology configuration: JSON schemas, validation and typed settings."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, replace
from logging import Logger, getLogger
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

from jsonschema import Draft7Validator
from singer_sdk import typing as th  # JSON schema typing helpers

from hpc_rtms.calibration import DEFAULT_TARGET, DEFAULT_TOLERANCE, ReliabilityScenario
from hpc_rtms.cluster import ThermalParams
from hpc_rtms.execution import DEFAULT_GUARD_FACTOR
from hpc_rtms.platform import Device, Node, Topology, TopologyError, discover, load_topology
from hpc_rtms.pwcet import DEFAULT_EXCEEDANCE
from hpc_rtms.reliability import (
    DEFAULT_CHECKPOINT_RANGE,
    DEFAULT_HEDGE_FRACTION,
    DEFAULT_INTERVAL_FACTOR,
    DEFAULT_RESTORE_RANGE,
    DEFAULT_SAFETY_MARGIN,
    CheckpointPolicy,
    CostRanges,
    FaultModel,
    PolicyKind,
    ReliabilityError,
)
from hpc_rtms.rtms import DEFAULT_HOP_LATENCY_FRACTION, DEFAULT_PWCET_SAMPLES, RtmsParams
from hpc_rtms.types import DeviceKind, JobClass
from hpc_rtms.workload import DEFAULT_JITTER_SCALE, JitterModel, WorkloadError, WorkloadParams

DEFAULT_EPSILON_GRID = (0.0, 0.005, 0.01, 0.025, 0.05, 0.1)
SWEEP_POLICIES = (PolicyKind.FIXED_RATE, PolicyKind.PREDICTION_BASED, PolicyKind.ERROR_TOLERANT)

_logger: Logger = getLogger(__name__)


class ConfigError(ValueError):
    """Raised when a configuration does not validate; `problems` lists every violation."""

    def __init__(self, problems: List[str]) -> None:
        super().__init__("Invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


TOPOLOGY_SCHEMA = th.PropertiesList(
    th.Property(
        "nodes",
        th.ArrayType(
            th.ObjectType(
                th.Property("id", th.StringType, required=True, description="Node identifier."),
                th.Property(
                    "devices",
                    th.ArrayType(
                        th.ObjectType(
                            th.Property("id", th.StringType, required=True, description="Device identifier."),
                            th.Property(
                                "kind",
                                th.StringType,
                                required=True,
                                allowed_values=[kind.value for kind in DeviceKind],
                                description="Processing-unit kind.",
                            ),
                            th.Property("speed_factor", th.NumberType, description="Speed relative to nominal."),
                            th.Property("idle_w", th.NumberType, description="Idle power in watts."),
                            th.Property("busy_w", th.NumberType, description="Busy power in watts."),
                        )
                    ),
                    description="Devices attached to the node.",
                ),
            )
        ),
        required=True,
        description="Cluster nodes in hop-matrix order.",
    ),
    th.Property(
        "hops",
        th.ArrayType(th.ArrayType(th.CustomType({"type": ["integer", "null"]}))),
        description="Symmetric node-by-node hop matrix with a zero diagonal; null marks unreachable nodes.",
    ),
    th.Property(
        "links",
        th.ArrayType(th.ArrayType(th.StringType)),
        description="Undirected node links; the hop matrix is derived from shortest paths when `hops` is absent.",
    ),
).to_dict()


EXPERIMENT_CONFIG_SCHEMA = th.PropertiesList(
    th.Property("seed", th.IntegerType, default=0, description="Base seed of every random stream."),
    th.Property("replicas", th.IntegerType, default=20, description="Replicas per calibration step and sweep cell."),
    th.Property("output_dir", th.StringType, default="output", description="Directory receiving every report."),
    th.Property(
        "topology_file",
        th.StringType,
        description="Path of a topology JSON file, relative to the config file.",
    ),
    th.Property(
        "topology",
        th.ObjectType(additional_properties=True),
        description="Inline topology in the topology file format. Defaults to two linked four-device nodes.",
    ),
    th.Property(
        "policy",
        th.StringType,
        default=PolicyKind.PREDICTION_BASED.value,
        allowed_values=[kind.value for kind in PolicyKind],
        description="Checkpoint policy of `simulate`.",
    ),
    th.Property(
        "policies",
        th.ArrayType(th.StringType),
        default=[kind.value for kind in SWEEP_POLICIES],
        description="Policies compared by `sweep`.",
    ),
    th.Property("epsilon", th.NumberType, default=0.0, description="Prediction error bound of `simulate`."),
    th.Property(
        "epsilon_grid",
        th.ArrayType(th.NumberType),
        default=list(DEFAULT_EPSILON_GRID),
        description="Ascending prediction error bounds swept by `sweep`.",
    ),
    th.Property(
        "exceedance",
        th.NumberType,
        default=DEFAULT_EXCEEDANCE,
        description="Exceedance probability of the pWCET reported by `pwcet`.",
    ),
    th.Property(
        "failure_rate",
        th.NumberType,
        description="Node failure rate in 1/s at the reference temperature. Read from calibration.csv when unset.",
    ),
    th.Property("horizon", th.NumberType, description="Simulated-time limit of `simulate` in seconds."),
    th.Property(
        "guard_factor",
        th.NumberType,
        default=DEFAULT_GUARD_FACTOR,
        description="A job is aborted once its execution exceeds this multiple of T_ideal.",
    ),
    th.Property(
        "workload",
        th.ObjectType(
            th.Property("mean_t_ideal", th.NumberType, default=100.0, description="Mean nominal job length (s)."),
            th.Property("window_factor", th.NumberType, default=200.0, description="Arrival window / mean T_ideal."),
            th.Property("arrival_rate", th.NumberType, description="Arrivals per second (default 1 / mean T_ideal)."),
            th.Property("urgent_fraction", th.NumberType, default=0.2, description="Share of urgent jobs."),
            th.Property("max_kernels", th.IntegerType, default=3, description="Kernels per job are drawn in 1..max."),
            th.Property(
                "jitter",
                th.StringType,
                default="exponential",
                allowed_values=["none", "exponential", "uniform"],
                description="Execution-time noise model.",
            ),
            th.Property("jitter_scale", th.NumberType, default=DEFAULT_JITTER_SCALE, description="Noise scale."),
            th.Property("trace_file", th.StringType, description="Workload CSV to replay instead of generating."),
        ),
        default={},
        description="Workload generation.",
    ),
    th.Property(
        "costs",
        th.ObjectType(
            th.Property("checkpoint_min", th.NumberType, default=DEFAULT_CHECKPOINT_RANGE[0], description="c low."),
            th.Property("checkpoint_max", th.NumberType, default=DEFAULT_CHECKPOINT_RANGE[1], description="c high."),
            th.Property("restore_min", th.NumberType, default=DEFAULT_RESTORE_RANGE[0], description="r low."),
            th.Property("restore_max", th.NumberType, default=DEFAULT_RESTORE_RANGE[1], description="r high."),
            th.Property(
                "permanent_state_fraction",
                th.NumberType,
                description="Fine-grain checkpointing: share of state saved, scales c.",
            ),
        ),
        default={},
        description="Checkpoint and restore costs as fractions of T_ideal.",
    ),
    th.Property(
        "policy_params",
        th.ObjectType(
            th.Property("interval", th.NumberType, description="Fixed-rate interval in seconds of work."),
            th.Property(
                "interval_factor", th.NumberType, default=DEFAULT_INTERVAL_FACTOR, description="Interval / checkpoint."
            ),
            th.Property("hedge_fraction", th.NumberType, default=DEFAULT_HEDGE_FRACTION, description="Hedge point."),
            th.Property(
                "safety_margin",
                th.NumberType,
                default=DEFAULT_SAFETY_MARGIN,
                description="Checkpoint durations between a proximity checkpoint's end and the predicted failure.",
            ),
        ),
        default={},
        description="Checkpoint policy parameters.",
    ),
    th.Property(
        "fault",
        th.ObjectType(
            th.Property("t_ref", th.NumberType, default=328.0, description="Reference temperature (K)."),
            th.Property("beta", th.NumberType, default=0.0, description="Rate sensitivity (1/K)."),
        ),
        default={},
        description="Thermal dependence of node failures.",
    ),
    th.Property(
        "thermal",
        th.ObjectType(
            th.Property("enabled", th.BooleanType, default=True, description="Couple node load to failure rate."),
            th.Property("step", th.NumberType, default=60.0, description="Seconds between thermal updates."),
            th.Property(
                "mode", th.StringType, default="steady", allowed_values=["steady", "transient"], description="Update."
            ),
            th.Property("dt", th.NumberType, default=0.05, description="Explicit step of the transient mode (s)."),
            th.Property("ambient", th.NumberType, default=318.0, description="Ambient temperature (K)."),
            th.Property("lateral_conductance", th.NumberType, default=2.0, description="Cell-to-cell (W/K)."),
            th.Property("vertical_conductance", th.NumberType, default=0.8, description="Cell-to-sink (W/K)."),
            th.Property("heat_capacity", th.NumberType, default=0.5, description="Per cell (J/K)."),
        ),
        default={},
        description="Thermal grid of every node.",
    ),
    th.Property(
        "rtms",
        th.ObjectType(
            th.Property(
                "hop_latency_fraction",
                th.NumberType,
                default=DEFAULT_HOP_LATENCY_FRACTION,
                description="Per-hop penalty as a share of the kernel's mean time.",
            ),
            th.Property("hop_latency", th.NumberType, description="Absolute per-hop penalty (s); overrides the share."),
            th.Property("proactive", th.BooleanType, default=True, description="Avoid nodes predicted to fail."),
            th.Property("power_weight", th.NumberType, default=0.0, description="Weight of the energy term."),
            th.Property("pwcet_samples", th.IntegerType, default=DEFAULT_PWCET_SAMPLES, description="Per mapping."),
            th.Property("device_fault_fraction", th.NumberType, default=0.0, description="Device-scoped failures."),
            th.Property("node_down_fraction", th.NumberType, default=0.0, description="Failures taking a node down."),
            th.Property("repair_time", th.NumberType, default=3600.0, description="Node/device repair time (s)."),
        ),
        default={},
        description="Resource manager tunables.",
    ),
    th.Property(
        "calibration",
        th.ObjectType(
            th.Property("target", th.NumberType, default=DEFAULT_TARGET, description="Target median slowdown."),
            th.Property("tolerance", th.NumberType, default=DEFAULT_TOLERANCE, description="Accepted deviation."),
            th.Property("max_evaluations", th.IntegerType, default=60, description="Evaluation budget."),
        ),
        default={},
        description="Failure-rate calibration.",
    ),
).to_dict()


def _with_defaults(schema: Mapping[str, Any], data: Mapping[str, Any]) -> Dict[str, Any]:
    """Fill schema defaults into a copy of `data`, recursing into object properties."""
    result = dict(data)
    for name, prop in schema.get("properties", {}).items():
        if name not in result and "default" in prop:
            result[name] = copy.deepcopy(prop["default"])
        if isinstance(result.get(name), dict) and "properties" in prop:
            result[name] = _with_defaults(prop, result[name])
    return result


def validate(schema: Mapping[str, Any], data: Any) -> List[str]:
    """Every schema violation as `path: message`, in document order."""
    problems = []
    for error in sorted(Draft7Validator(schema).iter_errors(data), key=lambda e: [str(p) for p in e.absolute_path]):
        location = "/".join(str(part) for part in error.absolute_path) or "<root>"
        problems.append(f"{location}: {error.message}")
    return problems


def default_topology() -> Topology:
    """Two linked nodes, each with one device of every kind."""
    profiles = {
        DeviceKind.CPU: (1.0, 2.0, 10.0),
        DeviceKind.GPU: (2.0, 3.0, 12.0),
        DeviceKind.MANYCORE: (1.5, 2.0, 9.0),
        DeviceKind.FPGA: (3.0, 1.0, 6.0),
    }
    nodes = [
        Node(
            id=node_id,
            devices=tuple(
                Device(
                    id=f"{node_id}-{kind.value.lower()}",
                    kind=kind,
                    node_id=node_id,
                    speed_factor=speed,
                    idle_w=idle,
                    busy_w=busy,
                )
                for kind, (speed, idle, busy) in profiles.items()
            ),
        )
        for node_id in ("node-0", "node-1")
    ]
    return Topology.line(nodes)


@dataclass(frozen=True)
class CalibrationParams:
    """Target and search limits of the failure-rate calibration."""

    target: float = DEFAULT_TARGET
    tolerance: float = DEFAULT_TOLERANCE
    max_evaluations: int = 60


@dataclass(frozen=True)
class ExperimentConfig:  # pylint: disable=too-many-instance-attributes
    """Validated experiment settings."""

    topology: Topology = field(default_factory=default_topology)
    workload: WorkloadParams = field(default_factory=WorkloadParams)
    workload_file: Optional[Path] = None
    costs: CostRanges = field(default_factory=CostRanges)
    policy: CheckpointPolicy = field(default_factory=CheckpointPolicy.prediction_based)
    policies: Tuple[CheckpointPolicy, ...] = tuple(CheckpointPolicy(kind) for kind in SWEEP_POLICIES)
    epsilon: float = 0.0
    epsilon_grid: Tuple[float, ...] = DEFAULT_EPSILON_GRID
    replicas: int = 20
    seed: int = 0
    exceedance: float = DEFAULT_EXCEEDANCE
    failure_rate: Optional[float] = None
    fault: FaultModel = field(default_factory=lambda: FaultModel(base_mttf=math.inf))
    thermal: ThermalParams = field(default_factory=ThermalParams)
    rtms: RtmsParams = field(default_factory=RtmsParams)
    calibration: CalibrationParams = field(default_factory=CalibrationParams)
    horizon: float = math.inf
    guard_factor: float = DEFAULT_GUARD_FACTOR
    output_dir: Path = Path("output")

    def scenario(self) -> ReliabilityScenario:
        """Isolated-job reliability scenario of this configuration."""
        return ReliabilityScenario(
            workload=self.workload,
            costs=self.costs,
            replicas=self.replicas,
            seed=self.seed,
            guard_factor=self.guard_factor,
        )

    def fault_model(self, rate: float) -> FaultModel:
        """The configured thermal dependence at a given reference failure rate."""
        return FaultModel.from_rate(rate, t_ref=self.fault.t_ref, beta=self.fault.beta)

    def with_overrides(self, **overrides: Any) -> "ExperimentConfig":
        """Copy with command-line overrides applied; None values are ignored."""
        changes = {key: value for key, value in overrides.items() if value is not None}
        problems = _semantic_problems(
            changes.get("replicas", self.replicas),
            changes.get("epsilon_grid", self.epsilon_grid),
            changes.get("exceedance", self.exceedance),
        )
        if problems:
            raise ConfigError(problems)
        return replace(self, **changes)


def _semantic_problems(replicas: int, grid: Tuple[float, ...], exceedance: float) -> List[str]:
    problems = []
    if replicas < 1:
        problems.append(f"replicas: must be >= 1, got {replicas}")
    if list(grid) != sorted(grid):
        problems.append(f"epsilon_grid: must be sorted ascending, got {list(grid)}")
    if any(not 0.0 <= value < 1.0 for value in grid):
        problems.append(f"epsilon_grid: every value must be in [0, 1), got {list(grid)}")
    if not 0.0 < exceedance < 1.0:
        problems.append(f"exceedance: must be in (0, 1), got {exceedance}")
    return problems


def _policy(name: str, params: Mapping[str, Any]) -> CheckpointPolicy:
    kind = PolicyKind(name)
    if kind is PolicyKind.FIXED_RATE:
        return CheckpointPolicy.fixed_rate(params.get("interval"), params["interval_factor"])
    if kind is PolicyKind.PREDICTION_BASED:
        return CheckpointPolicy.prediction_based(params["safety_margin"])
    if kind is PolicyKind.ERROR_TOLERANT:
        return CheckpointPolicy.error_tolerant(params["hedge_fraction"], params["safety_margin"])
    return CheckpointPolicy.restart_only()


def parse_config(data: Mapping[str, Any], base_dir: Path = Path(".")) -> ExperimentConfig:
    """Validate a config document and build typed settings from it."""
    problems = validate(EXPERIMENT_CONFIG_SCHEMA, data)
    if problems:
        raise ConfigError(problems)
    values = _with_defaults(EXPERIMENT_CONFIG_SCHEMA, data)
    grid = tuple(float(value) for value in values["epsilon_grid"])
    problems = _semantic_problems(values["replicas"], grid, values["exceedance"])
    allowed = {kind.value for kind in PolicyKind}
    problems += [f"policies: unknown policy {name!r}" for name in values["policies"] if name not in allowed]
    if problems:
        raise ConfigError(problems)

    try:
        topology = _topology(values, base_dir)
        workload_values = values["workload"]
        urgent = float(workload_values["urgent_fraction"])
        workload = WorkloadParams(
            mean_t_ideal=float(workload_values["mean_t_ideal"]),
            window_factor=float(workload_values["window_factor"]),
            arrival_rate=workload_values.get("arrival_rate"),
            class_mix={JobClass.URGENT: urgent, JobClass.BATCH: 1.0 - urgent},
            max_kernels=int(workload_values["max_kernels"]),
            jitter=JitterModel(kind=workload_values["jitter"], scale=float(workload_values["jitter_scale"])),
            kinds=tuple(dict.fromkeys(device.kind for device in topology.devices)) or tuple(DeviceKind),
        )
        cost_values = values["costs"]
        costs = CostRanges(
            checkpoint=(cost_values["checkpoint_min"], cost_values["checkpoint_max"]),
            restore=(cost_values["restore_min"], cost_values["restore_max"]),
            permanent_state_fraction=cost_values.get("permanent_state_fraction"),
        )
        policy_values = values["policy_params"]
        thermal_values = values["thermal"]
        config = ExperimentConfig(
            topology=topology,
            workload=workload,
            workload_file=base_dir / workload_values["trace_file"] if workload_values.get("trace_file") else None,
            costs=costs,
            policy=_policy(values["policy"], policy_values),
            policies=tuple(_policy(name, policy_values) for name in values["policies"]),
            epsilon=float(values["epsilon"]),
            epsilon_grid=grid,
            replicas=int(values["replicas"]),
            seed=int(values["seed"]),
            exceedance=float(values["exceedance"]),
            failure_rate=values.get("failure_rate"),
            fault=FaultModel(base_mttf=math.inf, t_ref=values["fault"]["t_ref"], beta=values["fault"]["beta"]),
            thermal=ThermalParams(**thermal_values),
            rtms=RtmsParams(**values["rtms"]),
            calibration=CalibrationParams(**values["calibration"]),
            horizon=float(values["horizon"]) if values.get("horizon") is not None else math.inf,
            guard_factor=float(values["guard_factor"]),
            output_dir=Path(values["output_dir"]),
        )
    except (OSError, ValueError, KeyError, TypeError) as exception:
        if isinstance(exception, ConfigError):
            raise
        kind = "topology" if isinstance(exception, (TopologyError, OSError)) else "settings"
        if isinstance(exception, (ReliabilityError, WorkloadError)):
            kind = "model parameters"
        raise ConfigError([f"{kind}: {exception}"]) from exception
    _logger.debug(f"Configuration parsed: {len(config.topology.nodes)} nodes, {config.replicas} replicas")
    return config


def _topology(values: Mapping[str, Any], base_dir: Path) -> Topology:
    if values.get("topology_file"):
        path = base_dir / values["topology_file"]
        with open(path, encoding="utf-8") as handle:
            document = json.load(handle)
        problems = validate(TOPOLOGY_SCHEMA, document)
        if problems:
            raise ConfigError([f"{path}: {problem}" for problem in problems])
        topology = load_topology(path)
    elif values.get("topology"):
        problems = validate(TOPOLOGY_SCHEMA, values["topology"])
        if problems:
            raise ConfigError([f"topology/{problem}" for problem in problems])
        topology = Topology.from_dict(values["topology"])
    else:
        return default_topology()
    discover(topology)
    return topology


def load_config(path: Optional[Path]) -> ExperimentConfig:
    """Read and validate a JSON config file; no file means every default."""
    if path is None:
        return parse_config({})
    try:
        with open(path, encoding="utf-8") as handle:
            data = json.load(handle)
    except (OSError, json.JSONDecodeError) as exception:
        raise ConfigError([f"{path}: {exception}"]) from exception
    return parse_config(data, base_dir=path.parent)
