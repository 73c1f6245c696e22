"""Tests of configuration parsing and validation."""

import json
import math

import pytest

from hpc_rtms.config import DEFAULT_EPSILON_GRID, ConfigError, load_config, parse_config
from hpc_rtms.reliability import PolicyKind
from hpc_rtms.types import DeviceKind

ONE_NODE = {"nodes": [{"id": "a", "devices": [{"id": "a-cpu", "kind": "CPU", "busy_w": 5.0}]}]}


def test_empty_config_takes_every_default():
    """No settings: default cluster, three compared policies, no failure rate yet."""
    config = parse_config({})
    assert config.topology.node_ids == ("node-0", "node-1")
    assert config.replicas == 20
    assert config.epsilon_grid == DEFAULT_EPSILON_GRID
    assert config.policy.kind is PolicyKind.PREDICTION_BASED
    assert [policy.name for policy in config.policies] == ["fixed-rate", "prediction-based", "error-tolerant"]
    assert config.failure_rate is None
    assert math.isinf(config.horizon)
    assert config.thermal.enabled


def test_type_errors_are_reported_per_field():
    """Every schema violation is listed with the path of the offending field."""
    with pytest.raises(ConfigError) as raised:
        parse_config({"replicas": "many", "workload": {"mean_t_ideal": "long"}, "policy": "yolo"})
    problems = raised.value.problems
    assert len(problems) == 3
    assert [problem.split(":")[0] for problem in problems] == ["policy", "replicas", "workload/mean_t_ideal"]


def test_semantic_errors_are_collected():
    """Values of the right type but out of range are all reported together."""
    with pytest.raises(ConfigError) as raised:
        parse_config({"replicas": 0, "epsilon_grid": [0.1, 0.0], "exceedance": 2.0, "policies": ["yolo"]})
    text = "\n".join(raised.value.problems)
    assert "replicas: must be >= 1" in text
    assert "epsilon_grid: must be sorted ascending" in text
    assert "exceedance: must be in (0, 1)" in text
    assert "policies: unknown policy 'yolo'" in text


def test_invalid_model_parameters():
    """An inverted cost range is a configuration error, not a crash."""
    with pytest.raises(ConfigError, match="model parameters"):
        parse_config({"costs": {"checkpoint_min": 0.5, "checkpoint_max": 0.1}})


def test_inline_topology_restricts_workload_kinds():
    """A CPU-only cluster generates CPU-only kernels."""
    config = parse_config({"topology": ONE_NODE})
    assert config.topology.node_ids == ("a",)
    assert config.workload.kinds == (DeviceKind.CPU,)


def test_inline_topology_is_validated():
    """An unknown device kind is reported under the topology path."""
    broken = {"nodes": [{"id": "a", "devices": [{"id": "a-tpu", "kind": "TPU"}]}]}
    with pytest.raises(ConfigError) as raised:
        parse_config({"topology": broken})
    assert raised.value.problems[0].startswith("topology/nodes/0/devices/0/kind")


def test_missing_hop_is_a_topology_error():
    """A null hop entry passes the schema and is reported as an unreachable node pair."""
    nodes = [
        {"id": "a", "devices": [{"id": "a-cpu", "kind": "CPU"}]},
        {"id": "b", "devices": [{"id": "b-cpu", "kind": "CPU"}]},
    ]
    with pytest.raises(ConfigError) as raised:
        parse_config({"topology": {"nodes": nodes, "hops": [[0, None], [None, 0]]}})
    (problem,) = raised.value.problems
    assert problem.startswith("topology: ")
    assert "no hop entry between a and b" in problem


def test_topology_file_is_relative_to_the_config(tmp_path):
    """A topology file named in the config is read from the config's directory."""
    (tmp_path / "cluster.json").write_text(json.dumps(ONE_NODE), encoding="utf-8")
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps({"topology_file": "cluster.json", "seed": 9}), encoding="utf-8")
    config = load_config(config_path)
    assert config.topology.node_ids == ("a",)
    assert config.seed == 9


def test_missing_topology_file(tmp_path):
    """A topology file that does not exist is a configuration error."""
    with pytest.raises(ConfigError, match="topology"):
        parse_config({"topology_file": "absent.json"}, base_dir=tmp_path)


def test_unreadable_config_file(tmp_path):
    """Malformed JSON is a configuration error."""
    path = tmp_path / "config.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(path)


def test_nested_sections_reach_their_settings():
    """Values in nested sections end up in the typed settings; the rest keep their defaults."""
    config = parse_config(
        {
            "failure_rate": 1e-4,
            "horizon": 5000,
            "rtms": {"pwcet_samples": 50, "proactive": False},
            "thermal": {"mode": "transient", "step": 10},
            "policy_params": {"interval": 300},
            "policies": ["fixed-rate"],
        }
    )
    assert config.failure_rate == 1e-4
    assert config.horizon == 5000.0
    assert config.rtms.pwcet_samples == 50
    assert not config.rtms.proactive
    assert config.rtms.repair_time == 3600.0
    assert config.thermal.mode == "transient"
    assert config.thermal.step == 10
    (policy,) = config.policies
    assert policy.interval == 300


def test_overrides_ignore_unset_values():
    """Command-line overrides replace settings, None leaves them alone, and bad values are refused."""
    config = parse_config({"seed": 4})
    overridden = config.with_overrides(replicas=3, seed=None, epsilon_grid=(0.0, 0.1))
    assert overridden.replicas == 3
    assert overridden.seed == 4
    assert overridden.epsilon_grid == (0.0, 0.1)
    with pytest.raises(ConfigError, match="sorted"):
        config.with_overrides(epsilon_grid=(0.2, 0.1))
