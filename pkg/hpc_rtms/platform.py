"""Cluster topology, device catalog and the disaggregated global resource view."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from logging import Logger, getLogger
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import networkx as nx

from hpc_rtms.types import DeviceKind

FREE = "free"
BUSY = "busy"

_logger: Logger = getLogger(__name__)


class TopologyError(ValueError):
    """Raised for malformed topologies and unknown devices."""


@dataclass(frozen=True)
class Device:
    """A processing unit attached to one node."""

    id: str
    kind: DeviceKind
    node_id: str
    speed_factor: float = 1.0
    idle_w: float = 0.0
    busy_w: float = 0.0

    def __post_init__(self) -> None:
        if self.speed_factor <= 0:
            raise TopologyError(f"Device {self.id}: speed_factor must be > 0, got {self.speed_factor}")
        if self.idle_w < 0 or self.busy_w < 0:
            raise TopologyError(f"Device {self.id}: powers must be >= 0")


@dataclass(frozen=True)
class Node:
    """A server with its attached devices."""

    id: str
    devices: Tuple[Device, ...] = ()


@dataclass(frozen=True)
class Topology:
    """Nodes plus a node-by-node hop matrix. A `None` hop entry means the pair is not connected."""

    nodes: Tuple[Node, ...]
    hops: Tuple[Tuple[Optional[int], ...], ...]

    def __post_init__(self) -> None:
        size = len(self.nodes)
        if size == 0:
            raise TopologyError("Topology has no nodes")
        ids = [node.id for node in self.nodes]
        if len(set(ids)) != size:
            raise TopologyError(f"Duplicate node ids in {ids}")
        device_ids = [device.id for device in self.devices]
        if len(set(device_ids)) != len(device_ids):
            raise TopologyError("Duplicate device ids")
        for node in self.nodes:
            for device in node.devices:
                if device.node_id != node.id:
                    raise TopologyError(f"Device {device.id} claims node {device.node_id} but sits on {node.id}")
        if len(self.hops) != size or any(len(row) != size for row in self.hops):
            raise TopologyError(f"Hop matrix must be {size}x{size}")
        for i in range(size):
            if self.hops[i][i] not in (0, None):
                raise TopologyError(f"Hop matrix diagonal must be zero, got {self.hops[i][i]} for {ids[i]}")
            for j in range(size):
                value = self.hops[i][j]
                if value is not None and (not isinstance(value, int) or value < 0):
                    raise TopologyError(f"Hop entry [{ids[i]}][{ids[j]}] must be a non-negative integer")
                if value != self.hops[j][i]:
                    raise TopologyError(f"Hop matrix is not symmetric at [{ids[i]}][{ids[j]}]")
        for i in range(size):
            for j in range(size):
                for k in range(size):
                    hop_ij, hop_ik, hop_kj = self.hops[i][j], self.hops[i][k], self.hops[k][j]
                    if None in (hop_ij, hop_ik, hop_kj):
                        continue
                    if hop_ij > hop_ik + hop_kj:  # type: ignore[operator]
                        raise TopologyError(f"Triangle inequality violated between {ids[i]}, {ids[k]}, {ids[j]}")

    @property
    def node_ids(self) -> List[str]:
        """Node ids in declaration order."""
        return [node.id for node in self.nodes]

    @property
    def devices(self) -> List[Device]:
        """Every device of the cluster, in node then declaration order."""
        return [device for node in self.nodes for device in node.devices]

    def index_of(self, node_id: str) -> int:
        """Position of a node in the hop matrix."""
        try:
            return self.node_ids.index(node_id)
        except ValueError as exception:
            raise TopologyError(f"Unknown node {node_id!r}") from exception

    def hop(self, from_node: str, to_node: str) -> Optional[int]:
        """Hop count between two nodes, None when disconnected."""
        return self.hops[self.index_of(from_node)][self.index_of(to_node)]

    def device(self, device_id: str) -> Device:
        """Look up a device by id."""
        for device in self.devices:
            if device.id == device_id:
                return device
        raise TopologyError(f"Unknown device {device_id!r}")

    @classmethod
    def from_links(cls, nodes: Sequence[Node], links: Iterable[Tuple[str, str]]) -> "Topology":
        """Build a topology whose hop matrix holds shortest-path lengths over undirected node links."""
        graph = nx.Graph()
        graph.add_nodes_from(node.id for node in nodes)
        graph.add_edges_from(links)
        lengths: Dict[str, Dict[str, int]] = dict(nx.all_pairs_shortest_path_length(graph))
        hops = tuple(tuple(lengths[a.id].get(b.id) for b in nodes) for a in nodes)
        return cls(nodes=tuple(nodes), hops=hops)

    @classmethod
    def line(cls, nodes: Sequence[Node]) -> "Topology":
        """Nodes chained one after the other."""
        return cls.from_links(nodes, [(a.id, b.id) for a, b in zip(nodes, nodes[1:])])

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Topology":
        """Build a topology from the JSON topology format."""
        nodes = []
        for node_data in data["nodes"]:
            node_id = str(node_data["id"])
            devices = tuple(
                Device(
                    id=str(device["id"]),
                    kind=DeviceKind.parse(device["kind"]),
                    node_id=node_id,
                    speed_factor=float(device.get("speed_factor", 1.0)),
                    idle_w=float(device.get("idle_w", 0.0)),
                    busy_w=float(device.get("busy_w", 0.0)),
                )
                for device in node_data.get("devices", [])
            )
            nodes.append(Node(id=node_id, devices=devices))
        if "hops" in data:
            hops = tuple(tuple(None if value is None else int(value) for value in row) for row in data["hops"])
            return cls(nodes=tuple(nodes), hops=hops)
        return cls.from_links(nodes, [tuple(link) for link in data.get("links", [])])  # type: ignore[misc]

    def to_dict(self) -> Dict[str, Any]:
        """Serialize to the JSON topology format."""
        return {
            "nodes": [
                {
                    "id": node.id,
                    "devices": [
                        {
                            "id": device.id,
                            "kind": device.kind.value,
                            "speed_factor": device.speed_factor,
                            "idle_w": device.idle_w,
                            "busy_w": device.busy_w,
                        }
                        for device in node.devices
                    ],
                }
                for node in self.nodes
            ],
            "hops": [list(row) for row in self.hops],
        }


def load_topology(path: Path) -> Topology:
    """Read a topology JSON file."""
    with open(path, encoding="utf-8") as handle:
        return Topology.from_dict(json.load(handle))


@dataclass(frozen=True)
class ViewEntry:
    """One device as seen from an observer node."""

    device: Device
    hops: int
    status: str = FREE


@dataclass(frozen=True)
class GlobalResourceView:
    """The cluster-wide device view held by one node."""

    observer: str
    entries: Tuple[ViewEntry, ...] = field(default_factory=tuple)

    @property
    def device_ids(self) -> frozenset[str]:
        """Set of device ids in the view."""
        return frozenset(entry.device.id for entry in self.entries)

    def entry(self, device_id: str) -> ViewEntry:
        """Entry for a device id."""
        for entry in self.entries:
            if entry.device.id == device_id:
                return entry
        raise TopologyError(f"Device {device_id!r} is not in the view of node {self.observer}")

    def free_entries(self, kind: Optional[DeviceKind] = None) -> List[ViewEntry]:
        """Free entries, optionally restricted to one device kind."""
        return [
            entry
            for entry in self.entries
            if entry.status == FREE and (kind is None or entry.device.kind is kind)
        ]

    def with_status(self, busy: Iterable[str]) -> "GlobalResourceView":
        """Copy of the view with the given device ids marked busy and every other one free."""
        busy_ids = set(busy)
        return replace(
            self,
            entries=tuple(
                replace(entry, status=BUSY if entry.device.id in busy_ids else FREE) for entry in self.entries
            ),
        )


def discover(topology: Topology) -> Dict[str, GlobalResourceView]:
    """Give every node the same global device view with node-specific hop costs."""
    views: Dict[str, GlobalResourceView] = {}
    for observer in topology.node_ids:
        entries = []
        for device in topology.devices:
            hops = topology.hop(observer, device.node_id)
            if hops is None:
                _logger.critical(f"Node {observer} cannot reach node {device.node_id}")
                raise TopologyError(f"Disconnected topology: no hop entry between {observer} and {device.node_id}")
            entries.append(ViewEntry(device=device, hops=hops))
        views[observer] = GlobalResourceView(observer=observer, entries=tuple(entries))
        _logger.debug(f"Node {observer} discovered {len(entries)} devices")
    return views


def comm_cost(view: GlobalResourceView, device_id: str) -> int:
    """Hop count from the view's observer to a device."""
    return view.entry(device_id).hops
