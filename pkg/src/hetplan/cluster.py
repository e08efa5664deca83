"""Heterogeneous cluster description: GPU types, nodes, links, bandwidths."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple

import yaml

from .errors import SpecError

log = logging.getLogger(__name__)

# bytes/s; used only when a spec omits the key
DEFAULT_BANDWIDTHS = {
    "intra_node": 600e9,
    "inter_node": 50e9,
    "cloud": 1200e6,
    "local_disk": 3500e6,
}


@dataclass(frozen=True)
class GpuType:
    name: str
    compute_power: float
    memory: float

    def __post_init__(self):
        if not self.compute_power > 0:
            raise SpecError(f"gpu type {self.name!r}: compute_power must be positive")
        if not self.memory > 0:
            raise SpecError(f"gpu type {self.name!r}: memory must be positive")


@dataclass(frozen=True)
class NodeSpec:
    node_id: int
    gpu_count: int
    gpu_type: GpuType


class DeviceId(NamedTuple):
    node_id: int
    local_rank: int

    def __str__(self):
        return f"{self.node_id}:{self.local_rank}"


@dataclass(frozen=True)
class ClusterSpec:
    nodes: tuple
    intra_node_bw: float
    inter_node_bw: float
    cloud_bw: float
    local_disk_bw: float
    gpu_types: Dict[str, GpuType] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise SpecError("duplicate node_id in cluster spec")
        if not self.nodes:
            raise SpecError("cluster spec has no nodes")
        # canonical order: node_id ascending
        object.__setattr__(self, "nodes", tuple(sorted(self.nodes, key=lambda n: n.node_id)))
        if not self.gpu_types:
            object.__setattr__(self, "gpu_types", {n.gpu_type.name: n.gpu_type for n in self.nodes})
        for bw in (self.intra_node_bw, self.inter_node_bw, self.cloud_bw, self.local_disk_bw):
            if not bw > 0:
                raise SpecError("bandwidths must be positive")
        if self.intra_node_bw < self.inter_node_bw:
            log.warning("intra-node bandwidth %.3g is below inter-node bandwidth %.3g",
                        self.intra_node_bw, self.inter_node_bw)
        devs = []
        for n in self.nodes:
            devs.extend(DeviceId(n.node_id, r) for r in range(n.gpu_count))
        object.__setattr__(self, "_devices", tuple(devs))
        object.__setattr__(self, "_rank_of", {d: i for i, d in enumerate(devs)})
        object.__setattr__(self, "_node_of", {n.node_id: n for n in self.nodes})

    @property
    def n_gpus(self) -> int:
        return len(self._devices)

    def devices(self) -> List[DeviceId]:
        """All devices, node_id ascending then local_rank ascending."""
        return list(self._devices)

    def global_rank(self, dev: DeviceId) -> int:
        try:
            return self._rank_of[DeviceId(*dev)]
        except KeyError:
            raise SpecError(f"unknown device {dev}") from None

    def device_at(self, rank: int) -> DeviceId:
        if not 0 <= rank < len(self._devices):
            raise SpecError(f"global rank {rank} out of range")
        return self._devices[rank]

    def node(self, node_id: int) -> NodeSpec:
        try:
            return self._node_of[node_id]
        except KeyError:
            raise SpecError(f"unknown node {node_id}") from None

    def gpu_type_of(self, dev: DeviceId) -> GpuType:
        self.global_rank(dev)
        return self._node_of[dev[0]].gpu_type

    def link_bandwidth(self, a: DeviceId, b: DeviceId) -> float:
        self.global_rank(a)
        self.global_rank(b)
        return self.intra_node_bw if a[0] == b[0] else self.inter_node_bw

    def type_names_by_power(self) -> List[str]:
        """Type names ordered by (compute_power, lowest hosting node_id)."""
        first_node = {}
        for n in self.nodes:
            first_node.setdefault(n.gpu_type.name, n.node_id)
        return sorted(first_node, key=lambda t: (self.gpu_types[t].compute_power, first_node[t]))

    def with_nodes(self, nodes) -> "ClusterSpec":
        return ClusterSpec(tuple(nodes), self.intra_node_bw, self.inter_node_bw,
                           self.cloud_bw, self.local_disk_bw)

    def to_dict(self) -> dict:
        return {
            "gpu_types": {t.name: {"compute_power": t.compute_power, "memory_bytes": t.memory}
                          for t in self.gpu_types.values()},
            "nodes": [{"node_id": n.node_id, "count": n.gpu_count, "type": n.gpu_type.name}
                      for n in self.nodes],
            "bandwidths": {"intra_node": self.intra_node_bw, "inter_node": self.inter_node_bw,
                           "cloud": self.cloud_bw, "local_disk": self.local_disk_bw},
        }


def _number(value, what):
    try:
        return float(value)
    except (TypeError, ValueError):
        raise SpecError(f"{what}: expected a number, got {value!r}") from None


def cluster_from_dict(doc) -> ClusterSpec:
    if not isinstance(doc, dict):
        raise SpecError("cluster spec must be a mapping")
    raw_types = doc.get("gpu_types")
    raw_nodes = doc.get("nodes")
    if not isinstance(raw_types, dict) or not isinstance(raw_nodes, list):
        raise SpecError("cluster spec needs 'gpu_types' (mapping) and 'nodes' (list)")
    types = {}
    for name, entry in raw_types.items():
        if not isinstance(entry, dict) or "compute_power" not in entry or "memory_bytes" not in entry:
            raise SpecError(f"gpu type {name!r} needs compute_power and memory_bytes")
        types[str(name)] = GpuType(str(name), _number(entry["compute_power"], f"{name}.compute_power"),
                                   _number(entry["memory_bytes"], f"{name}.memory_bytes"))
    nodes = []
    for entry in raw_nodes:
        if not isinstance(entry, dict) or not {"node_id", "count", "type"} <= set(entry):
            raise SpecError(f"node entry {entry!r} needs node_id, count, type")
        tname = str(entry["type"])
        if tname not in types:
            raise SpecError(f"node {entry['node_id']}: unknown gpu type {tname!r}")
        count = entry["count"]
        if not isinstance(count, int) or isinstance(count, bool) or count < 1:
            raise SpecError(f"node {entry['node_id']}: count must be a positive integer")
        node_id = entry["node_id"]
        if not isinstance(node_id, int) or isinstance(node_id, bool):
            raise SpecError(f"node_id must be an integer, got {node_id!r}")
        nodes.append(NodeSpec(node_id, count, types[tname]))
    bws = dict(DEFAULT_BANDWIDTHS)
    raw_bw = doc.get("bandwidths") or {}
    if not isinstance(raw_bw, dict):
        raise SpecError("'bandwidths' must be a mapping")
    unknown = set(raw_bw) - set(bws)
    if unknown:
        raise SpecError(f"unknown bandwidth keys: {sorted(unknown)}")
    for k, v in raw_bw.items():
        bws[k] = _number(v, f"bandwidths.{k}")
    return ClusterSpec(tuple(nodes), bws["intra_node"], bws["inter_node"], bws["cloud"],
                       bws["local_disk"], gpu_types=types)


def load_cluster_spec(text: str) -> ClusterSpec:
    """Parse a YAML (or JSON) cluster document."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SpecError(f"malformed cluster spec: {exc}") from None
    return cluster_from_dict(doc)
