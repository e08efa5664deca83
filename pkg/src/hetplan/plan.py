"""ParallelPlan and its JSON document form (the interchange format)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from .cluster import ClusterSpec, DeviceId
from .errors import InvariantViolation, SpecError

PLAN_FORMAT = "hetplan.plan/1"


@dataclass(frozen=True)
class PlanStage:
    stage_index: int
    devices: Tuple[DeviceId, ...]
    gpu_type: str
    layer_range: Tuple[int, int]

    @property
    def n_layers(self) -> int:
        return self.layer_range[1] - self.layer_range[0]

    @property
    def node_id(self) -> int:
        return self.devices[0].node_id

    def holds(self, layer: int) -> bool:
        return self.layer_range[0] <= layer < self.layer_range[1]


@dataclass
class ParallelPlan:
    tp_dim: int
    n_layers: int
    n_microbatches: int
    groups: List[List[PlanStage]]
    cost: Optional[Any] = None           # CostEstimate
    flags: Dict[str, Any] = field(default_factory=dict)
    candidates: List[Dict[str, Any]] = field(default_factory=list)
    grouping: Optional[Any] = field(default=None, repr=False, compare=False)
    mapping: Optional[Any] = field(default=None, repr=False, compare=False)
    partitions: Optional[List[Any]] = field(default=None, repr=False, compare=False)

    def devices(self) -> List[DeviceId]:
        return [d for g in self.groups for s in g for d in s.devices]

    def stage_of(self, group: int, layer: int) -> PlanStage:
        for s in self.groups[group]:
            if s.holds(layer):
                return s
        raise SpecError(f"layer {layer} not held by group {group}")

    def holders(self, layer: int, tp_rank: int) -> List[DeviceId]:
        """Devices that own (layer, tp_rank) under this plan, one per group."""
        return [self.stage_of(j, layer).devices[tp_rank] for j in range(len(self.groups))]

    def validate(self, spec: Optional[ClusterSpec] = None):
        seen = set()
        for j, g in enumerate(self.groups):
            if not g:
                raise InvariantViolation(f"group {j} has no stages")
            pos = 0
            for p, s in enumerate(g, 1):
                if s.stage_index != p:
                    raise InvariantViolation(f"group {j}: stage indices not contiguous")
                if len(s.devices) != self.tp_dim:
                    raise InvariantViolation(f"group {j} stage {p}: TP unit size != tp_dim")
                if len({d.node_id for d in s.devices}) != 1:
                    raise InvariantViolation(f"group {j} stage {p}: TP unit spans nodes")
                if s.layer_range[0] != pos or s.layer_range[1] < pos:
                    raise InvariantViolation(f"group {j}: layer ranges not contiguous")
                pos = s.layer_range[1]
                for d in s.devices:
                    if d in seen:
                        raise InvariantViolation(f"device {d} used twice")
                    seen.add(d)
                    if spec is not None:
                        spec.global_rank(d)
                        if spec.gpu_type_of(d).name != s.gpu_type:
                            raise InvariantViolation(f"device {d} is not a {s.gpu_type}")
            if pos != self.n_layers:
                raise InvariantViolation(f"group {j} covers {pos} of {self.n_layers} layers")
        return self


def plan_to_dict(plan: ParallelPlan) -> dict:
    doc = {
        "format": PLAN_FORMAT,
        "meta": {"n_layers": plan.n_layers, "n_microbatches": plan.n_microbatches},
        "tp_dim": plan.tp_dim,
        "groups": [
            {"stages": [{"stage_index": s.stage_index,
                         "gpu_type": s.gpu_type,
                         "devices": [[d.node_id, d.local_rank] for d in s.devices],
                         "layer_range": [s.layer_range[0], s.layer_range[1]]} for s in g]}
            for g in plan.groups
        ],
        "cost": plan.cost.to_dict() if hasattr(plan.cost, "to_dict") else plan.cost,
        "flags": dict(plan.flags),
        "candidates": list(plan.candidates),
    }
    return doc


def plan_from_dict(doc) -> ParallelPlan:
    try:
        if doc.get("format", PLAN_FORMAT) != PLAN_FORMAT:
            raise SpecError(f"unsupported plan format {doc.get('format')!r}")
        meta = doc["meta"]
        tp = int(doc["tp_dim"])
        groups = []
        for g in doc["groups"]:
            stages = []
            for s in g["stages"]:
                devs = tuple(DeviceId(int(a), int(b)) for a, b in s["devices"])
                lo, hi = s["layer_range"]
                stages.append(PlanStage(int(s["stage_index"]), devs, str(s["gpu_type"]), (int(lo), int(hi))))
            groups.append(stages)
        plan = ParallelPlan(tp, int(meta["n_layers"]), int(meta["n_microbatches"]), groups,
                            cost=doc.get("cost"), flags=dict(doc.get("flags") or {}),
                            candidates=list(doc.get("candidates") or []))
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise SpecError(f"malformed plan document: {exc}") from None
    plan.validate()
    return plan


def dump_plan(plan: ParallelPlan) -> str:
    return json.dumps(plan_to_dict(plan), indent=2, sort_keys=True) + "\n"


def load_plan(text: str) -> ParallelPlan:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"malformed plan document: {exc}") from None
    return plan_from_dict(doc)
