"""Weakest-first GPU node and pipeline-stage mapping, plus link classification."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .cluster import ClusterSpec, DeviceId
from .errors import SpecError
from .grouping import GroupingSolution, TpUnit


@dataclass(frozen=True)
class Stage:
    stage_index: int  # 1-based
    unit: TpUnit

    @property
    def devices(self) -> Tuple[DeviceId, ...]:
        return self.unit.devices

    @property
    def gpu_type(self) -> str:
        return self.unit.gpu_type


@dataclass
class StageMapping:
    tp_dim: int
    groups: List[List[Stage]]
    joint_rounds: int = 0
    halt_reason: Optional[str] = None
    swaps: int = 0

    def all_devices(self) -> List[DeviceId]:
        return [d for g in self.groups for s in g for d in s.devices]


def _dp_nvlink_count(groups: List[List[TpUnit]]) -> int:
    count = 0
    for j in range(len(groups)):
        for k in range(j + 1, len(groups)):
            for a, b in zip(groups[j], groups[k]):
                if a.node_id == b.node_id:
                    count += len(a.devices)
    return count


def map_nodes_and_stages(spec: ClusterSpec, grouping: GroupingSolution, tp_dim: int,
                         dp_swap: bool = True) -> StageMapping:
    """Order each group's units into pipeline stages, weakest type first.

    While every group still needs a unit of the weakest remaining type and a
    single node can supply one to each group, that type fills the next stage
    of every group from that node. Once either condition fails, each group's
    leftover units fill its remaining stages in ascending power order, drawing
    physical units by (node_id, local_rank).
    """
    known = set(spec.devices())
    for u in grouping.units:
        if any(d not in known for d in u.devices):
            raise SpecError(f"grouping references device outside the cluster: {u.devices}")
        if len(u.devices) != tp_dim:
            raise SpecError("grouping units do not match tp_dim")

    order = spec.type_names_by_power()
    rank_of_type = {t: i for i, t in enumerate(order)}
    need = [Counter(grouping.units[u].gpu_type for u in g) for g in grouping.groups]
    free: Dict[str, Dict[int, List[TpUnit]]] = {}
    for g in grouping.groups:
        for u in g:
            unit = grouping.units[u]
            free.setdefault(unit.gpu_type, {}).setdefault(unit.node_id, []).append(unit)
    for per_node in free.values():
        for lst in per_node.values():
            lst.sort(key=lambda x: x.devices[0].local_rank)

    n_groups = len(need)
    placed: List[List[TpUnit]] = [[] for _ in range(n_groups)]
    rounds = 0
    halt = None
    while True:
        pending = [t for t in order if any(n[t] for n in need)]
        if not pending:
            break
        t = pending[0]
        if not all(n[t] >= 1 for n in need):
            halt = f"not every DP group needs another {t}"
            break
        node = next((nid for nid in sorted(free.get(t, {})) if len(free[t][nid]) >= n_groups), None)
        if node is None:
            halt = f"no single node has {n_groups} free {t} units"
            break
        for j in range(n_groups):
            placed[j].append(free[t][node].pop(0))
            need[j][t] -= 1
        rounds += 1

    for j in range(n_groups):
        for t in sorted((t for t in need[j] if need[j][t] > 0), key=rank_of_type.get):
            for _ in range(need[j][t]):
                nid = min(n for n, lst in free[t].items() if lst)
                placed[j].append(free[t][nid].pop(0))
            need[j][t] = 0

    swaps = 0
    if dp_swap and n_groups > 1:
        swaps = _improve_dp_locality(placed)

    groups = [[Stage(p + 1, u) for p, u in enumerate(g)] for g in placed]
    return StageMapping(tp_dim, groups, rounds, halt, swaps)


def _improve_dp_locality(placed: List[List[TpUnit]]) -> int:
    """Swap same-type units across groups while the intra-node DP pair count rises."""
    positions = [(j, p) for j, g in enumerate(placed) for p in range(len(g))]
    swaps = 0
    current = _dp_nvlink_count(placed)
    improved = True
    while improved:
        improved = False
        for a in range(len(positions)):
            ja, pa = positions[a]
            for b in range(a + 1, len(positions)):
                jb, pb = positions[b]
                ua, ub = placed[ja][pa], placed[jb][pb]
                if ja == jb or ua.gpu_type != ub.gpu_type or ua.node_id == ub.node_id:
                    continue
                placed[ja][pa], placed[jb][pb] = ub, ua
                trial = _dp_nvlink_count(placed)
                if trial > current:
                    current = trial
                    swaps += 1
                    improved = True
                else:
                    placed[ja][pa], placed[jb][pb] = ua, ub
    return swaps


# ---------------------------------------------------------------------------
# link classification
# ---------------------------------------------------------------------------

_PRIORITY = ("TP", "DP", "PP")


def _stage_pairs_dp(mapping: StageMapping, layer_ranges):
    groups = mapping.groups
    for j in range(len(groups)):
        for k in range(j + 1, len(groups)):
            for si, a in enumerate(groups[j]):
                for sk, b in enumerate(groups[k]):
                    if layer_ranges is None:
                        linked = si == sk
                    else:
                        (a0, a1), (b0, b1) = layer_ranges[j][si], layer_ranges[k][sk]
                        linked = max(a0, b0) < min(a1, b1)
                    if linked:
                        yield from zip(a.devices, b.devices)


def classify_links(spec: ClusterSpec, mapping: StageMapping,
                   layer_ranges: Optional[Sequence[Sequence[Tuple[int, int]]]] = None) -> dict:
    """Label every device pair the plan communicates over.

    DP pairs are same-TP-rank devices of two groups whose stages hold a
    common layer (or, without layer ranges, share a stage index).
    """
    roles: Dict[Tuple[DeviceId, DeviceId], set] = {}

    def add(a, b, role):
        key = (a, b) if spec.global_rank(a) <= spec.global_rank(b) else (b, a)
        roles.setdefault(key, set()).add(role)

    for g in mapping.groups:
        for s in g:
            devs = s.devices
            for i in range(len(devs)):
                for k in range(i + 1, len(devs)):
                    add(devs[i], devs[k], "TP")
        for s0, s1 in zip(g, g[1:]):
            for a, b in zip(s0.devices, s1.devices):
                add(a, b, "PP")
    for a, b in _stage_pairs_dp(mapping, layer_ranges):
        add(a, b, "DP")

    pairs = []
    violations = []
    dp_nvlink = 0
    for (a, b) in sorted(roles, key=lambda k: (spec.global_rank(k[0]), spec.global_rank(k[1]))):
        rs = roles[(a, b)]
        top = next(r for r in _PRIORITY if r in rs)
        link = "nvlink" if a.node_id == b.node_id else "inter_node"
        pairs.append({"a": [a.node_id, a.local_rank], "b": [b.node_id, b.local_rank],
                      "roles": [r for r in _PRIORITY if r in rs], "role": top, "link": link})
        if "TP" in rs and link != "nvlink":
            violations.append((a, b))
        if top == "DP" and link == "nvlink":
            dp_nvlink += 1
    counts = Counter((p["role"], p["link"]) for p in pairs)
    return {
        "pairs": pairs,
        "tp_violations": violations,
        "dp_nvlink_pairs": dp_nvlink,
        "counts": {f"{r}/{l}": c for (r, l), c in sorted(counts.items())},
    }
