"""End-to-end plan search: every TP dimension goes through grouping, mapping,
partitioning and costing, and the cheapest candidate wins."""
from __future__ import annotations

import logging
from typing import Dict, Iterable, List, Optional

from .cluster import ClusterSpec, cluster_from_dict
from .cost import estimate_iteration, simulate_1f1b
from .errors import InfeasibleError, SpecError
from .grouping import GroupingProblem, enumerate_tp_dims, solve_grouping_topk
from .mapping import map_nodes_and_stages
from .partition import PartitionProblem, StageSpec, balance_workload
from .plan import ParallelPlan, PlanStage
from .profile import MemoryModel, ModelConfig, ProfileTable, derive_power

log = logging.getLogger(__name__)

SIM_TOLERANCE = 0.01


def candidate_tp_dims(spec: ClusterSpec) -> List[int]:
    """Valid TP dims plus the powers of two up to the largest node (for reporting)."""
    dims = set(enumerate_tp_dims(spec))
    biggest = max(n.gpu_count for n in spec.nodes)
    t = 1
    while t <= biggest:
        dims.add(t)
        t *= 2
    return sorted(dims)


def with_profiled_powers(spec: ClusterSpec, profile: ProfileTable, tp_dim: int = 1) -> ClusterSpec:
    """Replace the cluster's compute powers with ones derived from the profile."""
    names = spec.type_names_by_power()
    # the slowest profiled type is the unit of power
    ref = max(names, key=lambda t: profile.get(t, tp_dim, 1))
    powers = derive_power(profile, ref, tp_dim)
    doc = spec.to_dict()
    for name, entry in doc["gpu_types"].items():
        entry["compute_power"] = powers[name]
    return cluster_from_dict(doc)


def _profile_gap(spec: ClusterSpec, profile: ProfileTable, tp: int, n_layers: int) -> Optional[str]:
    for name in spec.type_names_by_power():
        if not profile.has(name, tp):
            return f"{name} not profiled at tp={tp}"
        if profile.max_layers(name, tp) < n_layers:
            return f"{name} at tp={tp} profiled only up to {profile.max_layers(name, tp)} layers"
    return None


def _build_plan(spec, cfg, profile, memmodel, tp, grouping, sync_overlap) -> ParallelPlan:
    mapping = map_nodes_and_stages(spec, grouping, tp)
    groups, partitions = [], []
    for g in mapping.groups:
        stages = [StageSpec(s.unit.gpu_type, s.unit.device_power, s.unit.device_memory, s.stage_index) for s in g]
        part = balance_workload(PartitionProblem(stages, cfg.n_layers, cfg.n_microbatches, tp, profile, memmodel))
        partitions.append(part)
        groups.append([PlanStage(s.stage_index, s.devices, s.gpu_type, r) for s, r in zip(g, part.ranges())])
    plan = ParallelPlan(tp, cfg.n_layers, cfg.n_microbatches, groups,
                        grouping=grouping, mapping=mapping, partitions=partitions)
    plan.cost = estimate_iteration(plan, profile, cfg, spec, sync_overlap)
    plan.flags = {
        "grouping_optimal": grouping.optimal,
        "grouping_method": grouping.method,
        "grouping_objective": grouping.objective,
        "mapping_joint_rounds": mapping.joint_rounds,
        "mapping_halt": mapping.halt_reason,
        "dp_swaps": mapping.swaps,
        "sync_overlap": sync_overlap,
    }
    return plan


def plan(spec: ClusterSpec, cfg: ModelConfig, profile: ProfileTable, memmodel: Optional[MemoryModel] = None,
         tp_dims: Optional[Iterable[int]] = None, top_k: int = 1, budget: Optional[int] = None,
         validate_sim: bool = False, sync_overlap: str = "sum", power_source: str = "spec",
         method: str = "auto") -> ParallelPlan:
    """Minimum-cost plan over all TP dimensions.

    Raises InfeasibleError when no TP dimension survives; its ``reasons``
    map each tp_dim to the constraint that rejected it.
    """
    if memmodel is None:
        memmodel = MemoryModel.from_config(cfg)
    if power_source == "profile":
        spec = with_profiled_powers(spec, profile)
    elif power_source != "spec":
        raise SpecError(f"unknown power source {power_source!r}")
    dims = sorted(set(tp_dims)) if tp_dims is not None else candidate_tp_dims(spec)
    valid = set(enumerate_tp_dims(spec))
    kw = {"top_k": top_k}
    if budget is not None:
        kw["node_budget"] = budget

    candidates: List[Dict] = []
    feasible: List[tuple] = []
    for tp in dims:
        entry = {"tp_dim": tp, "status": "rejected"}
        candidates.append(entry)
        if tp < 1 or tp not in valid:
            entry["reason"] = "divisibility"
            continue
        gap = _profile_gap(spec, profile, tp, cfg.n_layers)
        if gap:
            entry.update(reason="profile", detail=gap)
            continue
        try:
            problem = GroupingProblem.for_cluster(spec, tp, cfg.n_microbatches, memmodel.min_mem, **kw)
            groupings = solve_grouping_topk(problem, method)
        except InfeasibleError:
            entry["reason"] = "memory (3b)"
            continue
        entry["objective"] = groupings[0].objective
        built = []
        last_reason = None
        for rank, grouping in enumerate(groupings):
            try:
                built.append((rank, _build_plan(spec, cfg, profile, memmodel, tp, grouping, sync_overlap)))
            except InfeasibleError as exc:
                last_reason = next(iter(exc.reasons.values()), "infeasible")
        if not built:
            entry["reason"] = last_reason
            continue
        rank, best = min(built, key=lambda rp: (rp[1].cost.T_star, rp[0]))
        entry.update(status="feasible", cost=best.cost.T_star, n_groups=len(best.groups),
                     stages=[len(g) for g in best.groups])
        feasible.append((best.cost.T_star, tp, best))

    if not feasible:
        reasons = {c["tp_dim"]: c["reason"] for c in candidates}
        summary = ", ".join(f"tp={k}: {v}" for k, v in reasons.items())
        raise InfeasibleError(f"no feasible plan ({summary})", reasons)

    _, tp_best, best = min(feasible, key=lambda f: (f[0], f[1]))
    for c in candidates:
        if c["tp_dim"] == tp_best:
            c["status"] = "selected"
    best.candidates = candidates
    if validate_sim:
        sim = simulate_1f1b(best, profile, cfg, spec, sync_overlap=sync_overlap)
        gap = abs(sim.iteration_time - best.cost.T_star) / best.cost.T_star
        best.flags["sim_iteration_time"] = sim.iteration_time
        best.flags["sim_divergence"] = gap
        if gap > SIM_TOLERANCE:
            log.warning("simulated iteration %.6g s differs from estimate %.6g s by %.2f%%",
                        sim.iteration_time, best.cost.T_star, 100 * gap)
    best.validate(spec)
    return best


def _fmt_bytes(b: float) -> str:
    return f"{b / 1e9:.3f} GB"


def explain(plan: ParallelPlan, spec: Optional[ClusterSpec] = None, cfg: Optional[ModelConfig] = None,
            profile: Optional[ProfileTable] = None, memmodel: Optional[MemoryModel] = None) -> str:
    """Human-readable breakdown of a plan.

    Per-stage time and memory need the cluster, model and profile; without
    them only the layout and the stored cost are shown.
    """
    from .cost import compute_times

    lines = [f"tp_dim {plan.tp_dim}, {len(plan.groups)} DP group(s), "
             f"{plan.n_layers} layers, K={plan.n_microbatches}"]
    times = compute_times(plan, profile) if profile is not None else None
    if memmodel is None and cfg is not None:
        memmodel = MemoryModel.from_config(cfg)
    cost = plan.cost.to_dict() if hasattr(plan.cost, "to_dict") else plan.cost
    for j, g in enumerate(plan.groups):
        lines.append(f"group {j}: {len(g)} stage(s), layers total {sum(s.n_layers for s in g)}")
        for i, s in enumerate(g):
            devs = " ".join(str(d) for d in s.devices)
            row = f"  stage {s.stage_index}: {s.gpu_type} [{devs}] layers {s.layer_range[0]}-{s.layer_range[1] - 1}" \
                  f" ({s.n_layers})"
            if times is not None:
                row += f" time {times[j][i]:.6f} s"
            if memmodel is not None and spec is not None:
                P = len(g)
                mem = (memmodel.fixed(s.n_layers, plan.tp_dim)
                       + memmodel.variable(s.n_layers, s.stage_index, P, plan.n_microbatches, plan.tp_dim))
                cap = spec.gpu_type_of(s.devices[0]).memory
                row += f" mem {_fmt_bytes(mem)} / {_fmt_bytes(cap)}"
            lines.append(row)
        if cost:
            gc = cost["groups"][j]
            lines.append(f"  pipeline fill {gc['pipeline_fill']:.6f} s, steady {gc['steady']:.6f} s, "
                         f"total {gc['total']:.6f} s, bubble {gc['bubble_ratio']:.4f}")
    if cost:
        lines.append(f"T_sync {cost['t_sync']:.6f} s")
        lines.append(f"T_star {cost['T_star']:.6f} s")
    if plan.flags:
        lines.append("flags: " + ", ".join(f"{k}={v}" for k, v in sorted(plan.flags.items())))
    if plan.candidates:
        lines.append("candidates:")
        for c in plan.candidates:
            row = f"  tp={c['tp_dim']}: {c['status']}"
            if "objective" in c:
                row += f", objective {c['objective']:.6g}"
            if "cost" in c:
                row += f", cost {c['cost']:.6f} s"
            if c.get("reason"):
                row += f", reason {c['reason']}"
            lines.append(row)
    return "\n".join(lines) + "\n"
