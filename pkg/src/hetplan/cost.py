"""Per-iteration cost: closed-form 1F1B estimate, layer-wise gradient sync,
and plan-level simulation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

from .cluster import ClusterSpec, DeviceId
from .errors import SpecError
from .plan import ParallelPlan
from .profile import ModelConfig, ProfileTable, estimate_stage_time
from .simulator import DEFAULT_FB_SPLIT, run_pipeline


@dataclass
class GroupCost:
    stage_times: List[float]
    pipeline_fill: float
    steady: float
    total: float
    bubble_ratio: float


@dataclass
class CostEstimate:
    groups: List[GroupCost]
    t_sync: float
    T_star: float

    def to_dict(self) -> dict:
        return {
            "T_star": self.T_star,
            "t_sync": self.t_sync,
            "groups": [{"stage_times": g.stage_times, "pipeline_fill": g.pipeline_fill,
                        "steady": g.steady, "total": g.total, "bubble_ratio": g.bubble_ratio}
                       for g in self.groups],
        }


@dataclass
class LayerSync:
    layer: int
    holders: List[Tuple[int, int]]       # (group, stage_index)
    ring: List[DeviceId]                 # tp-rank-0 members, canonical order
    grad_bytes: float                    # per TP shard ring
    min_bw: float
    seconds: float


@dataclass
class SyncSpec:
    layers: List[LayerSync]
    total_volume: float
    t_sync: float


def compute_times(plan: ParallelPlan, profile: ProfileTable) -> List[List[float]]:
    """Profiled fwd+bwd seconds per microbatch for every stage."""
    out = []
    for g in plan.groups:
        out.append([estimate_stage_time(profile, s.gpu_type, plan.tp_dim, s.n_layers) if s.n_layers else 0.0
                    for s in g])
    return out


def boundary_comm(plan: ParallelPlan, cfg: ModelConfig, spec: ClusterSpec) -> List[List[float]]:
    """Activation transfer seconds across each stage boundary of every group."""
    out = []
    for g in plan.groups:
        out.append([cfg.per_layer_activation_bytes / spec.link_bandwidth(a.devices[0], b.devices[0])
                    for a, b in zip(g, g[1:])])
    return out


def estimate_sync(plan: ParallelPlan, cfg: ModelConfig, spec: ClusterSpec,
                  overlap: str = "sum") -> SyncSpec:
    """Layer-wise ring all-reduce across DP replicas.

    Each layer's TP shard r forms its own ring over the rank-r devices of the
    stages holding that layer; a ring of d members moves 2(d-1)/d of the shard
    per member at the slowest consecutive link. Rings for different layers
    are serialized (``overlap="sum"``) or assumed concurrent (``"max"``).
    """
    if overlap not in ("sum", "max"):
        raise SpecError(f"unknown sync overlap mode {overlap!r}")
    shard_bytes = cfg.per_layer_param_bytes / plan.tp_dim
    layers = []
    volume = 0.0
    for layer in range(plan.n_layers):
        holders, members = [], []
        for j in range(len(plan.groups)):
            st = plan.stage_of(j, layer)
            holders.append((j, st.stage_index))
            members.append(st.devices[0])
        d = len(members)
        ring = sorted(members, key=spec.global_rank)
        if d < 2:
            layers.append(LayerSync(layer, holders, ring, shard_bytes, float("inf"), 0.0))
            continue
        bw = min(spec.link_bandwidth(ring[i], ring[(i + 1) % d]) for i in range(d))
        per_member = 2.0 * (d - 1) / d * shard_bytes
        layers.append(LayerSync(layer, holders, ring, shard_bytes, bw, per_member / bw))
        volume += per_member * plan.tp_dim
    times = [l.seconds for l in layers]
    t_sync = (sum(times) if overlap == "sum" else max(times, default=0.0))
    return SyncSpec(layers, volume, t_sync)


def estimate_iteration(plan: ParallelPlan, profile: ProfileTable, cfg: ModelConfig, spec: ClusterSpec,
                       sync_overlap: str = "sum") -> CostEstimate:
    """Closed-form 1F1B iteration time, max over groups, plus gradient sync.

    A stage's time is its profiled compute plus the activation sends it
    issues (forward to the next stage, backward to the previous).
    """
    K = plan.n_microbatches
    compute = compute_times(plan, profile)
    comm = boundary_comm(plan, cfg, spec)
    groups = []
    for ct, cm in zip(compute, comm):
        times = list(ct)
        for i, c in enumerate(cm):
            times[i] += c
            times[i + 1] += c
        fill = sum(times)
        steady = (K - 1) * max(times)
        total = fill + steady
        P = len(times)
        bubble = 1.0 - K * fill / (P * total) if total > 0 else 0.0
        groups.append(GroupCost(times, fill, steady, total, bubble))
    sync = estimate_sync(plan, cfg, spec, sync_overlap)
    T = max(g.total for g in groups) + sync.t_sync
    return CostEstimate(groups, sync.t_sync, T)


@dataclass
class SimulationResult:
    makespan: float                      # slowest pipeline
    iteration_time: float                # makespan + t_sync
    group_makespans: List[float]
    bubble_ratio: List[float]            # per group idle share
    device_busy: Dict[DeviceId, float]
    device_idle_fraction: Dict[DeviceId, float]
    peak_in_flight: List[List[int]]
    timeline: List[tuple] = field(repr=False)  # (device, event, micro, start, end)
    work: float = 0.0

    def to_dict(self) -> dict:
        return {
            "makespan": self.makespan,
            "iteration_time": self.iteration_time,
            "group_makespans": self.group_makespans,
            "bubble_ratio": self.bubble_ratio,
            "device_idle_fraction": {str(d): v for d, v in self.device_idle_fraction.items()},
            "peak_in_flight": self.peak_in_flight,
        }


def simulate_1f1b(plan: ParallelPlan, profile: ProfileTable, cfg: ModelConfig, spec: ClusterSpec,
                  mode: str = "split", fb_split=DEFAULT_FB_SPLIT, include_comm: bool = True,
                  sync_overlap: str = "sum", engine: str = "kernel") -> SimulationResult:
    K = plan.n_microbatches
    compute = compute_times(plan, profile)
    comm = boundary_comm(plan, cfg, spec) if include_comm else [[0.0] * (len(g) - 1) for g in plan.groups]
    runs = [run_pipeline(ct, K, cm, mode=mode, fb_split=fb_split, engine=engine)
            for ct, cm in zip(compute, comm)]
    spans = [r.makespan for r in runs]
    makespan = max(spans)
    busy, idle, timeline = {}, {}, []
    bubbles, peaks = [], []
    work = 0.0
    for g, r in zip(plan.groups, runs):
        b = r.busy()
        span = r.makespan
        bubbles.append(max(0.0, 1.0 - float(b.sum()) / (len(g) * span)) if span > 0 else 0.0)
        peaks.append(r.peak_in_flight())
        for s, stage in enumerate(g):
            work += float(b[s]) * len(stage.devices)
            for d in stage.devices:
                busy[d] = float(b[s])
                idle[d] = max(0.0, 1.0 - float(b[s]) / makespan) if makespan > 0 else 0.0
                for j in range(r.kinds.shape[1]):
                    ev = "F" if r.kinds[s, j] == 0 else "B"
                    timeline.append((d, ev, int(r.micro[s, j]), float(r.start[s, j]), float(r.end[s, j])))
    timeline.sort(key=lambda e: (e[3], spec.global_rank(e[0]), e[2]))
    t_sync = estimate_sync(plan, cfg, spec, sync_overlap).t_sync
    return SimulationResult(makespan, makespan + t_sync, spans, bubbles, busy, idle, peaks, timeline, work)
