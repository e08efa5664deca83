"""Layer load balancing across the pipeline stages of one DP group."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .errors import InfeasibleError, SpecError
from .profile import MemoryModel, ProfileTable, estimate_stage_time


@dataclass(frozen=True)
class StageSpec:
    gpu_type: str
    compute_power: float
    memory: float        # bytes per device
    stage_index: int     # 1-based


@dataclass
class PartitionProblem:
    stages: List[StageSpec]
    n_layers: int
    n_microbatches: int
    tp_dim: int
    profile: Optional[ProfileTable]
    memmodel: MemoryModel
    allow_empty: bool = False

    def __post_init__(self):
        if not self.stages:
            raise SpecError("partition problem has no stages")


@dataclass
class Partition:
    layers: List[int]
    stage_times: List[float]
    bottleneck: float

    def ranges(self) -> List[Tuple[int, int]]:
        out, start = [], 0
        for l in self.layers:
            out.append((start, start + l))
            start += l
        return out


def stage_time(problem: PartitionProblem, i: int, l: int) -> float:
    if l == 0:
        return 0.0
    st = problem.stages[i]
    if problem.profile is None:
        return l / st.compute_power
    return estimate_stage_time(problem.profile, st.gpu_type, problem.tp_dim, l)


def stage_memory(problem: PartitionProblem, i: int, l: int) -> float:
    if l == 0:
        return 0.0
    mm = problem.memmodel
    P = len(problem.stages)
    p = problem.stages[i].stage_index
    return mm.fixed(l, problem.tp_dim) + mm.variable(l, p, P, problem.n_microbatches, problem.tp_dim)


def time_matrix(problem: PartitionProblem) -> np.ndarray:
    """``T[i, l]``: stage i's time with l layers; inf where disallowed or over memory."""
    P, n = len(problem.stages), problem.n_layers
    T = np.full((P, n + 1), np.inf)
    lmin = 0 if problem.allow_empty else 1
    for i in range(P):
        cap = problem.stages[i].memory
        for l in range(lmin, n + 1):
            if stage_memory(problem, i, l) > cap:
                break  # memory is nondecreasing in l
            T[i, l] = stage_time(problem, i, l)
    return T


def balance_workload(problem: PartitionProblem) -> Partition:
    """Split the layers to minimize the slowest stage under per-stage memory caps.

    Among bottleneck-optimal splits the one with the least sum of squared
    stage times is taken, then the one with most layers on the earliest
    stages.
    """
    P = len(problem.stages)
    if not problem.allow_empty and problem.n_layers < P:
        raise InfeasibleError(f"{problem.n_layers} layers cannot fill {P} stages", {"partition": "layers"})
    T = time_matrix(problem)
    layers, cap = _kernels.balance_layers(T)
    if layers is None:
        raise InfeasibleError("no layer split fits every stage's memory (memory constraint 4c)",
                              {"partition": "memory (4c)"})
    layers = [int(x) for x in layers]
    times = [float(T[i, l]) for i, l in enumerate(layers)]
    return Partition(layers, times, max(times))


def equal_partition(problem: PartitionProblem) -> Partition:
    """Homogeneous-style split: counts differ by at most one, extras first."""
    P, n = len(problem.stages), problem.n_layers
    layers = [n // P + (1 if i < n % P else 0) for i in range(P)]
    times = [stage_time(problem, i, l) for i, l in enumerate(layers)]
    return Partition(layers, times, max(times))


def idle_fraction(partition: Partition, n_microbatches: int, mode: str = "split") -> float:
    """Share of device-time left idle over one simulated 1F1B iteration."""
    from .simulator import pipeline_makespan

    P = len(partition.stage_times)
    makespan = pipeline_makespan(partition.stage_times, n_microbatches, mode=mode)
    if makespan == 0:
        return 0.0
    busy = sum(n_microbatches * t for t in partition.stage_times)
    return 1.0 - busy / (P * makespan)
