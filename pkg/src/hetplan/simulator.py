"""Discrete-event 1F1B pipeline simulation for a single DP group.

``engine="kernel"`` evaluates the static 1F1B order with the compiled
recurrence in :mod:`hetplan._kernels`; ``engine="events"`` runs an explicit
event queue ordered by (time, stage, microbatch). Both produce identical
floating-point timelines.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from . import _kernels
from ._kernels import OP_BACKWARD, OP_FORWARD, one_f_one_b_order
from .errors import SpecError

DEFAULT_FB_SPLIT = (1.0 / 3.0, 2.0 / 3.0)


def split_times(stage_times: Sequence[float], mode: str = "split", fb_split=DEFAULT_FB_SPLIT):
    """Forward/backward durations from combined per-microbatch stage times.

    ``mode="combined"`` puts the whole time on the forward pass (zero-cost
    backward), which reproduces the closed-form pipeline term exactly.
    """
    t = np.asarray(stage_times, dtype=np.float64)
    if mode == "combined":
        return t.copy(), np.zeros_like(t)
    if mode != "split":
        raise SpecError(f"unknown simulation mode {mode!r}")
    f = t * fb_split[0]
    return f, t - f


@dataclass
class PipelineRun:
    kinds: np.ndarray
    micro: np.ndarray
    start: np.ndarray
    end: np.ndarray
    fwd: np.ndarray
    bwd: np.ndarray

    @property
    def makespan(self) -> float:
        return float(self.end.max()) if self.end.size else 0.0

    def busy(self) -> np.ndarray:
        return (self.end - self.start).sum(axis=1)

    def peak_in_flight(self) -> List[int]:
        """Max microbatches with a forward done (started) but backward not yet finished."""
        out = []
        for s in range(self.kinds.shape[0]):
            live = peak = 0
            for k in self.kinds[s]:
                live += 1 if k == OP_FORWARD else -1
                peak = max(peak, live)
            out.append(peak)
        return out


def _events_schedule(fwd, bwd, comm, n_micro):
    P = len(fwd)
    kinds, micro = one_f_one_b_order(P, n_micro)
    n_ops = 2 * n_micro
    start = np.zeros((P, n_ops))
    end = np.zeros((P, n_ops))
    ptr = [0] * P
    busy = [False] * P
    free_at = [0.0] * P
    # arrival[s][(kind, m)] = time the op's input is available at stage s
    arrival = [dict() for _ in range(P)]
    arrival[0].update({(OP_FORWARD, m): 0.0 for m in range(n_micro)})
    heap = []
    seq = 0

    def push(t, s, m, what):
        nonlocal seq
        heapq.heappush(heap, (t, s, m, seq, what))
        seq += 1

    def try_start(s, now):
        if busy[s] or ptr[s] >= n_ops:
            return
        j = ptr[s]
        key = (int(kinds[s, j]), int(micro[s, j]))
        ready = arrival[s].get(key)
        if ready is None or ready > now:
            return
        t0 = free_at[s] if free_at[s] > ready else ready
        dur = fwd[s] if key[0] == OP_FORWARD else bwd[s]
        start[s, j] = t0
        end[s, j] = t0 + dur
        busy[s] = True
        push(t0 + dur, s, key[1], ("done", key[0], j))

    for s in range(P):
        try_start(s, 0.0)
    while heap:
        now, s, m, _, what = heapq.heappop(heap)
        if what[0] == "done":
            _, kind, j = what
            busy[s] = False
            free_at[s] = end[s, j]
            ptr[s] += 1
            if kind == OP_FORWARD:
                if s + 1 < P:
                    push(end[s, j] + comm[s], s + 1, m, ("arrive", OP_FORWARD))
                else:
                    arrival[s][(OP_BACKWARD, m)] = end[s, j]
            elif s > 0:
                push(end[s, j] + comm[s - 1], s - 1, m, ("arrive", OP_BACKWARD))
            try_start(s, now)
        else:
            arrival[s][(what[1], m)] = now
            try_start(s, now)
    if any(p < n_ops for p in ptr):
        raise RuntimeError("event simulation stalled")
    return kinds, micro, start, end


def run_pipeline(stage_times: Sequence[float], n_micro: int, comm: Sequence[float] = (),
                 mode: str = "split", fb_split=DEFAULT_FB_SPLIT, engine: str = "kernel") -> PipelineRun:
    """Simulate one group; ``comm[i]`` is the transfer latency across boundary i -> i+1."""
    fwd, bwd = split_times(stage_times, mode, fb_split)
    P = len(fwd)
    c = np.zeros(max(P - 1, 0)) if len(comm) == 0 else np.asarray(comm, dtype=np.float64)
    if len(c) != max(P - 1, 0):
        raise SpecError("comm must have one entry per stage boundary")
    if engine == "kernel":
        kinds, micro, start, end = _kernels.schedule(fwd, bwd, c, n_micro)
    elif engine == "events":
        kinds, micro, start, end = _events_schedule(fwd, bwd, c, n_micro)
    else:
        raise SpecError(f"unknown engine {engine!r}")
    return PipelineRun(kinds, micro, start, end, fwd, bwd)


def pipeline_makespan(stage_times: Sequence[float], n_micro: int, comm: Sequence[float] = (),
                      mode: str = "split", engine: str = "kernel") -> float:
    return run_pipeline(stage_times, n_micro, comm, mode=mode, engine=engine).makespan


def closed_form_pipeline(stage_times: Sequence[float], n_micro: int) -> float:
    """Sum of stage times plus (K - 1) times the slowest stage."""
    return sum(stage_times) + (n_micro - 1) * max(stage_times)


def pipeline_idle_fraction(stage_times: Sequence[float], n_micro: int, mode: str = "split",
                           engine: str = "kernel") -> float:
    run = run_pipeline(stage_times, n_micro, mode=mode, engine=engine)
    span = run.makespan
    if span == 0:
        return 0.0
    return 1.0 - float(run.busy().sum()) / (len(stage_times) * span)
