"""Device grouping: partition TP-units into DP groups maximizing
(number of groups) x (minimum effective computing power).

TP-units of the same (type, power, memory) class are interchangeable, so a
grouping is a multiset partition of the class-count vector. The exact solver
sweeps the threshold ``z`` over every attainable group power in descending
order; for each ``z`` a DP over count vectors finds the largest number of
groups whose effective power is at least ``z`` and whose memory meets the
minimum. ``max_z z * groups(z)`` is the optimum. When the count-vector
state space is too large, a budgeted branch-and-bound over canonical
multiset partitions is used instead.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from math import gcd
from functools import reduce
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._accel import HAVE_NUMBA, njit
from .cluster import ClusterSpec, DeviceId
from .errors import InfeasibleError, SpecError

log = logging.getLogger(__name__)

_REL_TOL = 1e-12


def bubble_ratio(n_stages: int, n_micro: int) -> float:
    return (n_stages - 1) / (n_micro + n_stages - 1)


def effective_power(group_powers: Sequence[float], tp_dim: int, n_micro: int) -> float:
    """Summed device power discounted by the group's 1F1B bubble fraction."""
    if len(group_powers) == 0:
        raise SpecError("effective_power of an empty group")
    if len(group_powers) % tp_dim:
        raise SpecError(f"group of {len(group_powers)} GPUs is not divisible by tp_dim={tp_dim}")
    n_stages = len(group_powers) // tp_dim
    return sum(group_powers) * (1.0 - bubble_ratio(n_stages, n_micro))


def enumerate_tp_dims(spec: ClusterSpec) -> List[int]:
    g = reduce(gcd, (n.gpu_count for n in spec.nodes))
    return [t for t in range(1, g + 1) if g % t == 0]


@dataclass(frozen=True)
class TpUnit:
    index: int
    node_id: int
    devices: Tuple[DeviceId, ...]
    gpu_type: str
    device_power: float
    device_memory: float

    @property
    def power(self) -> float:
        return self.device_power * len(self.devices)

    @property
    def memory(self) -> float:
        return self.device_memory * len(self.devices)


def make_tp_units(spec: ClusterSpec, tp_dim: int) -> List[TpUnit]:
    """Split every node into consecutive-rank units of ``tp_dim`` GPUs."""
    if tp_dim < 1:
        raise SpecError("tp_dim must be >= 1")
    units = []
    for node in spec.nodes:
        if node.gpu_count % tp_dim:
            raise SpecError(f"tp_dim {tp_dim} does not divide node {node.node_id}'s {node.gpu_count} GPUs")
        t = node.gpu_type
        for k in range(node.gpu_count // tp_dim):
            devs = tuple(DeviceId(node.node_id, r) for r in range(k * tp_dim, (k + 1) * tp_dim))
            units.append(TpUnit(len(units), node.node_id, devs, t.name, t.compute_power, t.memory))
    return units


@dataclass
class GroupingProblem:
    units: List[TpUnit]
    tp_dim: int
    n_microbatches: int
    min_mem: float
    big_L: Optional[float] = None
    dp_limit: int = 50_000_000
    node_budget: int = 2_000_000
    top_k: int = 1

    def __post_init__(self):
        if not self.units:
            raise SpecError("grouping problem has no TP-units")
        if self.big_L is None:
            tot_p = sum(u.power for u in self.units)
            tot_m = sum(u.memory for u in self.units)
            self.big_L = 2.0 * max(tot_p, tot_m, self.min_mem) + 1.0

    @classmethod
    def for_cluster(cls, spec: ClusterSpec, tp_dim: int, n_microbatches: int, min_mem: float, **kw):
        return cls(make_tp_units(spec, tp_dim), tp_dim, n_microbatches, min_mem, **kw)


@dataclass
class GroupingSolution:
    groups: List[List[int]]                 # unit indices per group, ascending
    units: List[TpUnit] = field(repr=False)
    assignment: Dict[DeviceId, int]
    z: float
    objective: float
    optimal: bool
    method: str

    @property
    def valid_groups(self):
        return set(range(len(self.groups)))

    def group_devices(self, j) -> List[DeviceId]:
        return [d for u in self.groups[j] for d in self.units[u].devices]


def _solution_from_groups(problem: GroupingProblem, groups, optimal, method) -> GroupingSolution:
    groups = sorted(sorted(g) for g in groups)
    units = problem.units
    assignment = {}
    for j, g in enumerate(groups):
        for u in g:
            for d in units[u].devices:
                assignment[d] = j
    gs = [effective_power([units[u].device_power for u in g for _ in units[u].devices],
                          problem.tp_dim, problem.n_microbatches) for g in groups]
    z = min(gs)
    return GroupingSolution(groups, units, assignment, z, len(groups) * z, optimal, method)


def check_constraints(problem: GroupingProblem, sol: GroupingSolution) -> List[str]:
    """Evaluate the grouping program's constraints literally; returns violations.

    Group slots j = 0..N-1 over the N TP-units; unused slots have y_j = 0.
    """
    L = problem.big_L
    n = len(problem.units)
    x = np.zeros((n, n))
    for j, g in enumerate(sol.groups):
        for u in g:
            x[u, j] = 1.0
    y = (x.sum(axis=0) > 0).astype(float)
    bad = []
    for j in range(n):
        members = np.nonzero(x[:, j])[0]
        mem = sum(problem.units[u].memory for u in members)
        if mem + L * (1 - y[j]) < problem.min_mem:
            bad.append(f"memory: slot {j}")
        if y[j]:
            gj = effective_power([problem.units[u].device_power for u in members
                                  for _ in problem.units[u].devices],
                                 problem.tp_dim, problem.n_microbatches)
        else:
            gj = 0.0
        if gj * y[j] + L * (1 - y[j]) < sol.z * (1 - _REL_TOL):
            bad.append(f"min-power: slot {j}")
        cnt = x[:, j].sum()
        if not (cnt / L <= y[j] <= cnt):
            bad.append(f"indicator: slot {j}")
    for u in range(n):
        if x[u].sum() != 1:
            bad.append(f"assignment: unit {u}")
    if abs(sol.objective - y.sum() * sol.z) > _REL_TOL * max(1.0, abs(sol.objective)):
        bad.append("objective")
    return bad


# ---------------------------------------------------------------------------
# class-count representation
# ---------------------------------------------------------------------------

class _Classes:
    def __init__(self, problem: GroupingProblem):
        keys, members = [], {}
        for u in problem.units:
            key = (u.gpu_type, u.device_power, u.device_memory)
            if key not in members:
                keys.append(key)
                members[key] = []
            members[key].append(u.index)
        self.keys = keys
        self.members = [members[k] for k in keys]
        self.counts = np.array([len(m) for m in self.members], dtype=np.int64)
        tp = problem.tp_dim
        self.power = np.array([k[1] * tp for k in keys])
        self.memory = np.array([k[2] * tp for k in keys])
        # descending-lex block list, zero block excluded
        ranges = [range(c, -1, -1) for c in self.counts]
        blocks = [b for b in itertools.product(*ranges) if any(b)]
        self.blocks = np.array(blocks, dtype=np.int64).reshape(len(blocks), len(keys))
        sizes = self.blocks.sum(axis=1)
        total = self.blocks @ self.power
        K = problem.n_microbatches
        self.block_g = total * (1.0 - (sizes - 1) / (K + sizes - 1))
        self.block_mem_ok = self.blocks @ self.memory >= problem.min_mem
        radix = self.counts + 1
        self.strides = np.ones(len(keys), dtype=np.int64)
        for t in range(len(keys) - 2, -1, -1):
            self.strides[t] = self.strides[t + 1] * radix[t + 1]
        self.n_states = int(np.prod(radix))
        self.block_off = self.blocks @ self.strides

    def expand(self, blocks):
        """Concrete unit groups: each block takes the lowest-index free units."""
        free = [list(m) for m in self.members]
        groups = []
        for b in blocks:
            g = []
            for t, cnt in enumerate(b):
                g.extend(free[t][:cnt])
                del free[t][:cnt]
            groups.append(g)
        return groups


def _state_vectors(cls: _Classes):
    ranges = [range(c + 1) for c in cls.counts]
    return np.array(list(itertools.product(*ranges)), dtype=np.int64).reshape(cls.n_states, len(cls.counts))


def _max_groups_loop(states, blocks, block_off, valid):
    n_states = states.shape[0]
    n_blocks, n_types = blocks.shape
    f = np.full(n_states, -1, dtype=np.int64)
    f[0] = 0
    for s in range(1, n_states):
        best = -1
        for b in range(n_blocks):
            if not valid[b]:
                continue
            fits = True
            for t in range(n_types):
                if blocks[b, t] > states[s, t]:
                    fits = False
                    break
            if not fits:
                continue
            prev = f[s - block_off[b]]
            if prev >= 0 and prev + 1 > best:
                best = prev + 1
        f[s] = best
    return f


class _MaxGroupsNumpy:
    """Level-synchronous vectorized version of the max-groups DP."""

    def __init__(self, states, blocks, block_off):
        rows, cols = [], []
        for b in range(blocks.shape[0]):
            ok = np.nonzero((states >= blocks[b]).all(axis=1))[0]
            rows.append(ok)
            cols.append(np.full(len(ok), b, dtype=np.int64))
        r = np.concatenate(rows) if rows else np.zeros(0, np.int64)
        blk = np.concatenate(cols) if cols else np.zeros(0, np.int64)
        level = states.sum(axis=1)
        order = np.argsort(level[r], kind="stable")
        self.r, self.blk = r[order], blk[order]
        self.prev = self.r - block_off[self.blk]
        lv = level[self.r]
        self.bounds = np.searchsorted(lv, np.arange(level.max() + 2))
        self.n_states = states.shape[0]

    def __call__(self, valid):
        f = np.full(self.n_states, -np.inf)
        f[0] = 0.0
        for lo, hi in zip(self.bounds[:-1], self.bounds[1:]):
            if hi <= lo:
                continue
            sel = slice(lo, hi)
            keep = valid[self.blk[sel]]
            if not keep.any():
                continue
            np.maximum.at(f, self.r[sel][keep], f[self.prev[sel][keep]] + 1.0)
        out = np.where(np.isfinite(f), f, -1).astype(np.int64)
        return out


if HAVE_NUMBA:
    _max_groups_jit = njit(cache=True)(_max_groups_loop)


def _solve_dp(problem: GroupingProblem, cls: _Classes, use_numba: bool = HAVE_NUMBA):
    states = _state_vectors(cls)
    if use_numba and HAVE_NUMBA:
        def run(valid):
            return _max_groups_jit(states, cls.blocks, cls.block_off, valid)
    else:
        run = _MaxGroupsNumpy(states, cls.blocks, cls.block_off)
    full = cls.n_states - 1
    n_units = int(cls.counts.sum())
    total_mem = float(cls.counts @ cls.memory)
    cap = n_units if problem.min_mem <= 0 else min(n_units, int(total_mem // problem.min_mem))
    z_values = np.unique(cls.block_g[cls.block_mem_ok])[::-1]
    found = []       # (objective, z, f-table)
    for z in z_values:
        if found and z * cap < found[-1][0] * (1 - _REL_TOL) and len(found) >= problem.top_k:
            break
        valid = cls.block_mem_ok & (cls.block_g >= z)
        f = run(valid)
        k = int(f[full])
        if k <= 0:
            continue
        obj = z * k
        found.append((obj, z, f, valid))
        # keep best-first; stable on ties so larger z (fewer groups) wins
        found.sort(key=lambda t: -t[0])
        deduped = []
        for item in found:
            if deduped and abs(item[0] - deduped[-1][0]) <= _REL_TOL * abs(deduped[-1][0]):
                continue
            deduped.append(item)
        found = deduped[:max(problem.top_k, 1)]
    if not found:
        return []
    out = []
    for _, _, f, valid in found:
        out.append(cls.expand(_reconstruct(cls, f, valid, full)))
    return out


def _reconstruct(cls, f, valid, state):
    blocks = []
    vec = np.zeros(len(cls.counts), dtype=np.int64)
    rem = state
    # decode state index to count vector
    for t in range(len(cls.counts)):
        vec[t] = rem // cls.strides[t]
        rem %= cls.strides[t]
    s = state
    while s:
        for b in range(len(cls.blocks)):
            if not valid[b] or (cls.blocks[b] > vec).any():
                continue
            prev = s - cls.block_off[b]
            if f[prev] == f[s] - 1:
                blocks.append(tuple(int(x) for x in cls.blocks[b]))
                vec -= cls.blocks[b]
                s = prev
                break
        else:  # pragma: no cover - f is consistent by construction
            raise RuntimeError("grouping DP reconstruction failed")
    return blocks


# ---------------------------------------------------------------------------
# budgeted branch and bound (fallback for huge class spaces)
# ---------------------------------------------------------------------------

def _greedy_incumbents(problem: GroupingProblem, cls: _Classes):
    order = sorted(range(len(problem.units)), key=lambda u: (-problem.units[u].power, u))
    out = []
    for k in range(1, len(order) + 1):
        loads = [0.0] * k
        groups = [[] for _ in range(k)]
        for u in order:
            j = min(range(k), key=lambda i: (loads[i], i))
            groups[j].append(u)
            loads[j] += problem.units[u].power
        if all(groups) and all(sum(problem.units[u].memory for u in g) >= problem.min_mem for g in groups):
            out.append(groups)
    return out


def _blocks_of(cls: _Classes, groups):
    where = {}
    for t, m in enumerate(cls.members):
        for u in m:
            where[u] = t
    blocks = []
    for g in groups:
        b = [0] * len(cls.counts)
        for u in g:
            b[where[u]] += 1
        blocks.append(tuple(b))
    return blocks


def _score(cls, problem, blocks):
    gs = []
    for b in blocks:
        size = sum(b)
        tot = float(np.dot(b, cls.power))
        gs.append(tot * (1.0 - (size - 1) / (problem.n_microbatches + size - 1)))
    return len(blocks) * min(gs)


def _solve_bnb(problem: GroupingProblem, cls: _Classes):
    blocks = [tuple(int(x) for x in b) for b in cls.blocks]
    g_of = dict(zip(blocks, cls.block_g.tolist()))
    mem_ok = dict(zip(blocks, cls.block_mem_ok.tolist()))
    best_obj, best_blocks = -1.0, None
    for groups in _greedy_incumbents(problem, cls):
        bl = sorted(_blocks_of(cls, groups), reverse=True)
        obj = _score(cls, problem, bl)
        if obj > best_obj * (1 + _REL_TOL):
            best_obj, best_blocks = obj, bl
    nodes = 0
    exhausted = True
    power = cls.power.tolist()
    memory = cls.memory.tolist()

    def upper_bound(k, zcur, rem):
        n_r = sum(rem)
        w_r = sum(c * p for c, p in zip(rem, power))
        m_r = sum(c * m for c, m in zip(rem, memory))
        m_max = n_r if problem.min_mem <= 0 else min(n_r, int(m_r // problem.min_mem))
        ub = -1.0
        for m in range(1, m_max + 1):
            ub = max(ub, (k + m) * min(zcur, w_r / m))
        return ub

    def dfs(rem, prev_idx, chosen, zcur):
        nonlocal nodes, best_obj, best_blocks, exhausted
        nodes += 1
        if nodes > problem.node_budget:
            exhausted = False
            return
        if not any(rem):
            obj = len(chosen) * zcur
            if obj > best_obj * (1 + _REL_TOL) or (
                    abs(obj - best_obj) <= _REL_TOL * best_obj and best_blocks is not None
                    and len(chosen) < len(best_blocks)):
                best_obj, best_blocks = obj, list(chosen)
            return
        if upper_bound(len(chosen), zcur, rem) < best_obj * (1 - _REL_TOL):
            return
        for i in range(prev_idx, len(blocks)):
            b = blocks[i]
            if not mem_ok[b] or any(x > r for x, r in zip(b, rem)):
                continue
            nz = min(zcur, g_of[b])
            if (len(chosen) + 1 + sum(rem) - sum(b)) * nz < best_obj * (1 - _REL_TOL):
                continue
            chosen.append(b)
            dfs(tuple(r - x for r, x in zip(rem, b)), i, chosen, nz)
            chosen.pop()
            if not exhausted:
                return

    dfs(tuple(int(c) for c in cls.counts), 0, [], float("inf"))
    log.debug("grouping branch-and-bound explored %d nodes (exhausted=%s)", nodes, exhausted)
    if best_blocks is None:
        return [], exhausted
    return [cls.expand(best_blocks)], exhausted


def solve_grouping(problem: GroupingProblem, method: str = "auto") -> GroupingSolution:
    """Best grouping (see :func:`solve_grouping_topk`)."""
    return solve_grouping_topk(problem, method)[0]


def solve_grouping_topk(problem: GroupingProblem, method: str = "auto") -> List[GroupingSolution]:
    """Up to ``problem.top_k`` groupings, best first.

    Ties on the objective resolve to fewer groups. ``method`` is ``"dp"``,
    ``"bnb"`` or ``"auto"`` (DP unless its table exceeds ``dp_limit``).
    """
    total_mem = sum(u.memory for u in problem.units)
    if total_mem < problem.min_mem:
        raise InfeasibleError(
            f"total memory {total_mem:.4g} B is below the per-group minimum {problem.min_mem:.4g} B "
            "(memory constraint 3b)", {problem.tp_dim: "memory (3b)"})
    cls = _Classes(problem)
    if method == "auto":
        method = "dp" if cls.n_states * len(cls.blocks) <= problem.dp_limit else "bnb"
    if method == "dp":
        groupings, optimal = _solve_dp(problem, cls), True
    elif method == "bnb":
        groupings, optimal = _solve_bnb(problem, cls)
    else:
        raise SpecError(f"unknown grouping method {method!r}")
    if not groupings:
        raise InfeasibleError("no grouping gives every DP group enough memory (memory constraint 3b)",
                              {problem.tp_dim: "memory (3b)"})
    return [_solution_from_groups(problem, g, optimal, method) for g in groupings]
