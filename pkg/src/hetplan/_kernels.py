"""Hot inner loops: shard digests, 1F1B schedule recurrence, layer-partition DP.

Each kernel exists as a plain numpy/Python function (``*_numpy``) and, when
numba is importable and not disabled, as a jitted twin (``*_numba``). The
unsuffixed names point at whichever backend :mod:`hetplan._accel` selected.
"""
import numpy as np

from ._accel import HAVE_NUMBA, njit

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

OP_FORWARD = 0
OP_BACKWARD = 1


# ---------------------------------------------------------------------------
# FNV-1a 64
# ---------------------------------------------------------------------------

def fnv1a64_numpy(buf):
    h = FNV_OFFSET
    for byte in bytes(buf):
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def _fnv1a64_loop(buf):
    h = np.uint64(FNV_OFFSET)
    prime = np.uint64(FNV_PRIME)
    for i in range(buf.shape[0]):
        h = h ^ np.uint64(buf[i])
        h = h * prime
    return h


# ---------------------------------------------------------------------------
# 1F1B schedule
# ---------------------------------------------------------------------------

def one_f_one_b_order(n_stages, n_micro):
    """Static per-stage op order of the 1F1B schedule.

    Stage ``s`` (0-based) runs ``min(P - s - 1, K)`` warm-up forwards, then
    alternates forward/backward, then drains the remaining backwards.
    Returns ``(kinds, micro)`` arrays of shape ``(P, 2K)``.
    """
    kinds = np.empty((n_stages, 2 * n_micro), dtype=np.int64)
    micro = np.empty((n_stages, 2 * n_micro), dtype=np.int64)
    for s in range(n_stages):
        warm = min(n_stages - s - 1, n_micro)
        j = 0
        for m in range(warm):
            kinds[s, j] = OP_FORWARD
            micro[s, j] = m
            j += 1
        for i in range(n_micro - warm):
            kinds[s, j] = OP_FORWARD
            micro[s, j] = warm + i
            j += 1
            kinds[s, j] = OP_BACKWARD
            micro[s, j] = i
            j += 1
        for m in range(n_micro - warm, n_micro):
            kinds[s, j] = OP_BACKWARD
            micro[s, j] = m
            j += 1
    return kinds, micro


def _schedule_loop(kinds, micro, fwd, bwd, comm):
    n_stages, n_ops = kinds.shape
    n_micro = n_ops // 2
    start = np.zeros((n_stages, n_ops))
    end = np.zeros((n_stages, n_ops))
    f_end = np.full((n_stages, n_micro), -1.0)
    b_end = np.full((n_stages, n_micro), -1.0)
    ptr = np.zeros(n_stages, dtype=np.int64)
    free = np.zeros(n_stages)
    remaining = n_stages * n_ops
    while remaining > 0:
        progressed = False
        for s in range(n_stages):
            while ptr[s] < n_ops:
                j = ptr[s]
                m = micro[s, j]
                if kinds[s, j] == OP_FORWARD:
                    if s == 0:
                        ready = 0.0
                    else:
                        if f_end[s - 1, m] < 0.0:
                            break
                        ready = f_end[s - 1, m] + comm[s - 1]
                    dur = fwd[s]
                else:
                    if s == n_stages - 1:
                        ready = f_end[s, m]
                    else:
                        if b_end[s + 1, m] < 0.0:
                            break
                        ready = b_end[s + 1, m] + comm[s]
                    dur = bwd[s]
                t0 = free[s] if free[s] > ready else ready
                t1 = t0 + dur
                start[s, j] = t0
                end[s, j] = t1
                if kinds[s, j] == OP_FORWARD:
                    f_end[s, m] = t1
                else:
                    b_end[s, m] = t1
                free[s] = t1
                ptr[s] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            # unreachable for a well-formed 1F1B order
            return start, end, False
    return start, end, True


def schedule_numpy(fwd, bwd, comm, n_micro):
    kinds, micro = one_f_one_b_order(len(fwd), n_micro)
    start, end, ok = _schedule_loop(kinds, micro, np.asarray(fwd, float),
                                    np.asarray(bwd, float), np.asarray(comm, float))
    if not ok:
        raise RuntimeError("1F1B schedule deadlocked")
    return kinds, micro, start, end


# ---------------------------------------------------------------------------
# Layer partition DP
# ---------------------------------------------------------------------------

def _partition_tables_loop(times):
    """Bottleneck table ``best[i, r]``: min over splits of ``r`` layers into
    stages ``i..P-1`` of the largest stage time. ``inf`` marks infeasible."""
    n_stages, width = times.shape
    best = np.full((n_stages + 1, width), np.inf)
    best[n_stages, 0] = 0.0
    for i in range(n_stages - 1, -1, -1):
        for r in range(width):
            acc = np.inf
            for l in range(r + 1):
                t = times[i, l]
                rest = best[i + 1, r - l]
                v = t if t > rest else rest
                if v < acc:
                    acc = v
            best[i, r] = acc
    return best


def _square_table_loop(times, cap):
    n_stages, width = times.shape
    sq = np.full((n_stages + 1, width), np.inf)
    sq[n_stages, 0] = 0.0
    for i in range(n_stages - 1, -1, -1):
        for r in range(width):
            acc = np.inf
            for l in range(r + 1):
                t = times[i, l]
                if t > cap:
                    continue
                v = t * t + sq[i + 1, r - l]
                if v < acc:
                    acc = v
            sq[i, r] = acc
    return sq


def _partition_tables_numpy(times):
    n_stages, width = times.shape
    best = np.full((n_stages + 1, width), np.inf)
    best[n_stages, 0] = 0.0
    for i in range(n_stages - 1, -1, -1):
        nxt = best[i + 1]
        for r in range(width):
            best[i, r] = np.maximum(times[i, :r + 1], nxt[r::-1]).min()
    return best


def _square_table_numpy(times, cap):
    n_stages, width = times.shape
    sq = np.full((n_stages + 1, width), np.inf)
    sq[n_stages, 0] = 0.0
    masked = np.where(times <= cap, times * times, np.inf)
    for i in range(n_stages - 1, -1, -1):
        nxt = sq[i + 1]
        for r in range(width):
            sq[i, r] = (masked[i, :r + 1] + nxt[r::-1]).min()
    return sq


def _reconstruct(times, cap, sq, n_layers):
    # among bottleneck-optimal splits: least sum of squared stage times,
    # then most layers on the earliest stages
    n_stages = times.shape[0]
    layers = np.zeros(n_stages, dtype=np.int64)
    r = n_layers
    for i in range(n_stages):
        target = sq[i, r]
        tol = target * 1e-12
        for l in range(r, -1, -1):
            t = times[i, l]
            if t > cap:
                continue
            rest = sq[i + 1, r - l]
            if rest == np.inf:
                continue
            if t * t + rest <= target + tol:
                layers[i] = l
                r -= l
                break
    return layers


def balance_layers_numpy(times):
    """Optimal bottleneck split of ``times.shape[1] - 1`` layers.

    ``times[i, l]`` is stage ``i``'s time with ``l`` layers (``inf`` when
    disallowed). Returns ``(layers, bottleneck)``; bottleneck is ``inf`` when
    no split is feasible.
    """
    times = np.ascontiguousarray(times, dtype=np.float64)
    n_layers = times.shape[1] - 1
    best = _partition_tables_numpy(times)
    cap = best[0, n_layers]
    if cap == np.inf:
        return None, cap
    sq = _square_table_numpy(times, cap)
    return _reconstruct(times, cap, sq, n_layers), cap


if HAVE_NUMBA:
    _fnv1a64_jit = njit(cache=True)(_fnv1a64_loop)
    _schedule_jit = njit(cache=True)(_schedule_loop)
    _partition_tables_jit = njit(cache=True)(_partition_tables_loop)
    _square_table_jit = njit(cache=True)(_square_table_loop)
    _reconstruct_jit = njit(cache=True)(_reconstruct)

    def fnv1a64_numba(buf):
        arr = np.frombuffer(bytes(buf), dtype=np.uint8)
        return int(_fnv1a64_jit(arr))

    def schedule_numba(fwd, bwd, comm, n_micro):
        kinds, micro = one_f_one_b_order(len(fwd), n_micro)
        start, end, ok = _schedule_jit(kinds, micro, np.asarray(fwd, np.float64),
                                       np.asarray(bwd, np.float64),
                                       np.asarray(comm, np.float64))
        if not ok:
            raise RuntimeError("1F1B schedule deadlocked")
        return kinds, micro, start, end

    def balance_layers_numba(times):
        times = np.ascontiguousarray(times, dtype=np.float64)
        n_layers = times.shape[1] - 1
        best = _partition_tables_jit(times)
        cap = best[0, n_layers]
        if cap == np.inf:
            return None, cap
        sq = _square_table_jit(times, cap)
        return _reconstruct_jit(times, cap, sq, n_layers), cap

    fnv1a64 = fnv1a64_numba
    schedule = schedule_numba
    balance_layers = balance_layers_numba
else:
    fnv1a64_numba = schedule_numba = balance_layers_numba = None
    fnv1a64 = fnv1a64_numpy
    schedule = schedule_numpy
    balance_layers = balance_layers_numpy
