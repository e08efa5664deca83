"""Independent brute-force references used by the tests.

Nothing here imports the solver code paths it checks; each oracle is the
slowest obvious implementation of its definition.
"""
from fractions import Fraction
from itertools import product


def set_partitions(items):
    """Every set partition of ``items`` (Bell-number many)."""
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        yield [[first]] + part
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]


def bell(n):
    row = [1]
    for _ in range(n):
        nxt = [row[-1]]
        for x in row:
            nxt.append(nxt[-1] + x)
        row = nxt
    return row[0]


def group_power(unit_powers, n_micro):
    """Sum of unit powers discounted by the uniform 1F1B bubble of a depth-|group| pipeline."""
    p = len(unit_powers)
    return sum(unit_powers) * (1 - (p - 1) / (n_micro + p - 1))


def best_grouping(units, min_mem, n_micro):
    """units: list of (power, memory). Max over partitions of |groups| * min G; None if infeasible."""
    best = None
    for part in set_partitions(range(len(units))):
        if any(sum(units[u][1] for u in g) < min_mem for g in part):
            continue
        z = min(group_power([units[u][0] for u in g], n_micro) for g in part)
        obj = len(part) * z
        if best is None or obj > best:
            best = obj
    return best


def compositions(n, k, lmin=1):
    """All k-tuples of integers >= lmin summing to n."""
    if k == 1:
        if n >= lmin:
            yield (n,)
        return
    for first in range(lmin, n - lmin * (k - 1) + 1):
        for rest in compositions(n - first, k - 1, lmin):
            yield (first,) + rest


def best_bottleneck(time_fn, mem_ok, n_layers, n_stages):
    """Exhaustive min over layer splits of the slowest stage."""
    best = None
    for split in compositions(n_layers, n_stages):
        if not all(mem_ok(i, l) for i, l in enumerate(split)):
            continue
        b = max(time_fn(i, l) for i, l in enumerate(split))
        if best is None or b < best:
            best = b
    return best


def binary_expansion_time(table, n):
    """Sum of table[2^i] over set bits of n, using exact rationals."""
    total = Fraction(0)
    i = 0
    while (1 << i) <= n:
        if n >> i & 1:
            total += Fraction(table[1 << i])
        i += 1
    return total


def ring_allreduce_bytes(d, nbytes):
    """Bytes each member sends in a ring all-reduce, by summing its 2(d-1) steps."""
    chunk = Fraction(nbytes, d)
    sent = Fraction(0)
    for _ in range(d - 1):      # reduce-scatter
        sent += chunk
    for _ in range(d - 1):      # all-gather
        sent += chunk
    return sent


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) % (1 << 64)
    return h


def list_schedule_1f1b(fwd, bwd, n_micro):
    """Reference 1F1B timeline by repeated relaxation to a fixed point.

    Returns makespan. Each stage runs its static op list in order; an op
    starts when the stage is free and its input has arrived.
    """
    P = len(fwd)
    orders = []
    for s in range(P):
        warm = min(P - s - 1, n_micro)
        ops = [("F", m) for m in range(warm)]
        f_next, b_next = warm, 0
        while b_next < n_micro:
            if f_next < n_micro:
                ops.append(("F", f_next))
                f_next += 1
            ops.append(("B", b_next))
            b_next += 1
        orders.append(ops)
    end = {}
    changed = True
    while changed:
        changed = False
        for s in range(P):
            t = 0.0
            for kind, m in orders[s]:
                if kind == "F":
                    dep = 0.0 if s == 0 else end.get((s - 1, "F", m))
                else:
                    dep = end.get((s, "F", m)) if s == P - 1 else end.get((s + 1, "B", m))
                if dep is None:
                    break
                start = max(t, dep)
                e = start + (fwd[s] if kind == "F" else bwd[s])
                if end.get((s, kind, m)) != e:
                    end[(s, kind, m)] = e
                    changed = True
                t = e
    return max(end.values())


def all_grid(ranges):
    return list(product(*ranges))
