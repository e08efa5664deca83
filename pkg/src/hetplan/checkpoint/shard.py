"""Layer shard binary format and TP resharding.

Layout (little-endian)::

    magic   4s   b"HPLS"
    version u16
    layer   u32
    tp_rank u32
    tp_dim  u32
    step    u64
    count   u32
    per tensor:
        name_len u16, name utf-8
        split_axis u8 (0 none, 1 rows, 2 cols)
        dtype u8 (1 = float32)
        ndim u8, shape u64 * ndim
        row-major data

The digest is FNV-1a 64 over the complete encoded file.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .. import _kernels
from ..errors import SpecError, UnrecoverableError

MAGIC = b"HPLS"
VERSION = 1
SPLIT_NONE, SPLIT_ROWS, SPLIT_COLS = 0, 1, 2
_SPLIT_NAMES = {SPLIT_NONE: "none", SPLIT_ROWS: "rows", SPLIT_COLS: "cols"}
_DTYPE_F32 = 1
_HEADER = struct.Struct("<4sHIIIQI")

OPTIMIZER_SLOTS = ("exp_avg", "exp_avg_sq")


def shard_name(layer: int, tp_rank: int, tp_dim: int) -> str:
    return f"layer{layer}_tp{tp_rank}of{tp_dim}.shard"


def digest(data: bytes) -> str:
    return f"{_kernels.fnv1a64(data):016x}"


def split_axis_code(name) -> int:
    if isinstance(name, int):
        if name in _SPLIT_NAMES:
            return name
    else:
        for code, label in _SPLIT_NAMES.items():
            if label == name:
                return code
    raise SpecError(f"unknown split axis {name!r}")


@dataclass
class Tensor:
    name: str
    split_axis: int
    data: np.ndarray

    def __post_init__(self):
        self.split_axis = split_axis_code(self.split_axis)
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.split_axis != SPLIT_NONE and self.data.ndim < self.split_axis:
            raise SpecError(f"tensor {self.name}: split axis beyond its {self.data.ndim} dims")

    @property
    def axis(self):
        return None if self.split_axis == SPLIT_NONE else self.split_axis - 1

    def same(self, other: "Tensor") -> bool:
        return (self.name == other.name and self.split_axis == other.split_axis
                and self.data.shape == other.data.shape
                and self.data.tobytes() == other.data.tobytes())


@dataclass
class LayerShard:
    layer_id: int
    tp_rank: int
    tp_dim: int
    step: int
    tensors: List[Tensor] = field(default_factory=list)

    def tensor(self, name: str) -> Tensor:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    @property
    def params(self) -> List[Tensor]:
        return [t for t in self.tensors if t.name.rsplit(".", 1)[-1] not in OPTIMIZER_SLOTS]

    @property
    def optimizer_state(self) -> List[Tensor]:
        return [t for t in self.tensors if t.name.rsplit(".", 1)[-1] in OPTIMIZER_SLOTS]

    def same(self, other: "LayerShard") -> bool:
        return ((self.layer_id, self.tp_rank, self.tp_dim, self.step)
                == (other.layer_id, other.tp_rank, other.tp_dim, other.step)
                and len(self.tensors) == len(other.tensors)
                and all(a.same(b) for a, b in zip(self.tensors, other.tensors)))

    @property
    def nbytes(self) -> int:
        return len(encode_shard(self))


def encode_shard(shard: LayerShard) -> bytes:
    out = [_HEADER.pack(MAGIC, VERSION, shard.layer_id, shard.tp_rank, shard.tp_dim,
                        shard.step, len(shard.tensors))]
    for t in shard.tensors:
        name = t.name.encode("utf-8")
        out.append(struct.pack("<H", len(name)))
        out.append(name)
        out.append(struct.pack("<BBB", t.split_axis, _DTYPE_F32, t.data.ndim))
        out.append(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
        out.append(t.data.astype("<f4", copy=False).tobytes())
    return b"".join(out)


def decode_shard(data: bytes) -> LayerShard:
    try:
        magic, version, layer, rank, dim, step, count = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise UnrecoverableError("not a layer shard (bad magic)")
        if version != VERSION:
            raise UnrecoverableError(f"unsupported shard version {version}")
        pos = _HEADER.size
        tensors = []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            axis, dtype, ndim = struct.unpack_from("<BBB", data, pos)
            pos += 3
            if dtype != _DTYPE_F32:
                raise UnrecoverableError(f"tensor {name}: unsupported dtype code {dtype}")
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            size = 4 * math.prod(shape)
            if pos + size > len(data):
                raise UnrecoverableError("truncated shard")
            arr = np.frombuffer(data, dtype="<f4", count=math.prod(shape), offset=pos).reshape(shape)
            pos += size
            tensors.append(Tensor(name, axis, arr.astype(np.float32)))
        if pos != len(data):
            raise UnrecoverableError("trailing bytes after last tensor")
    except struct.error as exc:
        raise UnrecoverableError(f"truncated shard: {exc}") from None
    return LayerShard(layer, rank, dim, step, tensors)


# ---------------------------------------------------------------------------
# resharding
# ---------------------------------------------------------------------------

def _check_divisible(t: Tensor, *dims: int):
    if t.axis is None:
        return
    size = t.data.shape[t.axis]
    for d in dims:
        if size % d:
            raise SpecError(f"tensor {t.name}: dim {size} not divisible by tp {d}")


def shard_layer(layer_id: int, full: Sequence[Tensor], tp_dim: int, step: int) -> List[LayerShard]:
    """Cut full per-layer tensors into ``tp_dim`` shards."""
    shards = [LayerShard(layer_id, r, tp_dim, step) for r in range(tp_dim)]
    for t in full:
        _check_divisible(t, tp_dim)
        if t.axis is None:
            for s in shards:
                s.tensors.append(Tensor(t.name, t.split_axis, t.data.copy()))
            continue
        for s, piece in zip(shards, np.split(t.data, tp_dim, axis=t.axis)):
            s.tensors.append(Tensor(t.name, t.split_axis, piece))
    return shards


def _complete(shards: Sequence[LayerShard]) -> List[LayerShard]:
    if not shards:
        raise UnrecoverableError("no shards given")
    d = shards[0].tp_dim
    by_rank = {}
    for s in shards:
        if s.tp_dim != d or s.layer_id != shards[0].layer_id or s.step != shards[0].step:
            raise UnrecoverableError("shards disagree on layer, tp_dim or step")
        by_rank[s.tp_rank] = s
    missing = sorted(set(range(d)) - set(by_rank))
    if missing:
        raise UnrecoverableError(f"layer {shards[0].layer_id}: missing tp ranks {missing} of {d}")
    return [by_rank[r] for r in range(d)]


def merge_layer(shards: Sequence[LayerShard]) -> List[Tensor]:
    """Full tensors from a complete shard set (any order)."""
    ordered = _complete(shards)
    out = []
    for i, t in enumerate(ordered[0].tensors):
        if t.axis is None:
            out.append(Tensor(t.name, t.split_axis, t.data.copy()))
        else:
            out.append(Tensor(t.name, t.split_axis,
                              np.concatenate([s.tensors[i].data for s in ordered], axis=t.axis)))
    return out


def source_ranks(new_rank: int, old_dim: int, new_dim: int) -> List[int]:
    """Old TP ranks whose slices overlap new rank ``new_rank``."""
    lo = new_rank * old_dim // new_dim
    hi = -(-(new_rank + 1) * old_dim // new_dim)
    return list(range(lo, hi))


def reshard_rank(shards: Sequence[LayerShard], new_dim: int, new_rank: int) -> LayerShard:
    """One new-dim shard built from the old shards it overlaps.

    ``shards`` only needs to contain :func:`source_ranks`; growing the TP
    dimension splits one old shard, shrinking it concatenates several.
    """
    if not shards:
        raise UnrecoverableError("no shards given")
    old_dim = shards[0].tp_dim
    by_rank = {s.tp_rank: s for s in shards}
    need = source_ranks(new_rank, old_dim, new_dim)
    missing = [q for q in need if q not in by_rank]
    if missing:
        raise UnrecoverableError(f"layer {shards[0].layer_id}: reshard to rank {new_rank}/{new_dim} "
                                 f"needs old ranks {missing}")
    lcm = old_dim * new_dim // math.gcd(old_dim, new_dim)
    first = by_rank[need[0]]
    out = LayerShard(first.layer_id, new_rank, new_dim, first.step)
    for i, t in enumerate(first.tensors):
        if t.axis is None:
            out.tensors.append(Tensor(t.name, t.split_axis, t.data.copy()))
            continue
        pieces = [by_rank[q].tensors[i].data for q in need]
        joined = pieces[0] if len(pieces) == 1 else np.concatenate(pieces, axis=t.axis)
        full = t.data.shape[t.axis] * old_dim
        if full % lcm:
            raise SpecError(f"tensor {t.name}: dim {full} not divisible by lcm({old_dim}, {new_dim})")
        width = full // new_dim
        offset = new_rank * width - need[0] * (full // old_dim)
        index = [slice(None)] * joined.ndim
        index[t.axis] = slice(offset, offset + width)
        out.tensors.append(Tensor(t.name, t.split_axis, np.ascontiguousarray(joined[tuple(index)])))
    return out


def reshard(shards: Sequence[LayerShard], new_dim: int) -> List[LayerShard]:
    """All ``new_dim`` shards of a layer from its complete old shard set."""
    ordered = _complete(shards)
    for t in ordered[0].tensors:
        if t.axis is not None:
            full = t.data.shape[t.axis] * ordered[0].tp_dim
            lcm = ordered[0].tp_dim * new_dim // math.gcd(ordered[0].tp_dim, new_dim)
            if full % lcm:
                raise SpecError(f"tensor {t.name}: dim {full} not divisible by lcm({ordered[0].tp_dim}, {new_dim})")
    return [reshard_rank(ordered, new_dim, r) for r in range(new_dim)]


# ---------------------------------------------------------------------------
# synthetic model state
# ---------------------------------------------------------------------------

def synthetic_layer(layer_id: int, hidden: int, ffn: int, rng: np.random.Generator,
                    zero_optimizer: bool = False) -> List[Tensor]:
    """One MLP block: A (hidden x ffn, column split), B (ffn x hidden, row split)
    and a replicated norm vector, each with two optimizer slots."""
    params = [
        ("mlp.A", SPLIT_COLS, rng.standard_normal((hidden, ffn))),
        ("mlp.B", SPLIT_ROWS, rng.standard_normal((ffn, hidden))),
        ("norm.weight", SPLIT_NONE, rng.standard_normal(hidden)),
    ]
    out = []
    for name, axis, data in params:
        out.append(Tensor(name, axis, data))
        for slot in OPTIMIZER_SLOTS:
            opt = np.zeros_like(data) if zero_optimizer else rng.standard_normal(data.shape)
            if slot == "exp_avg_sq":
                opt = np.abs(opt)
            out.append(Tensor(f"{name}.{slot}", axis, opt))
    return out


def synthetic_model_state(n_layers: int, hidden: int = 8, ffn: int = 16, seed: int = 0,
                          zero_optimizer: bool = False) -> Dict[int, List[Tensor]]:
    rng = np.random.default_rng(seed)
    return {l: synthetic_layer(l, hidden, ffn, rng, zero_optimizer) for l in range(n_layers)}
