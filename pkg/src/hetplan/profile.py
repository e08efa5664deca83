"""Profiled stage runtimes (binary decomposition) and the per-layer memory model."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, asdict
from typing import Dict, Iterable, Optional, Tuple

import yaml

from .errors import ProfileError, SpecError

ProfileKey = Tuple[str, int, int]


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    per_layer_param_bytes: float
    per_layer_activation_bytes: float
    optimizer_multiplier: float
    n_microbatches: int
    global_batch_tokens: int = 0

    def __post_init__(self):
        for name in ("n_layers", "n_microbatches"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise SpecError(f"model config: {name} must be a positive integer")
        for name in ("per_layer_param_bytes", "per_layer_activation_bytes", "optimizer_multiplier"):
            if not getattr(self, name) > 0:
                raise SpecError(f"model config: {name} must be positive")

    def to_dict(self):
        return asdict(self)


def model_config_from_dict(doc) -> ModelConfig:
    if not isinstance(doc, dict):
        raise SpecError("model config must be a mapping")
    required = ("n_layers", "per_layer_param_bytes", "per_layer_activation_bytes",
                "optimizer_multiplier", "n_microbatches")
    missing = [k for k in required if k not in doc]
    if missing:
        raise SpecError(f"model config missing keys: {missing}")
    try:
        return ModelConfig(
            n_layers=doc["n_layers"],
            per_layer_param_bytes=float(doc["per_layer_param_bytes"]),
            per_layer_activation_bytes=float(doc["per_layer_activation_bytes"]),
            optimizer_multiplier=float(doc["optimizer_multiplier"]),
            n_microbatches=doc["n_microbatches"],
            global_batch_tokens=int(doc.get("global_batch_tokens", 0)),
        )
    except (TypeError, ValueError) as exc:
        raise SpecError(f"model config: {exc}") from None


def load_model_config(text: str) -> ModelConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SpecError(f"malformed model config: {exc}") from None
    return model_config_from_dict(doc)


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


class ProfileTable:
    """Combined fwd+bwd seconds per microbatch keyed by (gpu_type, tp_dim, layers).

    Layer counts must be powers of two; times must be positive and
    nondecreasing in the layer count for each (gpu_type, tp_dim).
    """

    def __init__(self, entries: Dict[ProfileKey, float]):
        self.entries = {}
        for (gpu, tp, count), sec in entries.items():
            tp, count, sec = int(tp), int(count), float(sec)
            if not _is_pow2(count):
                raise ProfileError(f"profile layer_count {count} is not a power of two")
            if tp < 1:
                raise ProfileError(f"profile tp_dim {tp} must be >= 1")
            if not sec > 0:
                raise ProfileError(f"profile time for {(gpu, tp, count)} must be positive")
            self.entries[(str(gpu), tp, count)] = sec
        for (gpu, tp), series in self._series().items():
            times = [series[c] for c in sorted(series)]
            if any(b < a for a, b in zip(times, times[1:])):
                raise ProfileError(f"profile times for ({gpu}, tp={tp}) are not monotone in layer count")

    def _series(self):
        out: Dict[Tuple[str, int], Dict[int, float]] = {}
        for (gpu, tp, count), sec in self.entries.items():
            out.setdefault((gpu, tp), {})[count] = sec
        return out

    def has(self, gpu_type: str, tp_dim: int) -> bool:
        return any(k[0] == gpu_type and k[1] == tp_dim for k in self.entries)

    def max_layers(self, gpu_type: str, tp_dim: int) -> int:
        """Largest n whose binary decomposition is fully covered."""
        k = 1
        while (gpu_type, tp_dim, k) in self.entries:
            k *= 2
        return k - 1

    def get(self, gpu_type: str, tp_dim: int, count: int) -> float:
        try:
            return self.entries[(gpu_type, tp_dim, count)]
        except KeyError:
            raise ProfileError(f"no profile entry for ({gpu_type}, tp={tp_dim}, layers={count})") from None

    def rows(self):
        return sorted((g, tp, c, s) for (g, tp, c), s in self.entries.items())

    def __eq__(self, other):
        return isinstance(other, ProfileTable) and self.entries == other.entries

    def __repr__(self):
        return f"ProfileTable({len(self.entries)} entries)"


PROFILE_HEADER = ("gpu_type", "tp_dim", "layer_count", "seconds")


def load_profile_table(text: str) -> ProfileTable:
    reader = csv.reader(io.StringIO(text))
    entries = {}
    for lineno, row in enumerate(reader, 1):
        if not row or row[0].startswith("#"):
            continue
        if tuple(c.strip() for c in row) == PROFILE_HEADER:
            continue
        if len(row) != 4:
            raise ProfileError(f"profile line {lineno}: expected 4 columns")
        gpu, tp, count, sec = (c.strip() for c in row)
        try:
            key = (gpu, int(tp), int(count))
            value = float(sec)
        except ValueError:
            raise ProfileError(f"profile line {lineno}: bad number") from None
        if key in entries:
            raise ProfileError(f"profile line {lineno}: duplicate key {key}")
        entries[key] = value
    return ProfileTable(entries)


def dump_profile_table(table: ProfileTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PROFILE_HEADER)
    for g, tp, c, s in table.rows():
        w.writerow([g, tp, c, repr(s)])
    return buf.getvalue()


def estimate_stage_time(table: ProfileTable, gpu_type: str, tp_dim: int, n_layers: int) -> float:
    """Time of ``n_layers`` layers as the sum of profiled power-of-two blocks.

    n = 5 (binary 101) costs T(4) + T(1). The blocks are summed with
    ``math.fsum`` so a linear table gives exactly ``c * n``.
    """
    if n_layers < 1:
        raise ProfileError("n_layers must be >= 1")
    if not table.has(gpu_type, tp_dim):
        raise ProfileError(f"tp_dim {tp_dim} not profiled for {gpu_type}")
    parts = []
    bit = 1
    while bit <= n_layers:
        if n_layers & bit:
            parts.append(table.get(gpu_type, tp_dim, bit))
        bit <<= 1
    return math.fsum(parts)


def tp_overhead(tp_dim: int) -> float:
    return (1.0 + 0.05 * (tp_dim - 1)) / tp_dim


def synth_profile(powers: Dict[str, float], tp_dims: Iterable[int], max_layers: int,
                  base_per_layer: float = 0.01) -> ProfileTable:
    """Linear synthetic table: ``base_per_layer / g * tp_overhead(tp) * layers``.

    Test scaffolding; per-layer cost is constant so the decomposition is exact.
    """
    entries = {}
    for gpu, g in powers.items():
        for tp in tp_dims:
            per_layer = base_per_layer / g * tp_overhead(tp)
            count = 1
            while count <= max_layers:
                entries[(gpu, tp, count)] = per_layer * count
                count *= 2
    return ProfileTable(entries)


def derive_power(table: ProfileTable, reference_type: str, tp_dim: int) -> Dict[str, float]:
    """Relative compute power ``T(reference) / T(type)`` at the largest common layer count."""
    counts: Dict[str, set] = {}
    for (gpu, tp, count) in table.entries:
        if tp == tp_dim:
            counts.setdefault(gpu, set()).add(count)
    if reference_type not in counts:
        raise ProfileError(f"reference type {reference_type!r} not profiled at tp={tp_dim}")
    common = set.intersection(*counts.values())
    if not common:
        raise ProfileError("profiled types share no common layer count")
    c = max(common)
    ref = table.get(reference_type, tp_dim, c)
    return {gpu: ref / table.get(gpu, tp_dim, c) for gpu in sorted(counts)}


@dataclass(frozen=True)
class MemoryModel:
    """Per-device bytes of a stage: fixed state plus in-flight activations.

    fixed(l, tp)          = l * param * (1 + optimizer_multiplier) / tp
    variable(l, p, P, K, tp) = l * act * min(K, P - p + 1) / tp
    """
    per_layer_param_bytes: float
    per_layer_activation_bytes: float
    optimizer_multiplier: float
    min_mem: float

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "MemoryModel":
        m = cls(cfg.per_layer_param_bytes, cfg.per_layer_activation_bytes,
                cfg.optimizer_multiplier, 0.0)
        # whole model at one in-flight microbatch: no group can hold less
        need = m.fixed(cfg.n_layers, 1) + m.variable(cfg.n_layers, 1, 1, cfg.n_microbatches, 1)
        return cls(m.per_layer_param_bytes, m.per_layer_activation_bytes, m.optimizer_multiplier, need)

    def fixed(self, l: int, tp_dim: int) -> float:
        return l * self.per_layer_param_bytes * (1.0 + self.optimizer_multiplier) / tp_dim

    def variable(self, l: int, stage_index: int, total_stages: int, n_micro: int, tp_dim: int) -> float:
        in_flight = min(n_micro, total_stages - stage_index + 1)
        return l * self.per_layer_activation_bytes * in_flight / tp_dim


def estimate_memory(mem: MemoryModel, cfg: ModelConfig, l: int, stage_index: int,
                    total_stages: int, tp_dim: int) -> float:
    if not 1 <= stage_index <= total_stages:
        raise SpecError(f"stage index {stage_index} outside 1..{total_stages}")
    if l < 0:
        raise SpecError("layer count must be nonnegative")
    if l == 0:
        return 0.0
    return mem.fixed(l, tp_dim) + mem.variable(l, stage_index, total_stages, cfg.n_microbatches, tp_dim)
