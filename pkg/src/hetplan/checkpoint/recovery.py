"""Local-first recovery planning and execution across a TP-dimension change."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from ..cluster import ClusterSpec, DeviceId
from ..errors import DigestMismatch, SpecError, UnrecoverableError
from ..plan import ParallelPlan
from .shard import LayerShard, decode_shard, digest, reshard_rank, source_ranks
from .store import LayerBitmap, Location, TieredStore

RECOVERY_FORMAT = "hetplan.recovery/1"
TIERS = ("device", "node", "peer", "cloud")


def tier_bandwidths(spec: ClusterSpec) -> Dict[str, float]:
    return {
        "device": spec.local_disk_bw,
        "node": spec.local_disk_bw,
        "peer": min(spec.inter_node_bw, spec.local_disk_bw),
        "cloud": spec.cloud_bw,
    }


def tier_of(target: DeviceId, loc: Location) -> str:
    if loc.kind == "cloud":
        return "cloud"
    if loc.device == target:
        return "device"
    if loc.node_id == target.node_id:
        return "node"
    return "peer"


@dataclass(frozen=True)
class Fetch:
    device: DeviceId
    layer: int
    old_rank: int
    source: Location
    tier: str
    nbytes: int
    seconds: float
    staged: bool = False        # source copy was itself fetched earlier in this plan


@dataclass(frozen=True)
class ReshardOp:
    device: DeviceId
    layer: int
    new_rank: int
    new_dim: int
    old_ranks: Tuple[int, ...]
    kind: str                   # "copy", "split" or "concat"


@dataclass
class RecoveryPlan:
    step: int
    old_tp: int
    new_tp: int
    fetches: List[Fetch]
    reshards: List[ReshardOp]
    device_seconds: Dict[DeviceId, float]
    estimated_seconds: float
    tier_bytes: Dict[str, int]
    tier_seconds: Dict[str, float]
    digests: Dict[Tuple[int, int], str] = field(default_factory=dict)
    files: Dict[Tuple[int, int], str] = field(default_factory=dict)

    def fetches_for(self, device: DeviceId) -> List[Fetch]:
        return [f for f in self.fetches if f.device == device]

    def to_dict(self) -> dict:
        return {
            "format": RECOVERY_FORMAT,
            "step": self.step, "old_tp": self.old_tp, "new_tp": self.new_tp,
            "estimated_seconds": self.estimated_seconds,
            "tier_bytes": dict(self.tier_bytes),
            "tier_seconds": dict(self.tier_seconds),
            "devices": [
                {"device": [d.node_id, d.local_rank], "seconds": self.device_seconds[d],
                 "fetches": [{"layer": f.layer, "old_rank": f.old_rank, "source": f.source.to_list(),
                              "tier": f.tier, "bytes": f.nbytes, "seconds": f.seconds, "staged": f.staged}
                             for f in self.fetches_for(d)],
                 "reshards": [{"layer": r.layer, "new_rank": r.new_rank, "new_dim": r.new_dim,
                               "old_ranks": list(r.old_ranks), "kind": r.kind}
                              for r in self.reshards if r.device == d]}
                for d in sorted(self.device_seconds)
            ],
            "shards": [{"layer": l, "old_rank": q, "digest": self.digests.get((l, q)), "file": self.files[(l, q)]}
                       for (l, q) in sorted(self.files)],
        }

    @classmethod
    def from_dict(cls, doc) -> "RecoveryPlan":
        try:
            if doc.get("format") != RECOVERY_FORMAT:
                raise SpecError(f"unsupported recovery format {doc.get('format')!r}")
            fetches, reshards, secs = [], [], {}
            for dev in doc["devices"]:
                d = DeviceId(*map(int, dev["device"]))
                secs[d] = float(dev["seconds"])
                for f in dev["fetches"]:
                    fetches.append(Fetch(d, int(f["layer"]), int(f["old_rank"]), Location.from_list(f["source"]),
                                         str(f["tier"]), int(f["bytes"]), float(f["seconds"]), bool(f["staged"])))
                for r in dev["reshards"]:
                    reshards.append(ReshardOp(d, int(r["layer"]), int(r["new_rank"]), int(r["new_dim"]),
                                              tuple(int(x) for x in r["old_ranks"]), str(r["kind"])))
            digests, files = {}, {}
            for s in doc["shards"]:
                key = (int(s["layer"]), int(s["old_rank"]))
                files[key] = str(s["file"])
                if s.get("digest"):
                    digests[key] = str(s["digest"])
            return cls(int(doc["step"]), int(doc["old_tp"]), int(doc["new_tp"]),
                       _execution_order(fetches), reshards, secs,
                       float(doc["estimated_seconds"]), {k: int(v) for k, v in doc["tier_bytes"].items()},
                       {k: float(v) for k, v in doc["tier_seconds"].items()}, digests, files)
        except (KeyError, TypeError, ValueError, AttributeError, IndexError) as exc:
            raise SpecError(f"malformed recovery plan: {exc}") from None


def _execution_order(fetches):
    return sorted(fetches, key=lambda f: (f.layer, f.old_rank, f.staged, f.device))


def _reshard_kind(d0: int, d1: int) -> str:
    if d0 == d1:
        return "copy"
    return "split" if d1 > d0 else "concat"


def plan_recovery(old_plan: ParallelPlan, new_plan: ParallelPlan, bitmap: LayerBitmap, spec: ClusterSpec,
                  share_downloads: bool = True) -> RecoveryPlan:
    """Choose a source for every old shard each new device needs.

    Sources are ranked same device > same node > other node > cloud, then
    by the source device's global rank. Local copies on devices outside
    ``spec`` (preempted) and copies from another step are unusable. With
    ``share_downloads`` a shard is taken from the cloud at most once; later
    requesters copy it from the device that fetched it.
    """
    if bitmap.tp_dim != old_plan.tp_dim or bitmap.n_layers != old_plan.n_layers:
        raise SpecError("bitmap does not match the old plan's tp_dim or layer count")
    if new_plan.n_layers != old_plan.n_layers:
        raise SpecError("old and new plans disagree on the layer count")
    new_plan.validate(spec)
    bitmap.check()
    d0, d1 = old_plan.tp_dim, new_plan.tp_dim
    bws = tier_bandwidths(spec)
    alive = set(spec.devices())

    requests = []
    needed_by_device = defaultdict(list)
    for g in new_plan.groups:
        for st in g:
            for r, dev in enumerate(st.devices):
                for layer in range(*st.layer_range):
                    qs = source_ranks(r, d0, d1)
                    needed_by_device[dev].append(ReshardOp(dev, layer, r, d1, tuple(qs), _reshard_kind(d0, d1)))
                    requests.extend((layer, q, dev) for q in qs)
    requests.sort(key=lambda x: (x[0], x[1], spec.global_rank(x[2])))

    staged: Dict[Tuple[int, int], List[DeviceId]] = defaultdict(list)
    fetches = []
    for layer, q, dev in requests:
        options = []
        for loc in bitmap.locations(layer, q):
            if loc.kind == "local" and loc.device not in alive:
                continue
            options.append((TIERS.index(tier_of(dev, loc)), _loc_rank(spec, loc), loc, False))
        if share_downloads:
            for holder in staged[(layer, q)]:
                loc = Location("local", holder.node_id, holder.local_rank, bitmap.step)
                options.append((TIERS.index(tier_of(dev, loc)), _loc_rank(spec, loc), loc, True))
        if not options:
            raise UnrecoverableError(f"shard (layer {layer}, tp rank {q}/{d0}) at step {bitmap.step} "
                                     "has no surviving local copy and no cloud copy")
        t_idx, _, loc, was_staged = min(options, key=lambda o: (o[0], o[1], o[3]))
        tier = TIERS[t_idx]
        nbytes = bitmap.nbytes[(layer, q)]
        fetches.append(Fetch(dev, layer, q, loc, tier, nbytes, nbytes / bws[tier], was_staged))
        staged[(layer, q)].append(dev)

    device_seconds = {dev: 0.0 for dev in needed_by_device}
    tier_bytes = {t: 0 for t in TIERS}
    tier_seconds = {t: 0.0 for t in TIERS}
    for f in fetches:
        device_seconds[f.device] += f.seconds
        tier_bytes[f.tier] += f.nbytes
        tier_seconds[f.tier] += f.seconds
    reshards = [op for dev in sorted(needed_by_device, key=spec.global_rank) for op in needed_by_device[dev]]
    keys = {(f.layer, f.old_rank) for f in fetches}
    return RecoveryPlan(bitmap.step, d0, d1, _execution_order(fetches), reshards, device_seconds,
                        max(device_seconds.values(), default=0.0), tier_bytes, tier_seconds,
                        {k: bitmap.digests[k] for k in keys if k in bitmap.digests},
                        {k: bitmap.file(*k) for k in keys})


def _loc_rank(spec: ClusterSpec, loc: Location) -> int:
    if loc.kind == "cloud":
        return spec.n_gpus
    return spec.global_rank(loc.device)


def execute_recovery(rp: RecoveryPlan, store: TieredStore) -> Dict[DeviceId, Dict[int, LayerShard]]:
    """Run the fetches and reshards; returns the new shards each device holds.

    Every fetched file is checked against the checkpoint digest and step.
    """
    memory: Dict[Tuple[DeviceId, int, int], bytes] = {}
    for f in rp.fetches:
        key = (f.layer, f.old_rank)
        name = rp.files[key]
        if f.staged:
            try:
                data = memory[(f.source.device, f.layer, f.old_rank)]
            except KeyError:
                raise UnrecoverableError(f"staged copy of {name} on {f.source.device} not fetched yet") from None
        else:
            data = store.read(f.source, name)
        want = rp.digests.get(key)
        if want is not None and digest(data) != want:
            raise DigestMismatch(f"{name} from {f.source.to_list()}: digest {digest(data)} != {want}")
        memory[(f.device, f.layer, f.old_rank)] = data

    restored: Dict[DeviceId, Dict[int, LayerShard]] = {}
    for op in sorted(rp.reshards, key=lambda o: (o.device, o.layer)):
        shards = []
        for q in op.old_ranks:
            s = decode_shard(memory[(op.device, op.layer, q)])
            if s.step != rp.step:
                raise UnrecoverableError(f"layer {op.layer} rank {q}: shard is from step {s.step}, "
                                         f"checkpoint is step {rp.step}")
            shards.append(s)
        restored.setdefault(op.device, {})[op.layer] = reshard_rank(shards, op.new_dim, op.new_rank)
    return restored
