"""Tiered shard storage, the checkpoint manifest and the layer bitmap.

A store is a directory tree standing in for the storage tiers::

    <root>/cloud/<shard>
    <root>/node<n>/gpu<r>/<shard>

Locations are labels here; transfer cost comes from the bandwidth model in
:mod:`hetplan.checkpoint.recovery`.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from ..cluster import DeviceId
from ..errors import DigestMismatch, SpecError, UnrecoverableError
from ..plan import ParallelPlan
from .shard import LayerShard, Tensor, decode_shard, digest, encode_shard, shard_layer, shard_name

MANIFEST_FORMAT = "hetplan.manifest/1"
BITMAP_FORMAT = "hetplan.bitmap/1"


@dataclass(frozen=True, order=True)
class Location:
    kind: str              # "local" or "cloud"
    node_id: int = -1
    local_rank: int = -1
    step: int = 0

    @property
    def device(self) -> Optional[DeviceId]:
        return DeviceId(self.node_id, self.local_rank) if self.kind == "local" else None

    def to_list(self):
        if self.kind == "cloud":
            return ["cloud", self.step]
        return ["local", self.node_id, self.local_rank, self.step]

    @classmethod
    def from_list(cls, doc):
        if doc[0] == "cloud":
            return cls("cloud", step=int(doc[1]))
        if doc[0] == "local":
            return cls("local", int(doc[1]), int(doc[2]), int(doc[3]))
        raise SpecError(f"unknown location kind {doc[0]!r}")


CLOUD = "cloud"


class TieredStore:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, loc: Location, name: str) -> Path:
        if loc.kind == "cloud":
            return self.root / "cloud" / name
        return self.root / f"node{loc.node_id}" / f"gpu{loc.local_rank}" / name

    def write(self, loc: Location, name: str, data: bytes):
        p = self.path(loc, name)
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_suffix(p.suffix + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, p)

    def read(self, loc: Location, name: str) -> bytes:
        try:
            return self.path(loc, name).read_bytes()
        except OSError as exc:
            raise UnrecoverableError(f"cannot read {name} from {loc.to_list()}: {exc}") from None

    def read_shard(self, loc: Location, name: str, expect_digest: Optional[str] = None) -> LayerShard:
        data = self.read(loc, name)
        if expect_digest is not None and digest(data) != expect_digest:
            raise DigestMismatch(f"{name} at {loc.to_list()}: digest {digest(data)} != {expect_digest}")
        return decode_shard(data)


@dataclass
class ShardEntry:
    layer: int
    tp_rank: int
    file: str
    digest: str
    nbytes: int


@dataclass
class CheckpointManifest:
    step: int
    n_layers: int
    tp_dim: int
    shards: Dict[Tuple[int, int], ShardEntry]

    def entry(self, layer: int, tp_rank: int) -> ShardEntry:
        try:
            return self.shards[(layer, tp_rank)]
        except KeyError:
            raise UnrecoverableError(f"manifest has no shard ({layer}, {tp_rank})") from None

    def to_dict(self) -> dict:
        layers = []
        for l in range(self.n_layers):
            layers.append({"layer": l, "tp_dim": self.tp_dim,
                           "shards": [{"tp_rank": r, "file": e.file, "digest": e.digest, "bytes": e.nbytes}
                                      for r in range(self.tp_dim) for e in [self.shards[(l, r)]]]})
        return {"format": MANIFEST_FORMAT, "step": self.step, "n_layers": self.n_layers,
                "tp_dim": self.tp_dim, "layers": layers}

    @classmethod
    def from_dict(cls, doc) -> "CheckpointManifest":
        try:
            if doc.get("format") != MANIFEST_FORMAT:
                raise SpecError(f"unsupported manifest format {doc.get('format')!r}")
            shards = {}
            for layer in doc["layers"]:
                l = int(layer["layer"])
                if int(layer["tp_dim"]) != int(doc["tp_dim"]):
                    raise SpecError(f"layer {l}: mixed tp_dim within one manifest")
                for s in layer["shards"]:
                    key = (l, int(s["tp_rank"]))
                    if key in shards:
                        raise SpecError(f"shard {key} listed twice")
                    shards[key] = ShardEntry(l, key[1], str(s["file"]), str(s["digest"]), int(s["bytes"]))
            m = cls(int(doc["step"]), int(doc["n_layers"]), int(doc["tp_dim"]), shards)
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise SpecError(f"malformed manifest: {exc}") from None
        expect = {(l, r) for l in range(m.n_layers) for r in range(m.tp_dim)}
        if set(shards) != expect:
            raise SpecError("manifest does not list every (layer, tp_rank) exactly once")
        return m


def dump_doc(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def load_json(text: str, what: str) -> dict:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"malformed {what}: {exc}") from None


def holder_devices(plan: ParallelPlan, layer: int, tp_rank: int) -> List[DeviceId]:
    return plan.holders(layer, tp_rank)


def save_layerwise(state: Dict[int, List[Tensor]], plan: ParallelPlan, step: int, store: TieredStore,
                   upload: bool = True, flush_local: bool = True,
                   skip_local: Iterable[DeviceId] = ()) -> CheckpointManifest:
    """Write one shard per (layer, tp_rank) at the plan's TP dimension.

    Each shard lands on the local disk of every device that holds it under
    ``plan`` (one per DP group) and, with ``upload``, in the cloud tier.
    ``skip_local`` devices get no local copy (e.g. preempted before flush).
    """
    missing = [l for l in range(plan.n_layers) if l not in state]
    if missing:
        raise SpecError(f"model state lacks layers {missing}")
    skip = set(skip_local)
    shards = {}
    for l in range(plan.n_layers):
        for s in shard_layer(l, state[l], plan.tp_dim, step):
            data = encode_shard(s)
            name = shard_name(l, s.tp_rank, plan.tp_dim)
            shards[(l, s.tp_rank)] = ShardEntry(l, s.tp_rank, name, digest(data), len(data))
            if upload:
                store.write(Location("cloud", step=step), name, data)
            if flush_local:
                for d in holder_devices(plan, l, s.tp_rank):
                    if d not in skip:
                        store.write(Location("local", d.node_id, d.local_rank, step), name, data)
    return CheckpointManifest(step, plan.n_layers, plan.tp_dim, shards)


@dataclass
class LayerBitmap:
    """(layer, tp_rank) of the checkpoint's TP dim -> where the shard lives."""
    step: int
    n_layers: int
    tp_dim: int
    entries: Dict[Tuple[int, int], List[Location]]
    nbytes: Dict[Tuple[int, int], int]
    digests: Dict[Tuple[int, int], str] = field(default_factory=dict)
    files: Dict[Tuple[int, int], str] = field(default_factory=dict)

    def locations(self, layer: int, tp_rank: int, current_only: bool = True) -> List[Location]:
        locs = self.entries.get((layer, tp_rank), [])
        if current_only:
            locs = [x for x in locs if x.step == self.step]
        return sorted(locs)

    def file(self, layer: int, tp_rank: int) -> str:
        return self.files.get((layer, tp_rank)) or shard_name(layer, tp_rank, self.tp_dim)

    def check(self):
        for key in ((l, r) for l in range(self.n_layers) for r in range(self.tp_dim)):
            if key not in self.nbytes:
                raise SpecError(f"bitmap has no size for shard {key}")
        return self

    def without_devices(self, devices: Iterable[DeviceId]) -> "LayerBitmap":
        gone = {DeviceId(*d) for d in devices}
        return self._filtered(lambda x: x.kind != "local" or x.device not in gone)

    def without_nodes(self, nodes: Iterable[int]) -> "LayerBitmap":
        gone = set(nodes)
        return self._filtered(lambda x: x.kind != "local" or x.node_id not in gone)

    def cloud_only(self) -> "LayerBitmap":
        return self._filtered(lambda x: x.kind == "cloud")

    def _filtered(self, keep) -> "LayerBitmap":
        return LayerBitmap(self.step, self.n_layers, self.tp_dim,
                           {k: [x for x in v if keep(x)] for k, v in self.entries.items()},
                           dict(self.nbytes), dict(self.digests), dict(self.files))

    def to_dict(self) -> dict:
        rows = []
        for (l, r) in sorted(self.nbytes):
            rows.append({"layer": l, "tp_rank": r, "bytes": self.nbytes[(l, r)],
                         "digest": self.digests.get((l, r)), "file": self.file(l, r),
                         "locations": [x.to_list() for x in sorted(self.entries.get((l, r), []))]})
        return {"format": BITMAP_FORMAT, "step": self.step, "n_layers": self.n_layers,
                "tp_dim": self.tp_dim, "shards": rows}

    @classmethod
    def from_dict(cls, doc) -> "LayerBitmap":
        try:
            if doc.get("format") != BITMAP_FORMAT:
                raise SpecError(f"unsupported bitmap format {doc.get('format')!r}")
            entries, nbytes, digests, files = {}, {}, {}, {}
            for row in doc["shards"]:
                key = (int(row["layer"]), int(row["tp_rank"]))
                if key in nbytes:
                    raise SpecError(f"bitmap lists shard {key} twice")
                nbytes[key] = int(row["bytes"])
                entries[key] = [Location.from_list(x) for x in row["locations"]]
                if row.get("digest"):
                    digests[key] = str(row["digest"])
                if row.get("file"):
                    files[key] = str(row["file"])
            bm = cls(int(doc["step"]), int(doc["n_layers"]), int(doc["tp_dim"]), entries, nbytes, digests, files)
        except (KeyError, TypeError, ValueError, AttributeError, IndexError) as exc:
            raise SpecError(f"malformed bitmap: {exc}") from None
        return bm.check()


def bitmap_from_manifest(manifest: CheckpointManifest, plan: ParallelPlan, uploaded: bool = True,
                         skip_local: Iterable[DeviceId] = ()) -> LayerBitmap:
    """Bitmap implied by a save under ``plan`` (what :func:`save_layerwise` wrote)."""
    skip = set(skip_local)
    entries, nbytes, digests, files = {}, {}, {}, {}
    for (l, r), e in manifest.shards.items():
        locs = [Location("local", d.node_id, d.local_rank, manifest.step)
                for d in holder_devices(plan, l, r) if d not in skip]
        if uploaded:
            locs.append(Location("cloud", step=manifest.step))
        entries[(l, r)] = sorted(locs)
        nbytes[(l, r)] = e.nbytes
        digests[(l, r)] = e.digest
        files[(l, r)] = e.file
    return LayerBitmap(manifest.step, manifest.n_layers, manifest.tp_dim, entries, nbytes, digests, files)


def scan_store(store: TieredStore, manifest: CheckpointManifest) -> LayerBitmap:
    """Bitmap from what is actually on disk; stale steps are recorded as such."""
    entries = {key: [] for key in manifest.shards}
    root = store.root
    candidates = [(Location("cloud", step=0), root / "cloud")]
    for node_dir in sorted(root.glob("node*")):
        for gpu_dir in sorted(node_dir.glob("gpu*")):
            try:
                n, r = int(node_dir.name[4:]), int(gpu_dir.name[3:])
            except ValueError:
                continue
            candidates.append((Location("local", n, r, 0), gpu_dir))
    for base, path in candidates:
        for key, e in manifest.shards.items():
            f = path / e.file
            if not f.exists():
                continue
            data = f.read_bytes()
            step = decode_shard(data).step
            if step == manifest.step and digest(data) != e.digest:
                continue  # corrupt copy: not a usable location
            entries[key].append(Location(base.kind, base.node_id, base.local_rank, step))
    return LayerBitmap(manifest.step, manifest.n_layers, manifest.tp_dim,
                       {k: sorted(v) for k, v in entries.items()},
                       {k: e.nbytes for k, e in manifest.shards.items()},
                       {k: e.digest for k, e in manifest.shards.items()},
                       {k: e.file for k, e in manifest.shards.items()})
