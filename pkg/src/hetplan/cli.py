"""Command-line driver.

Exit codes: 0 success, 2 parse error, 3 infeasible, 4 unrecoverable shard,
5 internal invariant violation.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import planner
from .checkpoint import (CheckpointManifest, LayerBitmap, RecoveryPlan, TieredStore, execute_recovery,
                         plan_recovery, reshard_rank, save_layerwise, synthetic_model_state)
from .checkpoint.shard import encode_shard, shard_name
from .checkpoint.store import Location, bitmap_from_manifest, dump_doc, load_json
from .cluster import DeviceId, load_cluster_spec
from .cost import estimate_iteration, simulate_1f1b
from .errors import HetplanError, InvariantViolation, SpecError
from .plan import dump_plan, load_plan
from .profile import dump_profile_table, load_model_config, load_profile_table, synth_profile

log = logging.getLogger("hetplan")

EXIT_OK, EXIT_PARSE, EXIT_INFEASIBLE, EXIT_UNRECOVERABLE, EXIT_INTERNAL = 0, 2, 3, 4, 5


def _read(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise SpecError(f"cannot read {path}: {exc}") from None


def _write(path, text: str):
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _device_list(text):
    out = []
    for item in text.split(","):
        if not item.strip():
            continue
        try:
            n, r = item.split(":")
            out.append(DeviceId(int(n), int(r)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected node:rank pairs, got {item!r}")
    return out


def _inputs(args):
    spec = load_cluster_spec(_read(args.cluster))
    cfg = load_model_config(_read(args.model))
    profile = load_profile_table(_read(args.profile))
    return spec, cfg, profile


def cmd_plan(args) -> int:
    spec, cfg, profile = _inputs(args)
    p = planner.plan(spec, cfg, profile, tp_dims=args.tp_dims, top_k=args.top_k, budget=args.budget,
                     validate_sim=args.validate_sim, sync_overlap=args.sync_overlap,
                     power_source=args.power_source)
    _write(args.out, dump_plan(p))
    if args.out not in (None, "-") and not args.quiet:
        sys.stdout.write(planner.explain(p, spec, cfg, profile))
    return EXIT_OK


def cmd_explain(args) -> int:
    p = load_plan(_read(args.plan))
    spec = cfg = profile = None
    if args.cluster:
        spec = load_cluster_spec(_read(args.cluster))
        p.validate(spec)
    if args.model:
        cfg = load_model_config(_read(args.model))
    if args.profile:
        profile = load_profile_table(_read(args.profile))
    sys.stdout.write(planner.explain(p, spec, cfg, profile))
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec, cfg, profile = _inputs(args)
    p = load_plan(_read(args.plan))
    p.validate(spec)
    sim = simulate_1f1b(p, profile, cfg, spec, mode=args.mode, include_comm=not args.no_comm,
                        sync_overlap=args.sync_overlap)
    out = sim.to_dict()
    out["device_idle_fraction"] = {f"{d.node_id}:{d.local_rank}": v
                                   for d, v in sorted(sim.device_idle_fraction.items())}
    if args.compare_estimate:
        est = estimate_iteration(p, profile, cfg, spec, args.sync_overlap)
        gap = abs(sim.iteration_time - est.T_star)
        rel = gap / est.T_star if est.T_star else 0.0
        out["estimate"] = {"T_star": est.T_star, "abs_diff": gap, "rel_diff": rel,
                           "flagged": rel > planner.SIM_TOLERANCE}
        if rel > planner.SIM_TOLERANCE:
            log.warning("simulation differs from closed-form estimate by %.2f%%", 100 * rel)
    if args.timeline:
        rows = [("device", "event", "microbatch", "start", "end")]
        rows += [(f"{d.node_id}:{d.local_rank}", ev, m, repr(s), repr(e)) for d, ev, m, s, e in sim.timeline]
        if args.timeline == "-":
            csv.writer(sys.stdout).writerows(rows)
        else:
            with open(args.timeline, "w", newline="") as fh:
                csv.writer(fh).writerows(rows)
    _write(args.out, json.dumps(out, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_save_ckpt(args) -> int:
    p = load_plan(_read(args.plan))
    state = synthetic_model_state(p.n_layers, args.hidden, args.ffn, args.seed, zero_optimizer=args.zero_optimizer)
    store = TieredStore(args.store)
    skip = args.skip_local or []
    m = save_layerwise(state, p, args.step, store, upload=not args.no_upload, skip_local=skip)
    bm = bitmap_from_manifest(m, p, uploaded=not args.no_upload, skip_local=skip)
    root = Path(args.store)
    _write(args.manifest or root / "manifest.json", dump_doc(m.to_dict()))
    _write(args.bitmap or root / "bitmap.json", dump_doc(bm.to_dict()))
    print(f"saved {len(m.shards)} shards of {m.n_layers} layers at tp={m.tp_dim}, step {m.step}")
    return EXIT_OK


def cmd_recover_plan(args) -> int:
    old = load_plan(_read(args.old_plan))
    new = load_plan(_read(args.new_plan))
    spec = load_cluster_spec(_read(args.cluster))
    bm = LayerBitmap.from_dict(load_json(_read(args.bitmap), "bitmap"))
    if args.preempt_nodes:
        bm = bm.without_nodes(args.preempt_nodes)
    if args.preempt_devices:
        bm = bm.without_devices(args.preempt_devices)
    if args.cloud_only:
        bm = bm.cloud_only()
    share = not (args.no_share_downloads or args.cloud_only)
    rp = plan_recovery(old, new, bm, spec, share_downloads=share)
    _write(args.out, dump_doc(rp.to_dict()))
    if args.out not in (None, "-"):
        for tier in ("device", "node", "peer", "cloud"):
            print(f"{tier:>6}: {rp.tier_bytes[tier]} B, {rp.tier_seconds[tier]:.6f} s")
        print(f"estimated recovery time {rp.estimated_seconds:.6f} s")
    return EXIT_OK


def cmd_restore(args) -> int:
    rp = RecoveryPlan.from_dict(load_json(_read(args.recovery), "recovery plan"))
    store = TieredStore(args.store)
    restored = execute_recovery(rp, store)
    if args.out:
        out = TieredStore(args.out)
        for dev, layers in restored.items():
            for l, shard in layers.items():
                name = shard_name(l, shard.tp_rank, shard.tp_dim)
                out.write(Location("local", dev.node_id, dev.local_rank, shard.step), name, encode_shard(shard))
    if args.verify:
        m = CheckpointManifest.from_dict(load_json(_read(args.manifest or Path(args.store) / "manifest.json"),
                                                   "manifest"))
        cloud = Location("cloud", step=m.step)
        full = {}
        for dev, layers in restored.items():
            for l, shard in layers.items():
                if l not in full:
                    old = [store.read_shard(cloud, m.entry(l, q).file, m.entry(l, q).digest)
                           for q in range(m.tp_dim)]
                    full[l] = old
                direct = reshard_rank(full[l], shard.tp_dim, shard.tp_rank)
                if not direct.same(shard):
                    raise InvariantViolation(f"restored layer {l} on {dev} differs from direct reshard")
        print(f"verified {sum(len(v) for v in restored.values())} restored shards against the cloud copy")
    n = sum(len(v) for v in restored.values())
    print(f"restored {n} layer shards on {len(restored)} devices")
    return EXIT_OK


def cmd_synth_profile(args) -> int:
    if args.cluster:
        spec = load_cluster_spec(_read(args.cluster))
        powers = {t.name: t.compute_power for t in spec.gpu_types.values()}
    else:
        powers = {}
    for item in args.types or []:
        try:
            name, g = item.split("=")
            powers[name] = float(g)
        except ValueError:
            raise SpecError(f"--type expects NAME=POWER, got {item!r}") from None
    if not powers:
        raise SpecError("synth-profile needs --cluster or at least one --type")
    table = synth_profile(powers, args.tp_dims, args.max_layers, args.base)
    _write(args.out, dump_profile_table(table))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hetplan", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def inputs(p, required=True):
        p.add_argument("--cluster", required=required, help="cluster spec (YAML or JSON)")
        p.add_argument("--model", required=required, help="model config (YAML or JSON)")
        p.add_argument("--profile", required=required, help="profile table (CSV)")

    p = sub.add_parser("plan", help="search for the minimum-cost 3D parallel plan")
    inputs(p)
    p.add_argument("--tp-dims", type=_int_list, help="restrict the TP dimensions tried, e.g. 1,2")
    p.add_argument("--top-k", type=int, default=1, help="groupings kept per TP dimension")
    p.add_argument("--budget", type=int, help="branch-and-bound node budget")
    p.add_argument("--validate-sim", action="store_true", help="re-check the winner with the simulator")
    p.add_argument("--sync-overlap", choices=("sum", "max"), default="sum")
    p.add_argument("--power-source", choices=("spec", "profile"), default="spec")
    p.add_argument("--out", "-o", help="plan document path (default stdout)")
    p.add_argument("--quiet", "-q", action="store_true")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("explain", help="print a plan's breakdown")
    p.add_argument("--plan", required=True)
    inputs(p, required=False)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("simulate", help="simulate a plan under 1F1B")
    p.add_argument("--plan", required=True)
    inputs(p)
    p.add_argument("--mode", choices=("split", "combined"), default="split")
    p.add_argument("--no-comm", action="store_true", help="ignore stage-boundary transfers")
    p.add_argument("--sync-overlap", choices=("sum", "max"), default="sum")
    p.add_argument("--compare-estimate", action="store_true")
    p.add_argument("--timeline", help="write the event timeline as CSV ('-' for stdout)")
    p.add_argument("--out", "-o")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("save-ckpt", help="write a layer-wise checkpoint of a synthetic model")
    p.add_argument("--plan", required=True)
    p.add_argument("--store", required=True, help="store root directory")
    p.add_argument("--step", type=int, default=0)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--ffn", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--zero-optimizer", action="store_true")
    p.add_argument("--no-upload", action="store_true", help="skip the cloud copy")
    p.add_argument("--skip-local", type=_device_list, help="devices that miss the local flush, e.g. 0:1,0:2")
    p.add_argument("--manifest", help="manifest path (default <store>/manifest.json)")
    p.add_argument("--bitmap", help="bitmap path (default <store>/bitmap.json)")
    p.set_defaults(func=cmd_save_ckpt)

    p = sub.add_parser("recover-plan", help="plan a local-first checkpoint recovery")
    p.add_argument("--old-plan", required=True)
    p.add_argument("--new-plan", required=True)
    p.add_argument("--bitmap", required=True)
    p.add_argument("--cluster", required=True, help="surviving cluster spec")
    p.add_argument("--preempt-nodes", type=_int_list, help="drop local copies on these nodes")
    p.add_argument("--preempt-devices", type=_device_list, help="drop local copies on these devices")
    p.add_argument("--cloud-only", action="store_true",
                   help="ignore every local copy and fetch every shard from the cloud (baseline)")
    p.add_argument("--no-share-downloads", action="store_true",
                   help="every device fetches its own cloud copy")
    p.add_argument("--out", "-o")
    p.set_defaults(func=cmd_recover_plan)

    p = sub.add_parser("restore", help="execute a recovery plan against a store")
    p.add_argument("--recovery", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--out", help="write restored shards under this directory")
    p.add_argument("--verify", action="store_true", help="compare with resharding the cloud copy directly")
    p.add_argument("--manifest", help="manifest path (default <store>/manifest.json)")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("synth-profile", help="write a synthetic linear profile table")
    p.add_argument("--cluster", help="take GPU types and powers from this spec")
    p.add_argument("--type", dest="types", action="append", help="NAME=POWER (repeatable)")
    p.add_argument("--tp-dims", type=_int_list, default=[1, 2, 4, 8])
    p.add_argument("--max-layers", type=int, default=128)
    p.add_argument("--base", type=float, default=0.01, help="seconds per layer at power 1, tp 1")
    p.add_argument("--out", "-o")
    p.set_defaults(func=cmd_synth_profile)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except HetplanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # anything else is a bug
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
