"""Command-line planner: plan | simulate | estimate-memory | pack | reshard.

Exit codes: 0 ok, 2 config error, 3 invalid plan, 4 packing error, 5 reshard error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, config_hash, load_cluster, load_model, load_workload, read_json
from .memory import estimate, fits
from .packer import POLICIES, PackError, Sample, StreamingPacker, pack, padding_ratio
from .plan import RECOMPUTE_MODES, ParallelPlan, PlanLimits, validate
from .reports import GB, run_step, sweep
from .reshard import ReshardError, ShardLayout, apply_plan, make_plan, make_plans, shard, verify

EXIT_OK, EXIT_CONFIG, EXIT_PLAN, EXIT_PACK, EXIT_RESHARD = 0, 2, 3, 4, 5
FORMATS = ("json", "csv", "md")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cluster", required=True, help="cluster.json (or bundled:NAME)")
    p.add_argument("--model", required=True, help="model.json (or bundled:NAME)")
    p.add_argument("--workload", required=True, help="workload.json (or bundled:NAME)")


def _add_plan_args(p: argparse.ArgumentParser, multi: bool) -> None:
    kw = {"nargs": "+"} if multi else {}
    p.add_argument("--sp", type=int, default=[1] if multi else 1, **kw)
    p.add_argument("--ep", type=int, default=[1] if multi else 1, **kw)
    p.add_argument("--dp-replicate", type=int, default=[1] if multi else 1, **kw)
    p.add_argument("--micro-batch", type=int, default=None, **kw,
                   help="defaults to the workload's micro_batch")
    p.add_argument("--recompute", choices=RECOMPUTE_MODES, default="full")
    p.add_argument("--offload-optimizer", action="store_true")
    p.add_argument("--offload-activations", action="store_true")
    p.add_argument("--async-ulysses", action="store_true")
    p.add_argument("--moe-overlap", action="store_true")
    p.add_argument("--prefetch-depth", type=int, default=1)
    p.add_argument("--format", choices=FORMATS, default="json")
    p.add_argument("-o", "--output", help="write the report here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omniplan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="sweep plans, estimate memory, simulate survivors")
    _add_config_args(p)
    _add_plan_args(p, multi=True)
    p.add_argument("--seqlens", type=int, nargs="+", help="override the workload seq_len")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--stamp", action="store_true", help="embed a generation timestamp")
    p.add_argument("--plot-dir", help="also render throughput/MFU/memory figures here")

    p = sub.add_parser("simulate", help="simulate one plan")
    _add_config_args(p)
    _add_plan_args(p, multi=False)
    p.add_argument("--trace", help="write a chrome-trace event list here")
    p.add_argument("--plot-dir", help="also render a timeline figure here")

    p = sub.add_parser("estimate-memory", help="per-rank memory breakdown for one plan")
    _add_config_args(p)
    _add_plan_args(p, multi=False)

    p = sub.add_parser("pack", help="pack a newline-delimited list of sample lengths")
    p.add_argument("lengths", help="file with one integer length per line")
    p.add_argument("--target-len", type=int, required=True)
    p.add_argument("--policy", choices=POLICIES, default=POLICIES[0])
    p.add_argument("--compare-policies", action="store_true",
                   help="report batch counts for every policy")
    p.add_argument("--stream-k", type=int, help="pack in streaming mode, flushing every k*L tokens")
    p.add_argument("--format", choices=FORMATS, default="json")
    p.add_argument("-o", "--output")

    p = sub.add_parser("reshard", help="copy plan between two shard layouts")
    p.add_argument("src", help="source layout JSON")
    p.add_argument("dst", help="destination layout JSON")
    p.add_argument("--verify", metavar="DATA", help=".npz (or .npy) data to round-trip")
    p.add_argument("-o", "--output")
    return parser


def _load_configs(args):
    cluster, knobs, craw = load_cluster(args.cluster)
    model, mraw = load_model(args.model)
    workload, wraw = load_workload(args.workload)
    meta = {"config_hashes": {"cluster": config_hash(craw), "model": config_hash(mraw),
                              "workload": config_hash(wraw)}}
    return cluster, knobs, model, workload, meta


def _template(args) -> ParallelPlan:
    return ParallelPlan(recompute=args.recompute, offload_optimizer=args.offload_optimizer,
                        offload_activations=args.offload_activations,
                        async_ulysses=args.async_ulysses, moe_overlap=args.moe_overlap,
                        fsdp_prefetch_depth=args.prefetch_depth)


def _single_plan(args, cluster, model, workload) -> ParallelPlan:
    m = args.micro_batch or workload.micro_batch
    plan = ParallelPlan.for_world(cluster.world_size, sp=args.sp, dp_replicate=args.dp_replicate,
                                  ep=args.ep, micro_batch=m, recompute=args.recompute,
                                  offload_optimizer=args.offload_optimizer,
                                  offload_activations=args.offload_activations,
                                  async_ulysses=args.async_ulysses, moe_overlap=args.moe_overlap,
                                  fsdp_prefetch_depth=args.prefetch_depth)
    bad = validate(plan, cluster, model, workload)
    if bad:
        raise CliError(EXIT_PLAN, "invalid plan " + plan.label + ":\n" +
                       "\n".join(f"  {v}" for v in bad))
    return plan


def _emit(text: str, output: Optional[str]) -> None:
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


def _kv_render(record: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(record, indent=2, sort_keys=True) + "\n"
    flat = _flatten(record)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["key", "value"])
        w.writerows(flat)
        return buf.getvalue()
    lines = ["| Key | Value |", "|---|---|"] + [f"| {k} | {v} |" for k, v in flat]
    return "\n".join(lines) + "\n"


def _flatten(d, prefix=""):
    out = []
    for k in sorted(d):
        v = d[k]
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out += _flatten(v, key + ".")
        elif isinstance(v, list):
            out.append((key, "; ".join(str(x) for x in v)))
        else:
            out.append((key, v))
    return out


def cmd_plan(args) -> int:
    cluster, knobs, model, workload, meta = _load_configs(args)
    limits = PlanLimits(sp=args.sp, ep=args.ep, dp_replicate=args.dp_replicate,
                        micro_batch=args.micro_batch, template=_template(args))
    rep = sweep(cluster, model, workload, limits, args.seqlens, knobs, max(args.jobs, 1), meta,
                args.stamp)
    _emit(rep.render(args.format), args.output)
    if args.plot_dir:
        from .figures import plot_report
        for path in plot_report(rep, args.plot_dir, cluster.gpu.hbm_bytes):
            print(f"wrote {path}", file=sys.stderr)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cluster, knobs, model, workload, meta = _load_configs(args)
    plan = _single_plan(args, cluster, model, workload)
    mem = estimate(plan, model, cluster, workload, knobs)
    timeline, step = run_step(plan, model, cluster, workload, knobs)
    record = {"method": plan.label, "seqlen": workload.seq_len, "plan": asdict(plan),
              "memory_gb": mem.total / GB, "fits": fits(mem, cluster.gpu),
              "memory": mem.to_dict(), "step": step.to_dict(),
              "metadata": {**meta, "tool_version": __version__, "knobs": knobs.to_dict(),
                           "simulated_devices": timeline.devices}}
    _emit(_kv_render(record, args.format), args.output)
    if args.trace:
        timeline.write_trace(args.trace)
    if args.plot_dir:
        from .figures import plot_timeline
        path = plot_timeline(timeline, Path(args.plot_dir) / "timeline.png")
        print(f"wrote {path}", file=sys.stderr)
    return EXIT_OK


def cmd_estimate_memory(args) -> int:
    cluster, knobs, model, workload, meta = _load_configs(args)
    plan = _single_plan(args, cluster, model, workload)
    mem = estimate(plan, model, cluster, workload, knobs)
    record = {"method": plan.label, "seqlen": workload.seq_len, "plan": asdict(plan),
              "memory_gb": mem.total / GB, "fits": fits(mem, cluster.gpu),
              "hbm_bytes": cluster.gpu.hbm_bytes, "memory": mem.to_dict(),
              "metadata": {**meta, "tool_version": __version__, "knobs": knobs.to_dict()}}
    _emit(_kv_render(record, args.format), args.output)
    return EXIT_OK


def read_lengths(path) -> tuple[list[Sample], list[int]]:
    """Samples (id = 0-based index) and the 1-based file line of each."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise CliError(EXIT_CONFIG, f"{path}: cannot read file ({e.strerror})") from None
    samples, lines = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if not s:
            continue
        try:
            n = int(s)
        except ValueError:
            raise CliError(EXIT_PACK, f"{path}:{lineno}: not an integer: {s!r}") from None
        if n < 1:
            raise CliError(EXIT_PACK, f"{path}:{lineno}: length must be >= 1, got {n}")
        samples.append(Sample(len(samples), n))
        lines.append(lineno)
    return samples, lines


def _pack_with(samples, target, policy, stream_k):
    if stream_k:
        return list(StreamingPacker(target, stream_k, policy).run(samples))
    return pack(samples, target, policy)


def cmd_pack(args) -> int:
    samples, lines = read_lengths(args.lengths)
    if args.target_len < 1:
        raise CliError(EXIT_PACK, "--target-len must be >= 1")
    try:
        batches = _pack_with(samples, args.target_len, args.policy, args.stream_k)
    except PackError as e:
        line = lines[e.sample_id]
        raise CliError(EXIT_PACK, f"{args.lengths}:{line}: sample length {e.length} exceeds "
                                  f"target length {e.capacity}") from None
    record = {"target_len": args.target_len, "policy": args.policy,
              "num_samples": len(samples), "num_batches": len(batches),
              "padding_ratio": padding_ratio(batches),
              "batches": [b.to_dict() for b in batches]}
    if args.compare_policies:
        record["comparison"] = {}
        for pol in POLICIES:
            bs = _pack_with(samples, args.target_len, pol, args.stream_k)
            record["comparison"][pol] = {"num_batches": len(bs), "padding_ratio": padding_ratio(bs)}
    _emit(_render_pack(record, args.format), args.output)
    return EXIT_OK


def _render_pack(record: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(record, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["batch", "ids", "lengths", "boundaries"])
        for i, b in enumerate(record["batches"]):
            w.writerow([i, " ".join(map(str, b["ids"])), " ".join(map(str, b["lengths"])),
                        " ".join(map(str, b["boundaries"]))])
        return buf.getvalue()
    rows = record.get("comparison") or {record["policy"]: record}
    lines = ["| Policy | Batches | Padding ratio |", "|---|---|---|"]
    lines += [f"| {pol} | {r['num_batches']} | {r['padding_ratio']:.4f} |"
              for pol, r in rows.items()]
    return "\n".join(lines) + "\n"


def load_layouts(path) -> list[ShardLayout]:
    """``{"group_size": P, "params": [{"param_id": .., "numel": .., "group_size"?: ..}]}``."""
    data, name = read_json(path)
    if not isinstance(data, dict) or not isinstance(data.get("params"), list):
        raise ConfigError(name, "expected an object with a 'params' list")
    default = data.get("group_size")
    out = []
    for i, p in enumerate(data["params"]):
        where = f"{name}.params[{i}]"
        if not isinstance(p, dict):
            raise ConfigError(where, "expected an object")
        try:
            out.append(ShardLayout(str(p["param_id"]), int(p["numel"]),
                                   int(p.get("group_size", default))))
        except KeyError as e:
            raise ConfigError(f"{where}.{e.args[0]}", "missing required field") from None
        except (TypeError, ValueError) as e:
            raise ConfigError(where, str(e) or "bad layout") from None
    return out


def _load_data(path) -> dict[str, np.ndarray]:
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise CliError(EXIT_RESHARD, f"{path}: cannot load data ({e})") from None
    if isinstance(data, np.ndarray):
        return {"": data}
    return {k: data[k] for k in data.files}


def _round_trip(plans, data) -> dict:
    results = {}
    for plan in plans:
        arr = data.get(plan.param_id, data.get("") if len(data) == 1 else None)
        if arr is None:
            raise CliError(EXIT_RESHARD, f"no data array for parameter {plan.param_id!r}")
        arr = np.asarray(arr).reshape(-1)
        if arr.size != plan.numel:
            raise CliError(EXIT_RESHARD, f"parameter {plan.param_id!r}: data has {arr.size} "
                                         f"elements, layout says {plan.numel}")
        bad = verify(plan, plan.numel)
        if bad:
            raise CliError(EXIT_RESHARD, f"plan for {plan.param_id!r} is invalid: "
                                         + "; ".join(f"{v.code}: {v.message}" for v in bad))
        src = shard(arr, plan.src_group_size)
        dst = apply_plan(plan, src)
        want = shard(arr, plan.dst_group_size)
        back = make_plan(ShardLayout(plan.param_id, plan.numel, plan.dst_group_size),
                         ShardLayout(plan.param_id, plan.numel, plan.src_group_size))
        again = apply_plan(back, dst)
        ok = (all(np.array_equal(a, b) for a, b in zip(dst, want))
              and all(np.array_equal(a, b) for a, b in zip(again, src)))
        if not ok:
            raise CliError(EXIT_RESHARD, f"round trip failed for {plan.param_id!r}")
        results[plan.param_id] = "ok"
    return results


def cmd_reshard(args) -> int:
    src, dst = load_layouts(args.src), load_layouts(args.dst)
    try:
        plans = make_plans(src, dst)
    except ReshardError as e:
        raise CliError(EXIT_RESHARD, str(e)) from None
    record = {"plans": [p.to_dict() for p in plans]}
    if args.verify:
        record["verified"] = _round_trip(plans, _load_data(args.verify))
    _emit(json.dumps(record, indent=2, sort_keys=True) + "\n", args.output)
    return EXIT_OK


COMMANDS = {"plan": cmd_plan, "simulate": cmd_simulate, "estimate-memory": cmd_estimate_memory,
            "pack": cmd_pack, "reshard": cmd_reshard}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
