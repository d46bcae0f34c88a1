"""Command-line entry point: ``perfsim <subcommand> ...``.

Every subcommand writes JSON to stdout (or ``--out``).  Usage errors exit
with status 2; domain errors exit with status 1 and print
``{"error": ..., "detail": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import comm, kernels, metrics, sharding, simulator, trace
from .errors import LengthMismatch, PerfSimError, SchemaError

DEFAULT_SEED = 0


def _default_seed() -> int:
    return int(os.environ.get("PERFSIM_SEED", DEFAULT_SEED))


def _emit(payload, out: str | None):
    text = json.dumps(payload, sort_keys=True, indent=2, allow_nan=False) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc


def _load_registry(path) -> kernels.KernelRegistry:
    if path is None:
        return kernels.KernelRegistry()
    return kernels.KernelRegistry.from_dict(_read_json(path))


def _load_overheads(path) -> simulator.OverheadStats:
    if path is None:
        return simulator.OverheadStats()
    return simulator.OverheadStats.from_dict(_read_json(path))


def _load_world(paths):
    if len(paths) == 1:
        return trace.load_world(paths[0])
    return trace.load_world(paths)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_fit_comm(args):
    samples = comm.read_bench_csv(Path(args.csv).read_text())
    params = comm.fit(samples, seed=args.seed)
    _emit(params.to_dict(kind=args.kind, platform=args.platform), args.out)


def cmd_train_el(args):
    rows = kernels.read_el_csv(Path(args.csv).read_text())
    hyper = kernels.MlpHyper(
        hidden=tuple(int(h) for h in args.hidden.split(",") if h),
        lr=args.lr,
        epochs=args.epochs,
        seed=args.seed,
    )
    result = kernels.mlp_train(rows, hyper)
    doc = result.model.to_dict()
    doc["metadata"] = {"name": args.name, "holdout_gmae": result.holdout_gmae, "rows": len(rows)}
    _emit(doc, args.out)


def cmd_rf(args):
    indices = _read_json(args.indices)
    if not isinstance(indices, list) or not all(isinstance(s, list) for s in indices):
        raise SchemaError("indices file must be a JSON list of per-sample index lists")
    rf = kernels.compute_rf(indices, num_bins=args.bins)
    hist = kernels.count_histogram(indices)
    _emit({"bins": list(rf.bins), "count_histogram": {str(k): v for k, v in hist.items()}}, args.out)


def cmd_predict(args):
    world = _load_world(args.traces)
    registry = _load_registry(args.models)
    overheads = _load_overheads(args.overheads)
    if args.oracle:
        _emit({"total_us": simulator.oracle_simulate(world, registry, overheads)}, args.out)
        return
    report = simulator.simulate(world, registry, overheads, parallel=args.parallel)
    if args.table:
        sys.stdout.write(simulator.format_breakdown(report) + "\n")
        if args.out:
            _emit(report.to_dict(), args.out)
        return
    _emit(report.to_dict(), args.out)


def cmd_baseline(args):
    world = _load_world(args.traces)
    _emit({"baseline_us": simulator.baseline_predict(world, _load_registry(args.models))}, args.out)


def cmd_shard(args):
    tables = sharding.read_tables_csv(Path(args.tables).read_text())
    plan = sharding.shard(tables, args.ngpus, args.sharder, seed=args.seed, dram_bytes=args.dram_bytes)
    _emit(plan.to_dict(), args.out)


def cmd_select(args):
    tables = sharding.read_tables_csv(Path(args.tables).read_text())
    registry = _load_registry(args.models)
    overheads = _load_overheads(args.overheads)
    rng = np.random.default_rng(args.seed)
    counts = [sharding.synth_lookup_counts(t, args.batch_size, rng) for t in tables]
    predictor = sharding.make_predictor(tables, registry, overheads, args.batch_size, counts)
    candidates = [c for c in args.candidates.split(",") if c]
    result = sharding.select_config(tables, args.ngpus, candidates, predictor, seed=args.seed,
                                    dram_bytes=args.dram_bytes)
    _emit(result.to_dict(), args.out)


def cmd_gen(args):
    lo, _, hi = args.ops.partition(",")
    spec = trace.SynthSpec(
        ranks=args.ranks,
        ops_per_rank=(int(lo), int(hi or lo)),
        comm_density=args.density,
    )
    world = trace.synth_trace(spec, args.seed)
    out = Path(args.out_dir)
    paths = trace.save_world(world, out)
    names = sorted({op.name for t in world for op in t.ops})
    (out / "overheads.json").write_text(simulator.synth_overheads(names, args.seed).dumps() + "\n")
    registry = kernels.KernelRegistry(comm=dict(comm.REFERENCE_PARAMS))
    (out / "models.json").write_text(json.dumps(registry.to_dict(), sort_keys=True, indent=2) + "\n")
    _emit({"traces": [str(p) for p in paths], "overheads": str(out / "overheads.json"),
           "models": str(out / "models.json")}, None)


def _values(doc) -> dict:
    if isinstance(doc, (int, float)) and not isinstance(doc, bool):
        return {"total_us": float(doc)}
    if isinstance(doc, list):
        return {str(i): float(v) for i, v in enumerate(doc)}
    if isinstance(doc, dict):
        for key in ("total_us", "baseline_us"):
            if key in doc:
                return {"total_us": float(doc[key])}
        if all(isinstance(v, (int, float)) for v in doc.values()):
            return {str(k): float(v) for k, v in doc.items()}
    raise SchemaError("expected a number, a list of numbers, a name->number map, or an object with total_us/baseline_us")


def cmd_eval(args):
    pred = _values(_read_json(args.pred))
    ref = _values(_read_json(args.ref))
    if set(pred) != set(ref):
        raise LengthMismatch(f"prediction keys {sorted(pred)} do not match reference keys {sorted(ref)}")
    keys = sorted(ref)
    report = metrics.metric_report([pred[k] for k in keys], [ref[k] for k in keys])
    _emit(report.to_dict(), args.out)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="perfsim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=func)
        sp.add_argument("--out", help="write JSON here instead of stdout")
        return sp

    sp = add("fit-comm", cmd_fit_comm, "fit collective latency params from a m_bytes,latency_us CSV")
    sp.add_argument("--csv", required=True)
    sp.add_argument("--kind", choices=trace.COLLECTIVE_KINDS, required=True)
    sp.add_argument("--platform")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("train-el", cmd_train_el, "train an embedding-lookup MLP from an EL microbenchmark CSV")
    sp.add_argument("--csv", required=True)
    sp.add_argument("--name", default="elf", help="model name stored in metadata (elf or elb)")
    sp.add_argument("--hidden", default="128,128")
    sp.add_argument("--lr", type=float, default=kernels.MlpHyper.lr)
    sp.add_argument("--epochs", type=int, default=kernels.MlpHyper.epochs)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("rf", cmd_rf, "reuse factors of a batch of lookup indices")
    sp.add_argument("--indices", required=True, help="JSON list of per-sample index lists")
    sp.add_argument("--bins", type=int, default=kernels.NUM_RF_BINS)

    sp = add("predict", cmd_predict, "simulate a world of per-rank traces")
    sp.add_argument("--traces", nargs="+", required=True, help="a directory or explicit trace files")
    sp.add_argument("--models")
    sp.add_argument("--overheads")
    sp.add_argument("--parallel", action="store_true", help="one thread per rank")
    sp.add_argument("--oracle", action="store_true", help="use the event-queue reference model")
    sp.add_argument("--table", action="store_true", help="print the breakdown table instead of JSON")

    sp = add("baseline", cmd_baseline, "sum-of-kernel-time baseline prediction")
    sp.add_argument("--traces", nargs="+", required=True)
    sp.add_argument("--models")

    sp = add("shard", cmd_shard, "assign tables to ranks")
    sp.add_argument("--tables", required=True)
    sp.add_argument("--ngpus", type=int, required=True)
    sp.add_argument("--sharder", choices=[k.value for k in sharding.SharderKind], required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--dram-bytes", type=float)

    sp = add("select", cmd_select, "pick the fastest sharder by simulation")
    sp.add_argument("--tables", required=True)
    sp.add_argument("--ngpus", type=int, required=True)
    sp.add_argument("--candidates", default=",".join(k.value for k in sharding.SELECTION_CANDIDATES))
    sp.add_argument("--models", required=True)
    sp.add_argument("--overheads")
    sp.add_argument("--batch-size", type=int, default=4096)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--dram-bytes", type=float)

    sp = add("gen", cmd_gen, "generate a synthetic world with matching overheads and models files")
    sp.add_argument("--ranks", type=int, default=2)
    sp.add_argument("--ops", default="20,200", help="ops per rank, N or LO,HI")
    sp.add_argument("--density", type=float, default=0.2)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out-dir", required=True)

    sp = add("eval", cmd_eval, "GMAE/MAPE of predictions against a reference")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--ref", required=True)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "seed", 0) is None:
        args.seed = _default_seed()
    try:
        args.func(args)
    except (PerfSimError, ValueError, OSError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "detail": str(exc)}) + "\n")
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
