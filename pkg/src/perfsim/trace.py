"""Execution-trace data model.

A world is one :class:`ExecutionTrace` per rank.  Each trace is a
topologically ordered list of ops; ops carry the kernels they launch and the
tensor ids they read and write.  Dependencies are defined purely by tensor-id
intersection.
"""

from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import (
    CollectiveMismatch,
    DanglingTensor,
    OrderError,
    SchemaError,
    WorldMismatch,
)

SCHEMA_VERSION = 1

COMPUTE = "compute"
COMMUNICATION = "communication"
STREAMS = (COMPUTE, COMMUNICATION)

COLLECTIVE_KINDS = ("all_to_all", "all_reduce")
KERNEL_KINDS = COLLECTIVE_KINDS + (
    "embedding_fwd",
    "embedding_bwd",
    "roofline",
    "learned",
    "fixed",
)


def stream_of(kind: str) -> str:
    return COMMUNICATION if kind in COLLECTIVE_KINDS else COMPUTE


@dataclass(frozen=True)
class TensorRef:
    id: int
    bytes: int = 0


@dataclass(frozen=True)
class KernelCall:
    kind: str
    args: dict = field(default_factory=dict, hash=False, compare=True)

    @property
    def stream(self) -> str:
        return stream_of(self.kind)

    @property
    def is_collective(self) -> bool:
        return self.kind in COLLECTIVE_KINDS

    @classmethod
    def fixed(cls, latency_us: float) -> "KernelCall":
        return cls("fixed", {"latency_us": latency_us})

    @classmethod
    def all_to_all(cls, send_bytes) -> "KernelCall":
        return cls("all_to_all", {"send_bytes": [list(row) for row in send_bytes]})

    @classmethod
    def all_reduce(cls, nbytes: int) -> "KernelCall":
        return cls("all_reduce", {"bytes": nbytes})

    @classmethod
    def roofline(cls, flops: float, nbytes: float) -> "KernelCall":
        return cls("roofline", {"flops": flops, "bytes": nbytes})

    @classmethod
    def learned(cls, model: str, features: Sequence[float]) -> "KernelCall":
        return cls("learned", {"model": model, "features": [float(f) for f in features]})

    @classmethod
    def embedding(cls, direction: str, tables, batch_size: int, rf=None, indices=None) -> "KernelCall":
        """``direction`` is ``"fwd"`` or ``"bwd"``; pass exactly one of ``rf``/``indices``."""
        args: dict[str, Any] = {
            "tables": [
                {"E": int(t["E"]), "D": int(t["D"]), "avg_L": float(t["avg_L"])} if isinstance(t, dict)
                else {"E": int(t.E), "D": int(t.D), "avg_L": float(t.avg_L)}
                for t in tables
            ],
            "batch_size": int(batch_size),
        }
        if rf is not None:
            args["rf"] = [float(x) for x in getattr(rf, "bins", rf)]
        if indices is not None:
            args["indices"] = [[int(i) for i in s] for s in indices]
        return cls(f"embedding_{direction}", args)


@dataclass(frozen=True)
class OpNode:
    id: int
    name: str
    inputs: tuple[int, ...] = ()
    outputs: tuple[int, ...] = ()
    kernels: tuple[KernelCall, ...] = ()
    stream: str = COMPUTE
    collective_seq: int | None = None

    @property
    def is_comm(self) -> bool:
        return self.collective_seq is not None

    @property
    def collective_kinds(self) -> tuple[str, ...]:
        return tuple(k.kind for k in self.kernels if k.is_collective)


@dataclass(frozen=True)
class ExecutionTrace:
    rank: int
    world_size: int
    ops: tuple[OpNode, ...]
    tensors: tuple[TensorRef, ...] = ()

    @property
    def tensor_table(self) -> dict[int, TensorRef]:
        return {t.id: t for t in self.tensors}

    @property
    def comm_ops(self) -> list[OpNode]:
        return [op for op in self.ops if op.is_comm]


def depends_on(op: OpNode, comm_op: OpNode) -> bool:
    """True when ``op`` reads any tensor written by ``comm_op``."""
    if not op.inputs or not comm_op.outputs:
        return False
    return not set(op.inputs).isdisjoint(comm_op.outputs)


# ---------------------------------------------------------------------------
# parsing / validation
# ---------------------------------------------------------------------------

_TOP_KEYS = {"schema_version", "rank", "world_size", "tensors", "ops"}
_OP_REQUIRED = {"id", "name", "inputs", "outputs", "stream", "kernels"}
_OP_OPTIONAL = {"collective_seq"}
_KERNEL_KEYS = {"kind", "args"}

# kind -> (required arg keys, optional arg keys)
_ARG_KEYS = {
    "all_to_all": ({"send_bytes"}, set()),
    "all_reduce": ({"bytes"}, set()),
    "embedding_fwd": ({"tables", "batch_size"}, {"rf", "indices"}),
    "embedding_bwd": ({"tables", "batch_size"}, {"rf", "indices"}),
    "roofline": ({"flops", "bytes"}, set()),
    "learned": ({"model", "features"}, set()),
    "fixed": ({"latency_us"}, set()),
}


def _check_keys(obj, required, optional, where):
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected an object, got {type(obj).__name__}")
    keys = set(obj)
    missing = required - keys
    extra = keys - required - optional
    if missing:
        raise SchemaError(f"{where}: missing field(s) {sorted(missing)}")
    if extra:
        raise SchemaError(f"{where}: unexpected field(s) {sorted(extra)}")


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_number(x) -> bool:
    return (_is_int(x) or isinstance(x, float)) and math.isfinite(x)


def _nonneg_int(x, where):
    if not _is_int(x) or x < 0:
        raise SchemaError(f"{where}: expected a non-negative integer, got {x!r}")
    return x


def _nonneg_number(x, where):
    if not _is_number(x) or x < 0:
        raise SchemaError(f"{where}: expected a non-negative number, got {x!r}")
    return x


def _int_list(x, where):
    if not isinstance(x, list):
        raise SchemaError(f"{where}: expected a list")
    return tuple(_nonneg_int(v, where) for v in x)


def _check_args(kind, args, where):
    required, optional = _ARG_KEYS[kind]
    _check_keys(args, required, optional, where)
    if kind == "all_to_all":
        m = args["send_bytes"]
        if not isinstance(m, list) or not all(isinstance(r, list) for r in m):
            raise SchemaError(f"{where}.send_bytes: expected a matrix")
        if any(len(r) != len(m) for r in m):
            raise SchemaError(f"{where}.send_bytes: matrix must be square")
        for r in m:
            for v in r:
                _nonneg_number(v, f"{where}.send_bytes")
    elif kind == "all_reduce":
        _nonneg_number(args["bytes"], f"{where}.bytes")
    elif kind in ("embedding_fwd", "embedding_bwd"):
        if ("rf" in args) == ("indices" in args):
            raise SchemaError(f"{where}: exactly one of 'rf' or 'indices' is required")
        tables = args["tables"]
        if not isinstance(tables, list) or not tables:
            raise SchemaError(f"{where}.tables: expected a non-empty list")
        for i, t in enumerate(tables):
            _check_keys(t, {"E", "D", "avg_L"}, set(), f"{where}.tables[{i}]")
            if not _is_int(t["E"]) or t["E"] < 1 or not _is_int(t["D"]) or t["D"] < 1:
                raise SchemaError(f"{where}.tables[{i}]: E and D must be positive integers")
            _nonneg_number(t["avg_L"], f"{where}.tables[{i}].avg_L")
        if not _is_int(args["batch_size"]) or args["batch_size"] < 1:
            raise SchemaError(f"{where}.batch_size: expected a positive integer")
        if "rf" in args:
            rf = args["rf"]
            if not isinstance(rf, list) or len(rf) != 17:
                raise SchemaError(f"{where}.rf: expected 17 bins")
            for v in rf:
                if not _is_number(v) or not 0 <= v <= 1:
                    raise SchemaError(f"{where}.rf: bins must lie in [0, 1]")
        else:
            idx = args["indices"]
            if not isinstance(idx, list) or not all(isinstance(s, list) for s in idx):
                raise SchemaError(f"{where}.indices: expected a list of per-sample lists")
            for s in idx:
                _int_list(s, f"{where}.indices")
    elif kind == "roofline":
        _nonneg_number(args["flops"], f"{where}.flops")
        _nonneg_number(args["bytes"], f"{where}.bytes")
    elif kind == "learned":
        if not isinstance(args["model"], str):
            raise SchemaError(f"{where}.model: expected a string")
        feats = args["features"]
        if not isinstance(feats, list) or not all(_is_number(v) for v in feats):
            raise SchemaError(f"{where}.features: expected a list of finite numbers")
    elif kind == "fixed":
        _nonneg_number(args["latency_us"], f"{where}.latency_us")


def _parse_op(d, where) -> OpNode:
    _check_keys(d, _OP_REQUIRED, _OP_OPTIONAL, where)
    if not _is_int(d["id"]):
        raise SchemaError(f"{where}.id: expected an integer")
    if not isinstance(d["name"], str):
        raise SchemaError(f"{where}.name: expected a string")
    stream = d["stream"]
    if stream not in STREAMS:
        raise SchemaError(f"{where}.stream: expected one of {STREAMS}, got {stream!r}")
    if not isinstance(d["kernels"], list):
        raise SchemaError(f"{where}.kernels: expected a list")
    kernels = []
    for j, kd in enumerate(d["kernels"]):
        kw = f"{where}.kernels[{j}]"
        _check_keys(kd, _KERNEL_KEYS, set(), kw)
        kind = kd["kind"]
        if kind not in KERNEL_KINDS:
            raise SchemaError(f"{kw}.kind: unknown kernel kind {kind!r}")
        _check_args(kind, kd["args"], f"{kw}.args")
        if stream_of(kind) != stream:
            raise SchemaError(f"{kw}: {kind} kernels run on the {stream_of(kind)} stream, op declares {stream}")
        kernels.append(KernelCall(kind, copy.deepcopy(kd["args"])))
    seq = d.get("collective_seq")
    has_collective = any(k.is_collective for k in kernels)
    if seq is not None and not _is_int(seq):
        raise SchemaError(f"{where}.collective_seq: expected an integer")
    if has_collective != (seq is not None):
        raise SchemaError(f"{where}: collective_seq must be present iff the op launches a collective")
    return OpNode(
        id=d["id"],
        name=d["name"],
        inputs=_int_list(d["inputs"], f"{where}.inputs"),
        outputs=_int_list(d["outputs"], f"{where}.outputs"),
        kernels=tuple(kernels),
        stream=stream,
        collective_seq=seq,
    )


def validate_trace(trace: ExecutionTrace) -> ExecutionTrace:
    """Check the structural invariants of a single trace; returns it unchanged."""
    if not _is_int(trace.world_size) or trace.world_size < 1:
        raise SchemaError(f"world_size must be >= 1, got {trace.world_size!r}")
    if not _is_int(trace.rank) or not 0 <= trace.rank < trace.world_size:
        raise SchemaError(f"rank {trace.rank!r} outside [0, {trace.world_size})")
    table = {}
    for t in trace.tensors:
        if t.id in table:
            raise SchemaError(f"duplicate tensor id {t.id}")
        table[t.id] = t
    op_ids = set()
    producer: dict[int, int] = {}
    last_seq = None
    for pos, op in enumerate(trace.ops):
        if op.id in op_ids:
            raise SchemaError(f"duplicate op id {op.id}")
        op_ids.add(op.id)
        if len({k.stream for k in op.kernels} | {op.stream}) != 1:
            raise SchemaError(f"op {op.id}: kernels do not share the op's stream")
        for tid in op.inputs + op.outputs:
            if tid not in table:
                raise DanglingTensor(f"op {op.id} ({op.name}) references tensor {tid} absent from the tensor table")
        for tid in op.outputs:
            if tid in producer:
                raise OrderError(f"tensor {tid} produced by both op {producer[tid]} and op {op.id}")
            producer[tid] = op.id
        if op.is_comm:
            if last_seq is not None and op.collective_seq <= last_seq:
                raise OrderError(
                    f"op {op.id}: collective_seq {op.collective_seq} not strictly increasing (previous {last_seq})"
                )
            last_seq = op.collective_seq
    # an input produced later in the list would make the order invalid
    position = {op.id: i for i, op in enumerate(trace.ops)}
    for i, op in enumerate(trace.ops):
        for tid in op.inputs:
            src = producer.get(tid)
            if src is not None and position[src] >= i:
                raise OrderError(f"op {op.id} reads tensor {tid} before op {src} produces it")
    return trace


def trace_from_dict(doc: dict) -> ExecutionTrace:
    _check_keys(doc, _TOP_KEYS, set(), "trace")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {doc['schema_version']!r}")
    for key in ("rank", "world_size"):
        if not _is_int(doc[key]):
            raise SchemaError(f"{key}: expected an integer")
    if not isinstance(doc["tensors"], list) or not isinstance(doc["ops"], list):
        raise SchemaError("tensors and ops must be lists")
    tensors = []
    for i, td in enumerate(doc["tensors"]):
        _check_keys(td, {"id", "bytes"}, set(), f"tensors[{i}]")
        if not _is_int(td["id"]):
            raise SchemaError(f"tensors[{i}].id: expected an integer")
        tensors.append(TensorRef(td["id"], _nonneg_int(td["bytes"], f"tensors[{i}].bytes")))
    ops = tuple(_parse_op(od, f"ops[{i}]") for i, od in enumerate(doc["ops"]))
    trace = ExecutionTrace(doc["rank"], doc["world_size"], ops, tuple(tensors))
    return validate_trace(trace)


def parse_trace(data: bytes | str) -> ExecutionTrace:
    """Parse and validate a UTF-8 JSON trace document."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from exc
    return trace_from_dict(doc)


def trace_to_dict(trace: ExecutionTrace) -> dict:
    ops = []
    for op in trace.ops:
        d = {
            "id": op.id,
            "name": op.name,
            "inputs": list(op.inputs),
            "outputs": list(op.outputs),
            "stream": op.stream,
            "kernels": [{"kind": k.kind, "args": copy.deepcopy(k.args)} for k in op.kernels],
        }
        if op.collective_seq is not None:
            d["collective_seq"] = op.collective_seq
        ops.append(d)
    return {
        "schema_version": SCHEMA_VERSION,
        "rank": trace.rank,
        "world_size": trace.world_size,
        "tensors": [{"id": t.id, "bytes": t.bytes} for t in trace.tensors],
        "ops": ops,
    }


def canonical(doc: Any) -> str:
    """Canonical JSON text: sorted keys, no insignificant whitespace."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def dump_trace(trace: ExecutionTrace) -> str:
    return canonical(trace_to_dict(trace))


def load_trace(path) -> ExecutionTrace:
    return parse_trace(Path(path).read_bytes())


def load_world(paths: str | os.PathLike | Iterable) -> list[ExecutionTrace]:
    """Load a world from a directory of ``*.json`` trace files or an explicit file list.

    Traces are returned ordered by rank and checked with :func:`validate_world`.
    """
    if isinstance(paths, (str, os.PathLike)) and Path(paths).is_dir():
        files = sorted(p for p in Path(paths).glob("*.json") if _looks_like_trace(p))
    elif isinstance(paths, (str, os.PathLike)):
        files = [Path(paths)]
    else:
        files = [Path(p) for p in paths]
    traces = sorted((load_trace(f) for f in files), key=lambda t: t.rank)
    validate_world(traces)
    return traces


def _looks_like_trace(path: Path) -> bool:
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError):
        return False
    return isinstance(doc, dict) and "schema_version" in doc and "ops" in doc


def save_world(traces: Sequence[ExecutionTrace], directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in traces:
        p = directory / f"rank_{t.rank}.json"
        p.write_text(dump_trace(t) + "\n")
        paths.append(p)
    return paths


def validate_world(traces: Sequence[ExecutionTrace]) -> None:
    """Raise unless the traces form a consistent world.

    Ranks must be a permutation of ``0..N-1`` with ``world_size == N``, and every
    rank must issue the same collectives (by kind) at the same ``collective_seq``.
    """
    n = len(traces)
    if n == 0:
        return
    for t in traces:
        if t.world_size != n:
            raise WorldMismatch(f"rank {t.rank} declares world_size {t.world_size}, world has {n} traces")
    ranks = sorted(t.rank for t in traces)
    if ranks != list(range(n)):
        raise WorldMismatch(f"ranks {ranks} are not a permutation of 0..{n - 1}")
    reference = None
    for t in sorted(traces, key=lambda t: t.rank):
        sig = [(op.collective_seq, op.collective_kinds) for op in t.comm_ops]
        if reference is None:
            reference = (t.rank, sig)
            continue
        ref_rank, ref_sig = reference
        if len(sig) != len(ref_sig):
            raise CollectiveMismatch(
                f"rank {t.rank} has {len(sig)} communication ops, rank {ref_rank} has {len(ref_sig)}"
            )
        for (seq, kinds), (ref_seq, ref_kinds) in zip(sig, ref_sig):
            if seq != ref_seq or kinds != ref_kinds:
                raise CollectiveMismatch(
                    f"collective mismatch: rank {ref_rank} seq#{ref_seq} is {'+'.join(ref_kinds)}, "
                    f"rank {t.rank} seq#{seq} is {'+'.join(kinds)}"
                )


# ---------------------------------------------------------------------------
# programmatic construction
# ---------------------------------------------------------------------------


class TraceBuilder:
    """Incrementally assemble a trace; ``build()`` runs full validation.

    >>> b = TraceBuilder(rank=0, world_size=1)
    >>> x = b.tensor(1024)
    >>> _ = b.op("aten::relu", [KernelCall.fixed(5.0)], outputs=[x])
    >>> len(b.build().ops)
    1
    """

    def __init__(self, rank: int = 0, world_size: int = 1):
        self.rank = rank
        self.world_size = world_size
        self._tensors: list[TensorRef] = []
        self._ops: list[OpNode] = []
        self._next_seq = 0

    def tensor(self, nbytes: int = 0) -> int:
        tid = len(self._tensors)
        self._tensors.append(TensorRef(tid, int(nbytes)))
        return tid

    def op(self, name, kernels=(), inputs=(), outputs=(), stream=None, collective_seq=None) -> OpNode:
        kernels = tuple(kernels)
        if stream is None:
            stream = kernels[0].stream if kernels else COMPUTE
        if any(k.is_collective for k in kernels) and collective_seq is None:
            collective_seq = self._next_seq
        if collective_seq is not None:
            self._next_seq = collective_seq + 1
        node = OpNode(len(self._ops), name, tuple(inputs), tuple(outputs), kernels, stream, collective_seq)
        self._ops.append(node)
        return node

    def build(self) -> ExecutionTrace:
        # round-trip through the dict form so builder output obeys the file schema
        trace = ExecutionTrace(self.rank, self.world_size, tuple(self._ops), tuple(self._tensors))
        return trace_from_dict(trace_to_dict(trace))


# ---------------------------------------------------------------------------
# synthetic worlds
# ---------------------------------------------------------------------------

COMPUTE_OP_NAMES = (
    "aten::linear",
    "aten::addmm",
    "aten::bmm",
    "aten::relu",
    "aten::mul",
    "aten::copy_",
    "aten::cat",
    "aten::layer_norm",
)
VIEW_OP_NAMES = ("aten::view", "aten::reshape", "aten::t")
COMM_OP_NAMES = {"all_to_all": "nccl:all_to_all", "all_reduce": "nccl:all_reduce"}


@dataclass
class SynthSpec:
    """Generator config for :func:`synth_trace`.

    Range-valued fields are inclusive ``(lo, hi)`` pairs; a bare number means a
    fixed value.
    """

    ranks: int = 2
    ops_per_rank: int | tuple[int, int] = (20, 200)
    comm_density: float = 0.2
    compute_us: tuple[float, float] = (1.0, 50.0)
    comm_bytes: tuple[int, int] = (2**10, 2**24)
    kernels_per_op: tuple[int, int] = (1, 3)
    kernelless_prob: float = 0.1
    dep_prob: float = 0.5
    all_reduce_share: float = 0.5
    rank_jitter: float = 0.1  # relative spread of per-rank compute-op counts


def _span(v) -> tuple:
    return (v, v) if np.isscalar(v) else tuple(v)


def synth_trace(spec: SynthSpec, seed: int) -> list[ExecutionTrace]:
    """Generate a random but consistent world, deterministic in ``(spec, seed)``.

    All ranks share one collective schedule (kinds and payloads per seq) while
    their compute work differs, so ranks are imbalanced and wait at collectives.
    Compute ops read the latest collective's output with probability
    ``dep_prob``, which exercises the intra-rank sync path.
    """
    if spec.ranks < 1:
        raise ValueError("ranks must be >= 1")
    rng = np.random.default_rng(seed)
    n = spec.ranks
    lo, hi = _span(spec.ops_per_rank)
    n_ops = int(rng.integers(lo, hi + 1))
    n_comm = int(rng.binomial(n_ops, spec.comm_density)) if spec.comm_density > 0 else 0

    blo, bhi = _span(spec.comm_bytes)
    log_lo, log_hi = math.log2(max(blo, 1)), math.log2(max(bhi, 1))
    schedule = []
    for _ in range(n_comm):
        if rng.random() < spec.all_reduce_share:
            nbytes = int(2 ** rng.uniform(log_lo, log_hi))
            schedule.append(KernelCall.all_reduce(nbytes))
        else:
            m = (2 ** rng.uniform(log_lo, log_hi, size=(n, n))).astype(np.int64)
            np.fill_diagonal(m, 0)
            schedule.append(KernelCall.all_to_all(m.tolist()))

    clo, chi = _span(spec.compute_us)
    klo, khi = _span(spec.kernels_per_op)
    traces = []
    for rank in range(n):
        base = n_ops - n_comm
        jitter = int(round(base * spec.rank_jitter))
        n_compute = max(0, base + int(rng.integers(-jitter, jitter + 1)))
        total = n_compute + n_comm
        comm_slots = set(rng.choice(total, size=n_comm, replace=False).tolist()) if n_comm else set()

        b = TraceBuilder(rank, n)
        last_out = None
        last_comm_out = None
        seq = 0
        for slot in range(total):
            if slot in comm_slots:
                k = schedule[seq]
                out = b.tensor(int(rng.integers(1, 2**20)))
                inputs = [last_out] if last_out is not None else []
                b.op(COMM_OP_NAMES[k.kind], [k], inputs=inputs, outputs=[out], collective_seq=seq)
                seq += 1
                last_comm_out = out
                last_out = out
                continue
            inputs = []
            if last_comm_out is not None and rng.random() < spec.dep_prob:
                inputs.append(last_comm_out)
            if last_out is not None and last_out not in inputs and rng.random() < 0.5:
                inputs.append(last_out)
            out = b.tensor(int(rng.integers(1, 2**20)))
            if rng.random() < spec.kernelless_prob:
                name = VIEW_OP_NAMES[int(rng.integers(len(VIEW_OP_NAMES)))]
                b.op(name, [], inputs=inputs, outputs=[out], stream=COMPUTE)
            else:
                name = COMPUTE_OP_NAMES[int(rng.integers(len(COMPUTE_OP_NAMES)))]
                nk = int(rng.integers(klo, khi + 1))
                kernels = [KernelCall.fixed(round(float(rng.uniform(clo, chi)), 3)) for _ in range(nk)]
                b.op(name, kernels, inputs=inputs, outputs=[out])
            last_out = out
        traces.append(b.build())
    validate_world(traces)
    return traces
