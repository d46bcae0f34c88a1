"""Critical-path simulation of a multi-rank training iteration.

Each rank keeps a CPU clock plus two GPU stream fronts: ``T_cp`` for
compute/memory kernels and ``T_cm`` for collectives.  Ops are traversed in
trace order.  Two synchronisations couple the clocks:

* intra-rank: an op that reads the output of the last collective, or that is
  itself a collective, first aligns both stream fronts to their maximum;
* inter-rank: after a collective's kernels, ``T_cm`` of every rank is set to
  the maximum over ranks for that ``collective_seq``.

:func:`simulate` runs ranks as generators that pause at each collective;
:func:`oracle_simulate` re-derives the same timeline with an event queue and
per-stream command queues, and exists to cross-check the former.
"""

from __future__ import annotations

import heapq
import itertools
import json
import threading
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import CollectiveMismatch, SchemaError
from .kernels import KernelRegistry, kernel_latency
from .trace import COLLECTIVE_KINDS, COMMUNICATION, COMPUTE, STREAMS, ExecutionTrace, depends_on

KERNEL_GAP_US = 1.0

CATEGORIES = ("embedding", "gemm", "memory", "comm", "other")
_GEMM_PATTERNS = ("mm", "linear", "matmul", "gemm", "conv")
_MEMORY_PATTERNS = ("copy", "memcpy", "memset", "cat", "transpose", "contiguous", "clone", "permute", "stack")


@dataclass(frozen=True)
class Overhead:
    """CPU-side costs (µs) of one op.

    T1 op call, T2 before the first kernel, T3 after the last kernel,
    T4 per kernel launch, T5 between kernels (or the whole cost of a
    kernel-less op).
    """

    T1: float = 0.0
    T2: float = 0.0
    T3: float = 0.0
    T4: float = 0.0
    T5: float = 0.0

    def __post_init__(self):
        if min(self.T1, self.T2, self.T3, self.T4, self.T5) < 0:
            raise ValueError("overheads must be non-negative")


@dataclass
class OverheadStats:
    default: Overhead = field(default_factory=Overhead)
    ops: dict[str, Overhead] = field(default_factory=dict)

    def lookup(self, name: str) -> Overhead:
        return self.ops.get(name, self.default)

    def to_dict(self) -> dict:
        return {"default": asdict(self.default), "ops": {k: asdict(v) for k, v in sorted(self.ops.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "OverheadStats":
        if not isinstance(d, dict) or set(d) - {"default", "ops"}:
            raise SchemaError("overheads file must be an object with 'default' and 'ops'")

        def one(x):
            if set(x) != {"T1", "T2", "T3", "T4", "T5"}:
                raise SchemaError(f"overhead record needs exactly T1..T5, got {sorted(x)}")
            return Overhead(**{k: float(v) for k, v in x.items()})

        return cls(
            default=one(d["default"]) if "default" in d else Overhead(),
            ops={k: one(v) for k, v in (d.get("ops") or {}).items()},
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def synth_overheads(op_names: Sequence[str], seed: int = 0, scale_us: float = 5.0) -> OverheadStats:
    """Random but reproducible per-op CPU overheads, for generated worlds."""
    rng = np.random.default_rng(seed)
    ops = {}
    for name in sorted(set(op_names)):
        t = np.round(rng.uniform(0.1, 1.0, size=5) * scale_us, 3)
        ops[name] = Overhead(*(float(v) for v in t))
    return OverheadStats(default=Overhead(*(scale_us / 2,) * 5), ops=ops)


@dataclass
class RankState:
    cpu_time: float = 0.0
    T_cp: float = 0.0
    T_cm: float = 0.0
    gpu_time: float = 0.0

    @property
    def total(self) -> float:
        return max(self.T_cm, self.T_cp, self.cpu_time)


@dataclass
class PredictionReport:
    total_us: float
    gpu_active_us: float
    per_rank: list[RankState]
    breakdown: list[dict[str, dict[str, float]]]  # [rank][stream][category] -> µs
    collective_T_cm: dict[int, list[float]] = field(default_factory=dict)  # seq -> per-rank T_cm after sync

    def to_dict(self) -> dict:
        return {
            "total_us": self.total_us,
            "gpu_active_us": self.gpu_active_us,
            "per_rank": [asdict(s) for s in self.per_rank],
            "breakdown": self.breakdown,
        }


def categorize(op_name: str, kind: str) -> str:
    """Breakdown category of one kernel, by kernel kind first and op name second."""
    if kind in COLLECTIVE_KINDS:
        return "comm"
    if kind.startswith("embedding"):
        return "embedding"
    name = op_name.lower()
    if "embedding" in name:
        return "embedding"
    if any(p in name for p in _GEMM_PATTERNS):
        return "gemm"
    if kind == "roofline" or any(p in name for p in _MEMORY_PATTERNS):
        return "memory"
    return "other"


def kernel_times(traces: Sequence[ExecutionTrace], registry: KernelRegistry) -> list[list[tuple[float, ...]]]:
    """Predicted latency of every kernel, indexed ``[rank][op][kernel]``."""
    return [[tuple(kernel_latency(registry, k) for k in op.kernels) for op in t.ops] for t in traces]


def _run_rank(trace, times, overheads, gap, state: RankState, account: Callable):
    """Traverse one rank's ops; yields the ``collective_seq`` after each collective's kernels."""
    last_comm_op = None
    for op, op_times in zip(trace.ops, times):
        ov = overheads.lookup(op.name)
        on_comm_stream = op.stream == COMMUNICATION
        if op.is_comm or (last_comm_op is not None and depends_on(op, last_comm_op)):
            last_comm_op = None
            state.T_cm = state.T_cp = max(state.T_cm, state.T_cp)
        state.cpu_time += ov.T1
        if op.kernels:
            state.cpu_time += ov.T2
            last = len(op.kernels) - 1
            for j, (k, t_k) in enumerate(zip(op.kernels, op_times)):
                if on_comm_stream:
                    state.T_cm = max(state.T_cm + gap, state.cpu_time + ov.T4 / 2) + t_k
                else:
                    state.T_cp = max(state.T_cp + gap, state.cpu_time + ov.T4 / 2) + t_k
                state.gpu_time += t_k
                account(op, k, t_k)
                state.cpu_time += ov.T4
                if j < last:
                    state.cpu_time += ov.T5
            if op.is_comm:
                yield op.collective_seq
            state.cpu_time += ov.T3
        else:
            state.cpu_time += ov.T5
        if op.is_comm:
            last_comm_op = op


def _empty_breakdown():
    return {s: {c: 0.0 for c in CATEGORIES} for s in STREAMS}


def simulate(
    traces: Sequence[ExecutionTrace],
    registry: KernelRegistry | None,
    overheads: OverheadStats | None = None,
    *,
    times=None,
    kernel_gap_us: float = KERNEL_GAP_US,
    parallel: bool = False,
) -> PredictionReport:
    """Predict the per-iteration time of a world.

    ``times`` may supply precomputed kernel latencies (as returned by
    :func:`kernel_times`) in place of the registry, e.g. to inject noise.
    With ``parallel=True`` every rank runs on its own thread and meets the
    others at a barrier per collective; results are identical to the staged
    single-threaded traversal.
    """
    traces = sorted(traces, key=lambda t: t.rank)
    overheads = overheads or OverheadStats()
    if times is None:
        times = kernel_times(traces, registry)
    n = len(traces)
    states = [RankState() for _ in range(n)]
    breakdown = [_empty_breakdown() for _ in range(n)]
    sync_log: dict[int, list[float]] = {}

    def accountant(r):
        def account(op, k, t_k):
            breakdown[r][k.stream][categorize(op.name, k.kind)] += t_k
        return account

    procs = [_run_rank(t, times[r], overheads, kernel_gap_us, states[r], accountant(r)) for r, t in enumerate(traces)]
    if parallel and n > 1:
        _drive_threads(procs, states, sync_log)
    else:
        _drive_staged(procs, states, sync_log)

    for r in range(n):
        fronts = {COMPUTE: states[r].T_cp, COMMUNICATION: states[r].T_cm}
        for s in STREAMS:
            busy = sum(breakdown[r][s][c] for c in CATEGORIES)
            breakdown[r][s]["idle"] = fronts[s] - busy
    return PredictionReport(
        total_us=max((s.total for s in states), default=0.0),
        gpu_active_us=max((s.gpu_time for s in states), default=0.0),
        per_rank=states,
        breakdown=breakdown,
        collective_T_cm=sync_log,
    )


def _sync(seqs, states, sync_log):
    if len(set(seqs)) != 1:
        raise CollectiveMismatch(f"ranks reached different collectives: {seqs}")
    front = max(s.T_cm for s in states)
    for s in states:
        s.T_cm = front
    sync_log[seqs[0]] = [s.T_cm for s in states]


def _drive_staged(procs, states, sync_log):
    while True:
        seqs = [next(p, None) for p in procs]
        if all(s is None for s in seqs):
            return
        if any(s is None for s in seqs):
            raise CollectiveMismatch(f"some ranks finished while others wait at a collective: {seqs}")
        _sync(seqs, states, sync_log)


def _drive_threads(procs, states, sync_log):
    n = len(procs)
    arrived = [None] * n
    errors = []

    def action():
        seqs = list(arrived)
        if all(s is None for s in seqs):
            return
        try:
            if any(s is None for s in seqs):
                raise CollectiveMismatch(f"some ranks finished while others wait at a collective: {seqs}")
            _sync(seqs, states, sync_log)
        except CollectiveMismatch as exc:
            errors.append(exc)
            raise

    barrier = threading.Barrier(n, action=action)

    def worker(r):
        try:
            for seq in procs[r]:
                arrived[r] = seq
                barrier.wait()
            # final rendezvous: None marks a finished rank
            arrived[r] = None
            barrier.wait()
        except (threading.BrokenBarrierError, CollectiveMismatch):
            return

    threads = [threading.Thread(target=worker, args=(r,)) for r in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]


def baseline_predict(traces: Sequence[ExecutionTrace], registry: KernelRegistry | None, *, times=None) -> float:
    """Largest per-stream sum of kernel time over all ranks; ignores overheads and waiting."""
    traces = sorted(traces, key=lambda t: t.rank)
    if times is None:
        times = kernel_times(traces, registry)
    best = 0.0
    for trace, rank_times in zip(traces, times):
        sums = {COMPUTE: 0.0, COMMUNICATION: 0.0}
        for op, op_times in zip(trace.ops, rank_times):
            for k, t_k in zip(op.kernels, op_times):
                sums[k.stream] += t_k
        best = max(best, *sums.values())
    return best


# ---------------------------------------------------------------------------
# event-queue oracle
# ---------------------------------------------------------------------------


class _Stream:
    def __init__(self, rank, name):
        self.rank = rank
        self.name = name
        self.queue: deque = deque()
        self.free = 0.0
        self.busy = False
        self.blocked = False


@dataclass
class OracleResult:
    total_us: float
    cpu_time: list[float]
    T_cp: list[float]
    T_cm: list[float]
    barrier_release: dict[int, float]  # seq -> common comm-stream time


class _EventSim:
    """Discrete-event model: one CPU actor and two stream actors per rank.

    The CPU actor walks ops and pushes commands (kernel launches, join
    markers, barrier markers) onto stream queues.  A stream starts a kernel
    no earlier than one gap after it went idle and no earlier than its launch
    time.  A join marker holds both streams of a rank until each has drained
    to it, then restarts both at the later of the two.  A barrier marker holds
    the comm stream until every rank posts the same collective.
    """

    def __init__(self, traces, times, overheads, gap):
        self.traces = traces
        self.times = times
        self.ov = overheads
        self.gap = gap
        n = len(traces)
        self.streams = [{s: _Stream(r, s) for s in STREAMS} for r in range(n)]
        self.cpu = [0.0] * n
        self.next_op = [0] * n
        self.last_comm = [None] * n
        self.joins: dict = {}
        self.barriers: dict[int, dict[int, float]] = {}
        self.released: dict[int, float] = {}
        self.events: list = []
        self.counter = itertools.count()
        self.join_ids = itertools.count()

    def push(self, time, handler, *args):
        heapq.heappush(self.events, (time, next(self.counter), handler, args))

    def run(self) -> OracleResult:
        for r in range(len(self.traces)):
            self.push(0.0, self.cpu_step, r)
        while self.events:
            _, _, handler, args = heapq.heappop(self.events)
            handler(*args)
        for per_rank in self.streams:
            for st in per_rank.values():
                if st.queue or st.busy:
                    raise CollectiveMismatch(f"rank {st.rank} {st.name} stream deadlocked at {st.queue[0]!r}")
        totals = [
            max(self.streams[r][COMMUNICATION].free, self.streams[r][COMPUTE].free, self.cpu[r])
            for r in range(len(self.traces))
        ]
        return OracleResult(
            total_us=max(totals, default=0.0),
            cpu_time=list(self.cpu),
            T_cp=[s[COMPUTE].free for s in self.streams],
            T_cm=[s[COMMUNICATION].free for s in self.streams],
            barrier_release=dict(self.released),
        )

    # CPU actor -----------------------------------------------------------

    def cpu_step(self, r):
        trace = self.traces[r]
        i = self.next_op[r]
        op = trace.ops[i]
        ov = self.ov.lookup(op.name)
        streams = self.streams[r]
        last = self.last_comm[r]
        if op.is_comm or (last is not None and depends_on(op, last)):
            self.last_comm[r] = None
            token = next(self.join_ids)
            self.joins[token] = {}
            for st in streams.values():
                st.queue.append(("join", token))
        cpu = self.cpu[r] + ov.T1
        if op.kernels:
            cpu += ov.T2
            target = streams[op.stream]
            n_k = len(op.kernels)
            for j, t_k in enumerate(self.times[r][i]):
                target.queue.append(("kernel", cpu + ov.T4 / 2, t_k))
                cpu += ov.T4
                if j < n_k - 1:
                    cpu += ov.T5
            if op.is_comm:
                target.queue.append(("barrier", op.collective_seq))
            cpu += ov.T3
        else:
            cpu += ov.T5
        if op.is_comm:
            self.last_comm[r] = op
        self.cpu[r] = cpu
        for st in streams.values():
            self.advance(st)
        self.next_op[r] = i + 1
        if i + 1 < len(trace.ops):
            self.push(cpu, self.cpu_step, r)

    # stream actors -------------------------------------------------------

    def advance(self, st: _Stream):
        while not st.busy and not st.blocked and st.queue:
            cmd = st.queue[0]
            if cmd[0] == "kernel":
                _, launch, t_k = st.queue.popleft()
                end = max(st.free + self.gap, launch) + t_k
                st.busy = True
                self.push(end, self.kernel_end, st, end)
            elif cmd[0] == "join":
                arrivals = self.joins[cmd[1]]
                arrivals[st.name] = st.free
                st.blocked = True
                if len(arrivals) == len(STREAMS):
                    self.release_join(st.rank, cmd[1])
                return
            else:
                seq = cmd[1]
                posted = self.barriers.setdefault(seq, {})
                posted[st.rank] = st.free
                st.blocked = True
                if len(posted) == len(self.traces):
                    self.push(max(posted.values()), self.release_barrier, seq)
                return

    def kernel_end(self, st: _Stream, end: float):
        st.free = end
        st.busy = False
        self.advance(st)

    def release_join(self, r, token):
        arrivals = self.joins.pop(token)
        front = max(arrivals.values())
        for st in self.streams[r].values():
            assert st.queue[0] == ("join", token)
            st.queue.popleft()
            st.free = front
            st.blocked = False
        for st in self.streams[r].values():
            self.advance(st)

    def release_barrier(self, seq):
        posted = self.barriers.pop(seq)
        front = max(posted.values())
        self.released[seq] = front
        for r in range(len(self.traces)):
            st = self.streams[r][COMMUNICATION]
            if not st.queue or st.queue[0] != ("barrier", seq):
                raise CollectiveMismatch(f"rank {r} is not waiting at collective {seq}")
            st.queue.popleft()
            st.free = front
            st.blocked = False
            self.advance(st)


def oracle_run(traces, registry, overheads=None, *, times=None, kernel_gap_us: float = KERNEL_GAP_US) -> OracleResult:
    traces = sorted(traces, key=lambda t: t.rank)
    if times is None:
        times = kernel_times(traces, registry)
    return _EventSim(traces, times, overheads or OverheadStats(), kernel_gap_us).run()


def oracle_simulate(traces, registry, overheads=None, *, times=None, kernel_gap_us: float = KERNEL_GAP_US) -> float:
    """Total iteration time from the event-queue model; should equal ``simulate(...).total_us``."""
    return oracle_run(traces, registry, overheads, times=times, kernel_gap_us=kernel_gap_us).total_us


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def format_breakdown(report: PredictionReport) -> str:
    """Per-rank, per-stream time shares as a fixed-width text table."""
    cols = CATEGORIES + ("idle",)
    lines = [
        f"total_us      {report.total_us:.3f}",
        f"gpu_active_us {report.gpu_active_us:.3f}",
        "",
        f"{'rank':>4} {'stream':<13} {'span_us':>12} " + " ".join(f"{c:>9}" for c in cols),
    ]
    for r, (state, per_stream) in enumerate(zip(report.per_rank, report.breakdown)):
        for stream, span in ((COMPUTE, state.T_cp), (COMMUNICATION, state.T_cm)):
            cells = per_stream[stream]
            shares = [100.0 * cells[c] / span if span > 0 else 0.0 for c in cols]
            lines.append(f"{r:>4} {stream:<13} {span:>12.3f} " + " ".join(f"{s:>8.1f}%" for s in shares))
    return "\n".join(lines)
