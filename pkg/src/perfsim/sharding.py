"""Embedding-table sharders and simulator-driven sharding-config selection."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .errors import CapacityExceeded, NotCostBased, SchemaError
from .kernels import (
    EmbeddingTableConfig,
    KernelRegistry,
    ReuseFactorVector,
    random_table,
    rf_from_counts,
)
from .simulator import OverheadStats, kernel_times, simulate
from .trace import ExecutionTrace, KernelCall, TraceBuilder

CAPACITY_FRACTION = 0.8


class SharderKind(str, Enum):
    NAIVE = "naive"
    RANDOM = "random"
    SIZE_GREEDY = "size_greedy"
    LOOKUP_GREEDY = "lookup_greedy"
    NORM_LOOKUP_GREEDY = "norm_lookup_greedy"
    SIZE_LOOKUP_GREEDY = "size_lookup_greedy"

    def __str__(self):
        return self.value

    @property
    def cost_based(self) -> bool:
        return self not in (SharderKind.NAIVE, SharderKind.RANDOM)


def table_cost(kind: SharderKind | str, t: EmbeddingTableConfig) -> float:
    kind = SharderKind(kind)
    if kind is SharderKind.SIZE_GREEDY:
        return float(t.E)
    if kind is SharderKind.LOOKUP_GREEDY:
        return t.avg_L * t.D
    if kind is SharderKind.NORM_LOOKUP_GREEDY:
        return t.avg_L / t.E
    if kind is SharderKind.SIZE_LOOKUP_GREEDY:
        return t.avg_L * t.D * math.log10(t.E)
    raise NotCostBased(f"{kind.value} assigns tables by index, it has no cost function")


@dataclass
class ShardingPlan:
    sharder: str
    assignment: list[int]  # table idx -> rank
    per_rank_cost: list[float]
    per_rank_bytes: list[int]

    @property
    def ngpus(self) -> int:
        return len(self.per_rank_cost)

    def tables_on(self, rank: int) -> list[int]:
        return [i for i, r in enumerate(self.assignment) if r == rank]

    def to_dict(self) -> dict:
        return {
            "sharder": self.sharder,
            "assignment": list(self.assignment),
            "per_rank_cost": list(self.per_rank_cost),
            "per_rank_bytes": list(self.per_rank_bytes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShardingPlan":
        if set(d) != {"sharder", "assignment", "per_rank_cost", "per_rank_bytes"}:
            raise SchemaError("plan file needs exactly sharder, assignment, per_rank_cost, per_rank_bytes")
        return cls(d["sharder"], [int(r) for r in d["assignment"]], [float(c) for c in d["per_rank_cost"]],
                   [int(b) for b in d["per_rank_bytes"]])


def _check_capacity(per_rank_bytes, limit):
    if limit is None:
        return
    for r, b in enumerate(per_rank_bytes):
        if b > limit:
            raise CapacityExceeded(f"rank {r} holds {b} bytes of tables, limit is {limit:.0f}", rank=r)


def shard(
    tables: Sequence[EmbeddingTableConfig],
    ngpus: int,
    kind: SharderKind | str,
    seed: int = 0,
    dram_bytes: float | None = None,
) -> ShardingPlan:
    """Assign every table to one rank.

    Cost-based sharders place tables in descending cost order, each onto the
    currently least-loaded rank (lowest id on ties).  With ``dram_bytes`` set,
    a rank may hold at most 80% of it; greedy placement skips full ranks.
    ``per_rank_cost`` uses the sharder's own cost function, or the
    size-lookup cost for index-based sharders.
    """
    if ngpus < 1:
        raise ValueError("ngpus must be >= 1")
    kind = SharderKind(kind)
    limit = CAPACITY_FRACTION * dram_bytes if dram_bytes is not None else None
    cost_kind = kind if kind.cost_based else SharderKind.SIZE_LOOKUP_GREEDY
    costs = [table_cost(cost_kind, t) for t in tables]
    load = [0.0] * ngpus
    used = [0] * ngpus
    assignment = [0] * len(tables)

    if kind is SharderKind.NAIVE:
        assignment = [i % ngpus for i in range(len(tables))]
    elif kind is SharderKind.RANDOM:
        rng = np.random.default_rng(seed)
        assignment = [int(r) for r in rng.integers(0, ngpus, size=len(tables))]
    else:
        # stable sort keeps the original order among equal costs
        order = sorted(range(len(tables)), key=lambda i: -costs[i])
        for i in order:
            candidates = range(ngpus)
            if limit is not None:
                candidates = [r for r in range(ngpus) if used[r] + tables[i].nbytes <= limit]
                if not candidates:
                    worst = min(range(ngpus), key=lambda r: (used[r], r))
                    raise CapacityExceeded(
                        f"table {i} ({tables[i].nbytes} bytes) does not fit on any rank; "
                        f"rank {worst} would hold {used[worst] + tables[i].nbytes} bytes",
                        rank=worst,
                    )
            r = min(candidates, key=lambda r: (load[r], r))
            assignment[i] = r
            load[r] += costs[i]
            used[r] += tables[i].nbytes

    load = [0.0] * ngpus
    used = [0] * ngpus
    for i, r in enumerate(assignment):
        load[r] += costs[i]
        used[r] += tables[i].nbytes
    _check_capacity(used, limit)
    return ShardingPlan(kind.value, assignment, load, used)


# ---------------------------------------------------------------------------
# table files
# ---------------------------------------------------------------------------

TABLES_HEADER = ["idx", "E", "D", "avg_L", "row_bytes"]


def read_tables_csv(text: str) -> list[EmbeddingTableConfig]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != TABLES_HEADER:
        raise SchemaError(f"tables CSV header must be {','.join(TABLES_HEADER)}")
    rows = sorted(reader, key=lambda r: int(r["idx"]))
    if [int(r["idx"]) for r in rows] != list(range(len(rows))):
        raise SchemaError("table idx values must be 0..n-1")
    tables = []
    for r in rows:
        t = EmbeddingTableConfig(int(r["E"]), int(r["D"]), float(r["avg_L"]))
        if int(r["row_bytes"]) != t.row_bytes:
            raise SchemaError(f"table {r['idx']}: row_bytes {r['row_bytes']} != 4*D = {t.row_bytes}")
        tables.append(t)
    return tables


def write_tables_csv(tables: Sequence[EmbeddingTableConfig]) -> str:
    out = io.StringIO()
    out.write(",".join(TABLES_HEADER) + "\n")
    for i, t in enumerate(tables):
        out.write(f"{i},{t.E},{t.D},{t.avg_L!r},{t.row_bytes}\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# DLRM-like worlds for a plan
# ---------------------------------------------------------------------------


@dataclass
class DenseConfig:
    """Fixed costs of the data-parallel part of a DLRM iteration."""

    bottom_fwd_us: float = 150.0
    top_fwd_us: float = 300.0
    top_bwd_us: float = 600.0
    bottom_bwd_us: float = 300.0
    optimizer_us: float = 80.0
    grad_bytes: int = 8 * 2**20


def synth_lookup_counts(table: EmbeddingTableConfig, batch_size: int, rng: np.random.Generator):
    """Per-row access counts of one batch; row popularity falls off as 1/rank."""
    n = int(round(batch_size * table.avg_L))
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    # log-uniform row ids: P(row = k) ~ 1/(k+1)
    rows = np.exp(rng.random(n) * math.log(table.E)).astype(np.int64) - 1
    if table.E <= 4 * n:
        counts = np.bincount(rows)
        return counts[counts > 0]
    return np.unique(rows, return_counts=True)[1]


def rank_rf(counts_per_table, table_ids) -> ReuseFactorVector:
    """RF of one rank's batch; tables' row spaces are disjoint so counts concatenate."""
    parts = [counts_per_table[i] for i in table_ids]
    if not parts:
        return ReuseFactorVector.zeros()
    return rf_from_counts(np.concatenate(parts))


def build_dlrm_world(
    tables: Sequence[EmbeddingTableConfig],
    plan: ShardingPlan,
    batch_size: int,
    counts_per_table=None,
    dense: DenseConfig | None = None,
) -> list[ExecutionTrace]:
    """One iteration of a model-parallel-embedding / data-parallel-MLP job.

    Every rank looks up its shard, exchanges pooled embeddings with an
    all-to-all (rank r sends ``batch_size * sum(D) * 4`` bytes to each peer),
    runs the dense layers, sends gradients back with a second all-to-all,
    updates its tables, and all-reduces the dense gradients.
    """
    dense = dense or DenseConfig()
    n = plan.ngpus
    dims = [sum(tables[i].D for i in plan.tables_on(r)) for r in range(n)]
    send = [[0 if j == r else batch_size * dims[r] * 4 for j in range(n)] for r in range(n)]
    send_back = [list(col) for col in zip(*send)]
    world = []
    for r in range(n):
        mine = plan.tables_on(r)
        shard_tables = [tables[i] for i in mine]
        if counts_per_table is not None:
            rf = rank_rf(counts_per_table, mine)
        else:
            rf = ReuseFactorVector.zeros()
        b = TraceBuilder(rank=r, world_size=n)
        dense_in = b.tensor(batch_size * 13 * 4)
        indices = b.tensor(batch_size * 8 * max(len(mine), 1))
        pooled = b.tensor(batch_size * dims[r] * 4)
        if shard_tables:
            b.op("aten::embedding_bag", [KernelCall.embedding("fwd", shard_tables, batch_size, rf=rf)],
                 inputs=[indices], outputs=[pooled])
        else:
            b.op("aten::embedding_bag", [], inputs=[indices], outputs=[pooled])
        bottom = b.tensor(batch_size * 64 * 4)
        b.op("aten::linear", [KernelCall.fixed(dense.bottom_fwd_us)], inputs=[dense_in], outputs=[bottom])
        exchanged = b.tensor(batch_size * sum(dims) * 4)
        b.op("nccl:all_to_all", [KernelCall.all_to_all(send)], inputs=[pooled], outputs=[exchanged])
        top = b.tensor(batch_size * 4)
        b.op("aten::bmm", [KernelCall.fixed(dense.top_fwd_us)], inputs=[exchanged, bottom], outputs=[top])
        grad_top = b.tensor(batch_size * sum(dims) * 4)
        b.op("aten::linear_backward", [KernelCall.fixed(dense.top_bwd_us)], inputs=[top], outputs=[grad_top])
        grad_pooled = b.tensor(batch_size * dims[r] * 4)
        b.op("nccl:all_to_all", [KernelCall.all_to_all(send_back)], inputs=[grad_top], outputs=[grad_pooled])
        grad_bottom = b.tensor(dense.grad_bytes)
        b.op("aten::linear_backward", [KernelCall.fixed(dense.bottom_bwd_us)], inputs=[grad_top],
             outputs=[grad_bottom])
        updated = b.tensor(0)
        if shard_tables:
            b.op("aten::embedding_bag_backward",
                 [KernelCall.embedding("bwd", shard_tables, batch_size, rf=rf)],
                 inputs=[grad_pooled], outputs=[updated])
        else:
            b.op("aten::embedding_bag_backward", [], inputs=[grad_pooled], outputs=[updated])
        reduced = b.tensor(dense.grad_bytes)
        b.op("nccl:all_reduce", [KernelCall.all_reduce(dense.grad_bytes)], inputs=[grad_bottom], outputs=[reduced])
        stepped = b.tensor(0)
        b.op("aten::add_", [KernelCall.fixed(dense.optimizer_us)], inputs=[reduced], outputs=[stepped])
        world.append(b.build())
    return world


def make_predictor(
    tables,
    registry: KernelRegistry,
    overheads: OverheadStats | None,
    batch_size: int,
    counts_per_table=None,
    dense: DenseConfig | None = None,
    noise: float = 0.0,
    noise_seed: int = 0,
) -> Callable[[ShardingPlan], float]:
    """Closure mapping a plan to its simulated iteration time.

    With ``noise > 0`` every kernel latency is scaled by an independent
    factor drawn uniformly from ``[1 - noise, 1 + noise]``; the draw depends
    on ``(noise_seed, plan.sharder)`` only, so results are reproducible.
    """

    def predict(plan: ShardingPlan) -> float:
        world = build_dlrm_world(tables, plan, batch_size, counts_per_table, dense)
        times = kernel_times(world, registry)
        if noise > 0:
            rng = np.random.default_rng([noise_seed, *plan.sharder.encode()])
            times = [[tuple(t * (1.0 + rng.uniform(-noise, noise)) for t in op) for op in rank] for rank in times]
        return simulate(world, registry, overheads, times=times).total_us

    return predict


@dataclass
class SelectionResult:
    fastest: str
    predicted_us: dict[str, float]
    infeasible: dict[str, str] = field(default_factory=dict)  # sharder -> capacity error

    def to_dict(self) -> dict:
        return {"fastest": self.fastest, "predicted_us": dict(self.predicted_us), "infeasible": dict(self.infeasible)}


def select_config(
    tables,
    ngpus: int,
    candidates: Sequence[SharderKind | str],
    predictor: Callable[[ShardingPlan], float],
    seed: int = 0,
    dram_bytes: float | None = None,
) -> SelectionResult:
    """Shard with every candidate, predict each plan, return the fastest.

    Ties go to the earlier candidate.  Candidates whose plan violates the
    capacity bound are reported under ``infeasible`` and never selected.
    """
    if not candidates:
        raise ValueError("need at least one candidate sharder")
    predicted: dict[str, float] = {}
    infeasible: dict[str, str] = {}
    for kind in candidates:
        kind = SharderKind(kind)
        try:
            plan = shard(tables, ngpus, kind, seed=seed, dram_bytes=dram_bytes)
        except CapacityExceeded as exc:
            infeasible[kind.value] = str(exc)
            continue
        predicted[kind.value] = predictor(plan)
    if not predicted:
        raise CapacityExceeded("no candidate sharder produced a plan within capacity")
    fastest = None
    for name, t in predicted.items():
        if fastest is None or t < predicted[fastest]:
            fastest = name
    return SelectionResult(fastest, predicted, infeasible)


# ---------------------------------------------------------------------------
# selection experiment
# ---------------------------------------------------------------------------

SELECTION_CANDIDATES = (
    SharderKind.NAIVE,
    SharderKind.RANDOM,
    SharderKind.SIZE_GREEDY,
    SharderKind.LOOKUP_GREEDY,
    SharderKind.NORM_LOOKUP_GREEDY,
)


def random_task(rng: np.random.Generator, ngpus: int, heavy: bool = True, dram_bytes: float | None = None):
    """Tables for one task: about ``13 * ngpus`` tables, scaled by U(0.7, 1.3)."""
    n_tables = int(round(rng.uniform(0.7, 1.3) * ngpus * 13))
    budget = None if dram_bytes is None else 0.5 * CAPACITY_FRACTION * dram_bytes * ngpus
    while True:
        tables = [random_table(rng, heavy=True if heavy else None) for _ in range(n_tables)]
        if budget is None or sum(t.nbytes for t in tables) <= budget:
            return tables


@dataclass
class TaskOutcome:
    predicted_fastest: str
    actual_fastest: str
    predicted_us: dict[str, float]
    actual_us: dict[str, float]

    @property
    def abs_error(self) -> float:
        """Relative gap between the actual time of the chosen plan and the actual best."""
        best = self.actual_us[self.actual_fastest]
        return abs(self.actual_us[self.predicted_fastest] - best) / best

    @property
    def success(self) -> bool:
        return self.predicted_fastest == self.actual_fastest or self.abs_error < 0.10


def selection_experiment(
    registry: KernelRegistry,
    overheads: OverheadStats | None = None,
    n_tasks: int = 20,
    ngpus: int = 4,
    batch_size: int = 4096,
    noise: float = 0.05,
    seed: int = 0,
    candidates: Sequence[SharderKind] = SELECTION_CANDIDATES,
    dram_bytes: float | None = None,
) -> list[TaskOutcome]:
    """Select a sharder per random heavy task and judge it against a noisy "actual" run."""
    outcomes = []
    for task in range(n_tasks):
        rng = np.random.default_rng([seed, task])
        tables = random_task(rng, ngpus, heavy=True, dram_bytes=dram_bytes)
        counts = [synth_lookup_counts(t, batch_size, rng) for t in tables]
        predictor = make_predictor(tables, registry, overheads, batch_size, counts)
        actual = make_predictor(tables, registry, overheads, batch_size, counts, noise=noise, noise_seed=seed * 7919 + task)
        chosen = select_config(tables, ngpus, candidates, predictor, seed=task, dram_bytes=dram_bytes)
        actual_us = {}
        for name in chosen.predicted_us:
            actual_us[name] = actual(shard(tables, ngpus, name, seed=task, dram_bytes=dram_bytes))
        actual_best = min(actual_us, key=lambda k: (actual_us[k], list(actual_us).index(k)))
        outcomes.append(TaskOutcome(chosen.fastest, actual_best, chosen.predicted_us, actual_us))
    return outcomes


def dump_plan(plan: ShardingPlan) -> str:
    return json.dumps(plan.to_dict(), sort_keys=True, indent=2)
