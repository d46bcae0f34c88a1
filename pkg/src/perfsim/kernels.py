"""Per-kernel latency models.

* reuse factors (RF): a 17-bin histogram-of-histogram of embedding lookup
  indices describing how often rows are revisited inside one batch;
* a small numpy MLP regressor used for embedding lookups (``elf``/``elb``)
  and other learned ops such as ``layer_norm``;
* a roofline model for elementwise ops;
* :func:`kernel_latency`, which dispatches a :class:`~perfsim.trace.KernelCall`
  to the right model.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import comm
from .errors import (
    EmptyDataset,
    FeatureMismatch,
    NonPositiveLatency,
    SchemaError,
    UnknownModel,
    ZeroWork,
)
from .metrics import gmae
from .trace import KernelCall

NUM_RF_BINS = 17
HEAVY_TABLE_L = 20.0
FP32_BYTES = 4


@dataclass(frozen=True)
class EmbeddingTableConfig:
    E: int
    D: int
    avg_L: float

    def __post_init__(self):
        if self.E < 1 or self.D < 1 or self.avg_L < 0:
            raise ValueError(f"invalid table E={self.E}, D={self.D}, avg_L={self.avg_L}")

    @property
    def row_bytes(self) -> int:
        return self.D * FP32_BYTES

    @property
    def nbytes(self) -> int:
        return self.E * self.row_bytes


def is_heavy(table: EmbeddingTableConfig, threshold: float = HEAVY_TABLE_L) -> bool:
    return table.avg_L >= threshold


# ---------------------------------------------------------------------------
# reuse factors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReuseFactorVector:
    bins: tuple[float, ...]

    def __post_init__(self):
        if any(not 0.0 <= b <= 1.0 for b in self.bins):
            raise ValueError("reuse-factor bins must lie in [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array(self.bins, dtype=float)

    @classmethod
    def zeros(cls, num_bins: int = NUM_RF_BINS) -> "ReuseFactorVector":
        return cls((0.0,) * num_bins)


def count_histogram(indices: Iterable[Iterable[int]]) -> dict[int, int]:
    """Map access count -> number of distinct indices accessed that many times."""
    per_index = Counter(i for sample in indices for i in sample)
    return dict(sorted(Counter(per_index.values()).items()))


def rf_bin(count: int, num_bins: int = NUM_RF_BINS) -> int:
    """Bin of an access count; edges are [0,1), [1,2), [2,4), ..., open above 2**(num_bins-2)."""
    if count < 1:
        return 0
    return min(count.bit_length(), num_bins - 1)


def rf_from_counts(counts, num_bins: int = NUM_RF_BINS) -> ReuseFactorVector:
    """RF from per-index access counts (one entry per distinct accessed index)."""
    counts = np.asarray(counts, dtype=np.int64)
    counts = counts[counts > 0]
    if counts.size == 0:
        return ReuseFactorVector.zeros(num_bins)
    # bit_length(c) == floor(log2 c) + 1 for c >= 1
    idx = np.minimum(np.floor(np.log2(counts)).astype(np.int64) + 1, num_bins - 1)
    hist = np.bincount(idx, minlength=num_bins).astype(float)
    return ReuseFactorVector(tuple((hist / counts.size).tolist()))


def compute_rf(indices: Iterable[Iterable[int]], num_bins: int = NUM_RF_BINS) -> ReuseFactorVector:
    """Reuse factors of one batch of lookups.

    Counts accesses per distinct index, histograms those counts into
    exponent-of-2 bins and normalises by the number of distinct indices.
    """
    flat = [int(i) for sample in indices for i in sample]
    if not flat:
        return ReuseFactorVector.zeros(num_bins)
    _, counts = np.unique(np.asarray(flat, dtype=np.int64), return_counts=True)
    return rf_from_counts(counts, num_bins)


# ---------------------------------------------------------------------------
# embedding-lookup features
# ---------------------------------------------------------------------------

FEATURE_SPEC: tuple[str, ...] = (
    "log2_batch_size",
    "num_tables",
    "sum_log2E",
    "mean_log2E",
    "max_log2E",
    "mean_D",
    "mean_L",
    "log2_total_lookups",
) + tuple(f"rf_{i}" for i in range(NUM_RF_BINS))


def el_features(tables: Sequence[EmbeddingTableConfig], batch_size: int, rf) -> np.ndarray:
    """Feature vector for an embedding lookup over ``tables`` (order-independent)."""
    if not tables:
        raise ValueError("tables must be non-empty")
    log_e = np.log2([t.E for t in tables])
    bins = np.asarray(getattr(rf, "bins", rf), dtype=float)
    if bins.size != NUM_RF_BINS:
        raise FeatureMismatch(f"expected {NUM_RF_BINS} RF bins, got {bins.size}")
    head = [
        math.log2(batch_size),
        float(len(tables)),
        float(log_e.sum()),
        float(log_e.mean()),
        float(log_e.max()),
        float(np.mean([t.D for t in tables])),
        float(np.mean([t.avg_L for t in tables])),
        math.log2(1.0 + batch_size * sum(t.avg_L for t in tables)),
    ]
    return np.concatenate([head, bins])


def features_from_csv_row(row: dict) -> np.ndarray:
    n = float(row["num_tables"])
    sum_log_e = float(row["sum_logE"])
    head = [
        math.log2(float(row["batch_size"])),
        n,
        sum_log_e,
        sum_log_e / n,
        float(row["max_logE"]),
        float(row["mean_D"]),
        float(row["mean_L"]),
        math.log2(1.0 + float(row["total_lookups"])),
    ]
    return np.array(head + [float(row[f"rf_{i}"]) for i in range(NUM_RF_BINS)])


EL_CSV_HEADER = (
    ["batch_size", "num_tables", "sum_logE", "max_logE", "mean_D", "mean_L", "total_lookups"]
    + [f"rf_{i}" for i in range(NUM_RF_BINS)]
    + ["latency_us"]
)


def read_el_csv(text: str) -> list[tuple[np.ndarray, float]]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != EL_CSV_HEADER:
        raise SchemaError(f"EL CSV header must be {','.join(EL_CSV_HEADER)}")
    try:
        return [(features_from_csv_row(r), float(r["latency_us"])) for r in reader]
    except (ValueError, ZeroDivisionError) as exc:
        raise SchemaError(str(exc)) from exc


def write_el_csv(rows: Iterable[tuple[np.ndarray, float]]) -> str:
    out = io.StringIO()
    out.write(",".join(EL_CSV_HEADER) + "\n")
    for x, t in rows:
        x = np.asarray(x, dtype=float)
        vals = [2.0 ** x[0], x[1], x[2], x[4], x[5], x[6], 2.0 ** x[7] - 1.0, *x[8:], t]
        out.write(",".join(f"{v:.17g}" for v in vals) + "\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# MLP regressor
# ---------------------------------------------------------------------------


@dataclass
class MlpModel:
    """Fully connected ReLU network predicting log-latency from raw features.

    ``weights[i]`` has shape ``(layer_dims[i], layer_dims[i+1])``; input
    standardisation is folded into the first layer at the end of training.
    """

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    feature_spec: list[str]
    target_transform: str = "log"

    def __post_init__(self):
        if self.target_transform != "log":
            raise ValueError(f"unsupported target transform {self.target_transform!r}")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("layer count does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[i], self.layer_dims[i + 1]) or b.shape != (self.layer_dims[i + 1],):
                raise ValueError(f"layer {i} shape {w.shape}/{b.shape} incompatible with layer_dims")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")
        if len(self.feature_spec) != self.layer_dims[0]:
            raise ValueError("feature_spec length must equal the input width")

    def to_dict(self) -> dict:
        return {
            "feature_spec": list(self.feature_spec),
            "layer_dims": list(self.layer_dims),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "target_transform": self.target_transform,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        required = {"feature_spec", "layer_dims", "weights", "biases", "target_transform"}
        missing = required - set(d)
        if missing or set(d) - required - {"metadata"}:
            raise SchemaError(f"MLP model file: missing {sorted(missing)} or unexpected fields")
        try:
            return cls(
                layer_dims=[int(v) for v in d["layer_dims"]],
                weights=[np.array(w, dtype=float).reshape(len(w), -1) for w in d["weights"]],
                biases=[np.array(b, dtype=float) for b in d["biases"]],
                feature_spec=list(d["feature_spec"]),
                target_transform=d["target_transform"],
            )
        except ValueError as exc:
            raise SchemaError(f"MLP model file: {exc}") from exc


def _forward(weights, biases, X):
    """Returns the output column and the per-layer activations (inputs included)."""
    acts = [X]
    h = X
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h[:, 0], acts


def mlp_loss_and_grads(weights, biases, X, y):
    """Mean squared error and its gradients w.r.t. every weight and bias."""
    out, acts = _forward(weights, biases, X)
    n = X.shape[0]
    r = out - y
    loss = float(r @ r) / n
    delta = (2.0 / n) * r[:, None]
    gw = [None] * len(weights)
    gb = [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ weights[i].T) * (acts[i] > 0)
    return loss, gw, gb


@dataclass
class MlpHyper:
    hidden: tuple[int, ...] = (128, 128)
    lr: float = 0.05
    epochs: int = 200
    seed: int = 0
    batch_size: int = 32
    lr_decay: float = 0.01  # lr_t = lr / (1 + lr_decay * epoch)
    weight_decay: float = 0.01  # L2 shrinkage, w -= lr * wd * w each step
    split: float = 0.8


@dataclass
class TrainResult:
    model: MlpModel
    holdout_gmae: float
    losses: list[float] = field(default_factory=list)  # full-train-set MSE per epoch, index 0 = before training


def _standardize(a):
    mu = a.mean(axis=0)
    sd = a.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    return mu, sd


def mlp_train(dataset, hyper: MlpHyper | dict | None = None, feature_spec: Sequence[str] | None = None) -> TrainResult:
    """Train on ``(features, latency_us)`` rows with plain mini-batch SGD on log-latency.

    Rows are split ``hyper.split`` / rest into train and held-out sets; the
    returned GMAE is measured on the held-out rows.
    """
    if isinstance(hyper, dict):
        hyper = MlpHyper(**hyper)
    hyper = hyper or MlpHyper()
    rows = list(dataset)
    if len(rows) < 32:
        raise EmptyDataset(f"need at least 32 rows, got {len(rows)}")
    X = np.array([np.asarray(x, dtype=float) for x, _ in rows])
    t = np.array([float(v) for _, v in rows])
    if np.any(t <= 0):
        raise NonPositiveLatency("all latencies must be positive")
    if feature_spec is None:
        feature_spec = FEATURE_SPEC if X.shape[1] == len(FEATURE_SPEC) else [f"f{i}" for i in range(X.shape[1])]
    if len(feature_spec) != X.shape[1]:
        raise FeatureMismatch(f"feature_spec has {len(feature_spec)} names, rows have {X.shape[1]} features")

    rng = np.random.default_rng(hyper.seed)
    perm = rng.permutation(len(rows))
    n_train = int(round(hyper.split * len(rows)))
    tr, te = perm[:n_train], perm[n_train:]

    y = np.log(t)
    x_mu, x_sd = _standardize(X[tr])
    y_mu, y_sd = _standardize(y[tr])
    Xs = (X[tr] - x_mu) / x_sd
    ys = (y[tr] - y_mu) / y_sd
    if np.ptp(y[tr]) == 0.0:
        y_mu, ys = y[tr][0], np.zeros_like(ys)

    dims = [X.shape[1], *hyper.hidden, 1]
    weights = [rng.normal(0.0, math.sqrt(2.0 / dims[i]), size=(dims[i], dims[i + 1])) for i in range(len(dims) - 1)]
    # zero output layer: training starts from the mean log-latency
    weights[-1][:] = 0.0
    biases = [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)]

    losses = [mlp_loss_and_grads(weights, biases, Xs, ys)[0]]
    for epoch in range(hyper.epochs):
        lr = hyper.lr / (1.0 + hyper.lr_decay * epoch)
        order = rng.permutation(n_train)
        for start in range(0, n_train, hyper.batch_size):
            batch = order[start:start + hyper.batch_size]
            _, gw, gb = mlp_loss_and_grads(weights, biases, Xs[batch], ys[batch])
            for i in range(len(weights)):
                weights[i] -= lr * (gw[i] + hyper.weight_decay * weights[i])
                biases[i] -= lr * gb[i]
        losses.append(mlp_loss_and_grads(weights, biases, Xs, ys)[0])
        if not math.isfinite(losses[-1]):
            raise ValueError(f"training diverged at epoch {epoch} (lr={hyper.lr}); lower the learning rate")

    # fold standardisation into the first and last layers
    biases[0] = biases[0] - (x_mu / x_sd) @ weights[0]
    weights[0] = weights[0] / x_sd[:, None]
    weights[-1] = weights[-1] * y_sd
    biases[-1] = biases[-1] * y_sd + y_mu

    model = MlpModel(dims, weights, biases, list(feature_spec))
    if te.size:
        score = gmae(mlp_predict_batch(model, X[te]), t[te])
    else:
        score = float("nan")
    return TrainResult(model, score, losses)


def mlp_predict_batch(model: MlpModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != len(model.feature_spec):
        raise FeatureMismatch(f"model expects {len(model.feature_spec)} features, got {X.shape[1]}")
    out, _ = _forward(model.weights, model.biases, X)
    return np.exp(out)


def mlp_predict(model: MlpModel, features) -> float:
    """Predicted latency in µs for one feature vector."""
    return float(mlp_predict_batch(model, features)[0])


# ---------------------------------------------------------------------------
# roofline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeviceProfile:
    peak_flops: float  # FLOP/µs
    mem_bw: float  # bytes/µs
    dram_bytes: float

    def __post_init__(self):
        if not (self.peak_flops > 0 and self.mem_bw > 0 and self.dram_bytes > 0):
            raise ValueError("device profile values must be positive")

    def to_dict(self) -> dict:
        return {"peak_flops": float(self.peak_flops), "mem_bw": float(self.mem_bw), "dram_bytes": float(self.dram_bytes)}

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceProfile":
        if set(d) != {"peak_flops", "mem_bw", "dram_bytes"}:
            raise SchemaError("device profile needs exactly peak_flops, mem_bw, dram_bytes")
        return cls(float(d["peak_flops"]), float(d["mem_bw"]), float(d["dram_bytes"]))


# V100-class numbers: 15.7 TFLOP/s fp32, 900 GB/s HBM2, 32 GiB
V100 = DeviceProfile(peak_flops=15.7e6, mem_bw=9.0e5, dram_bytes=32 * 2**30)
A100 = DeviceProfile(peak_flops=19.5e6, mem_bw=1.555e6, dram_bytes=40 * 2**30)


def roofline_predict(device: DeviceProfile, flops: float, nbytes: float) -> float:
    if flops < 0 or nbytes < 0:
        raise ValueError("flops and bytes must be non-negative")
    if flops == 0 and nbytes == 0:
        raise ZeroWork("kernel has neither flops nor bytes")
    return max(flops / device.peak_flops, nbytes / device.mem_bw)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

EL_MODEL_NAMES = {"embedding_fwd": "elf", "embedding_bwd": "elb"}


@dataclass
class KernelRegistry:
    comm: dict[str, comm.CommModelParams] = field(default_factory=dict)
    mlp: dict[str, MlpModel] = field(default_factory=dict)
    device: DeviceProfile | None = None

    def to_dict(self) -> dict:
        return {
            "comm": {k: p.to_dict(kind=k) for k, p in sorted(self.comm.items())},
            "mlp": {k: m.to_dict() for k, m in sorted(self.mlp.items())},
            "device": self.device.to_dict() if self.device else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelRegistry":
        if set(d) - {"comm", "mlp", "device"}:
            raise SchemaError(f"models file: unexpected fields {sorted(set(d) - {'comm', 'mlp', 'device'})}")
        return cls(
            comm={k: comm.CommModelParams.from_dict(v) for k, v in (d.get("comm") or {}).items()},
            mlp={k: MlpModel.from_dict(v) for k, v in (d.get("mlp") or {}).items()},
            device=DeviceProfile.from_dict(d["device"]) if d.get("device") else None,
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _tables_from_args(args) -> list[EmbeddingTableConfig]:
    return [EmbeddingTableConfig(int(t["E"]), int(t["D"]), float(t["avg_L"])) for t in args["tables"]]


def kernel_latency(registry: KernelRegistry, k: KernelCall) -> float:
    """Predicted latency (µs) of one kernel call."""
    kind, args = k.kind, k.args
    if kind == "fixed":
        return float(args["latency_us"])
    if kind in ("all_to_all", "all_reduce"):
        params = registry.comm.get(kind)
        if params is None:
            raise UnknownModel(f"no communication model for {kind}")
        payload = args["send_bytes"] if kind == "all_to_all" else args["bytes"]
        m = comm.effective_message_size(payload, kind)
        if m <= 0:
            return 0.0
        return float(comm.predict_latency(params, m))
    if kind in EL_MODEL_NAMES:
        name = EL_MODEL_NAMES[kind]
        model = registry.mlp.get(name)
        if model is None:
            raise UnknownModel(f"no embedding lookup model {name!r}")
        rf = args["rf"] if "rf" in args else compute_rf(args["indices"])
        return mlp_predict(model, el_features(_tables_from_args(args), args["batch_size"], rf))
    if kind == "roofline":
        if registry.device is None:
            raise UnknownModel("roofline kernel but no device profile")
        return roofline_predict(registry.device, args["flops"], args["bytes"])
    if kind == "learned":
        model = registry.mlp.get(args["model"])
        if model is None:
            raise UnknownModel(f"no learned model {args['model']!r}")
        return mlp_predict(model, args["features"])
    raise UnknownModel(f"unknown kernel kind {kind!r}")


# ---------------------------------------------------------------------------
# synthetic microbenchmarks
# ---------------------------------------------------------------------------

# µs per lookup and µs per table; backward lookups cost roughly twice forward
EL_ANALYTIC = {"elf": (2.0e-4, 6.0), "elb": (4.0e-4, 9.0)}


def analytic_el_latency(tables: Sequence[EmbeddingTableConfig], batch_size: int, a: float, b: float) -> float:
    lookups = batch_size * sum(t.avg_L for t in tables)
    return a * lookups + b * len(tables)


def random_table(rng: np.random.Generator, heavy: bool | None = None) -> EmbeddingTableConfig:
    """A table with log-uniform E, D in {16..256}, and L drawn heavy or light."""
    if heavy is None:
        heavy = bool(rng.random() < 0.3)
    E = int(2 ** rng.uniform(10, 22))
    D = int(2 ** rng.integers(4, 9))
    L = float(rng.uniform(20, 120)) if heavy else float(rng.uniform(0, 20))
    return EmbeddingTableConfig(E, D, round(L, 3))


def synth_el_dataset(n: int, model: str = "elf", seed: int = 0, coeffs=None) -> list[tuple[np.ndarray, float]]:
    """Rows of (features, latency) from the analytic lookup-cost oracle."""
    a, b = coeffs if coeffs is not None else EL_ANALYTIC[model]
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n):
        tables = [random_table(rng) for _ in range(int(rng.integers(1, 21)))]
        batch = int(2 ** rng.integers(8, 13))
        rf = rng.dirichlet(np.ones(NUM_RF_BINS) * 0.5)
        rows.append((el_features(tables, batch, rf), analytic_el_latency(tables, batch, a, b)))
    return rows
