"""Piecewise latency model for all-to-all and all-reduce collectives.

Latency over message size ``m`` (bytes, microseconds) has three regions::

    t_s                            m <= m1     constant latency
    log2(m) / 10**sigmoid(log2 m)  m1 < m < m2 S-shaped transition
    t_s + m / bw_max               m >= m2     saturated bandwidth

with ``sigmoid(x) = L / (1 + exp(-k (x - x0))) + b``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import DegenerateRegions, InsufficientData, NonSquareMatrix, SchemaError

BOUNDARY_TOL = 0.05
N_RESTARTS = 64
MIN_SAMPLES = 8

PARAM_FIELDS = ("t_s", "m1", "m2", "sig_L", "sig_x0", "sig_k", "sig_b", "bw_max")


@dataclass(frozen=True)
class CommModelParams:
    t_s: float
    m1: float
    m2: float
    sig_L: float
    sig_x0: float
    sig_k: float
    sig_b: float
    bw_max: float

    def __post_init__(self):
        if not 0 < self.m1 < self.m2:
            raise ValueError(f"need 0 < m1 < m2, got m1={self.m1}, m2={self.m2}")
        if not self.bw_max > 0:
            raise ValueError(f"bw_max must be positive, got {self.bw_max}")
        if not self.t_s >= 0:
            raise ValueError(f"t_s must be non-negative, got {self.t_s}")

    def to_dict(self, kind: str | None = None, platform: str | None = None) -> dict:
        d = asdict(self)
        d["kind"] = kind
        d["platform"] = platform
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CommModelParams":
        missing = set(PARAM_FIELDS) - set(d)
        extra = set(d) - set(PARAM_FIELDS) - {"kind", "platform"}
        if missing or extra:
            raise SchemaError(f"comm params: missing {sorted(missing)}, unexpected {sorted(extra)}")
        return cls(**{k: float(d[k]) for k in PARAM_FIELDS})


@dataclass(frozen=True)
class BenchSample:
    m: float
    latency: float

    def __post_init__(self):
        if self.m < 4 or not self.latency > 0:
            raise ValueError(f"invalid sample m={self.m}, latency={self.latency}")


def sigmoid(x, L, x0, k, b):
    # clip keeps exp finite for extreme slopes during fitting
    z = np.clip(-k * (np.asarray(x, dtype=float) - x0), -700.0, 700.0)
    return L / (1.0 + np.exp(z)) + b


def transition_latency(p: CommModelParams, m):
    """Middle-region formula evaluated anywhere (no region branching)."""
    x = np.log2(np.asarray(m, dtype=float))
    return x / 10.0 ** sigmoid(x, p.sig_L, p.sig_x0, p.sig_k, p.sig_b)


def predict_latency(p: CommModelParams, m):
    """Predicted latency in µs for message size ``m`` bytes (scalar or array)."""
    m_arr = np.asarray(m, dtype=float)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        mid = transition_latency(p, np.maximum(m_arr, 1.0))
    out = np.where(m_arr <= p.m1, p.t_s, np.where(m_arr >= p.m2, p.t_s + m_arr / p.bw_max, mid))
    return float(out) if out.ndim == 0 else out


def bandwidth(p: CommModelParams, m):
    """Achieved bandwidth in bytes/µs."""
    out = np.asarray(m, dtype=float) / predict_latency(p, m)
    return float(out) if out.ndim == 0 else out


def effective_message_size(send_bytes, kind: str = "all_to_all") -> float:
    """Message size fed to the model: the largest per-device sent or received volume.

    For ``all_to_all`` ``send_bytes[i][j]`` is what device i sends to j.  For
    ``all_reduce`` every device contributes the same buffer, given either as a
    scalar, a per-device vector, or a matrix whose rows repeat that vector.
    """
    if kind == "all_reduce":
        arr = np.asarray(send_bytes, dtype=float)
        return float(arr.max()) if arr.size else 0.0
    mat = np.asarray(send_bytes, dtype=float)
    if mat.size == 0:
        return 0.0
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise NonSquareMatrix(f"send matrix must be N x N, got shape {mat.shape}")
    sent = mat.sum(axis=1)
    received = mat.sum(axis=0)
    return float(np.maximum(sent, received).max())


def detect_boundaries(m: np.ndarray, latency: np.ndarray, tol: float = BOUNDARY_TOL) -> tuple[float, float]:
    """Region boundaries from samples sorted by size.

    m1 is the largest size whose latency is within ``1 + tol`` of the minimum;
    m2 is the smallest size whose bandwidth is within ``1 - tol`` of the maximum.
    """
    bw = m / latency
    m1 = float(m[latency <= (1 + tol) * latency.min()].max())
    m2 = float(m[bw >= (1 - tol) * bw.max()].min())
    return m1, m2


def _fit_sigmoid(x: np.ndarray, y: np.ndarray, seed: int) -> np.ndarray:
    """Least-squares sigmoid fit of y(x) via bounded Powell searches from many starts."""
    span = max(float(y.max() - y.min()), 1e-3)
    xlo, xhi = float(x.min()), float(x.max())
    xw = max(xhi - xlo, 1.0)
    bounds = [
        (-10 * span - 1, 10 * span + 1),  # L
        (xlo - xw, xhi + xw),  # x0
        (1e-3, 20.0),  # k; sign of the S-curve is carried by L
        (float(y.min()) - 10 * span - 1, float(y.max()) + 10 * span + 1),  # b
    ]

    def loss(theta):
        r = sigmoid(x, *theta) - y
        return float(r @ r)

    rng = np.random.default_rng(seed)
    # first start: decreasing curve spanning the data, the common shape
    starts = [np.array([y.min() - y.max(), (xlo + xhi) / 2, 4.0 / xw, y.max()])]
    while len(starts) < N_RESTARTS:
        starts.append(np.array([rng.uniform(*b) for b in bounds]))
    best_theta, best_loss = None, math.inf
    for s in starts:
        s = np.clip(s, [b[0] for b in bounds], [b[1] for b in bounds])
        res = minimize(loss, s, method="Powell", bounds=bounds, options={"xtol": 1e-10, "ftol": 1e-14, "maxfev": 20000})
        if res.fun < best_loss:
            best_theta, best_loss = res.x, res.fun
    return best_theta


def fit(samples: Iterable[BenchSample], seed: int = 0) -> CommModelParams:
    """Fit all eight parameters to microbenchmark samples taken at doubling sizes."""
    samples = sorted(samples, key=lambda s: s.m)
    if len(samples) < MIN_SAMPLES:
        raise InsufficientData(f"need at least {MIN_SAMPLES} samples, got {len(samples)}")
    m = np.array([s.m for s in samples], dtype=float)
    lat = np.array([s.latency for s in samples], dtype=float)
    m1, m2 = detect_boundaries(m, lat)
    if not m1 < m2:
        raise DegenerateRegions(f"boundary detection failed: m1={m1:g} >= m2={m2:g}")
    region1 = m <= m1
    region3 = m >= m2
    middle = (m >= m1) & (m <= m2)
    t_s = float(lat[region1].mean())
    excess = lat[region3] - t_s
    bw = m[region3][excess > 0] / excess[excess > 0]
    if bw.size == 0:
        raise DegenerateRegions("no sample in the saturated region lies above the startup latency")
    bw_max = float(bw.max())

    x = np.log2(m[middle])
    y = np.log10(x) - np.log10(lat[middle])
    L, x0, k, b = _fit_sigmoid(x, y, seed)
    return CommModelParams(t_s, m1, m2, float(L), float(x0), float(k), float(b), bw_max)


def doubling_sizes(lo: int = 4, hi: int = 2**30) -> np.ndarray:
    sizes = []
    m = lo
    while m <= hi:
        sizes.append(m)
        m *= 2
    return np.array(sizes, dtype=float)


def samples_from_params(p: CommModelParams, sizes: Sequence[float]) -> list[BenchSample]:
    return [BenchSample(float(m), float(predict_latency(p, m))) for m in sizes]


def params_through(t_s, m1, m2, bw_max, x0, k) -> CommModelParams:
    """Build params whose transition region meets both neighbours exactly.

    ``sig_L`` and ``sig_b`` are solved so that the middle formula equals ``t_s``
    at ``m1`` and ``t_s + m2/bw_max`` at ``m2``; the result is continuous.
    """
    x1, x2 = math.log2(m1), math.log2(m2)
    a1 = math.log10(x1 / t_s)
    a2 = math.log10(x2 / (t_s + m2 / bw_max))
    s1 = 1 / (1 + math.exp(-k * (x1 - x0)))
    s2 = 1 / (1 + math.exp(-k * (x2 - x0)))
    L = (a2 - a1) / (s2 - s1)
    b = a1 - L * s1
    return CommModelParams(t_s, m1, m2, L, x0, k, b, bw_max)


# Plausible single-node NVLink-class curves used by synthetic worlds and demos.
REFERENCE_PARAMS = {
    "all_to_all": params_through(t_s=20.0, m1=2.0**12, m2=2.0**27, bw_max=2.0e5, x0=20.0, k=0.45),
    "all_reduce": params_through(t_s=15.0, m1=2.0**11, m2=2.0**27, bw_max=2.6e5, x0=19.0, k=0.5),
}


def read_bench_csv(text: str) -> list[BenchSample]:
    """Parse ``m_bytes,latency_us`` microbenchmark CSV text."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != ["m_bytes", "latency_us"]:
        raise SchemaError(f"expected header m_bytes,latency_us, got {reader.fieldnames}")
    try:
        return [BenchSample(float(r["m_bytes"]), float(r["latency_us"])) for r in reader]
    except ValueError as exc:
        raise SchemaError(str(exc)) from exc


def write_bench_csv(samples: Sequence[BenchSample]) -> str:
    out = io.StringIO()
    out.write("m_bytes,latency_us\n")
    for s in samples:
        out.write(f"{s.m:.17g},{s.latency:.17g}\n")
    return out.getvalue()


def dump_params(p: CommModelParams, kind: str | None = None, platform: str | None = None) -> str:
    return json.dumps(p.to_dict(kind, platform), sort_keys=True, indent=2)
