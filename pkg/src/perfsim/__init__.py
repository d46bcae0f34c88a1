"""Performance model for distributed recommendation-model training.

Per-kernel latency models (collectives, embedding lookups, roofline),
a critical-path simulator over per-rank execution traces, and
simulation-driven embedding-table sharding.
"""

from .comm import CommModelParams, BenchSample, fit as fit_comm, predict_latency
from .errors import PerfSimError
from .kernels import (
    DeviceProfile,
    EmbeddingTableConfig,
    KernelRegistry,
    MlpHyper,
    MlpModel,
    ReuseFactorVector,
    compute_rf,
    el_features,
    mlp_predict,
    mlp_train,
    roofline_predict,
)
from .metrics import MetricReport, gmae, mape, metric_report
from .sharding import SharderKind, ShardingPlan, select_config, shard
from .simulator import Overhead, OverheadStats, PredictionReport, baseline_predict, oracle_simulate, simulate
from .trace import ExecutionTrace, KernelCall, OpNode, TensorRef, TraceBuilder, load_world, parse_trace

__version__ = "0.1.0"
