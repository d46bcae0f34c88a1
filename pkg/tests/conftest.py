import time

import numpy as np
import pytest

from perfsim import comm, kernels, simulator
from perfsim.trace import KernelCall, TraceBuilder

# wall-clock seconds spent training each shared model, filled by el_training
EL_TRAIN_SECONDS: dict[str, float] = {}

# 4 samples over 8 distinct rows; each row is hit 1, 2 or 3 times
SMALL_BATCH = [[0, 1, 4, 6], [1, 2, 3, 5, 7], [0, 5, 7], [1, 6]]


@pytest.fixture(scope="session")
def el_training():
    """Forward and backward lookup models trained once on the analytic oracle."""
    out = {}
    for i, name in enumerate(("elf", "elb")):
        t0 = time.perf_counter()
        rows = kernels.synth_el_dataset(2000, name, seed=11 + i)
        out[name] = kernels.mlp_train(rows, kernels.MlpHyper(seed=0))
        EL_TRAIN_SECONDS[name] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def registry(el_training):
    return kernels.KernelRegistry(
        comm=dict(comm.REFERENCE_PARAMS),
        mlp={name: r.model for name, r in el_training.items()},
        device=kernels.V100,
    )


@pytest.fixture
def comm_registry():
    return kernels.KernelRegistry(comm=dict(comm.REFERENCE_PARAMS))


def single_kernel_world(t_k=10.0):
    b = TraceBuilder(rank=0, world_size=1)
    b.op("aten::relu", [KernelCall.fixed(t_k)])
    return [b.build()]


def comm_heavy_world(ranks=4, rounds=12, compute_us=100.0, peer_bytes=2**18 // 3, fast_frac=0.02, seed=0):
    """Ranks take turns being the straggler before each collective.

    Each round: long compute on one rank (short on the rest), then an
    all-to-all whose output the next compute op reads.  Every rank's
    communication stream is busier than its compute stream, yet no single
    stream's kernel sum reflects the time spent waiting for the straggler.
    """
    rng = np.random.default_rng(seed)
    builders = [TraceBuilder(rank=r, world_size=ranks) for r in range(ranks)]
    send = np.full((ranks, ranks), peer_bytes, dtype=np.int64)
    np.fill_diagonal(send, 0)
    prev = [None] * ranks
    for rnd in range(rounds):
        slow = rnd % ranks
        for r, b in enumerate(builders):
            x = b.tensor(4096)
            t = compute_us * (1.0 if r == slow else fast_frac) * rng.uniform(0.95, 1.05)
            inputs = [prev[r]] if prev[r] is not None else []
            b.op("aten::linear", [KernelCall.fixed(float(t))], inputs=inputs, outputs=[x])
            y = b.tensor(int(send[r].sum()))
            b.op("nccl:all_to_all", [KernelCall.all_to_all(send.tolist())], inputs=[x], outputs=[y],
                 collective_seq=rnd)
            prev[r] = y
    return [b.build() for b in builders]


@pytest.fixture
def zero_overheads():
    return simulator.OverheadStats()
