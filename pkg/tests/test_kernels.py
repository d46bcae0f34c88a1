import math

import numpy as np
import pytest

from perfsim import comm, kernels
from perfsim.errors import EmptyDataset, FeatureMismatch, NonPositiveLatency, UnknownModel, ZeroWork
from perfsim.kernels import EmbeddingTableConfig, MlpHyper, MlpModel
from perfsim.trace import KernelCall

from conftest import SMALL_BATCH


def test_small_batch_count_histogram():
    assert kernels.count_histogram(SMALL_BATCH) == {1: 3, 2: 4, 3: 1}


def test_small_batch_bins():
    rf = kernels.compute_rf(SMALL_BATCH)
    expected = [0.0] * 17
    expected[1], expected[2] = 0.375, 0.625
    assert list(rf.bins) == expected


def test_single_index_batch():
    for k in (1, 3, 40, 70000):
        rf = kernels.compute_rf([[42]] * k)
        assert rf.bins[kernels.rf_bin(k)] == 1.0
    assert kernels.rf_bin(70000) == 16


def test_rf_bin_edges():
    assert [kernels.rf_bin(c) for c in (1, 2, 3, 4, 7, 8, 2**15 - 1, 2**15)] == [1, 2, 2, 3, 3, 4, 15, 16]


def test_rf_invariants():
    rng = np.random.default_rng(0)
    for _ in range(50):
        batch = [list(rng.integers(0, 50, size=rng.integers(1, 20))) for _ in range(rng.integers(1, 10))]
        rf = kernels.compute_rf(batch)
        assert sum(rf.bins) == pytest.approx(1.0, abs=1e-9)
        shuffled = [list(rng.permutation(s)) for s in reversed(batch)]
        assert kernels.compute_rf(shuffled) == rf


def test_rf_from_counts_matches_compute_rf():
    rng = np.random.default_rng(1)
    idx = rng.integers(0, 200, size=1000)
    _, counts = np.unique(idx, return_counts=True)
    assert kernels.rf_from_counts(counts) == kernels.compute_rf([idx.tolist()])


def test_features_basic():
    f = kernels.el_features([EmbeddingTableConfig(1024, 64, 1.0)], 256, kernels.ReuseFactorVector.zeros())
    spec = kernels.FEATURE_SPEC
    assert f[spec.index("log2_batch_size")] == 8
    assert f[spec.index("sum_log2E")] == 10
    assert f[spec.index("max_log2E")] == 10
    assert len(f) == len(spec)


def test_features_symmetric_and_batch_step():
    rng = np.random.default_rng(2)
    tables = [kernels.random_table(rng) for _ in range(6)]
    rf = kernels.compute_rf(SMALL_BATCH)
    a = kernels.el_features(tables, 512, rf)
    assert np.allclose(a, kernels.el_features(tables[::-1], 512, rf))
    assert kernels.el_features(tables, 1024, rf)[0] == a[0] + 1


def test_el_csv_round_trip():
    rows = kernels.synth_el_dataset(20, seed=4)
    back = kernels.read_el_csv(kernels.write_el_csv(rows))
    for (x, t), (y, u) in zip(rows, back):
        assert np.allclose(x, y, rtol=1e-12) and t == u


def _small_model(rng, dims=(5, 7, 6, 1)):
    w = [rng.normal(size=(dims[i], dims[i + 1])) for i in range(len(dims) - 1)]
    b = [rng.normal(size=dims[i + 1]) for i in range(len(dims) - 1)]
    return w, b


@pytest.mark.parametrize("seed", range(3))
def test_gradient_check(seed):
    rng = np.random.default_rng(seed)
    w, b = _small_model(rng)
    X = rng.normal(size=(9, 5))
    y = rng.normal(size=9)
    _, gw, gb = kernels.mlp_loss_and_grads(w, b, X, y)
    h = 1e-6
    worst = 0.0
    for params, grads in ((w, gw), (b, gb)):
        for p, g in zip(params, grads):
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                up = kernels.mlp_loss_and_grads(w, b, X, y)[0]
                p[idx] = old - h
                down = kernels.mlp_loss_and_grads(w, b, X, y)[0]
                p[idx] = old
                num = (up - down) / (2 * h)
                worst = max(worst, abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-8))
    assert worst < 1e-4


def test_mlp_accuracy_and_loss_drops(el_training):
    for res in el_training.values():
        assert res.holdout_gmae < 0.10
        assert res.losses[-1] < res.losses[0]


def test_mlp_deterministic():
    rows = kernels.synth_el_dataset(200, seed=9)
    hyper = MlpHyper(hidden=(16,), epochs=10, seed=3)
    a = kernels.mlp_train(rows, hyper).model
    b = kernels.mlp_train(rows, hyper).model
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
    assert all(np.array_equal(x, y) for x, y in zip(a.biases, b.biases))


def test_mlp_constant_target():
    rows = [(x, 42.0) for x, _ in kernels.synth_el_dataset(100, seed=5)]
    model = kernels.mlp_train(rows, MlpHyper(hidden=(32,), epochs=20)).model
    preds = kernels.mlp_predict_batch(model, np.array([x for x, _ in rows]))
    assert np.all(np.abs(preds / 42.0 - 1) < 0.01)


def test_mlp_errors():
    rows = kernels.synth_el_dataset(40, seed=1)
    with pytest.raises(EmptyDataset):
        kernels.mlp_train(rows[:10])
    with pytest.raises(NonPositiveLatency):
        kernels.mlp_train([(x, 0.0) for x, _ in rows])


def test_mlp_closed_form_linear():
    model = MlpModel([3, 1], [np.array([[1.0], [0.0], [0.0]])], [np.array([0.5])], ["a", "b", "c"])
    assert kernels.mlp_predict(model, [2.0, 7.0, 9.0]) == pytest.approx(math.exp(2.5))
    assert kernels.mlp_predict(model, [2.0, 7.0, 9.0]) == kernels.mlp_predict(model, [2.0, 7.0, 9.0])
    with pytest.raises(FeatureMismatch):
        kernels.mlp_predict(model, [1.0, 2.0])


def test_mlp_dict_round_trip(el_training):
    model = el_training["elf"].model
    back = MlpModel.from_dict(model.to_dict())
    x = kernels.synth_el_dataset(5, seed=77)
    X = np.array([r[0] for r in x])
    assert np.array_equal(kernels.mlp_predict_batch(model, X), kernels.mlp_predict_batch(back, X))


def test_roofline_memory_bound():
    t = kernels.roofline_predict(kernels.V100, flops=1000.0, nbytes=8 * 2**20)
    assert t == pytest.approx(8 * 2**20 / 9e5)
    assert round(t, 2) == 9.32


def test_roofline_compute_bound_and_homogeneous():
    dev = kernels.V100
    assert kernels.roofline_predict(dev, 1e9, 10.0) == pytest.approx(1e9 / dev.peak_flops)
    a = kernels.roofline_predict(dev, 3e6, 5e5)
    assert kernels.roofline_predict(dev, 3e7, 5e6) == pytest.approx(10 * a)


def test_roofline_zero_work():
    with pytest.raises(ZeroWork):
        kernels.roofline_predict(kernels.V100, 0, 0)


def test_kernel_dispatch(registry, el_training):
    assert kernels.kernel_latency(registry, KernelCall.fixed(7.5)) == 7.5
    p = comm.REFERENCE_PARAMS["all_reduce"]
    assert kernels.kernel_latency(registry, KernelCall.all_reduce(4096)) == comm.predict_latency(p, 4096)
    x = kernels.synth_el_dataset(1, seed=8)[0][0]
    ln = kernels.KernelRegistry(mlp={"layer_norm": el_training["elf"].model})
    assert kernels.kernel_latency(ln, KernelCall.learned("layer_norm", x)) == kernels.mlp_predict(
        el_training["elf"].model, x)


def test_embedding_dispatch_indices_equals_rf(registry):
    tables = [EmbeddingTableConfig(1000, 32, 3.0)]
    by_idx = KernelCall.embedding("fwd", tables, 4, indices=SMALL_BATCH)
    by_rf = KernelCall.embedding("fwd", tables, 4, rf=kernels.compute_rf(SMALL_BATCH))
    assert kernels.kernel_latency(registry, by_idx) == kernels.kernel_latency(registry, by_rf)


def test_unknown_model():
    with pytest.raises(UnknownModel):
        kernels.kernel_latency(kernels.KernelRegistry(), KernelCall.learned("dropout", [1.0]))
    with pytest.raises(UnknownModel):
        kernels.kernel_latency(kernels.KernelRegistry(), KernelCall.all_reduce(8))


def test_registry_round_trip(registry):
    back = kernels.KernelRegistry.from_dict(registry.to_dict())
    assert back.dumps() == registry.dumps()
