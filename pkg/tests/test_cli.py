import json

import numpy as np
import pytest

from perfsim import comm, kernels, sharding, simulator, trace
from perfsim.cli import run

from conftest import SMALL_BATCH, single_kernel_world


def call(argv, capsys):
    code = run([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_unknown_subcommand(capsys):
    code, _, _ = call(["bogus"], capsys)
    assert code == 2


def test_missing_required_flag(capsys):
    code, _, _ = call(["predict"], capsys)
    assert code == 2


def test_predict_single_kernel(tmp_path, capsys):
    trace.save_world(single_kernel_world(10.0), tmp_path / "w")
    (tmp_path / "m.json").write_text(kernels.KernelRegistry().dumps())
    (tmp_path / "ov.json").write_text(simulator.OverheadStats().dumps())
    code, out, _ = call(["predict", "--traces", tmp_path / "w", "--models", tmp_path / "m.json",
                         "--overheads", tmp_path / "ov.json"], capsys)
    assert code == 0
    doc = json.loads(out)
    assert doc["total_us"] == 11.0 and doc["gpu_active_us"] == 10.0
    code, out, _ = call(["predict", "--traces", tmp_path / "w", "--table"], capsys)
    assert code == 0 and "total_us" in out and "idle" in out


def test_rf(tmp_path, capsys):
    (tmp_path / "b.json").write_text(json.dumps(SMALL_BATCH))
    code, out, _ = call(["rf", "--indices", tmp_path / "b.json"], capsys)
    doc = json.loads(out)
    assert code == 0
    assert doc["bins"][1] == 0.375 and doc["bins"][2] == 0.625
    assert doc["count_histogram"] == {"1": 3, "2": 4, "3": 1}


def test_domain_error_exit_1(tmp_path, capsys):
    doc = {"schema_version": 1, "rank": 0, "world_size": 1, "tensors": [],
           "ops": [{"id": 0, "name": "x", "inputs": [99], "outputs": [], "stream": "compute", "kernels": []}]}
    (tmp_path / "rank_0.json").write_text(json.dumps(doc))
    code, out, err = call(["predict", "--traces", tmp_path / "rank_0.json"], capsys)
    assert code == 1 and out == ""
    payload = json.loads(err)
    assert payload["error"] == "DanglingTensor" and payload["detail"]


def test_fit_comm(tmp_path, capsys):
    truth = comm.REFERENCE_PARAMS["all_reduce"]
    (tmp_path / "b.csv").write_text(comm.write_bench_csv(comm.samples_from_params(truth, comm.doubling_sizes())))
    code, out, _ = call(["fit-comm", "--csv", tmp_path / "b.csv", "--kind", "all_reduce"], capsys)
    assert code == 0
    p = comm.CommModelParams.from_dict(json.loads(out))
    assert p.m1 == truth.m1 and p.m2 == truth.m2


def test_fit_comm_too_few(tmp_path, capsys):
    (tmp_path / "b.csv").write_text("m_bytes,latency_us\n4,1\n8,1\n")
    code, _, err = call(["fit-comm", "--csv", tmp_path / "b.csv", "--kind", "all_reduce"], capsys)
    assert code == 1 and json.loads(err)["error"] == "InsufficientData"


def test_train_el(tmp_path, capsys):
    (tmp_path / "el.csv").write_text(kernels.write_el_csv(kernels.synth_el_dataset(200, seed=1)))
    argv = ["train-el", "--csv", tmp_path / "el.csv", "--hidden", "16", "--epochs", "5"]
    code, out, _ = call(argv, capsys)
    assert code == 0
    model = kernels.MlpModel.from_dict(json.loads(out))
    assert model.layer_dims == [len(kernels.FEATURE_SPEC), 16, 1]
    assert call(argv, capsys)[1] == out


def test_shard_and_seed_env(tmp_path, capsys, monkeypatch):
    rng = np.random.default_rng(0)
    (tmp_path / "t.csv").write_text(sharding.write_tables_csv([kernels.random_table(rng) for _ in range(12)]))
    code, out, _ = call(["shard", "--tables", tmp_path / "t.csv", "--ngpus", 4, "--sharder", "naive"], capsys)
    assert code == 0 and json.loads(out)["assignment"] == [i % 4 for i in range(12)]
    rand = ["shard", "--tables", tmp_path / "t.csv", "--ngpus", 4, "--sharder", "random"]
    default = call(rand, capsys)[1]
    monkeypatch.setenv("PERFSIM_SEED", "0")
    assert call(rand, capsys)[1] == default
    monkeypatch.setenv("PERFSIM_SEED", "17")
    assert call(rand, capsys)[1] != default


def test_select(tmp_path, capsys, registry):
    rng = np.random.default_rng(5)
    (tmp_path / "t.csv").write_text(sharding.write_tables_csv(sharding.random_task(rng, 2)))
    (tmp_path / "m.json").write_text(registry.dumps())
    code, out, _ = call(["select", "--tables", tmp_path / "t.csv", "--ngpus", 2, "--models", tmp_path / "m.json",
                         "--batch-size", 512, "--candidates", "naive,size_greedy"], capsys)
    assert code == 0
    doc = json.loads(out)
    assert set(doc["predicted_us"]) == {"naive", "size_greedy"}
    assert doc["fastest"] == min(doc["predicted_us"], key=doc["predicted_us"].get)


def test_gen_predict_eval(tmp_path, capsys):
    code, _, _ = call(["gen", "--ranks", 3, "--ops", "20,40", "--seed", 4, "--out-dir", tmp_path], capsys)
    assert code == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["models.json", "overheads.json", "rank_0.json",
                                                           "rank_1.json", "rank_2.json"]
    common = ["--traces", tmp_path, "--models", tmp_path / "models.json", "--overheads", tmp_path / "overheads.json"]
    call(["predict", *common, "--out", tmp_path / "sim.json"], capsys)
    call(["baseline", "--traces", tmp_path, "--models", tmp_path / "models.json", "--out", tmp_path / "b.json"],
         capsys)
    code, out, _ = call(["eval", "--pred", tmp_path / "b.json", "--ref", tmp_path / "sim.json"], capsys)
    assert code == 0
    report = json.loads(out)
    assert report["n"] == 1 and report["gmae"] > 0


def test_eval_mismatch(tmp_path, capsys):
    (tmp_path / "a.json").write_text("[1, 2]")
    (tmp_path / "b.json").write_text("[1]")
    code, _, err = call(["eval", "--pred", tmp_path / "a.json", "--ref", tmp_path / "b.json"], capsys)
    assert code == 1 and json.loads(err)["error"] == "LengthMismatch"
