# %% [markdown]
# # Picking an embedding-table sharder by simulation
#
# Each sharder gives a different table-to-rank assignment. We build a
# DLRM-like world per plan, simulate it, and keep the fastest. To judge the
# pick we compare against "actual" times from the same simulator with 5%
# random kernel-latency noise.

# %%
import numpy as np

from perfsim import comm, kernels, sharding

models = {name: kernels.mlp_train(kernels.synth_el_dataset(2000, name, seed=11 + i)).model
          for i, name in enumerate(("elf", "elb"))}
registry = kernels.KernelRegistry(comm=dict(comm.REFERENCE_PARAMS), mlp=models)

# %%
rng = np.random.default_rng(10)
tables = sharding.random_task(rng, ngpus=4)
counts = [sharding.synth_lookup_counts(t, 4096, rng) for t in tables]
predict = sharding.make_predictor(tables, registry, None, 4096, counts)
res = sharding.select_config(tables, 4, sharding.SELECTION_CANDIDATES, predict)
for name, t in sorted(res.predicted_us.items(), key=lambda kv: kv[1]):
    print(f"{name:20s} {t / 1000:7.2f} ms")
print("fastest:", res.fastest)

# %% [markdown]
# Repeat over 20 random heavy-table tasks.

# %%
outcomes = sharding.selection_experiment(registry, n_tasks=20, ngpus=4, noise=0.05, seed=0)
print(f"{sum(o.success for o in outcomes)}/20 successful picks")
for i, o in enumerate(outcomes[:5]):
    print(i, o.predicted_fastest, o.actual_fastest, f"{o.abs_error:.1%}")
