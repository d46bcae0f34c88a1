# %% [markdown]
# # Reuse factors and a learned embedding-lookup cost model
#
# How often each row is hit within a batch matters for lookup cost (cache
# reuse). A reuse-factor vector summarizes that: count accesses per distinct
# index, bin the counts by powers of two, normalize.

# %%
import numpy as np

from perfsim import kernels

batch = [[0, 1, 4, 6], [1, 2, 3, 5, 7], [0, 5, 7], [1, 6]]
print(kernels.count_histogram(batch))
rf = kernels.compute_rf(batch)
print({i: b for i, b in enumerate(rf.bins) if b})

# %% [markdown]
# Training data comes from an analytic stand-in for a lookup
# microbenchmark: cost linear in total lookups plus a per-table term.

# %%
rows = kernels.synth_el_dataset(2000, "elf", seed=1)
res = kernels.mlp_train(rows, kernels.MlpHyper(seed=0))
print(f"held-out GMAE {res.holdout_gmae:.2%}, loss {res.losses[0]:.3f} -> {res.losses[-1]:.4f}")

# %%
rng = np.random.default_rng(5)
tables = [kernels.random_table(rng, heavy=True) for _ in range(8)]
for B in (512, 1024, 2048, 4096):
    x = kernels.el_features(tables, B, rf)
    truth = kernels.analytic_el_latency(tables, B, *kernels.EL_ANALYTIC["elf"])
    print(f"B={B:5d}  predicted {kernels.mlp_predict(res.model, x):8.1f} us   analytic {truth:8.1f} us")

# %% [markdown]
# Elementwise kernels use a roofline instead.

# %%
print(f"{kernels.roofline_predict(kernels.V100, flops=2**21, nbytes=8 * 2**20):.2f} us")
