# %% [markdown]
# # Fitting a collective latency curve
#
# Collective latency vs. message size has three regimes: a flat startup
# floor, an S-shaped transition, and a bandwidth-bound line. Here we sample a
# known curve at doubling sizes, fit it back, and look at where the region
# boundaries land.

# %%
import math

import numpy as np

from perfsim import comm

truth = comm.REFERENCE_PARAMS["all_to_all"]
sizes = comm.doubling_sizes(4, 2**30)
samples = comm.samples_from_params(truth, sizes)
print(f"{len(samples)} samples, {sizes[0]:.0f} B .. {sizes[-1] / 2**30:.0f} GiB")

# %% [markdown]
# Add a little multiplicative noise, as a real microbenchmark would have.

# %%
rng = np.random.default_rng(0)
noisy = [comm.BenchSample(s.m, s.latency * rng.uniform(0.98, 1.02)) for s in samples]
p = comm.fit(noisy)
print(f"m1 = 2^{math.log2(p.m1):.0f}, m2 = 2^{math.log2(p.m2):.0f} (true 2^{math.log2(truth.m1):.0f}, "
      f"2^{math.log2(truth.m2):.0f})")
print(f"t_s = {p.t_s:.2f} us, bw_max = {p.bw_max:.3g} B/us")

# %% [markdown]
# Held-out check at the geometric midpoints between benchmark sizes.

# %%
mids = sizes[:-1] * math.sqrt(2)
pred = comm.predict_latency(p, mids)
ref = comm.predict_latency(truth, mids)
rel = np.abs(pred / ref - 1)
print(f"GMAE {np.exp(np.mean(np.log(np.maximum(rel, 1e-12)))):.2%}, worst {rel.max():.2%}")

# %%
print(f"{'size':>10} {'latency_us':>12} {'bw B/us':>10}")
for m in 2.0 ** np.arange(2, 31, 4):
    print(f"{m:>10.0f} {comm.predict_latency(p, m):>12.2f} {comm.bandwidth(p, m):>10.3g}")

# %% [markdown]
# For all-to-all the size fed to the curve is the busiest device's larger
# of sent and received bytes.

# %%
print(comm.effective_message_size([[0, 100], [200, 0]]))
