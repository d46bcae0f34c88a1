# %% [markdown]
# # Simulating a multi-rank iteration
#
# Each rank is a trace of ops. The simulator walks them with a CPU clock and
# two GPU stream fronts per rank, and lines ranks up at every collective.
# The baseline (largest per-stream kernel sum) ignores all of that waiting.

# %%
from perfsim import comm, kernels, simulator, trace

registry = kernels.KernelRegistry(comm=dict(comm.REFERENCE_PARAMS))
spec = trace.SynthSpec(ranks=4, ops_per_rank=(80, 120), comm_density=0.25)
world = trace.synth_trace(spec, seed=3)
overheads = simulator.synth_overheads({op.name for t in world for op in t.ops}, seed=3)
print([len(t.ops) for t in world], "ops;", len(world[0].comm_ops), "collectives")

# %%
rep = simulator.simulate(world, registry, overheads)
print(simulator.format_breakdown(rep))

# %%
base = simulator.baseline_predict(world, registry)
print(f"baseline {base:.0f} us vs simulated {rep.total_us:.0f} us ({1 - base / rep.total_us:.0%} lower)")

# %% [markdown]
# The event-queue reference model reproduces the same number exactly, and
# so does running every rank on its own thread.

# %%
print(simulator.oracle_simulate(world, registry, overheads) == rep.total_us)
print(simulator.simulate(world, registry, overheads, parallel=True).total_us == rep.total_us)

# %% [markdown]
# Every collective releases all ranks at the same communication-stream time.

# %%
seq, fronts = next(iter(rep.collective_T_cm.items()))
print(seq, fronts)
