# %% [markdown]
# # Watching the virtual-model gap
#
# This demo uses full-batch gradient descent with a fixed step η = 0.5/β̂.
# Two reference trajectories are tracked alongside group FL:
#
# - a virtual group model, which runs centralized GD on each group's pooled
#   data;
# - a virtual global model, which runs centralized GD on all data.
#
# Both restart from the real global model at every global round.
#
# The real model drifts away from the virtual global one as local steps
# accumulate. The drift is bounded by two terms. δ (node-to-group
# divergence) grows like (ηβ+1)^τ1. Δ (group-to-global divergence) grows
# like (ηβ+1)^(τ1·τ2). `check_virtual_gap` compares the measured gap with that
# bound at every step of every interval.

# %%
import numpy as np

from groupfl import analysis, data, engine, grouping as G, models, network

ds = data.synth_blobs(5, 10, 100, seed=0, sigma=1.0)
train, _, test = data.split(ds, 0)
part = data.partition(train, 12, 3, data.DiversitySetting.named("Dqh"), 15, 3, seed=0, test=test)
topo = network.build_fat_tree(4, 4, host_edges=part.node_to_edge)
spec = models.softmax_regression(10, 5, analysis.ANALYSIS_RIDGE)

# %% [markdown]
# Estimate the smoothness β̂ along a short centralized pilot run. Take the
# largest per-node estimate, because every local objective must be β-smooth.

# %%
X, y = part.pooled()
pilot = np.array(engine.run_centralized(spec, X, y, 30, engine.Hyper(eta=0.5, decay=1.0),
                                        spec.init_params(np.random.default_rng(0))))
beta = max(analysis.pair_ratios(spec, *part.node_data(i), pilot, 200, 0)[1] for i in range(part.num_nodes))
eta = 0.5 / beta
print(f"beta_hat {beta:.4f}, eta {eta:.4f}")

# %%
tracker = engine.VirtualTracker(part, spec)
trace = engine.run_group_fl(part, topo, spec, G.edge_grouping(part), engine.Schedule(2, 3, 30),
                            engine.Hyper(eta=eta, decay=1.0, full_batch=True), seed=0,
                            observer=tracker, track=False)
for t, interval, gap, bound in engine.check_virtual_gap(tracker, eta, beta, 2, 3)[:12]:
    print(f"t={t:2d} interval {interval}: gap {gap:.5f} <= bound {bound:.5f}")

# %% [markdown]
# The bound on the final optimality gap trades optimization speed, which
# improves with larger τ1τ2, against divergence, which grows with it.

# %%
w_star = analysis.solve_centralized(spec, X, y)
traj = np.vstack([spec.init_params(np.random.default_rng(0))] + [w for _, w in trace.global_models])
const = analysis.estimate_constants(spec, X, y, w_star, traj, interval_starts=traj[:-1])
worst = engine.interval_divergences(tracker).values()
delta, Delta = max(d for d, _ in worst), max(D for _, D in worst)
for t1, t2 in ((1, 3), (2, 3), (3, 3), (2, 6)):
    opt, div = analysis.convergence_bound_terms(const.rho_hat, max(const.beta_hat, beta), const.omega_hat,
                                       delta, Delta, eta, t1, t2)
    print(f"tau1={t1} tau2={t2}: optimization term {opt:.3f}, divergence term {div:.3f}")
gap = models.loss(spec, trace.final, X, y) - models.loss(spec, w_star, X, y)
print(f"measured optimality gap after 30 steps: {gap:.4f}")
