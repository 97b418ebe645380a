# %% [markdown]
# # What the grouping objective buys
#
# Twenty nodes sit on five edge switches. Every node on edge e holds classes
# 2e..2e+3 (mod 10), so each edge covers only four classes. Picking the nodes
# from the same edge gives cheap groups with skewed data. Picking nodes across
# edges gives groups whose pooled data covers every class.
#
# Δ (the group-to-global gradient gap) measures how far a group's average
# gradient is from the global one. The communication cost is the group-round
# delay over the network.

# %%
import numpy as np

from groupfl import data, engine, grouping as G, models, network

ds = data.synth_blobs(10, 8, 80, seed=0, sigma=1.0)
rng = np.random.default_rng(0)
pools = {c: list(rng.permutation(np.flatnonzero(ds.y == c))) for c in range(10)}
idx = [np.sort([pools[(2 * (i % 5) + j) % 10].pop() for j in range(4) for _ in range(8)]) for i in range(20)]
part = data.Partition(ds, idx, [i % 5 for i in range(20)])
topo = network.build_fat_tree(4, 4, host_edges=part.node_to_edge)
spec = models.softmax_regression(8, 10)
snap = G.snapshot(spec, spec.init_params(np.random.default_rng(0), 0.5), part, 10**6, 0)


def describe(name, m):
    Delta = engine.divergences_from_snapshot(snap, m)[1]
    run = engine.GroupFL(part, topo, spec, m, engine.Schedule(1, 5, 1), engine.Hyper(), combined=True, track=False)
    sizes = np.bincount(m.assign, minlength=m.num_groups)
    print(f"{name:22s} Delta {Delta:.4f}  group-round delay {run.d_group * 1e3:.3f} ms  sizes {sizes.tolist()}")


# %% [markdown]
# Baselines: the edge grouping (one group per switch) and a random grouping.

# %%
describe("edge grouping", G.edge_grouping(part))
describe("random grouping", G.random_membership(20, 5, np.random.default_rng(1), topo))

# %% [markdown]
# k-medoids grouping with different weights (α_iid, α_comm). With α=(1, 0)
# it reaches the lowest Δ, but it does so with one large group plus singletons.
# The IID cost measures a group with the candidate node already added, and a
# group that already holds most of the data barely moves when one more node
# joins. With α_comm > 0 the single k-medoids start stalls in a local minimum
# that is worse than plain edge grouping. This is the same weakness that makes
# the heuristic miss the brute-force optimum on small instances (see README,
# "Known gaps"). The cost history never rises: a descent guard rejects any
# iteration that would increase it.

# %%
for alphas in ((1.0, 0.0), (0.5, 0.5), (0.0, 1.0)):
    m = G.node_grouping(snap, topo, 5, G.CostWeights(*alphas), seed=0)
    describe(f"k-medoids alpha={alphas}", m)
    print("    cost history", np.round(m.cost_history, 3).tolist())
