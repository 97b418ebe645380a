# %% [markdown]
# # Comparing FedAvg, HierFAVG and FedAvg-IC on the desk setup
#
# The desk preset is a laptop-sized scenario: 50 nodes on 10 edge switches of a
# k=6 fat tree, every node holding a single class of a 10-class blob dataset.
# All three algorithms share the same data, partition and topology, so any
# difference comes from how and when models are aggregated.
#
# Run with `python3 demos/01_compare_algorithms.py` (about a minute).

# %%
import tempfile
from pathlib import Path

from groupfl import harness

ALGOS = ("fedavg", "hierfavg", "fedavg_ic")
out = Path(tempfile.mkdtemp(prefix="groupfl-demo-"))
configs = [harness.desk_preset(a, name=a, T=600, repeats=2) for a in ALGOS]

# %% [markdown]
# `run_experiment` writes one artifact directory per configuration: per-seed
# trace CSVs, a mean/sd summary, the partition and topology, and a manifest
# with hashes of every input.

# %%
arts = [harness.run_experiment(c, out / c.name) for c in configs]
for art in arts:
    last = art.traces[0].rows[-1]
    print(f"{art.config.name:10s} final accuracy {last.test_accuracy:.4f} "
          f"after {last.sim_seconds:.3f} simulated s ({last.comm_seconds:.3f} s communicating)")

# %% [markdown]
# Time to reach FedAvg's final accuracy, and the speedup over FedAvg. A "-"
# means the target was never reached within the run.

# %%
print(harness.rows_to_csv(harness.compare_artifacts(arts, "time_to_accuracy")))

# %% [markdown]
# Accuracy at a fixed simulated-time budget (FedAvg's horizon by default),
# with the gain measured in pooled standard deviations.

# %%
print(harness.rows_to_csv(harness.compare_artifacts(arts, "accuracy_at_time")))
print(f"artifacts in {out}")
