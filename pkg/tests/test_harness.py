import csv
import io
import json
import math

import numpy as np
import pytest

from groupfl import engine, harness
from groupfl.errors import ConfigError, DivergenceError

SMALL = dict(num_classes=3, input_dim=4, per_class=20, num_nodes=6, num_edges=2, diversity="Dhh",
             T=10, num_groups=2, tau=2, tau1=1, tau2=2, eta=0.3, batch_size=8)


def small(**changes):
    return harness.ExperimentConfig(**{**SMALL, **changes})


def read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_config_validation_names_the_key():
    with pytest.raises(ConfigError, match="config.num_edges"):
        small(num_edges=7)
    with pytest.raises(ConfigError, match="config.algorithm"):
        small(algorithm="fedprox")
    with pytest.raises(ConfigError, match="config.alpha_iid"):
        small(algorithm="fedavg_c", alpha_iid=0.5)
    with pytest.raises(ConfigError, match="config.color"):
        harness.ExperimentConfig.from_dict({"color": "red"})
    with pytest.raises(ConfigError, match="config.T"):
        small().override(T="many")


def test_config_file_and_override_precedence(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("# comment\nalgorithm = hierfavg\nnum_groups = 3  # inline\ncombined = true\nname = 'x'\n")
    cfg = harness.ExperimentConfig.from_file(path)
    assert (cfg.algorithm, cfg.num_groups, cfg.combined, cfg.name) == ("hierfavg", 3, True, "x")
    assert cfg.override(num_groups="4").num_groups == 4
    (tmp_path / "bad.cfg").write_text("[a]\nx = 1\n[b]\ny = 2\n")
    with pytest.raises(ConfigError):
        harness.read_config_file(tmp_path / "bad.cfg")


def test_algorithm_defaults():
    assert small(algorithm="fedavg_i").alphas() == (1.0, 0.0)
    assert small(algorithm="fedavg_c").alphas() == (0.0, 1.0)
    assert small().use_combined() and not small(algorithm="hierfavg").use_combined()
    assert harness.desk_preset().repeats == 5


@pytest.mark.parametrize("algorithm", harness.ALGORITHMS)
def test_every_algorithm_runs(algorithm):
    tr = harness.run_once(harness.build(small(algorithm=algorithm)), seed=0)
    assert not tr.diverged and tr.rows[-1].step == 10


def test_jellyfish_and_mlp_setup():
    s = harness.build(small(topology="jellyfish", jellyfish_degree=1, model="mlp", hidden_units=4))
    assert s.topo.kind.startswith("jellyfish") and s.spec.kind == "mlp"


def test_run_experiment_artifacts_and_rerun_bytes(tmp_path):
    cfg = small(repeats=2)
    a = harness.run_experiment(cfg, tmp_path / "a")
    harness.run_experiment(cfg, tmp_path / "b")
    for seed in (0, 1):
        assert (tmp_path / "a" / f"runs/seed{seed}.csv").read_bytes() == (tmp_path / "b" / f"runs/seed{seed}.csv").read_bytes()
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["complete"] and man["seeds"] == [0, 1]
    assert man["files"] == json.loads((tmp_path / "b" / "manifest.json").read_text())["files"]
    assert harness.load_config_from_manifest(tmp_path / "a" / "manifest.json") == cfg
    rows = read_csv((tmp_path / "a" / "summary.csv").read_text())
    assert len(rows) == cfg.grid_points
    assert a.complete


def test_single_repeat_has_zero_sd(tmp_path):
    art = harness.run_experiment(small(), tmp_path)
    assert np.all(art.summary["test_accuracy_sd"] == 0)


def test_divergence_is_reported_after_writing(tmp_path):
    cfg = small(model="mlp", eta=1e300, T=5, algorithm="fedavg")
    with np.errstate(all="ignore"), pytest.raises(DivergenceError):
        harness.run_experiment(cfg, tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert not man["complete"] and man["diverged_seeds"] == [0]


def test_git_blob_hash_known_value():
    # values printed by `git hash-object --stdin`
    assert harness.git_blob_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"
    assert harness.git_blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def _fake_trace(times, accs, algorithm="x"):
    tr = engine.RunTrace(algorithm, 0)
    for t, a in zip(times, accs):
        tr.rows.append(engine.TraceRow(0, t, 0, 0, a, 0, 0, 0, 0, 0, 0))
    return tr


def _artifact(name, algorithm, traces):
    return harness.Artifact(None, small(name=name, algorithm=algorithm), traces, {})


def test_compare_speedups_recomputed_by_hand():
    base = _artifact("fa", "fedavg", [_fake_trace([0, 1, 2, 4], [0.1, 0.5, 0.7, 0.8]),
                                      _fake_trace([0, 1, 2, 4], [0.1, 0.5, 0.7, 0.8])])
    fast = _artifact("ic", "fedavg_ic", [_fake_trace([0, 1, 2], [0.1, 0.8, 0.9])] * 2)
    never = _artifact("h", "hierfavg", [_fake_trace([0, 1, 2, 4], [0.1, 0.2, 0.3, 0.4])] * 2)
    rows = harness.compare_artifacts([base, fast, never], "time_to_accuracy")
    assert [r["speedup"] for r in rows] == [1.0, 4.0, "-"]
    assert rows[2]["time_to_accuracy"] == "-" and rows[0]["target_accuracy"] == 0.8
    acc = harness.compare_artifacts([base, fast], "accuracy_at_time", budget=1.5)
    assert acc[1]["accuracy_mean"] == 0.8 and acc[1]["gain_vs_baseline"] == pytest.approx(0.3)
    assert acc[1]["gain_in_pooled_sd"] == math.inf


def test_compare_identical_configs_and_data_mismatch(tmp_path):
    text = harness.compare([small(name="a", algorithm="fedavg"), small(name="b", algorithm="fedavg")],
                           out_dir=tmp_path)
    assert [r["speedup"] for r in read_csv(text)] == ["1.0", "1.0"]
    with pytest.raises(ConfigError):
        harness.compare([small(), small(data_seed=1)], out_dir=tmp_path)
    with pytest.raises(ConfigError):
        harness.compare_artifacts([], "median")


def test_sweep_writes_one_row_per_combination(tmp_path):
    text = harness.sweep(small(T=4), {"eta": [0.1, 0.2], "tau2": [1, 2]}, tmp_path)
    rows = read_csv(text)
    assert len(rows) == 4 and (tmp_path / "sweep.csv").exists()
    with pytest.raises(ConfigError):
        harness.sweep(small(), {"colour": [1]}, tmp_path)


def test_check_passes_on_small_setup():
    results = harness.check(small(), steps=6)
    assert results and all(ok for _, ok, _ in results)
