"""Experiment configuration, repeated runs, comparisons and sweeps.

An :class:`ExperimentConfig` is a flat set of keys. It can be read from a
``key = value`` file (an optional ``[experiment]`` header is allowed) and
overridden from the command line; every key is also a CLI flag
(``num_groups`` -> ``--num-groups``).

``run_experiment`` writes one directory per config::

    manifest.json        full config, input hashes, file hashes, completion flag
    partition.json       node -> edge placement and example indices
    topology.json        switch graph and host placement
    runs/seed<N>.csv     one trace per repeat
    runs/membership_seed<N>.json
    summary.csv          mean and sd across repeats on a fixed simulated-time grid
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import itertools
import json
import logging
import math
import tempfile
import time
from ast import literal_eval
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data, engine, grouping, models, network
from .errors import ConfigError, DivergenceError, InvariantError

log = logging.getLogger(__name__)

ALGORITHMS = ("fedavg", "hierfavg", "fedavg_ic", "fedavg_i", "fedavg_c")
METRICS = ("time_to_accuracy", "accuracy_at_time")
SUMMARY_METRICS = ("test_accuracy", "train_loss", "epoch", "comm_seconds", "compute_seconds", "Delta")
NEVER = "-"


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    # data
    dataset: str = "blobs"  # "blobs" or "idx"
    num_classes: int = 10
    input_dim: int = 20
    per_class: int = 200
    blob_sigma: float = 0.3
    blob_condition: float = 1.0
    idx_images: str = ""
    idx_labels: str = ""
    data_seed: int = 0
    diversity: str = "Dtt"
    num_nodes: int = 50
    num_edges: int = 10
    mean_examples: float | None = None  # default: |train| / num_nodes
    sd_examples: float | None = None  # default: mean / 4
    class_sd: float = 1.0
    placement: str = "round_robin"
    # network
    topology: str = "fat_tree"  # or "jellyfish"
    k_ary: int | None = None  # default: smallest even k with k*k/2 >= num_edges
    jellyfish_degree: int = 3
    link_speed_mbps: float = 10.0  # megabytes per second
    proc_speed_gflops: float = 5.0
    delay_mode: str = "load"
    # model and training
    model: str = "softmax"  # or "mlp"
    hidden_units: int = 32
    l2: float = 0.0
    algorithm: str = "fedavg_ic"
    tau: int = 5
    tau1: int = 1
    tau2: int = 5
    T: int = 100
    num_groups: int = 5
    alpha_iid: float | None = None  # default depends on the algorithm
    alpha_comm: float | None = None
    combined: bool | None = None  # default: on for the grouped variants, off for the baselines
    eta: float = 0.1
    batch_size: int = 128
    decay: float = 0.99
    full_batch: bool = False
    # bookkeeping
    seed: int = 0
    repeats: int = 1
    grid_points: int = 50
    track: bool = True

    def __post_init__(self):
        self.validate()

    # -- validation ------------------------------------------------------
    def validate(self):
        def bad(key, why):
            raise ConfigError(f"config.{key}: {why}")

        if self.dataset not in ("blobs", "idx"):
            bad("dataset", "must be 'blobs' or 'idx'")
        if self.dataset == "idx" and not (self.idx_images and self.idx_labels):
            bad("idx_images", "idx datasets need both idx_images and idx_labels")
        for key in ("num_classes", "input_dim", "per_class", "num_nodes", "num_edges", "tau", "tau1", "tau2",
                    "T", "num_groups", "batch_size", "repeats", "grid_points", "hidden_units"):
            if int(getattr(self, key)) < 1:
                bad(key, "must be a positive integer")
        if self.num_edges > self.num_nodes:
            bad("num_edges", "cannot exceed num_nodes")
        if self.num_groups > self.num_nodes:
            bad("num_groups", "cannot exceed num_nodes")
        if self.diversity not in data.SETTINGS:
            bad("diversity", f"must be one of {sorted(data.SETTINGS)}")
        if self.placement not in ("round_robin", "random"):
            bad("placement", "must be 'round_robin' or 'random'")
        if self.topology not in ("fat_tree", "jellyfish"):
            bad("topology", "must be 'fat_tree' or 'jellyfish'")
        if self.k_ary is not None and (self.k_ary < 2 or self.k_ary % 2):
            bad("k_ary", "must be an even integer >= 2")
        if self.delay_mode not in network.DELAY_MODES:
            bad("delay_mode", f"must be one of {network.DELAY_MODES}")
        if self.model not in (models.SOFTMAX, models.MLP):
            bad("model", "must be 'softmax' or 'mlp'")
        if self.algorithm not in ALGORITHMS:
            bad("algorithm", f"must be one of {ALGORITHMS}")
        if self.link_speed_mbps <= 0:
            bad("link_speed_mbps", "must be positive")
        if self.proc_speed_gflops <= 0:
            bad("proc_speed_gflops", "must be positive")
        if not (math.isfinite(self.eta) and self.eta >= 0):
            bad("eta", "must be finite and nonnegative")
        if not 0 < self.decay <= 1:
            bad("decay", "must be in (0, 1]")
        if self.blob_sigma < 0:
            bad("blob_sigma", "must be nonnegative")
        if self.blob_condition < 1:
            bad("blob_condition", "must be >= 1")
        a_iid, a_comm = self.alphas()
        if a_iid < 0 or a_comm < 0 or a_iid + a_comm <= 0:
            bad("alpha_iid", "cost weights must be nonnegative and not both zero")
        if self.algorithm == "fedavg_i" and a_comm != 0:
            bad("alpha_comm", "must be 0 for fedavg_i (IID cost only)")
        if self.algorithm == "fedavg_c" and a_iid != 0:
            bad("alpha_iid", "must be 0 for fedavg_c (communication cost only)")

    def alphas(self):
        default = {"fedavg_i": (1.0, 0.0), "fedavg_c": (0.0, 1.0)}.get(self.algorithm, (0.5, 0.5))
        return (default[0] if self.alpha_iid is None else float(self.alpha_iid),
                default[1] if self.alpha_comm is None else float(self.alpha_comm))

    def use_combined(self) -> bool:
        if self.combined is not None:
            return bool(self.combined)
        return self.algorithm in ("fedavg_ic", "fedavg_i", "fedavg_c")

    def data_key(self) -> dict:
        """Keys that determine the dataset, split and partition."""
        keys = ("dataset", "num_classes", "input_dim", "per_class", "blob_sigma", "blob_condition", "idx_images",
                "idx_labels", "data_seed", "diversity", "num_nodes", "num_edges", "mean_examples", "sd_examples",
                "class_sd", "placement")
        return {k: getattr(self, k) for k in keys}

    def to_dict(self) -> dict:
        return asdict(self)

    # -- loading ---------------------------------------------------------
    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"config.{unknown[0]}: unknown key")
        return cls(**{k: _coerce(k, v) for k, v in doc.items()})

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_dict(read_config_file(path))

    def override(self, **changes) -> "ExperimentConfig":
        doc = self.to_dict()
        doc.update({k: v for k, v in changes.items() if v is not None})
        return ExperimentConfig.from_dict(doc)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, value):
    """Bring a raw (string or JSON) value to the field's type."""
    kind = str(_FIELD_TYPES[key])
    if value is None or (isinstance(value, str) and value.strip().lower() in ("none", "null", "")
                         and "None" in kind):
        return None
    try:
        if kind.startswith("bool"):
            if isinstance(value, str):
                low = value.strip().lower()
                if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                    raise ValueError(value)
                return low in ("true", "1", "yes", "on")
            return bool(value)
        if kind.startswith("int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind.startswith("float"):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config.{key}: cannot interpret {value!r} as {kind}") from None


def read_config_file(path) -> dict:
    """Read ``key = value`` lines; a leading ``[experiment]`` section header is optional."""
    text = Path(path).read_text()
    if not text.lstrip().startswith("["):
        text = "[experiment]\n" + text
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    if parser.sections() != ["experiment"]:
        raise ConfigError(f"config file {path}: expected a single [experiment] section")
    out = {}
    for key, raw in parser["experiment"].items():
        try:
            out[key] = literal_eval(raw)
        except (ValueError, SyntaxError):
            out[key] = raw.strip().strip('"').strip("'")
    return out


def desk_preset(algorithm: str = "fedavg_ic", **changes) -> ExperimentConfig:
    """Desk-scale non-IID comparison setup used by the end-to-end checks.

    50 nodes on 10 edges of a fat tree, one class per node and per edge,
    softmax regression on ill-conditioned blobs, 10 MB/s links, 5 GFLOPS.
    """
    base = ExperimentConfig(name=f"desk-{algorithm}", dataset="blobs", blob_sigma=0.5, blob_condition=30.0,
                            diversity="Dtt", num_nodes=50, num_edges=10, topology="fat_tree",
                            link_speed_mbps=10.0, proc_speed_gflops=5.0, model="softmax",
                            algorithm=algorithm, eta=2.0, T=1500, repeats=5, track=False)
    return base.override(**changes)


# -- building blocks ---------------------------------------------------------

@dataclass
class Setup:
    """Everything a run needs that does not depend on the run seed."""

    config: ExperimentConfig
    dataset: data.Dataset
    part: data.Partition
    topo: network.Topology
    spec: models.ModelSpec


def build(config: ExperimentConfig) -> Setup:
    seeds = np.random.SeedSequence(config.data_seed).generate_state(4)
    if config.dataset == "blobs":
        ds = data.synth_blobs(config.num_classes, config.input_dim, config.per_class, int(seeds[0]),
                              sigma=config.blob_sigma, condition=config.blob_condition)
    else:
        ds = data.load_idx(config.idx_images, config.idx_labels, num_classes=config.num_classes)
    train, val, test = data.split(ds, int(seeds[1]))
    mean = len(train) / config.num_nodes if config.mean_examples is None else config.mean_examples
    sd = mean / 4 if config.sd_examples is None else config.sd_examples
    part = data.partition(train, config.num_nodes, config.num_edges, data.DiversitySetting.named(config.diversity),
                          mean, sd, int(seeds[2]), class_sd=config.class_sd, placement=config.placement,
                          val=val, test=test)
    counts = np.bincount(part.node_to_edge, minlength=config.num_edges)
    link = config.link_speed_mbps * 1e6
    proc = config.proc_speed_gflops * 1e9
    if config.topology == "fat_tree":
        k = config.k_ary
        if k is None:
            k = 2
            while k * k // 2 < config.num_edges:
                k += 2
        if k * k // 2 < config.num_edges:
            raise ConfigError(f"config.k_ary: a {k}-ary fat tree has only {k * k // 2} edge switches")
        topo = network.build_fat_tree(k, int(counts.max()), seed=int(seeds[3]), host_edges=part.node_to_edge,
                                      link_speed=link, proc_speed=proc)
    else:
        topo = network.build_jellyfish(config.num_edges, config.jellyfish_degree, int(counts.max()), int(seeds[3]),
                                       host_edges=part.node_to_edge, link_speed=link, proc_speed=proc)
    if config.model == models.SOFTMAX:
        spec = models.softmax_regression(ds.input_dim, ds.num_classes, config.l2)
    else:
        spec = models.mlp(ds.input_dim, ds.num_classes, config.hidden_units, config.l2)
    return Setup(config, ds, part, topo, spec)


def run_once(setup: Setup, seed: int) -> engine.RunTrace:
    c = setup.config
    hyper = engine.Hyper(c.eta, c.batch_size, c.decay, c.full_batch)
    schedule = engine.Schedule(c.tau1, c.tau2, c.T)
    kw = dict(seed=seed, track=c.track, delay_mode=c.delay_mode, combined=c.use_combined())
    args = (setup.part, setup.topo, setup.spec)
    if c.algorithm == "fedavg":
        return engine.run_fedavg(*args, c.tau, c.T, hyper, **kw)
    if c.algorithm == "hierfavg":
        return engine.run_hierfavg(*args, schedule, hyper, **kw)
    a_iid, a_comm = c.alphas()
    return engine.run_fedavg_ic(*args, schedule, grouping.CostWeights(a_iid, a_comm), c.num_groups, hyper,
                                algorithm=c.algorithm, **kw)


# -- summaries ---------------------------------------------------------------

def value_at(trace: engine.RunTrace, name: str, times) -> np.ndarray:
    """Step-function value of a trace column at the given simulated times (latest row at or before t)."""
    t = trace.column("sim_seconds")
    v = trace.column(name)
    idx = np.searchsorted(t, np.asarray(times, dtype=np.float64), side="right") - 1
    return v[np.clip(idx, 0, len(v) - 1)]


def summarize(traces, grid_points: int = 50, horizon: float | None = None) -> dict:
    """Mean and sd (ddof=1; zero for a single repeat) of each metric on an even time grid."""
    if horizon is None:
        horizon = max(float(tr.rows[-1].sim_seconds) for tr in traces)
    grid = np.linspace(0.0, horizon, grid_points)
    out = {"sim_seconds": grid}
    for name in SUMMARY_METRICS:
        vals = np.array([value_at(tr, name, grid) for tr in traces])
        out[f"{name}_mean"] = vals.mean(axis=0)
        out[f"{name}_sd"] = vals.std(axis=0, ddof=1) if len(traces) > 1 else np.zeros(grid_points)
    return out


def mean_curve(traces, name: str = "test_accuracy"):
    """Mean across repeats, evaluated at every time any repeat recorded a row."""
    times = np.unique(np.concatenate([tr.column("sim_seconds") for tr in traces]))
    return times, np.mean([value_at(tr, name, times) for tr in traces], axis=0)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def git_blob_hash(payload: bytes) -> str:
    """Content hash in git's blob format."""
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


# -- experiments -------------------------------------------------------------

@dataclass
class Artifact:
    path: Path
    config: ExperimentConfig
    traces: list
    summary: dict
    manifest: dict = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return bool(self.manifest.get("complete", False))


def run_experiment(config: ExperimentConfig, out_dir, setup: Setup | None = None) -> Artifact:
    """Run ``config.repeats`` seeds (``seed .. seed + repeats - 1``) and write the artifact directory.

    Raises :class:`DivergenceError` after writing everything if any repeat
    diverged (the manifest is then marked incomplete).
    """
    out = Path(out_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    setup = build(config) if setup is None else setup
    files = {}

    def write(rel: str, text: str):
        (out / rel).write_text(text)
        files[rel] = git_blob_hash(text.encode())

    write("partition.json", setup.part.to_json())
    write("topology.json", setup.topo.to_json())
    traces, diverged = [], []
    for seed in range(config.seed, config.seed + config.repeats):
        trace = run_once(setup, seed)
        traces.append(trace)
        write(f"runs/seed{seed}.csv", trace.to_csv())
        if trace.membership is not None:
            write(f"runs/membership_seed{seed}.json", trace.membership.to_json())
        if trace.diverged:
            diverged.append(seed)
    summary = summarize(traces, config.grid_points)
    header = list(summary)
    write("summary.csv", _csv_text(header, [[_fmt(summary[h][j]) for h in header]
                                           for j in range(config.grid_points)]))
    ds = setup.dataset
    inputs = {"config": git_blob_hash(json.dumps(config.to_dict(), sort_keys=True).encode()),
              "dataset": git_blob_hash(ds.X.tobytes() + ds.y.tobytes()),
              "partition": files["partition.json"], "topology": files["topology.json"]}
    manifest = {
        "config": config.to_dict(),
        "inputs": inputs,
        "input_hash": git_blob_hash(json.dumps(inputs, sort_keys=True).encode()),
        "files": files,
        "seeds": list(range(config.seed, config.seed + config.repeats)),
        "complete": not diverged,
        "diverged_seeds": diverged,
        "run_meta": [_jsonable(tr.meta) for tr in traces],
        "created": {"unix_time": time.time()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    art = Artifact(out, config, traces, summary, manifest)
    if diverged:
        raise DivergenceError(f"{config.name}: seeds {diverged} diverged; artifacts in {out} marked incomplete")
    return art


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def load_config_from_manifest(path) -> ExperimentConfig:
    doc = json.loads(Path(path).read_text())
    return ExperimentConfig.from_dict(doc["config"])


# -- comparisons -------------------------------------------------------------

def time_to_accuracy(traces, target: float, tol: float = 1e-12) -> float:
    """First simulated second at which the mean accuracy curve reaches ``target`` (``inf`` if never)."""
    times, acc = mean_curve(traces)
    hit = np.flatnonzero(acc >= target - tol)
    return float(times[hit[0]]) if len(hit) else math.inf


def accuracy_at_time(traces, budget: float):
    vals = np.array([value_at(tr, "test_accuracy", [budget])[0] for tr in traces])
    return float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0


def _baseline_index(configs) -> int:
    for j, c in enumerate(configs):
        if c.algorithm == "fedavg":
            return j
    return 0


def compare_artifacts(artifacts, metric: str = "time_to_accuracy", budget: float | None = None) -> list:
    """Comparison rows (dicts) relative to the FedAvg entry (or the first entry if there is none).

    ``time_to_accuracy``: the target is the baseline's final mean accuracy; a
    never-reached target is reported as ``"-"``. ``accuracy_at_time``: mean and
    sd of test accuracy at ``budget`` (default: the baseline's horizon).
    """
    if metric not in METRICS:
        raise ConfigError(f"metric must be one of {METRICS}")
    configs = [a.config for a in artifacts]
    keys = [json.dumps(c.data_key(), sort_keys=True) for c in configs]
    if len(set(keys)) > 1:
        raise ConfigError("compared configs must share the dataset and partition settings (incl. data_seed)")
    b = _baseline_index(configs)
    base = artifacts[b]
    horizon = max(float(tr.rows[-1].sim_seconds) for tr in base.traces)
    rows = []
    if metric == "time_to_accuracy":
        _, base_curve = mean_curve(base.traces)
        target = float(base_curve[-1])
        base_t = time_to_accuracy(base.traces, target)
        for a in artifacts:
            t = time_to_accuracy(a.traces, target)
            rows.append({"name": a.config.name, "algorithm": a.config.algorithm, "target_accuracy": target,
                         "time_to_accuracy": t if math.isfinite(t) else NEVER,
                         "speedup": _ratio(base_t, t)})
    else:
        budget = horizon if budget is None else float(budget)
        base_mean, base_sd = accuracy_at_time(base.traces, budget)
        for a in artifacts:
            m, sd = accuracy_at_time(a.traces, budget)
            pooled = math.sqrt((sd ** 2 + base_sd ** 2) / 2)
            rows.append({"name": a.config.name, "algorithm": a.config.algorithm, "budget_seconds": budget,
                         "accuracy_mean": m, "accuracy_sd": sd, "gain_vs_baseline": m - base_mean,
                         "gain_in_pooled_sd": (m - base_mean) / pooled if pooled > 0 else
                         (0.0 if m == base_mean else math.copysign(math.inf, m - base_mean))})
    return rows


def _ratio(base_t: float, t: float):
    if not math.isfinite(t):
        return NEVER
    if t == base_t:
        return 1.0
    return base_t / t if t > 0 else math.inf


def rows_to_csv(rows) -> str:
    header = list(rows[0]) if rows else []
    return _csv_text(header, [[_fmt(r[h]) for h in header] for r in rows])


def compare(configs, metric: str = "time_to_accuracy", out_dir=None, budget: float | None = None) -> str:
    """Run every config (sharing one built setup) and return the comparison CSV text."""
    configs = list(configs)
    if not configs:
        raise ConfigError("nothing to compare")
    keys = [json.dumps(c.data_key(), sort_keys=True) for c in configs]
    if len(set(keys)) > 1:
        raise ConfigError("compared configs must share the dataset and partition settings (incl. data_seed)")
    out = Path(out_dir) if out_dir is not None else Path(tempfile.mkdtemp(prefix="groupfl-"))
    artifacts = [run_experiment(c, out / f"{j:02d}-{c.name}") for j, c in enumerate(configs)]
    text = rows_to_csv(compare_artifacts(artifacts, metric, budget))
    (out / f"comparison_{metric}.csv").write_text(text)
    return text


# -- sweeps ------------------------------------------------------------------

def sweep(base: ExperimentConfig, grid: dict, out_dir) -> str:
    """Cartesian sweep over ``grid`` (key -> list of values); returns the sweep CSV text."""
    for key in grid:
        if key not in _FIELD_TYPES:
            raise ConfigError(f"config.{key}: unknown sweep key")
    out = Path(out_dir)
    keys = list(grid)
    rows = []
    for j, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        changes = dict(zip(keys, combo))
        label = "-".join(f"{k}={v}" for k, v in changes.items())
        cfg = base.override(name=f"{base.name}[{label}]", **changes)
        art = run_experiment(cfg, out / f"{j:03d}")
        final_acc = [tr.rows[-1].test_accuracy for tr in art.traces]
        final_t = [tr.rows[-1].sim_seconds for tr in art.traces]
        rows.append({**{k: v for k, v in changes.items()},
                     "final_accuracy_mean": float(np.mean(final_acc)),
                     "final_accuracy_sd": float(np.std(final_acc, ddof=1)) if len(final_acc) > 1 else 0.0,
                     "sim_seconds_mean": float(np.mean(final_t)),
                     "artifact": f"{j:03d}"})
    text = rows_to_csv(rows)
    (out / "sweep.csv").write_text(text)
    return text


# -- invariant checks ----------------------------------------------------------

def check(config: ExperimentConfig, steps: int = 20) -> list:
    """Quick invariant checks on the config's setup; returns ``(name, ok, detail)`` triples."""
    setup = build(config.override(T=steps, repeats=1))
    part, topo, spec = setup.part, setup.topo, setup.spec
    results = []

    hop = topo.hop[: part.num_nodes, : part.num_nodes]
    metric_ok = bool((np.diag(hop) == 0).all() and (hop == hop.T).all()
                     and (hop[:, :, None] <= hop[:, None, :] + hop.T[None, :, :]).all())
    results.append(("hop matrix is a metric", metric_ok, f"{part.num_nodes} hosts"))

    rng = np.random.default_rng(config.seed)
    w = spec.init_params(rng)
    X, y = part.node_data(0)
    g = models.gradient(spec, w, X, y)
    v = rng.standard_normal(w.shape)
    eps = 1e-6
    fd = (models.loss(spec, w + eps * v, X, y) - models.loss(spec, w - eps * v, X, y)) / (2 * eps)
    err = abs(fd - g @ v) / max(1e-12, abs(fd) + abs(g @ v))
    results.append(("gradient matches finite differences", err < 1e-4, f"relative error {err:.2e}"))

    hyper = engine.Hyper(config.eta, config.batch_size, config.decay, full_batch=True)
    schedule = engine.Schedule(config.tau1, config.tau2, steps)
    member = grouping.edge_grouping(part)
    plain = engine.run_group_fl(part, topo, spec, member, schedule, hyper, combined=False, seed=0, track=False)
    comb = engine.run_group_fl(part, topo, spec, member, schedule, hyper, combined=True, seed=0, track=False)
    gap = max((float(np.abs(a - b).max()) for (_, a), (_, b) in zip(plain.global_models, comb.global_models)),
              default=0.0)
    results.append(("combined aggregation leaves models unchanged", gap <= 1e-9, f"max gap {gap:.2e}"))

    runs = [engine.GroupFL(part, topo, spec, m, schedule, hyper, delay_mode=config.delay_mode, track=False)
            for m in (grouping.edge_grouping(part), grouping.single_group(part.num_nodes),
                      grouping.random_membership(part.num_nodes, min(config.num_groups, part.num_nodes), rng))]
    d_global = {r.d_global for r in runs}
    results.append(("global delay independent of grouping", len(d_global) == 1,
                    ", ".join(f"{d:.6g} s" for d in sorted(d_global))))

    trace = run_once(setup, config.seed)
    results.append(("run stays finite", not trace.diverged, f"{len(trace.rows)} rows"))
    if trace.membership is not None:
        try:
            trace.membership.validate()
            results.append(("membership partitions the nodes", True, f"{trace.membership.num_groups} groups"))
        except InvariantError as exc:
            results.append(("membership partitions the nodes", False, str(exc)))
    return results
