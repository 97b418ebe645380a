"""Federated training loops on a simulated clock.

All three algorithms share one loop (:class:`GroupFL`): every node takes a
local step, every ``tau1`` steps each group averages its members, every
``tau1 * tau2`` steps all nodes are averaged into the global model. FedAvg is
the one-group, ``tau2 = 1`` case; HierFAVG uses one group per network edge;
FedAvg-IC starts with ``tau1 = tau2 = 1``, groups the nodes after the first
global aggregation and then switches to its configured steps.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import grouping, models
from .data import Partition
from .errors import ConfigError, DomainError
from .grouping import CostWeights, GradientSnapshot, Membership
from .network import DelayModel, Topology, agg_delay, compute_delay

log = logging.getLogger(__name__)

CSV_COLUMNS = ["step", "sim_seconds", "epoch", "train_loss", "test_accuracy", "delta", "Delta",
               "cost_iid", "cost_comm", "algorithm", "seed", "comm_seconds", "compute_seconds"]


@dataclass
class Hyper:
    eta: float = 0.1
    batch_size: int = 128
    decay: float = 0.99
    full_batch: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.eta) and self.eta >= 0):
            raise ConfigError("eta must be finite and nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not 0 < self.decay <= 1:
            raise ConfigError("decay must be in (0, 1]")


@dataclass
class Schedule:
    tau1: int = 1
    tau2: int = 5
    T: int = 100

    def __post_init__(self):
        if min(self.tau1, self.tau2, self.T) < 1:
            raise ConfigError("tau1, tau2 and T must be positive")

    @property
    def period(self) -> int:
        return self.tau1 * self.tau2


@dataclass
class TraceRow:
    step: int
    sim_seconds: float
    epoch: float
    train_loss: float
    test_accuracy: float
    delta: float
    Delta: float
    cost_iid: float
    cost_comm: float
    comm_seconds: float
    compute_seconds: float
    event: str = "global"


@dataclass
class RunTrace:
    algorithm: str
    seed: int
    rows: list = field(default_factory=list)
    global_models: list = field(default_factory=list)  # (step, w) after each global aggregation
    membership: Membership | None = None
    final: np.ndarray | None = None
    diverged: bool = False
    meta: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def to_csv(self, fh=None) -> str:
        out = io.StringIO() if fh is None else fh
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow([r.step, repr(r.sim_seconds), repr(r.epoch), repr(r.train_loss),
                             repr(r.test_accuracy), repr(r.delta), repr(r.Delta), repr(r.cost_iid),
                             repr(r.cost_comm), self.algorithm, self.seed, repr(r.comm_seconds),
                             repr(r.compute_seconds)])
        return out.getvalue() if fh is None else ""


@dataclass
class FedState:
    """What observers see after each step (arrays are live; copy to keep them)."""

    t: int
    locals: np.ndarray
    groups: np.ndarray
    w: np.ndarray  # |D_i|/|D|-weighted average of the locals
    eta: float
    event: str | None
    membership: Membership
    tau1: int
    tau2: int
    offset: int
    clock: float


def measure_divergences(spec: models.ModelSpec, w: np.ndarray, part: Partition, membership: Membership,
                        snap: GradientSnapshot | None = None):
    """Local-to-group and group-to-global gradient divergence at ``w`` (full batch).

    Returns ``(delta, Delta, per_node, per_group)``.
    """
    if snap is None:
        snap = grouping.snapshot(spec, w, part, batch_cap=int(part.sizes.max()), seed=0)
    return divergences_from_snapshot(snap, membership)


def divergences_from_snapshot(snap: GradientSnapshot, membership: Membership):
    s = snap.sizes
    total = s.sum()
    per_node = np.zeros(snap.num_nodes)
    per_group = np.zeros(membership.num_groups)
    delta = Delta = 0.0
    for k in range(membership.num_groups):
        m = membership.members(k)
        g_k = (s[m] / s[m].sum()) @ snap.grads[m]
        per_node[m] = np.linalg.norm(snap.grads[m] - g_k, axis=1)
        per_group[k] = np.linalg.norm(g_k - snap.global_grad)
        delta += float((s[m] / total) @ per_node[m])
        Delta += float(s[m].sum() / total * per_group[k])
    return delta, Delta, per_node, per_group


class _Batcher:
    """Per-node minibatches without replacement, reshuffled every local epoch."""

    def __init__(self, part: Partition, batch_size: int, full_batch: bool, seed: int):
        self.part = part
        self.batch_size = batch_size
        self.full_batch = full_batch
        self.rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(part.num_nodes)]
        self.order = [None] * part.num_nodes
        self.pos = [0] * part.num_nodes

    def next(self, i: int):
        X, y = self.part.node_data(i)
        if self.full_batch:
            return X, y
        if self.order[i] is None or self.pos[i] >= len(y):
            self.order[i] = self.rngs[i].permutation(len(y))
            self.pos[i] = 0
        pick = self.order[i][self.pos[i]:self.pos[i] + self.batch_size]
        self.pos[i] += len(pick)
        return X[pick], y[pick]


class GroupFL:
    """One federated run. Use the ``run_*`` functions rather than this class directly."""

    def __init__(self, part: Partition, topo: Topology, spec: models.ModelSpec, membership: Membership,
                 schedule: Schedule, hyper: Hyper, *, combined: bool = False, seed: int = 0,
                 algorithm: str = "group_fl", delay_mode: str = "load", server: int = 0,
                 init: np.ndarray | None = None, track: bool = True,
                 observer: Callable[[FedState], None] | None = None,
                 regroup: Callable[["GroupFL"], None] | None = None):
        if membership.num_nodes != part.num_nodes:
            raise DomainError("membership does not cover the partition's nodes")
        if topo.num_hosts < part.num_nodes:
            raise DomainError("topology has fewer hosts than the partition has nodes")
        self.part, self.topo, self.spec, self.hyper = part, topo, spec, hyper
        self.schedule = schedule
        self.combined = combined
        self.seed = seed
        self.server = server
        self.track = track
        self.observer = observer
        self.regroup = regroup
        self.dm = DelayModel(spec.param_count, topo.proc_speed, delay_mode)
        self.weights = part.weights
        self.tau1, self.tau2, self.offset = schedule.tau1, schedule.tau2, 0
        self.X_all, self.y_all = part.pooled()
        w0 = spec.init_params(np.random.default_rng(seed)) if init is None else np.array(init, dtype=np.float64)
        self.locals = np.tile(w0, (part.num_nodes, 1))
        self.w = w0.copy()
        self.batcher = _Batcher(part, hyper.batch_size, hyper.full_batch, seed)
        self.trace = RunTrace(algorithm, seed, meta={
            "model": spec.to_dict(), "loss": "softmax cross-entropy",
            "init": "uniform[-0.05, 0.05]", "combined": combined, "delay_mode": delay_mode,
            "fallback_nodes": list(part.fallback_nodes)})
        self.t = 0
        self.rounds = 0
        self.clock = self.comm_time = self.compute_time = 0.0
        self.examples = 0
        self.grouped = False
        self.set_membership(membership)

    # -- bookkeeping -----------------------------------------------------
    def set_membership(self, membership: Membership):
        self.membership = membership
        self.groups = np.tile(self.w, (membership.num_groups, 1))
        self.group_members = membership.groups()
        edges = self.part.node_to_edge if self.combined else None
        all_nodes = range(self.part.num_nodes)
        self.d_global = agg_delay(self.topo, self.dm, all_nodes, self.server, combined=edges)
        self.d_group = max(agg_delay(self.topo, self.dm, m, membership.medoids[k], combined=edges)
                           for k, m in enumerate(self.group_members))
        self.trace.membership = membership

    def eta(self) -> float:
        return self.hyper.eta * self.hyper.decay ** self.rounds

    def _aggregate(self, nodes) -> np.ndarray:
        nodes = np.asarray(nodes)
        a = self.weights[nodes] / self.weights[nodes].sum()
        if not self.combined:
            return models.weighted_average([self.locals[i] for i in nodes], a)
        edges = np.asarray(self.part.node_to_edge)[nodes]
        total = None
        for e in np.unique(edges):
            sel = np.flatnonzero(edges == e)
            partial = a[sel[0]] * self.locals[nodes[sel[0]]]
            for j in sel[1:]:
                partial = partial + a[j] * self.locals[nodes[j]]
            total = partial if total is None else total + partial
        return total

    def _advance(self, comm=0.0, compute=0.0):
        self.comm_time += comm
        self.compute_time += compute
        self.clock += comm + compute

    def _row(self, event: str):
        w = self.w if event == "global" else models.weighted_average(list(self.locals), self.weights)
        train_loss = models.loss(self.spec, w, self.X_all, self.y_all)
        test = self.part.test
        acc = models.accuracy(self.spec, w, test.X, test.y) if test is not None else float("nan")
        delta = Delta = cost_iid = cost_comm = float("nan")
        if self.track:
            snap = grouping.snapshot(self.spec, w, self.part, batch_cap=int(self.part.sizes.max()), seed=0)
            delta, Delta, _, _ = divergences_from_snapshot(snap, self.membership)
            cost_iid, cost_comm = grouping.membership_costs(snap, self.topo, self.membership)
        row = TraceRow(self.t, self.clock, self.examples / len(self.part.train), train_loss, acc,
                       delta, Delta, cost_iid, cost_comm, self.comm_time, self.compute_time, event)
        self.trace.rows.append(row)
        return row

    # -- main loop -------------------------------------------------------
    def step(self):
        self.t += 1
        eta = self.eta()
        biggest = 0
        for i in range(self.part.num_nodes):
            X, y = self.batcher.next(i)
            biggest = max(biggest, len(y))
            self.examples += len(y)
            self.locals[i] = models.sgd_step(self.spec, self.locals[i], X, y, eta)
        self._advance(compute=compute_delay(self.dm, 1, biggest))
        if not np.isfinite(self.locals).all():
            self.trace.diverged = True
            self.trace.rows.append(TraceRow(self.t, self.clock, self.examples / len(self.part.train),
                                            float("nan"), float("nan"), float("nan"), float("nan"),
                                            float("nan"), float("nan"), self.comm_time,
                                            self.compute_time, "diverged"))
            log.warning("run %s seed %d diverged at step %d", self.trace.algorithm, self.seed, self.t)
            return False

        u = self.t - self.offset
        event = None
        if u % (self.tau1 * self.tau2) == 0:
            event = "global"
            self.w = self._aggregate(np.arange(self.part.num_nodes))
            self.locals[:] = self.w
            self.groups[:] = self.w
            self.rounds += 1
            self._advance(comm=self.d_global)
            self.trace.global_models.append((self.t, self.w.copy()))
        elif u % self.tau1 == 0:
            event = "group"
            for k, members in enumerate(self.group_members):
                self.groups[k] = self._aggregate(members)
                self.locals[members] = self.groups[k]
            self._advance(comm=self.d_group)
        w_avg = self.w if event == "global" else models.weighted_average(list(self.locals), self.weights)
        if self.observer is not None:
            self.observer(FedState(self.t, self.locals, self.groups, w_avg, eta, event, self.membership,
                                   self.tau1, self.tau2, self.offset, self.clock))
        if event == "global" and self.regroup is not None and not self.grouped:
            self.regroup(self)
        if event is not None:
            self._row(event)
        return True

    def run(self) -> RunTrace:
        self._row("start")
        if self.observer is not None:
            self.observer(FedState(0, self.locals, self.groups, self.w.copy(), self.eta(), "start",
                                   self.membership, self.tau1, self.tau2, self.offset, self.clock))
        while self.t < self.schedule.T:
            if not self.step():
                break
        self.trace.final = self.w.copy() if self.trace.rows[-1].event == "global" else \
            models.weighted_average(list(self.locals), self.weights)
        self.trace.meta["rounds"] = self.rounds
        return self.trace


def run_fedavg(part, topo, spec, tau: int, T: int, hyper: Hyper, seed: int = 0, **kw) -> RunTrace:
    """FedAvg: local steps everywhere, global average every ``tau`` steps."""
    membership = grouping.single_group(part.num_nodes, medoid=kw.get("server", 0))
    return GroupFL(part, topo, spec, membership, Schedule(tau, 1, T), hyper, seed=seed,
                   algorithm=kw.pop("algorithm", "fedavg"), **kw).run()


def run_group_fl(part, topo, spec, membership: Membership, schedule: Schedule, hyper: Hyper,
                 combined: bool = False, seed: int = 0, **kw) -> RunTrace:
    """Two-tier averaging: groups every ``tau1`` steps, everyone every ``tau1 * tau2`` steps."""
    return GroupFL(part, topo, spec, membership, schedule, hyper, combined=combined, seed=seed,
                   algorithm=kw.pop("algorithm", "group_fl"), **kw).run()


def run_hierfavg(part, topo, spec, schedule: Schedule, hyper: Hyper, seed: int = 0, **kw) -> RunTrace:
    return run_group_fl(part, topo, spec, grouping.edge_grouping(part), schedule, hyper,
                        combined=kw.pop("combined", False), seed=seed,
                        algorithm=kw.pop("algorithm", "hierfavg"), **kw)


def run_fedavg_ic(part, topo, spec, schedule: Schedule, weights: CostWeights, num_groups: int, hyper: Hyper,
                  seed: int = 0, *, combined: bool = True, max_steady: int = 1, batch_cap: int | None = None,
                  tentative: bool = True, **kw) -> RunTrace:
    """FedAvg-IC: one warm-up global round, one k-medoids grouping, then grouped training.

    The grouping exchange is charged as one extra global round of
    communication plus one gradient evaluation per node.
    """
    if num_groups > part.num_nodes:
        raise ConfigError("more groups than nodes")
    if batch_cap is None:
        batch_cap = int(part.sizes.max()) if hyper.full_batch else hyper.batch_size

    def regroup(run: GroupFL):
        snap = grouping.snapshot(spec, run.w, part, batch_cap, seed)
        member = grouping.node_grouping(snap, topo, num_groups, weights.fresh(), seed,
                                        max_steady=max_steady, tentative=tentative)
        run.grouped = True
        run.tau1, run.tau2, run.offset = schedule.tau1, schedule.tau2, run.t
        run._advance(comm=run.d_global, compute=compute_delay(run.dm, 1, min(batch_cap, int(part.sizes.max()))))
        run.set_membership(member)
        run.trace.meta["grouping_cost_history"] = member.cost_history
        run.trace.meta["grouping_rejected_steps"] = member.rejected_steps

    start = grouping.single_group(part.num_nodes, medoid=kw.get("server", 0))
    run = GroupFL(part, topo, spec, start, Schedule(1, 1, schedule.T), hyper, combined=combined, seed=seed,
                  algorithm=kw.pop("algorithm", "fedavg_ic"), regroup=regroup, **kw)
    return run.run()


def run_centralized(spec, X, y, T: int, hyper: Hyper, init: np.ndarray, decay_every: int = 1) -> list:
    """Plain gradient descent on pooled data; returns the iterates ``w(0..T)``."""
    w = np.array(init, dtype=np.float64)
    out = [w.copy()]
    for t in range(1, T + 1):
        eta = hyper.eta * hyper.decay ** ((t - 1) // decay_every)
        w = models.sgd_step(spec, w, X, y, eta)
        out.append(w.copy())
    return out


# -- virtual models ---------------------------------------------------------

@dataclass
class VirtualTrace:
    """Centrally trained shadow models re-synchronized at interval starts."""

    v_global: np.ndarray
    v_group: np.ndarray
    r: int = 1
    l: int = 1
    gaps: list = field(default_factory=list)  # (t, l, ||w(t) - v_[l](t)||)

    @classmethod
    def start(cls, state: FedState) -> "VirtualTrace":
        return cls(state.w.copy(), state.groups.copy())


def virtual_step(trace: VirtualTrace, state: FedState, part: Partition, spec: models.ModelSpec) -> VirtualTrace:
    """Advance the virtual models to ``state.t``.

    Each virtual model takes one full-batch gradient step on its pooled data
    (group data for group models, all data for the global one). The gap
    ``||w(t) - v_[l](t)||`` is recorded before re-synchronizing, so the last
    step of every interval is included. At interval starts the models are then
    reset to the federated group/global models.
    """
    membership = state.membership
    X, y = part.pooled()
    v_global = trace.v_global - state.eta * models.gradient(spec, trace.v_global, X, y)
    trace.gaps.append((state.t, trace.l, float(np.linalg.norm(state.w - v_global))))
    v_group = trace.v_group.copy()
    if v_group.shape[0] != membership.num_groups:
        v_group = state.groups.copy()
    for k, members in enumerate(membership.groups()):
        Xk, yk = part.pooled(members)
        v_group[k] = v_group[k] - state.eta * models.gradient(spec, v_group[k], Xk, yk)
    if state.event == "global":
        v_global = state.w.copy()
        trace.l += 1
    if state.event in ("global", "group"):
        v_group = state.groups.copy()
        trace.r += 1
    trace.v_global, trace.v_group = v_global, v_group
    return trace


class VirtualTracker:
    """Engine observer that keeps a :class:`VirtualTrace` plus the divergences driving it.

    For step ``t`` it records, per node, the local-to-group gradient gap at the
    virtual group model ``v^k(t-1)`` and, per group, the group-to-global gap at
    the virtual global model ``v(t-1)`` -- the points where the one-step
    recursion behind the gap bound evaluates them.
    """

    def __init__(self, part: Partition, spec: models.ModelSpec):
        self.part, self.spec = part, spec
        self.trace: VirtualTrace | None = None
        self.records: list = []  # (t, l, per-node delta_i, per-group Delta_k, membership)
        self.divergences: list = []  # (t, delta, Delta) measured at w(t)

    def _virtual_divergences(self, membership: Membership):
        part, spec = self.part, self.spec
        per_node = np.zeros(part.num_nodes)
        per_group = np.zeros(membership.num_groups)
        X, y = part.pooled()
        g_all = models.gradient(spec, self.trace.v_global, X, y)
        v_group = self.trace.v_group
        for k, members in enumerate(membership.groups()):
            Xk, yk = part.pooled(members)
            per_group[k] = np.linalg.norm(models.gradient(spec, self.trace.v_global, Xk, yk) - g_all)
            g_k = models.gradient(spec, v_group[k], Xk, yk)
            for i in members:
                Xi, yi = part.node_data(i)
                per_node[i] = np.linalg.norm(models.gradient(spec, v_group[k], Xi, yi) - g_k)
        return per_node, per_group

    def __call__(self, state: FedState):
        if self.trace is None:
            self.trace = VirtualTrace.start(state)
        else:
            if self.trace.v_group.shape[0] != state.membership.num_groups:
                self.trace.v_group = state.groups.copy()
            per_node, per_group = self._virtual_divergences(state.membership)
            self.records.append((state.t, self.trace.l, per_node, per_group, state.membership))
            virtual_step(self.trace, state, self.part, self.spec)
        delta, Delta, _, _ = measure_divergences(self.spec, state.w, self.part, state.membership)
        self.divergences.append((state.t, delta, Delta))


def virtual_gap_bound(delta: float, Delta: float, eta: float, beta: float, tau1: int, tau2: int) -> float:
    g = eta * beta + 1.0
    return delta / beta * (g ** tau1 - 1.0) + Delta / beta * (g ** (tau1 * tau2) - 1.0)


def interval_divergences(tracker: VirtualTracker) -> dict:
    """Per global interval ``l``: size-weighted sums of each node's / group's largest divergence.

    Step ``t`` belongs to the interval that is open when it is taken, which
    is ``ceil(t / (tau1 * tau2))`` for a fixed schedule.
    """
    worst: dict = {}
    for t, l, per_node, per_group, membership in tracker.records:
        if l not in worst:
            worst[l] = (per_node.copy(), np.zeros(membership.num_groups), membership)
        node_max, group_max, _ = worst[l]
        np.maximum(node_max, per_node, out=node_max)
        if group_max.shape == per_group.shape:
            np.maximum(group_max, per_group, out=group_max)
    s = tracker.part.sizes.astype(np.float64)
    out = {}
    for l, (node_max, group_max, membership) in worst.items():
        group_w = np.array([s[m].sum() for m in membership.groups()]) / s.sum()
        out[l] = (float(s / s.sum() @ node_max), float(group_w @ group_max))
    return out


def check_virtual_gap(tracker: VirtualTracker, eta: float, beta: float, tau1: int, tau2: int):
    """Compare every recorded gap ``||w(t) - v_[l](t)||`` with the bound for its interval.

    Returns a list of ``(t, l, gap, bound)``.
    """
    worst = interval_divergences(tracker)
    return [(t, l, gap, virtual_gap_bound(*worst[l], eta, beta, tau1, tau2)) for t, l, gap in tracker.trace.gaps]
