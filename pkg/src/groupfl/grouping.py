"""IID- and communication-aware node grouping (k-medoids over a combined cost).

The assign cost of node ``i`` for group ``k`` mixes the group-to-global
gradient divergence of ``k`` (with ``i`` counted as a member) and the hop
distance from ``i`` to the group's medoid. The update cost of making ``i``
the medoid of its group mixes ``i``'s weighted local-to-global divergence and
its summed hop distance to the other members. Each raw cost family is divided
by a normalizer frozen at the first value it produces.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import models
from .data import Partition
from .errors import DomainError, InvariantError
from .network import Topology

log = logging.getLogger(__name__)

STEADY_TOL = 1e-9
NORMALIZER_FLOOR = 1e-12  # first raw costs below this are rounding noise and normalize by 1
TIE_TOL = 1e-12  # normalized costs this close count as tied (lowest index wins)


@dataclass
class GradientSnapshot:
    """Per-node gradients at one parameter vector, plus their weighted mean."""

    grads: np.ndarray  # (num_nodes, param_count)
    global_grad: np.ndarray
    sizes: np.ndarray  # |D_i|

    def __post_init__(self):
        expect = self.weights @ self.grads
        if not np.allclose(expect, self.global_grad, rtol=0, atol=1e-9):
            raise InvariantError("global gradient is not the weighted mean of node gradients")

    @property
    def num_nodes(self) -> int:
        return self.grads.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return self.sizes / self.sizes.sum()

    @classmethod
    def from_grads(cls, grads, sizes) -> "GradientSnapshot":
        grads = np.asarray(grads, dtype=np.float64)
        sizes = np.asarray(sizes, dtype=np.float64)
        return cls(grads, (sizes / sizes.sum()) @ grads, sizes)


def snapshot(spec: models.ModelSpec, w: np.ndarray, part: Partition, batch_cap: int,
             seed: int) -> GradientSnapshot:
    """Gradient of every node's loss at ``w``; nodes larger than ``batch_cap`` are subsampled."""
    rng = np.random.default_rng(seed)
    grads = []
    for i in range(part.num_nodes):
        X, y = part.node_data(i)
        if len(y) == 0:
            raise DomainError(f"node {i} has no data")
        if len(y) > batch_cap:
            pick = np.sort(rng.choice(len(y), size=batch_cap, replace=False))
            X, y = X[pick], y[pick]
        grads.append(models.gradient(spec, w, X, y))
    return GradientSnapshot.from_grads(np.array(grads), part.sizes)


@dataclass
class Membership:
    assign: np.ndarray  # node -> group
    medoids: list  # group -> node
    cost_history: list = field(default_factory=list)
    rejected_steps: int = 0

    def __post_init__(self):
        self.assign = np.asarray(self.assign, dtype=np.int64)
        self.medoids = [int(m) for m in self.medoids]
        self.validate()

    @property
    def num_groups(self) -> int:
        return len(self.medoids)

    @property
    def num_nodes(self) -> int:
        return len(self.assign)

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assign == k)

    def groups(self) -> list:
        return [self.members(k) for k in range(self.num_groups)]

    def validate(self):
        K = self.num_groups
        if K == 0 or self.assign.min() < 0 or self.assign.max() >= K:
            raise InvariantError("every node must belong to exactly one existing group")
        if len(set(self.medoids)) != K:
            raise InvariantError("medoids must be distinct")
        for k, m in enumerate(self.medoids):
            if self.assign[m] != k:
                raise InvariantError(f"medoid {m} of group {k} is not a member")

    def canonical(self) -> tuple:
        """Groups as a sorted tuple of node tuples (labels ignored)."""
        return tuple(sorted(tuple(g.tolist()) for g in self.groups()))

    def to_json(self) -> str:
        return json.dumps({"assign": {str(i): int(k) for i, k in enumerate(self.assign)},
                           "medoids": {str(k): m for k, m in enumerate(self.medoids)}}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Membership":
        doc = json.loads(text)
        n, K = len(doc["assign"]), len(doc["medoids"])
        return cls([doc["assign"][str(i)] for i in range(n)], [doc["medoids"][str(k)] for k in range(K)])


@dataclass
class CostWeights:
    alpha_iid: float = 0.5
    alpha_comm: float = 0.5
    normalizers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.alpha_iid < 0 or self.alpha_comm < 0 or self.alpha_iid + self.alpha_comm <= 0:
            raise DomainError("cost weights must be nonnegative and not both zero")

    def fresh(self) -> "CostWeights":
        return CostWeights(self.alpha_iid, self.alpha_comm)

    def normalizer(self, key: str, first_raw: float) -> float:
        if key not in self.normalizers:
            first_raw = float(first_raw)
            self.normalizers[key] = first_raw if abs(first_raw) > NORMALIZER_FLOOR else 1.0
        return self.normalizers[key]

    def combine(self, family: str, iid_raw, comm_raw, first=(0, 0)):
        """Weighted, normalized sum of raw cost arrays; ``first`` indexes the first evaluation."""
        iid_raw, comm_raw = np.asarray(iid_raw, float), np.asarray(comm_raw, float)
        c_iid = self.normalizer(f"{family}_iid", iid_raw[first] if iid_raw.ndim else iid_raw)
        c_comm = self.normalizer(f"{family}_comm", comm_raw[first] if comm_raw.ndim else comm_raw)
        return self.alpha_iid * iid_raw / c_iid + self.alpha_comm * comm_raw / c_comm


def _group_sums(snap: GradientSnapshot, assign: np.ndarray, K: int):
    s = snap.sizes
    S = np.zeros((K, snap.grads.shape[1]))
    N = np.zeros(K)
    for k in range(K):
        m = assign == k
        S[k] = (s[m, None] * snap.grads[m]).sum(axis=0)
        N[k] = s[m].sum()
    return S, N


def group_divergence(snap: GradientSnapshot, membership: Membership, k: int, tentative: int | None = None) -> float:
    """Group-to-global divergence of group ``k``, optionally with node ``tentative`` moved into it."""
    if not 0 <= k < membership.num_groups:
        raise DomainError(f"no group {k}")
    mask = membership.assign == k
    if tentative is not None:
        mask = mask.copy()
        mask[tentative] = True
    if not mask.any():
        raise DomainError(f"group {k} would be empty")
    s = snap.sizes[mask]
    g_k = (s / s.sum()) @ snap.grads[mask]
    return float(np.linalg.norm(g_k - snap.global_grad))


def _assign_raw(snap: GradientSnapshot, topo: Topology, assign: np.ndarray, medoids, tentative=True):
    """Raw (iid, comm) assign-cost matrices of shape (num_nodes, num_groups)."""
    K = len(medoids)
    S, N = _group_sums(snap, assign, K)
    g, s = snap.grads, snap.sizes
    inside = assign[:, None] == np.arange(K)[None, :]
    if tentative:
        add = np.where(inside, 0.0, 1.0)
    else:
        add = np.where(N[None, :] > 0, 0.0, 1.0) * np.ones_like(inside, dtype=float)
    num = S[None, :, :] + (add * s[:, None])[:, :, None] * g[:, None, :]
    den = N[None, :] + add * s[:, None]
    iid = np.linalg.norm(num / den[:, :, None] - snap.global_grad, axis=2)
    comm = topo.hop[:, list(medoids)][: len(assign)].astype(float)
    return iid, comm


def cost_assign(snap: GradientSnapshot, topo: Topology, membership: Membership, weights: CostWeights,
                i: int, k: int, tentative: bool = True) -> float:
    """Combined cost of assigning node ``i`` to group ``k``."""
    if tentative or membership.assign[i] == k or not (membership.assign == k).any():
        iid = group_divergence(snap, membership, k, tentative=i)
    else:
        iid = group_divergence(snap, membership, k)
    comm = float(topo.hop[i, membership.medoids[k]])
    return float(weights.combine("A", iid, comm))


def cost_update(snap: GradientSnapshot, topo: Topology, membership: Membership, weights: CostWeights,
                i: int, k: int) -> float:
    """Combined cost of making member ``i`` the medoid of group ``k``."""
    if membership.assign[i] != k:
        raise DomainError(f"node {i} is not in group {k}")
    iid, comm = _update_raw(snap, topo, membership.members(k), [i])
    return float(weights.combine("U", iid[0], comm[0]))


def _update_raw(snap, topo, members, candidates):
    s = snap.sizes
    w = s / s.sum()
    cand = np.asarray(candidates)
    iid = w[cand] * np.linalg.norm(snap.grads[cand] - snap.global_grad, axis=1)
    comm = topo.hop[np.ix_(cand, members)].sum(axis=1).astype(float)
    return iid, comm


def _assign_matrix(snap, topo, assign, medoids, weights, tentative):
    iid, comm = _assign_raw(snap, topo, assign, medoids, tentative)
    return weights.combine("A", iid, comm)


def _total_cost(snap, topo, assign, medoids, weights, tentative):
    cost = _assign_matrix(snap, topo, assign, medoids, weights, tentative)
    return float(cost[np.arange(len(assign)), assign].sum())


def _argmin(costs) -> int:
    costs = np.asarray(costs)
    return int(np.flatnonzero(costs <= costs.min() + TIE_TOL)[0])


def _update_medoids(snap, topo, assign, medoids, weights):
    new = []
    for k in range(len(medoids)):
        members = np.flatnonzero(assign == k)
        iid, comm = _update_raw(snap, topo, members, members)
        cost = weights.combine("U", iid, comm, first=0)
        new.append(int(members[_argmin(cost)]))
    return new


def _reassign(snap, topo, assign, medoids, weights, tentative):
    """Move nodes one at a time in index order, each seeing the moves committed before it."""
    new = np.array(assign, dtype=np.int64)
    for k, m in enumerate(medoids):
        new[m] = k
    fixed = set(medoids)
    for i in range(len(new)):
        if i in fixed:
            continue
        cost = _assign_matrix(snap, topo, new, medoids, weights, tentative)
        new[i] = _argmin(cost[i])
    cost = _assign_matrix(snap, topo, new, medoids, weights, tentative)
    return _repair_empty(new, medoids, cost)


def _repair_empty(assign, medoids, cost):
    K = len(medoids)
    counts = np.bincount(assign, minlength=K)
    for k in np.flatnonzero(counts == 0):
        big = int(np.argmax(counts))
        pool = [i for i in np.flatnonzero(assign == big) if i not in medoids]
        if not pool:
            continue
        steal = max(pool, key=lambda i: (cost[i, big], -i))
        assign[steal] = k
        counts[big] -= 1
        counts[k] += 1
    return assign


def node_grouping(snap: GradientSnapshot, topo: Topology, num_groups: int, weights: CostWeights, seed: int,
                  max_steady: int = 1, max_iters: int = 50, tentative: bool = True) -> Membership:
    """k-medoids grouping over the combined assign/update costs.

    Starts from a random membership and random distinct medoids, assigns
    every node to its cheapest group, then alternates medoid updates and
    reassignments until the total assign cost has been steady for
    ``max_steady`` iterations (or ``max_iters`` pass). An iteration that would
    raise the total cost is discarded and ends the search. Medoids always stay
    in their own group. ``weights`` normalizers are frozen in place.
    """
    n = snap.num_nodes
    if not 1 <= num_groups <= n:
        raise DomainError(f"num_groups must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    medoids = [int(m) for m in rng.choice(n, size=num_groups, replace=False)]
    assign = rng.integers(0, num_groups, size=n)
    for k, m in enumerate(medoids):
        assign[m] = k
    assign = _reassign(snap, topo, assign, medoids, weights, tentative)
    cost = _total_cost(snap, topo, assign, medoids, weights, tentative)
    history, rejected, steady = [cost], 0, 0
    for _ in range(max_iters):
        new_medoids = _update_medoids(snap, topo, assign, medoids, weights)
        new_assign = _reassign(snap, topo, assign, new_medoids, weights, tentative)
        new_cost = _total_cost(snap, topo, new_assign, new_medoids, weights, tentative)
        if new_cost > cost + STEADY_TOL:
            rejected += 1
            break
        steady = steady + 1 if abs(new_cost - cost) < STEADY_TOL else 0
        assign, medoids, cost = new_assign, new_medoids, new_cost
        history.append(cost)
        if steady >= max_steady:
            break
    log.debug("grouping finished after %d iterations, cost %.6g", len(history), cost)
    return Membership(assign, medoids, cost_history=history, rejected_steps=rejected)


def membership_costs(snap: GradientSnapshot, topo: Topology, membership: Membership):
    """Raw summed (iid, comm) assign costs of a membership."""
    iid, comm = _assign_raw(snap, topo, membership.assign, membership.medoids)
    rows = np.arange(membership.num_nodes)
    return float(iid[rows, membership.assign].sum()), float(comm[rows, membership.assign].sum())


def total_assign_cost(snap, topo, membership: Membership, weights: CostWeights, tentative=True) -> float:
    return _total_cost(snap, topo, membership.assign, membership.medoids, weights, tentative)


def edge_grouping(part: Partition) -> Membership:
    """One group per network edge; the lowest-numbered node on the edge is its medoid."""
    edges = sorted(set(part.node_to_edge))
    label = {e: k for k, e in enumerate(edges)}
    assign = [label[e] for e in part.node_to_edge]
    medoids = [min(i for i, e in enumerate(part.node_to_edge) if e == edge) for edge in edges]
    return Membership(assign, medoids)


def single_group(num_nodes: int, medoid: int = 0) -> Membership:
    return Membership(np.zeros(num_nodes, dtype=np.int64), [medoid])


def random_membership(num_nodes: int, num_groups: int, rng: np.random.Generator,
                      topo: Topology | None = None) -> Membership:
    """Uniform random surjective grouping; medoid minimizes summed hops (lowest id without a topology)."""
    assign = np.concatenate([np.arange(num_groups), rng.integers(0, num_groups, size=num_nodes - num_groups)])
    assign = rng.permutation(assign)
    medoids = []
    for k in range(num_groups):
        members = np.flatnonzero(assign == k)
        if topo is None:
            medoids.append(int(members[0]))
        else:
            medoids.append(int(members[np.argmin(topo.hop[np.ix_(members, members)].sum(axis=1))]))
    return Membership(assign, medoids)


def _canonical_assignments(n: int, K: int):
    """Surjective labelings of n nodes into K groups, one per set partition."""
    for z in itertools.product(range(K), repeat=n - 1):
        z = (0,) + z
        seen = 0
        ok = True
        for v in z:
            if v > seen:
                ok = False
                break
            if v == seen:
                seen += 1
        if ok and seen == K:
            yield np.array(z, dtype=np.int64)


def brute_force_grouping(snap: GradientSnapshot, topo: Topology, num_groups: int, weights: CostWeights,
                         tentative: bool = True):
    """Exact minimizer of the total assign cost for tiny instances.

    Every set partition into ``num_groups`` groups is scored under every
    choice of one medoid per group. Returns ``(membership, cost)``.
    """
    n = snap.num_nodes
    if n > 10 or num_groups > 3:
        raise DomainError("brute force limited to <= 10 nodes and <= 3 groups")
    if not 1 <= num_groups <= n:
        raise DomainError(f"num_groups must be in [1, {n}]")
    best, best_cost = None, np.inf
    for assign in _canonical_assignments(n, num_groups):
        choices = [np.flatnonzero(assign == k) for k in range(num_groups)]
        for medoids in itertools.product(*choices):
            medoids = [int(m) for m in medoids]
            cost = _total_cost(snap, topo, assign, medoids, weights, tentative)
            if cost < best_cost - 1e-15:
                best, best_cost = (assign, medoids), cost
    return Membership(*best), float(best_cost)
