"""Network topologies (fat tree, jellyfish) and the analytic delay model.

Hosts are the federated nodes; they hang off switches. ``Topology.hop`` holds
host-to-host hop counts (host->switch->...->switch->host).

Communication delay of one aggregation round is ``2 * model_bytes /
link_speed`` (upload plus broadcast) times a hop figure that depends on the
mode:

``"sum"``
    sum of participant-to-server hops: every message is serialized over every
    link it crosses, so the figure grows with the amount of data moved.
``"max"``
    hops of the farthest participant only (synchronous bottleneck, no
    bandwidth sharing).
``"load"``
    transfers crossing the busiest link: every model is routed along a fixed
    shortest path and links are shared, so the figure counts how many models
    one link must serialize (concurrent transfers on disjoint paths overlap).
"""

from __future__ import annotations

import json
from collections import Counter, deque
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import networkx as nx
import numpy as np

from .errors import ConfigError, DomainError

FLOPS_PER_PARAM_EXAMPLE = 6  # 2 forward + 4 backward
BYTES_PER_PARAM = 8
DELAY_MODES = ("sum", "max", "load")


def _bfs(adj: Sequence[Iterable[int]], src: int):
    """Distances and BFS-tree parents from ``src`` (neighbours visited in ascending order)."""
    dist = np.full(len(adj), -1, dtype=np.int64)
    parent = np.full(len(adj), -1, dtype=np.int64)
    dist[src] = 0
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                parent[v] = u
                queue.append(v)
    return dist, parent


@dataclass(frozen=True)
class Topology:
    switch_adj: tuple
    host_switch: tuple
    edge_switches: tuple
    hop: np.ndarray
    link_speed: float = 10e6
    proc_speed: float = 5e9
    kind: str = "custom"
    parents: np.ndarray | None = None  # parents[src][v]: BFS-tree parent of switch v rooted at src

    @classmethod
    def from_switch_graph(cls, switch_adj, host_switch, edge_switches=None, *,
                          link_speed=10e6, proc_speed=5e9, kind="custom") -> "Topology":
        adj = tuple(tuple(sorted(set(int(v) for v in nb))) for nb in switch_adj)
        for u, nb in enumerate(adj):
            for v in nb:
                if u not in adj[v] or u == v:
                    raise ConfigError(f"switch adjacency is not symmetric/simple at ({u}, {v})")
        host_switch = tuple(int(s) for s in host_switch)
        if not host_switch:
            raise ConfigError("topology has no hosts")
        if min(host_switch) < 0 or max(host_switch) >= len(adj):
            raise ConfigError("host attached to unknown switch")
        trees = [_bfs(adj, s) for s in range(len(adj))]
        sw_dist = np.array([d for d, _ in trees])
        if (sw_dist < 0).any():
            raise ConfigError("switch graph is disconnected")
        hs = np.array(host_switch)
        hop = 2 + sw_dist[np.ix_(hs, hs)]
        np.fill_diagonal(hop, 0)
        if edge_switches is None:
            edge_switches = sorted(set(host_switch))
        return cls(adj, host_switch, tuple(int(s) for s in edge_switches), hop,
                   float(link_speed), float(proc_speed), kind, np.array([p for _, p in trees]))

    @property
    def num_hosts(self) -> int:
        return len(self.host_switch)

    def with_speeds(self, link_speed=None, proc_speed=None) -> "Topology":
        return replace(self, link_speed=self.link_speed if link_speed is None else float(link_speed),
                       proc_speed=self.proc_speed if proc_speed is None else float(proc_speed))

    def route(self, a: int, b: int) -> list:
        """Links on the fixed shortest path from host ``a`` to host ``b``.

        Access links are ``("h", host)``; switch links are ``(u, v)`` with ``u < v``.
        """
        if a == b:
            return []
        sa, sb = self.host_switch[a], self.host_switch[b]
        links = [("h", a), ("h", b)]
        v = sb
        while v != sa:
            u = int(self.parents[sa][v])
            links.append((min(u, v), max(u, v)))
            v = u
        return links

    def host_edges(self) -> list:
        """Logical edge index of every host (position of its switch in ``edge_switches``)."""
        pos = {s: e for e, s in enumerate(self.edge_switches)}
        return [pos[s] for s in self.host_switch]

    def to_json(self) -> str:
        return json.dumps({
            "kind": self.kind,
            "switch_adjacency": [list(nb) for nb in self.switch_adj],
            "host_switch": list(self.host_switch),
            "edge_switches": list(self.edge_switches),
            "link_speed": self.link_speed,
            "proc_speed": self.proc_speed,
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Topology":
        doc = json.loads(text)
        return cls.from_switch_graph(doc["switch_adjacency"], doc["host_switch"], doc.get("edge_switches"),
                                     link_speed=doc.get("link_speed", 10e6),
                                     proc_speed=doc.get("proc_speed", 5e9),
                                     kind=doc.get("kind", "custom"))


def _place_hosts(num_edges: int, per_edge: int, num_hosts, host_edges):
    if host_edges is None:
        n = num_edges * per_edge if num_hosts is None else num_hosts
        host_edges = [i % num_edges for i in range(n)]
    host_edges = [int(e) for e in host_edges]
    if not host_edges:
        raise ConfigError("no hosts to place")
    if min(host_edges) < 0 or max(host_edges) >= num_edges:
        raise ConfigError(f"host edge index out of range [0, {num_edges})")
    counts = np.bincount(host_edges, minlength=num_edges)
    if counts.max() > per_edge:
        raise ConfigError(f"capacity exceeded: {counts.max()} hosts on one edge switch, limit {per_edge}")
    return host_edges


def build_fat_tree(k_ary: int, nodes_per_edge: int, seed=None, *, num_hosts=None, host_edges=None,
                   link_speed=10e6, proc_speed=5e9) -> Topology:
    """Three-tier k-ary fat tree.

    Logical edge ``e`` maps to an edge switch; with a seed the mapping is a
    random permutation, otherwise pod-major order. ``host_edges[i]`` places
    host ``i``; by default hosts are spread round-robin over all edge switches.
    """
    if k_ary < 2 or k_ary % 2:
        raise ConfigError("fat tree arity must be an even integer >= 2")
    half = k_ary // 2
    n_core = half * half
    # switch ids: cores, then per pod [aggs..., edges...]
    adj = [set() for _ in range(n_core + k_ary * k_ary)]
    edge_ids = []
    for p in range(k_ary):
        base = n_core + p * k_ary
        aggs = [base + a for a in range(half)]
        edges = [base + half + j for j in range(half)]
        edge_ids.extend(edges)
        for a_idx, a in enumerate(aggs):
            for e in edges:
                adj[a].add(e)
                adj[e].add(a)
            for c in range(a_idx * half, (a_idx + 1) * half):
                adj[a].add(c)
                adj[c].add(a)
    order = list(range(len(edge_ids)))
    if seed is not None:
        order = [int(j) for j in np.random.default_rng(seed).permutation(len(edge_ids))]
    edge_switches = [edge_ids[j] for j in order]
    placed = _place_hosts(len(edge_switches), nodes_per_edge, num_hosts, host_edges)
    return Topology.from_switch_graph(adj, [edge_switches[e] for e in placed], edge_switches,
                                      link_speed=link_speed, proc_speed=proc_speed, kind=f"fat_tree(k={k_ary})")


def build_jellyfish(num_switches: int, degree: int, nodes_per_switch: int, seed, *, num_hosts=None,
                    host_edges=None, link_speed=10e6, proc_speed=5e9, max_tries: int = 100) -> Topology:
    """Random ``degree``-regular switch graph (retried until connected) with hosts attached."""
    if not 0 < degree < num_switches:
        raise ConfigError("need 0 < degree < num_switches")
    if (num_switches * degree) % 2:
        raise ConfigError("num_switches * degree must be even for a regular graph")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        g = nx.random_regular_graph(degree, num_switches, seed=int(rng.integers(2**31)))
        if nx.is_connected(g):
            break
    else:
        raise ConfigError(f"no connected jellyfish graph after {max_tries} tries")
    adj = [set(g.neighbors(s)) for s in range(num_switches)]
    placed = _place_hosts(num_switches, nodes_per_switch, num_hosts, host_edges)
    return Topology.from_switch_graph(adj, placed, list(range(num_switches)), link_speed=link_speed,
                                      proc_speed=proc_speed, kind=f"jellyfish(n={num_switches},r={degree})")


@dataclass(frozen=True)
class DelayModel:
    param_count: int
    proc_speed: float = 5e9
    mode: str = "load"

    def __post_init__(self):
        if self.mode not in DELAY_MODES:
            raise ConfigError(f"delay mode must be one of {DELAY_MODES}")
        if self.param_count < 0 or self.proc_speed <= 0:
            raise ConfigError("param_count must be >= 0 and proc_speed > 0")

    @property
    def model_bytes(self) -> int:
        return BYTES_PER_PARAM * self.param_count

    def flops_per_step(self, max_batch: int) -> float:
        return FLOPS_PER_PARAM_EXAMPLE * self.param_count * max_batch


def _check_hosts(topo: Topology, nodes):
    for p in nodes:
        if not 0 <= p < topo.num_hosts:
            raise DomainError(f"node {p} is not a host of the topology")


def agg_delay(topo: Topology, dm: DelayModel, participants, server: int,
              combined: Mapping[int, int] | Sequence[int] | None = None, mode: str | None = None) -> float:
    """Seconds for one aggregate-and-broadcast round of ``participants`` at ``server``.

    ``combined`` maps node -> edge. When given, each edge first aggregates at
    a local server (the main server if it sits on that edge, else the
    lowest-numbered participant there) and only one model per edge travels
    to ``server``.
    """
    mode = dm.mode if mode is None else mode
    if mode not in DELAY_MODES:
        raise ConfigError(f"delay mode must be one of {DELAY_MODES}")
    parts = sorted(set(int(p) for p in participants))
    if not parts:
        raise DomainError("no participants")
    _check_hosts(topo, parts + [server])
    unit = 2.0 * dm.model_bytes / topo.link_speed
    if combined is None:
        return unit * _figure(topo, mode, [(p, server) for p in parts])
    by_edge: dict = {}
    for p in parts:
        by_edge.setdefault(int(combined[p]), []).append(p)
    server_edge = int(combined[server])
    intra, inter = [], []
    for e in sorted(by_edge):
        members = by_edge[e]
        local = server if e == server_edge else members[0]
        intra.extend((p, local) for p in members)
        inter.append((local, server))
    return unit * (_figure(topo, mode, intra) + _figure(topo, mode, inter))


def _figure(topo: Topology, mode: str, transfers) -> float:
    """Hop figure of one phase of concurrent ``(source, destination)`` transfers."""
    if mode == "load":
        load = Counter(link for a, b in transfers for link in topo.route(a, b))
        return float(max(load.values(), default=0))
    hops = [int(topo.hop[a, b]) for a, b in transfers]
    return float(sum(hops) if mode == "sum" else max(hops, default=0))


def compute_delay(dm: DelayModel, steps: int, max_batch: int) -> float:
    """Seconds for ``steps`` local updates on batches of up to ``max_batch`` examples."""
    if steps < 0 or max_batch < 0:
        raise DomainError("steps and max_batch must be nonnegative")
    return steps * dm.flops_per_step(max_batch) / dm.proc_speed
