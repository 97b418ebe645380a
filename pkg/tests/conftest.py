"""Shared small fixtures."""

import numpy as np
import pytest

from groupfl import data, models, network


def tiny_partition(num_nodes=6, num_edges=2, num_classes=3, input_dim=4, per_node=8, seed=0):
    """Nodes on round-robin edges, each holding ``per_node`` examples of two classes."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((num_nodes * per_node, input_dim))
    y = np.array([(i + j % 2) % num_classes for i in range(num_nodes) for j in range(per_node)])
    ds = data.Dataset(X, y, num_classes)
    idx = [np.arange(i * per_node, (i + 1) * per_node) for i in range(num_nodes)]
    return data.Partition(ds, idx, [i % num_edges for i in range(num_nodes)], test=ds)


@pytest.fixture
def part6():
    return tiny_partition()


@pytest.fixture
def topo6(part6):
    return network.build_fat_tree(4, 3, host_edges=part6.node_to_edge)


@pytest.fixture
def sr4():
    return models.softmax_regression(4, 3)


# -- acceptance report -----------------------------------------------------------

ACCEPTANCE = []  # (criterion, ok, detail), filled by test_acceptance.py


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in sorted(ACCEPTANCE, key=lambda r: (int(str(r[0]).rstrip("ab")), str(r[0]))):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {crit}: {detail}")
