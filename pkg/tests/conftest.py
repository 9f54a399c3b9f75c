import numpy as np
import pytest

from pathflow.network import Link, Network, ODMatrix, default_classes
from pathflow.netlib import siouxfalls_network, siouxfalls_trips


@pytest.fixture(scope="session")
def two_route_net():
    """One OD (0 -> 1) with two disjoint 2-hop routes.

    Route A (links 0, 1): total free-flow time 1.0, per-link capacity 1000.
    Route B (links 2, 3): total free-flow time 2.0, per-link capacity 1000.
    Each route behaves exactly like a single link with those aggregates,
    so the classic parallel-link equilibrium algebra applies unchanged.
    """
    links = [
        Link(0, 0, 2, 1.0, 1000.0, 0.5),
        Link(1, 2, 1, 1.0, 1000.0, 0.5),
        Link(2, 0, 3, 1.0, 1000.0, 1.0),
        Link(3, 3, 1, 1.0, 1000.0, 1.0),
    ]
    return Network(4, links)


@pytest.fixture(scope="session")
def symmetric_two_route_net():
    links = [
        Link(0, 0, 2, 1.0, 1000.0, 0.5),
        Link(1, 2, 1, 1.0, 1000.0, 0.5),
        Link(2, 0, 3, 1.0, 1000.0, 0.5),
        Link(3, 3, 1, 1.0, 1000.0, 0.5),
    ]
    return Network(4, links)


@pytest.fixture(scope="session")
def triangle_net():
    """0 -> 1 direct (cost 5) and via node 2 (cost 4 total)."""
    links = [
        Link(0, 0, 1, 5.0, 1000.0, 5.0),
        Link(1, 0, 2, 2.0, 1000.0, 2.0),
        Link(2, 2, 1, 2.0, 1000.0, 2.0),
    ]
    return Network(3, links)


@pytest.fixture(scope="session")
def siouxfalls():
    return siouxfalls_network()


@pytest.fixture(scope="session")
def siouxfalls_od():
    return siouxfalls_trips()


def od_single(n_nodes, origin, dest, value, n_classes=1):
    demand = np.zeros((n_nodes * n_nodes, n_classes))
    demand[origin * n_nodes + dest, 0] = value
    return ODMatrix(n_nodes, demand)
