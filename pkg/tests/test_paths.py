import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import pathflow as pf
from pathflow.errors import ScenarioInfeasibleError
from pathflow.network import Link, Network
from pathflow.paths import dump_path_sets, load_path_sets


def brute_force_paths(network, origin, dest):
    """All simple paths as (cost, n_links, links), sorted by that key."""
    out = []

    def walk(node, visited, links, cost):
        if node == dest:
            out.append((cost, len(links), tuple(links)))
            return
        for lid in network.adjacency[node]:
            head = network.links[lid].head
            if head in visited:
                continue
            walk(head, visited | {head}, links + [lid],
                 cost + float(network.freeflow_time[lid]))

    walk(origin, {origin}, [], 0.0)
    out.sort()
    return out


def random_network(rng, n_nodes, density=0.45):
    links = []
    for a in range(n_nodes):
        for b in range(n_nodes):
            if a != b and rng.random() < density:
                links.append(Link(len(links), a, b, 1.0, 1000.0,
                                  float(rng.uniform(0.5, 10.0))))
    if not links:
        links.append(Link(0, 0, 1, 1.0, 1000.0, 1.0))
    return Network(n_nodes, links)


class TestKShortest:
    def test_single_link_padding(self):
        net = Network(2, [Link(0, 0, 1, 1.0, 1000.0, 2.5)])
        ps = pf.k_shortest(net, 0, 1, 3)
        assert ps.n_real == 1
        assert ps.paths[0].links == (0,)
        assert ps.pad_mask == (False, True, True)

    def test_triangle_ordering(self, triangle_net):
        ps = pf.k_shortest(triangle_net, 0, 1, 3)
        assert ps.paths[0].links == (1, 2)      # two-hop, cost 4
        assert ps.paths[1].links == (0,)        # direct, cost 5
        assert ps.paths[0].freeflow_cost == pytest.approx(4.0)
        assert ps.paths[1].freeflow_cost == pytest.approx(5.0)

    def test_grid_corner_to_corner(self):
        net = pf.generate_manhattan(2, 2, rng_seed=5)
        expected = brute_force_paths(net, 0, 3)
        ps = pf.k_shortest(net, 0, 3, 3)
        assert ps.n_real == len(expected) == 2   # the two monotone routes
        for path, (cost, _, links) in zip(ps.paths[:2], expected):
            assert path.links == links
            assert path.freeflow_cost == pytest.approx(cost)

    def test_unreachable(self):
        net = Network(2, [Link(0, 0, 1, 1.0, 1000.0, 1.0)])
        ps = pf.k_shortest(net, 1, 0, 2)
        assert not ps.reachable
        assert ps.pad_mask == (True, True)

    @given(seed=st.integers(0, 2_000), n_nodes=st.integers(3, 8),
           k=st.integers(1, 3))
    @settings(max_examples=40, deadline=None)
    def test_matches_brute_force(self, seed, n_nodes, k):
        rng = np.random.default_rng(seed)
        net = random_network(rng, n_nodes)
        origin, dest = 0, n_nodes - 1
        expected = brute_force_paths(net, origin, dest)[:k]
        ps = pf.k_shortest(net, origin, dest, k)
        got = [(p.freeflow_cost, p.n_links, p.links)
               for p, pad in zip(ps.paths, ps.pad_mask) if not pad]
        assert len(got) == len(expected)
        for g, e in zip(got, expected):
            assert g[2] == e[2]
            assert g[0] == pytest.approx(e[0])

    @given(seed=st.integers(0, 2_000))
    @settings(max_examples=25, deadline=None)
    def test_loopless_and_ranked(self, seed):
        rng = np.random.default_rng(seed)
        net = random_network(rng, 7)
        ps = pf.k_shortest(net, 0, 6, 3)
        prev = -np.inf
        for path, pad in zip(ps.paths, ps.pad_mask):
            if pad:
                continue
            nodes = [0] + [net.links[l].head for l in path.links]
            assert len(nodes) == len(set(nodes)), "revisited a node"
            for a, b in zip(path.links, path.links[1:]):
                assert net.links[a].head == net.links[b].tail
            assert path.freeflow_cost >= prev
            prev = path.freeflow_cost


class TestBuildPathSets:
    def test_manhattan_counts(self):
        net = pf.generate_manhattan(5, 5, rng_seed=7)
        coll = pf.build_path_sets(net, 3)
        off_diag = [s for s in coll if s.origin != s.dest]
        assert len(off_diag) == 600
        assert all(s.n_real >= 1 for s in off_diag)

    def test_siouxfalls_all_reachable(self, siouxfalls):
        coll = pf.build_path_sets(siouxfalls, 3)
        off_diag = [s for s in coll if s.origin != s.dest]
        assert len(off_diag) == 552
        assert all(s.n_real >= 1 for s in off_diag)
        # reachability oracle: BFS from every origin
        for origin in range(24):
            seen = {origin}
            frontier = [origin]
            while frontier:
                new = []
                for u in frontier:
                    for lid in siouxfalls.adjacency[u]:
                        v = siouxfalls.links[lid].head
                        if v not in seen:
                            seen.add(v)
                            new.append(v)
                frontier = new
            assert seen == set(range(24))

    def test_two_node_directionality(self):
        net = Network(2, [Link(0, 0, 1, 1.0, 1000.0, 1.0)])
        coll = pf.build_path_sets(net, 3)
        assert coll.get(0, 1).n_real == 1
        assert coll.get(1, 0).n_real == 0
        assert coll.get(0, 0).n_real == 0  # diagonal padded

    def test_dump_load_round_trip(self, triangle_net):
        coll = pf.build_path_sets(triangle_net, 3)
        buf = io.StringIO()
        dump_path_sets(coll, buf)
        buf.seek(0)
        again = load_path_sets(buf, 3, 3)
        for a, b in zip(coll, again):
            assert a == b


class TestRebuildAfterRemoval:
    def test_empty_removal_identity(self, siouxfalls):
        base = pf.build_path_sets(siouxfalls, 3)
        _, rebuilt = pf.rebuild_after_removal(siouxfalls, set(), 3)
        for a, b in zip(base, rebuilt):
            assert a == b

    def test_triangle_promotion(self, triangle_net):
        _, coll = pf.rebuild_after_removal(triangle_net, {1}, 3)
        ps = coll.get(0, 1)
        assert ps.paths[0].links == (0,)   # former rank-2 promoted
        assert ps.n_real == 1

    def test_demanded_od_loses_paths(self, conftest_od=None):
        net = Network(2, [Link(0, 0, 1, 1.0, 1000.0, 1.0)])
        demand = pf.ODMatrix(2, np.array([[0.0], [5.0], [0.0], [0.0]]))
        with pytest.raises(ScenarioInfeasibleError) as err:
            pf.rebuild_after_removal(net, {0}, 2, demand=demand)
        assert (0, 1) in err.value.pairs

    def test_siouxfalls_random_non_bridging(self, siouxfalls, siouxfalls_od):
        rng = np.random.default_rng(42)
        for _ in range(3):
            removed = rng.choice(76, size=3, replace=False)
            reduced = siouxfalls.with_disabled(removed)
            # BFS oracle for strong connectivity on the reduced net
            def reaches_all(start):
                seen = {start}
                frontier = [start]
                while frontier:
                    new = []
                    for u in frontier:
                        for lid in reduced.adjacency[u]:
                            v = reduced.links[lid].head
                            if v not in seen:
                                seen.add(v)
                                new.append(v)
                    frontier = new
                return len(seen) == 24
            if all(reaches_all(o) for o in range(24)):
                _, coll = pf.rebuild_after_removal(siouxfalls, removed, 3,
                                                   demand=siouxfalls_od)
                off = [s for s in coll if s.origin != s.dest]
                assert all(s.n_real >= 1 for s in off)

    @given(seed=st.integers(0, 500))
    @settings(max_examples=20, deadline=None)
    def test_removal_never_improves_rank1(self, seed):
        rng = np.random.default_rng(seed)
        net = random_network(rng, 6, density=0.5)
        base = pf.build_path_sets(net, 1)
        removed = {int(rng.integers(0, net.n_links))}
        _, reduced = pf.rebuild_after_removal(net, removed, 1)
        for b, r in zip(base, reduced):
            if b.origin == b.dest or not b.reachable:
                continue
            if r.reachable:
                assert r.paths[0].freeflow_cost >= b.paths[0].freeflow_cost - 1e-12
