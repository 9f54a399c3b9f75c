import numpy as np
import pytest

import pathflow as pf
from pathflow.errors import ContractError, InfeasibleInstanceError, UndefinedMetricError
from pathflow.equilibrium import _Instance, _project_rows_simplex
from pathflow.network import Link, Network, ODMatrix, default_classes
from conftest import od_single


def bisect_two_route(t1, t2, cap, demand):
    """Flow on route 1 equalizing t1*(1+.15(v/cap)^4) = t2*(1+.15((D-v)/cap)^4)."""
    def gap(v):
        return t1 * (1 + 0.15 * (v / cap) ** 4) - t2 * (1 + 0.15 * ((demand - v) / cap) ** 4)
    lo, hi = 0.0, demand
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gap(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestSolveUE:
    def test_symmetric_split(self, symmetric_two_route_net):
        ps = pf.build_path_sets(symmetric_two_route_net, 2)
        od = od_single(4, 0, 1, 2000.0)
        sol = pf.solve_ue(symmetric_two_route_net, od, ps,
                          pf.SolverConfig(rel_gap_tol=1e-10))
        flows = sol.path_flows[1, 0, :2]
        assert flows[0] == pytest.approx(1000.0, abs=0.01)
        assert flows[1] == pytest.approx(1000.0, abs=0.01)
        assert pf.relative_gap(symmetric_two_route_net, od, ps, sol) < 1e-10

    def test_asymmetric_matches_bisection(self, two_route_net):
        ps = pf.build_path_sets(two_route_net, 2)
        od = od_single(4, 0, 1, 2000.0)
        sol = pf.solve_ue(two_route_net, od, ps, pf.SolverConfig(rel_gap_tol=1e-8))
        v1 = bisect_two_route(1.0, 2.0, 1000.0, 2000.0)
        flows = sol.path_flows[1, 0]
        assert sol.rel_gap <= 1e-8
        assert flows[ps.get(0, 1).paths[0].links == (0, 1) and 0] == pytest.approx(v1, abs=0.1)
        assert flows[1] == pytest.approx(2000.0 - v1, abs=0.1)

    def test_zero_demand(self, two_route_net):
        ps = pf.build_path_sets(two_route_net, 2)
        od = ODMatrix(4, np.zeros((16, 1)))
        sol = pf.solve_ue(two_route_net, od, ps)
        assert sol.path_flows.sum() == 0.0
        assert sol.rel_gap == 0.0
        assert sol.converged

    def test_infeasible_instance(self):
        net = Network(2, [Link(0, 0, 1, 1.0, 1000.0, 1.0)])
        ps = pf.build_path_sets(net, 2)
        od = od_single(2, 1, 0, 10.0)   # no path 1 -> 0
        with pytest.raises(InfeasibleInstanceError) as err:
            pf.solve_ue(net, od, ps)
        assert (1, 0) in err.value.pairs

    def test_demand_conservation_exact(self, siouxfalls, siouxfalls_od):
        ps = pf.build_path_sets(siouxfalls, 3)
        sol = pf.solve_ue(siouxfalls, siouxfalls_od, ps)
        sums = sol.path_flows.sum(axis=2)
        x = siouxfalls_od.demand
        rel = np.abs(sums - x)[x > 0] / x[x > 0]
        assert rel.max() <= 1e-9
        assert sol.path_flows.min() >= 0.0
        # padded slots carry zero flow
        mask = ps.packed().slot_mask[:, None, :]
        assert np.all(sol.path_flows[~np.broadcast_to(mask, sol.path_flows.shape)] == 0)

    def test_descent_with_line_search(self, siouxfalls, siouxfalls_od):
        ps = pf.build_path_sets(siouxfalls, 3)
        trace = []
        pf.solve_ue(siouxfalls, siouxfalls_od, ps,
                    pf.SolverConfig(rel_gap_tol=1e-6), objective_trace=trace)
        diffs = np.diff(np.array(trace))
        assert np.all(diffs <= 1e-9 * np.abs(np.array(trace)[:-1]))

    def test_non_convergence_is_flagged(self, two_route_net):
        ps = pf.build_path_sets(two_route_net, 2)
        od = od_single(4, 0, 1, 2000.0)
        sol = pf.solve_ue(two_route_net, od, ps,
                          pf.SolverConfig(rel_gap_tol=1e-14, max_iters=2))
        assert not sol.converged
        assert sol.iterations == 2

    def test_grid_search_oracle_one_od_three_paths(self):
        # three disjoint 2-hop routes, distinct free-flow times
        links = [
            Link(0, 0, 2, 1.0, 800.0, 0.6), Link(1, 2, 1, 1.0, 800.0, 0.6),
            Link(2, 0, 3, 1.0, 1000.0, 0.9), Link(3, 3, 1, 1.0, 1000.0, 0.9),
            Link(4, 0, 4, 1.0, 1200.0, 1.1), Link(5, 4, 1, 1.0, 1200.0, 1.1),
        ]
        net = Network(5, links)
        ps = pf.build_path_sets(net, 3)
        demand = 3000.0
        od = od_single(5, 0, 1, demand)
        sol = pf.solve_ue(net, od, ps, pf.SolverConfig(rel_gap_tol=1e-10))

        inst = _Instance(net, od, ps)
        step = demand * 1e-3
        grid = np.arange(0, demand + step / 2, step)
        f1, f2 = np.meshgrid(grid, grid, indexing="ij")
        keep = f1 + f2 <= demand + 1e-9
        f1, f2 = f1[keep], f2[keep]
        f3 = demand - f1 - f2
        best = np.inf
        # Beckmann over the three aggregated routes (each route: 2 identical links)
        for caps, t0 in ((800.0, 0.6), ):
            pass
        def beck(v, cap, t0):
            return 2 * t0 * (v + 0.03 * v ** 5 / cap ** 4)
        obj = beck(f1, 800.0, 0.6) + beck(f2, 1000.0, 0.9) + beck(f3, 1200.0, 1.1)
        best = obj.min()
        assert sol.objective == pytest.approx(best, rel=1e-4)

    def test_grid_search_oracle_two_ods_shared_link(self):
        # OD A: 0->1 via direct (link 0) or via 2 (links 1,2)
        # OD B: 3->1 via direct (link 3) or via 2 (links 4,2)  [shares link 2]
        links = [
            Link(0, 0, 1, 1.0, 500.0, 3.0),
            Link(1, 0, 2, 1.0, 900.0, 1.0),
            Link(2, 2, 1, 1.0, 700.0, 1.5),
            Link(3, 3, 1, 1.0, 600.0, 3.2),
            Link(4, 3, 2, 1.0, 800.0, 1.2),
        ]
        net = Network(4, links)
        ps = pf.build_path_sets(net, 2)
        demand = np.zeros((16, 1))
        da, db = 1200.0, 900.0
        demand[0 * 4 + 1] = da
        demand[3 * 4 + 1] = db
        od = ODMatrix(4, demand)
        sol = pf.solve_ue(net, od, ps, pf.SolverConfig(rel_gap_tol=1e-10))

        ga = np.arange(0, da + da * 1e-3 / 2, da * 1e-3)
        gb = np.arange(0, db + db * 1e-3 / 2, db * 1e-3)
        A, B = np.meshgrid(ga, gb, indexing="ij")   # direct flows per OD
        t0 = np.array([l.freeflow_time for l in links])
        cap = np.array([l.capacity for l in links])
        va = da - A   # OD A flow through node 2
        vb = db - B
        vols = [A, va, va + vb, B, vb]
        obj = sum(t0[i] * (vols[i] + 0.03 * vols[i] ** 5 / cap[i] ** 4)
                  for i in range(5))
        assert sol.objective == pytest.approx(obj.min(), rel=1e-4)

    def test_fixed_and_diminishing_rules_run(self, two_route_net):
        ps = pf.build_path_sets(two_route_net, 2)
        od = od_single(4, 0, 1, 2000.0)
        for rule in ("fixed", "diminishing"):
            sol = pf.solve_ue(two_route_net, od, ps,
                              pf.SolverConfig(step_rule=rule, max_iters=4000,
                                              rel_gap_tol=1e-5))
            assert sol.rel_gap < 1e-3  # coarse: these rules converge slowly


class TestProjection:
    @pytest.mark.parametrize("seed", range(12))
    def test_projection_kkt(self, seed):
        rng = np.random.default_rng(seed)
        m, k = 40, 3
        values = rng.normal(scale=100, size=(m, k))
        mask = rng.random((m, k)) < 0.8
        mask[:, 0] = True
        totals = rng.uniform(0, 500, m)
        totals[rng.random(m) < 0.2] = 0.0
        out = _project_rows_simplex(values, totals, mask)
        assert np.all(out >= 0)
        assert np.all(out[~mask] == 0)
        sums = out.sum(axis=1)
        assert np.allclose(sums[totals > 0], totals[totals > 0], rtol=1e-12)
        assert np.all(sums[totals <= 0] == 0)
        # KKT of the projection: f = max(v - tau, 0) for a uniform row tau
        for i in range(m):
            if totals[i] <= 0:
                continue
            pos = (out[i] > 0) & mask[i]
            taus = values[i][pos] - out[i][pos]
            assert np.ptp(taus) < 1e-9
            tau = taus[0]
            zero = (~pos) & mask[i]
            assert np.all(values[i][zero] - tau <= 1e-9)


class TestResiduals:
    def test_relative_gap_uncongested_shortest(self, triangle_net):
        ps = pf.build_path_sets(triangle_net, 3)
        od = od_single(3, 0, 1, 10.0)
        flows = np.zeros((9, 1, 3))
        flows[1, 0, 0] = 10.0   # all on rank-1 path
        # tiny demand, negligible congestion: rank-1 stays cheapest
        assert pf.relative_gap(triangle_net, od, ps, flows) < 1e-4

    def test_relative_gap_perturbed_positive(self, two_route_net):
        ps = pf.build_path_sets(two_route_net, 2)
        od = od_single(4, 0, 1, 2000.0)
        sol = pf.solve_ue(two_route_net, od, ps, pf.SolverConfig(rel_gap_tol=1e-10))
        perturbed = sol.path_flows.copy()
        shift = 0.1 * perturbed[1, 0, 0]
        perturbed[1, 0, 0] -= shift
        perturbed[1, 0, 1] += shift
        assert pf.relative_gap(two_route_net, od, ps, perturbed) > 1e-4

    def test_kkt_zero_at_equilibrium(self, two_route_net):
        ps = pf.build_path_sets(two_route_net, 2)
        od = od_single(4, 0, 1, 2000.0)
        sol = pf.solve_ue(two_route_net, od, ps, pf.SolverConfig(rel_gap_tol=1e-10))
        assert pf.kkt_residual(two_route_net, od, ps, sol) < 1e-6

    def test_kkt_worst_path_formula(self, two_route_net):
        ps = pf.build_path_sets(two_route_net, 2)
        od = od_single(4, 0, 1, 100.0)
        flows = np.zeros((16, 1, 2))
        flows[1, 0, 1] = 100.0   # everything on the worse route
        inst = _Instance(two_route_net, od, ps)
        V = inst.total_link_flow(flows)
        c = inst.base_path_costs(inst.base_link_costs(V))
        expected = 100.0 * (c[1, 1] - c[1, 0]) / (1 * 1)
        assert pf.kkt_residual(two_route_net, od, ps, flows) == pytest.approx(expected)

    def test_od_conservation_examples(self):
        n = 4
        demand = np.zeros((16, 1))
        pairs = [(0, 1), (0, 2), (0, 3), (1, 0), (1, 2), (1, 3),
                 (2, 0), (2, 1), (2, 3), (3, 0)]
        for i, j in pairs:
            demand[i * 4 + j] = 100.0
        od = ODMatrix(4, demand)
        flows = np.zeros((16, 1, 3))
        for i, j in pairs:
            flows[i * 4 + j, 0, 0] = 100.0
        assert pf.od_conservation_residual(od, flows) == 0.0
        flows[0 * 4 + 1, 0, 0] = 90.0   # one OD short by 10, |R| * n = 10
        assert pf.od_conservation_residual(od, flows) == pytest.approx(1.0)

    def test_link_aggregation_examples(self, siouxfalls):
        ps = pf.build_path_sets(siouxfalls, 3)
        rng = np.random.default_rng(4)
        flows = rng.uniform(0, 10, (576, 1, 3)) * ps.packed().slot_mask[:, None, :]
        agg = pf.aggregate_link_flows(siouxfalls, ps, flows)
        assert pf.link_aggregation_residual(siouxfalls, ps, flows, agg) == 0.0
        off = pf.LinkFlows(agg.flow.copy())
        off.flow[5, 0] += 7.6
        assert pf.link_aggregation_residual(siouxfalls, ps, flows, off) == pytest.approx(0.1)

    def test_average_delay(self, two_route_net):
        ps = pf.build_path_sets(two_route_net, 2)
        od = od_single(4, 0, 1, 2000.0)
        sol = pf.solve_ue(two_route_net, od, ps, pf.SolverConfig(rel_gap_tol=1e-10))
        assert pf.average_delay(two_route_net, od, ps, sol, 0) < 1e-6
        with pytest.raises(UndefinedMetricError):
            pf.average_delay(two_route_net, ODMatrix(4, np.zeros((16, 1))), ps,
                             sol.path_flows * 0, 0)

    def test_average_delay_uncongested_zero(self, triangle_net):
        ps = pf.build_path_sets(triangle_net, 3)
        od = od_single(3, 0, 1, 1e-6)
        flows = np.zeros((9, 1, 3))
        flows[1, 0, 0] = 1e-6
        assert pf.average_delay(triangle_net, od, ps, flows, 0) == pytest.approx(0.0, abs=1e-9)


class TestMultiClass:
    def test_truck_cost_ratio_exact(self, siouxfalls):
        net = Network(24, siouxfalls.links, default_classes((1.0, 1.5)))
        ps = pf.build_path_sets(net, 3)
        rng = np.random.default_rng(8)
        link_flows = pf.LinkFlows(
            np.column_stack([rng.uniform(0, 8000, 76), rng.uniform(0, 2000, 76)]))
        car, truck = net.classes
        for row in (1, 30, 100, 400):
            pset = ps.sets[row]
            if pset.n_real == 0:
                continue
            path = pset.paths[0].links
            c_car = pf.path_cost(net, path, car, link_flows)
            c_truck = pf.path_cost(net, path, truck, link_flows)
            assert c_truck == 1.5 * c_car   # bitwise, multiplier factored out

    def test_multiclass_equilibrium(self, two_route_net):
        net = Network(4, two_route_net.links, default_classes((1.0, 1.5)))
        ps = pf.build_path_sets(net, 2)
        demand = np.zeros((16, 2))
        demand[1] = [1500.0, 750.0]
        od = ODMatrix(4, demand)
        sol = pf.solve_ue(net, od, ps, pf.SolverConfig(rel_gap_tol=1e-9))
        assert sol.rel_gap <= 1e-9
        # conservation per class
        assert sol.path_flows[1, 0].sum() == pytest.approx(1500.0)
        assert sol.path_flows[1, 1].sum() == pytest.approx(750.0)
        # total flow across both classes equalizes the two routes' base costs
        inst = _Instance(net, od, ps)
        V = inst.total_link_flow(sol.path_flows)
        c = inst.base_path_costs(inst.base_link_costs(V))
        assert c[1, 0] == pytest.approx(c[1, 1], rel=1e-6)

    def test_rel_gap_and_kkt_covanish(self, siouxfalls, siouxfalls_od):
        ps = pf.build_path_sets(siouxfalls, 3)
        sol = pf.solve_ue(siouxfalls, siouxfalls_od, ps,
                          pf.SolverConfig(rel_gap_tol=1e-6))
        inst = _Instance(siouxfalls, siouxfalls_od, ps)
        V = inst.total_link_flow(sol.path_flows)
        c = inst.base_path_costs(inst.base_link_costs(V))
        mean_cost = c[inst.slot_mask].mean()
        assert sol.rel_gap <= 1e-6
        assert sol.kkt_residual <= 1e-3 * mean_cost


class TestSerialization:
    def test_solution_round_trip(self, two_route_net, tmp_path):
        ps = pf.build_path_sets(two_route_net, 2)
        od = od_single(4, 0, 1, 2000.0)
        sol = pf.solve_ue(two_route_net, od, ps)
        from pathflow.equilibrium import load_solution, save_solution
        save_solution(sol, tmp_path / "sol")
        again = load_solution(tmp_path / "sol")
        assert np.array_equal(again.path_flows, sol.path_flows)
        assert again.rel_gap == sol.rel_gap
        assert again.iterations == sol.iterations
