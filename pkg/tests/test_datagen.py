import json
import os

import numpy as np
import pytest

import pathflow as pf
from pathflow.datagen import (
    Dataset,
    NormStats,
    ScenarioSpec,
    build_input_tensor,
    denormalize_prediction,
    generate_dataset,
    input_width,
    make_multiclass,
    normalize_target,
    rebuild_eval_samples,
    raw_input_tensor,
    sample_od_matrix,
    split_sizes,
    warm_start,
    apply_link_scenario,
)
from pathflow.errors import ConfigError, ScenarioInfeasibleError
from conftest import od_single


@pytest.fixture(scope="module")
def manhattan():
    return pf.generate_manhattan(5, 5, rng_seed=7)


@pytest.fixture(scope="module")
def manhattan_paths(manhattan):
    return pf.build_path_sets(manhattan, 3)


@pytest.fixture(scope="module")
def small_dataset(manhattan, tmp_path_factory):
    out = tmp_path_factory.mktemp("ds") / "mh"
    spec = ScenarioSpec(od_missing_ratio=0.3, demand_range=(50.0, 500.0),
                        n_samples=12, seed=5, k=3, warm_start_iters=20)
    return generate_dataset(manhattan, spec, pf.SolverConfig(rel_gap_tol=1e-5),
                            out)


class TestSampling:
    def test_no_masking(self, manhattan):
        od = sample_od_matrix(manhattan, (50, 500), 0.0, np.random.default_rng(0))
        off = [od.demand[i * 25 + j, 0] for i in range(25) for j in range(25) if i != j]
        assert all(v > 0 for v in off)
        assert len(off) == 600

    def test_thirty_percent_mask(self, manhattan):
        od = sample_od_matrix(manhattan, (50, 500), 0.3, np.random.default_rng(0))
        zeroed = sum(1 for i in range(25) for j in range(25)
                     if i != j and od.demand[i * 25 + j, 0] == 0)
        assert zeroed == int(0.3 * 600) == 180

    def test_ema_fifty_percent(self):
        from pathflow.netlib import ema_like_network
        net = ema_like_network()
        od = sample_od_matrix(net, (50, 500), 0.5, np.random.default_rng(1))
        zeroed = sum(1 for i in range(74) for j in range(74)
                     if i != j and od.demand[i * 74 + j, 0] == 0)
        assert zeroed == int(0.5 * (74 * 74 - 74)) == 2701

    def test_range_respected(self, manhattan):
        od = sample_od_matrix(manhattan, (50, 500), 0.0, np.random.default_rng(3))
        vals = od.demand[od.demand > 0]
        assert vals.min() >= 50 and vals.max() <= 500


class TestMulticlass:
    def test_truck_is_half(self, manhattan):
        od = sample_od_matrix(manhattan, (50, 500), 0.2, np.random.default_rng(2))
        two = make_multiclass(od)
        assert np.array_equal(two.demand[:, 1], 0.5 * two.demand[:, 0])

    def test_masked_stays_zero(self, manhattan):
        od = sample_od_matrix(manhattan, (50, 500), 0.4, np.random.default_rng(2))
        two = make_multiclass(od)
        masked = od.demand[:, 0] == 0
        assert np.all(two.demand[masked] == 0)

    def test_single_class_config_error(self, manhattan):
        od = sample_od_matrix(manhattan, (50, 500), 0.0, np.random.default_rng(2))
        with pytest.raises(ConfigError):
            make_multiclass(make_multiclass(od))


class TestLinkScenario:
    def test_identity(self, manhattan):
        spec = ScenarioSpec(n_samples=1, demand_range=(50, 500))
        net, ps = apply_link_scenario(manhattan, spec, np.random.default_rng(0))
        assert net is manhattan
        assert ps.n_pairs == 625

    def test_ratio_removal_counts(self, siouxfalls):
        spec = ScenarioSpec(link_missing_ratio=0.05, n_samples=1,
                            demand_range=(100, 4000))
        net, ps = apply_link_scenario(siouxfalls, spec, np.random.default_rng(0))
        assert len(net.disabled) == int(0.05 * 76) == 3
        assert not ps.unreachable_pairs()
        spec10 = ScenarioSpec(link_missing_ratio=0.10, n_samples=1,
                              demand_range=(100, 4000))
        net10, _ = apply_link_scenario(siouxfalls, spec10, np.random.default_rng(0))
        assert len(net10.disabled) == 7

    def test_explicit_removal(self, siouxfalls):
        spec = ScenarioSpec(removed_links=(0, 5), n_samples=1,
                            demand_range=(100, 4000))
        net, ps = apply_link_scenario(siouxfalls, spec, np.random.default_rng(0))
        assert net.disabled == {0, 5}


class TestTensors:
    def test_width_formula(self):
        assert input_width(1, 3) == 7
        assert input_width(2, 3) == 9

    def test_absent_pair_is_zero_row(self, manhattan, manhattan_paths):
        od = pf.ODMatrix(25, np.zeros((625, 1)))
        raw = raw_input_tensor(manhattan, od, manhattan_paths)
        # node 0 and node 24 are opposite corners: no direct link; zero
        # demand; path features = free-flow costs (zero-demand warm start)
        row = raw[0 * 25 + 24]
        assert np.all(row[:4] == 0)

    def test_direct_link_features(self, manhattan, manhattan_paths):
        od = pf.ODMatrix(25, np.zeros((625, 1)))
        raw = raw_input_tensor(manhattan, od, manhattan_paths)
        lid = manhattan.adjacency[0][0]
        head = manhattan.links[lid].head
        row = raw[0 * 25 + head]
        assert row[0] == manhattan.length[lid]
        assert row[1] == manhattan.capacity[lid]
        assert row[2] == manhattan.freeflow_time[lid]

    def test_normalization_bounds_and_zero_variance(self):
        rows = np.array([[0.0, 1.0, 5.0], [2.0, 1.0, 10.0], [4.0, 1.0, 7.5]])
        stats = NormStats.fit(rows)
        normed = stats.apply(rows)
        assert normed[:, 0].min() == 0.0 and normed[:, 0].max() == 1.0
        assert np.all(normed[:, 1] == 0.0)  # zero variance column
        out_of_range = stats.apply(np.array([[9.0, 1.0, 20.0]]))
        assert out_of_range.max() <= 1.0 and out_of_range.min() >= 0.0

    def test_build_requires_stats(self, manhattan, manhattan_paths):
        od = pf.ODMatrix(25, np.zeros((625, 1)))
        with pytest.raises(pf.ContractError):
            build_input_tensor(manhattan, od, manhattan_paths, None)


class TestTargetNormalization:
    def test_share_round_trip(self, two_route_net):
        ps = pf.build_path_sets(two_route_net, 2)
        od = od_single(4, 0, 1, 100.0)
        flows = np.zeros((16, 1, 2))
        flows[1, 0] = [60.0, 40.0]
        target = normalize_target(flows, od)
        assert np.allclose(target[1], [0.6, 0.4])
        back = denormalize_prediction(target, od, ps.packed().slot_mask)
        assert np.allclose(back, flows)

    def test_zero_demand_zero_shares(self, two_route_net):
        od = pf.ODMatrix(4, np.zeros((16, 1)))
        flows = np.zeros((16, 1, 2))
        target = normalize_target(flows, od)
        assert np.all(target == 0)

    def test_corner_of_simplex(self, two_route_net):
        od = od_single(4, 0, 1, 250.0)
        flows = np.zeros((16, 1, 2))
        flows[1, 0, 0] = 250.0
        target = normalize_target(flows, od)
        assert np.allclose(target[1], [1.0, 0.0])

    def test_renormalize(self, two_route_net):
        ps = pf.build_path_sets(two_route_net, 2)
        od = od_single(4, 0, 1, 100.0)
        pred = np.zeros((16, 2))
        pred[1] = [0.5, 0.3]
        flows = denormalize_prediction(pred, od, ps.packed().slot_mask,
                                       renormalize=True)
        assert np.allclose(flows[1, 0], [62.5, 37.5])
        assert flows[1, 0].sum() == pytest.approx(100.0, rel=1e-12)

    def test_padded_slots_forced_zero(self, triangle_net):
        ps = pf.build_path_sets(triangle_net, 3)  # pair (0,1) has 2 real paths
        od = od_single(3, 0, 1, 100.0)
        pred = np.full((9, 3), 0.5)
        flows = denormalize_prediction(pred, od, ps.packed().slot_mask)
        assert flows[1, 0, 2] == 0.0

    def test_unknown_mode(self, two_route_net):
        od = od_single(4, 0, 1, 100.0)
        with pytest.raises(ConfigError):
            normalize_target(np.zeros((16, 1, 2)), od, mode="nope")


class TestSplits:
    def test_paper_split(self):
        assert split_sizes(4000) == (2800, 800, 400)

    def test_small_split(self):
        assert split_sizes(10) == (7, 2, 1)


class TestGenerateDataset:
    def test_dataset_layout(self, small_dataset):
        d = small_dataset.directory
        assert os.path.exists(os.path.join(d, "manifest.json"))
        assert os.path.exists(os.path.join(d, "paths.ndjson"))
        assert os.path.exists(os.path.join(d, "net.tntp"))
        sizes = {s: len(v) for s, v in small_dataset.manifest.splits.items()}
        assert sizes == {"train": 9, "val": 2, "test": 1}

    def test_sample_contents(self, small_dataset):
        sample = small_dataset.load_split("train")[0]
        m = small_dataset.manifest
        assert sample.input.shape == (625, m.a)
        assert sample.target.shape == (625, m.k * m.n)
        assert sample.input.min() >= 0.0 and sample.input.max() <= 1.0
        # masked pairs: zero demand features and zero targets
        masked = sample.demand[:, 0] == 0
        assert np.all(sample.target[masked] == 0)
        dem_col = 2 + m.n
        assert np.all(sample.input[masked, dem_col] == 0)

    def test_label_round_trip(self, small_dataset):
        sample = small_dataset.load_split("train")[0]
        flows = small_dataset.label_flows(sample)
        shares = normalize_target(flows, sample.od_matrix(25))
        demanded = sample.demand[:, 0] > 0
        assert np.allclose(shares[demanded], sample.target[demanded], atol=1e-6)

    def test_solver_quality_recorded(self, small_dataset):
        stats = small_dataset.manifest.sample_stats
        assert len(stats["rel_gap"]) == 12
        assert max(stats["rel_gap"]) <= 1e-4

    def test_reproducible_manifest_hash(self, manhattan, tmp_path):
        spec = ScenarioSpec(od_missing_ratio=0.2, demand_range=(50.0, 500.0),
                            n_samples=4, seed=9, k=2, warm_start_iters=5)
        a = generate_dataset(manhattan, spec, pf.SolverConfig(rel_gap_tol=1e-5),
                             tmp_path / "a")
        b = generate_dataset(manhattan, spec, pf.SolverConfig(rel_gap_tol=1e-5),
                             tmp_path / "b")
        assert a.manifest.manifest_hash == b.manifest.manifest_hash
        sa = (tmp_path / "a" / "samples" / "train" / "00000.bin").read_bytes()
        sb = (tmp_path / "b" / "samples" / "train" / "00000.bin").read_bytes()
        assert sa == sb

    def test_training_columns_span_unit_interval(self, small_dataset):
        rows = np.concatenate([s.input for s in small_dataset.load_split("train")])
        span = rows.max(axis=0) - rows.min(axis=0)
        for col in range(rows.shape[1]):
            if span[col] > 0:
                assert rows[:, col].min() == pytest.approx(0.0, abs=1e-12)
                assert rows[:, col].max() == pytest.approx(1.0, abs=1e-12)

    def test_warm_start_zero_demand_is_freeflow(self, manhattan, manhattan_paths):
        od = pf.ODMatrix(25, np.zeros((625, 1)))
        costs, shares = warm_start(manhattan, od, manhattan_paths, 20)
        assert np.allclose(costs, manhattan_paths.packed().freeflow_cost)
        assert np.all(shares == 0)


class TestRebuildEvalSamples:
    def test_removal_eval(self, small_dataset):
        reduced, path_sets, samples = rebuild_eval_samples(
            small_dataset, [0], pf.SolverConfig(rel_gap_tol=1e-5), "test")
        assert reduced.disabled == {0}
        assert len(samples) == 1
        s = samples[0]
        assert s.input.shape[0] == 625
        # labels satisfy conservation on the reduced network
        flows = small_dataset.label_flows(s)  # uses base pad mask... use own
        total = s.target.reshape(625, 1, 3).sum(axis=2)[:, 0] * s.demand[:, 0]
        assert np.allclose(total, s.demand[:, 0] * 1.0, rtol=1e-5)
