"""
Unit tests for interval labels, Lipschitz bounds and lattice percolation in
the modeconn.percolation module.
"""
import csv
import itertools
import math
import os
import tempfile
import unittest
from collections import deque

import numpy as np

from src.modeconn import netcore
from src.modeconn import percolation
from src.modeconn.exceptions import InsufficientDataError
from src.modeconn.netcore import LayerSpec, Network
from src.modeconn.percolation import LatticeConfig, SweepRow
from src.modeconn.utils import spawn_rng
from tests._nets import tiny_cnn, tiny_mlp


def _bfs_components(values: np.ndarray, cfg: LatticeConfig) -> np.ndarray:
    """Component id per site by breadth-first search over the (L,) * d grid."""
    shape = (cfg.side,) * cfg.dimension
    grid = values.reshape(shape)
    comp = -np.ones(shape, dtype=np.int64)

    def compatible(a: float, b: float) -> bool:
        if cfg.mode == "threshold":
            return abs(a - b) <= cfg.delta
        return a != percolation.VACANT and a == b

    next_id = 0
    for start in itertools.product(range(cfg.side), repeat=cfg.dimension):
        if comp[start] >= 0:
            continue
        comp[start] = next_id
        queue = deque([start])
        while queue:
            site = queue.popleft()
            for axis in range(cfg.dimension):
                for step in (-1, 1):
                    other = list(site)
                    other[axis] += step
                    if not 0 <= other[axis] < cfg.side:
                        if not cfg.periodic:
                            continue
                        other[axis] %= cfg.side
                    other = tuple(other)
                    if comp[other] < 0 and compatible(grid[site], grid[other]):
                        comp[other] = next_id
                        queue.append(other)
        next_id += 1
    return comp.reshape(-1)


def _same_partition(a: np.ndarray, b: np.ndarray) -> bool:
    return np.array_equal(a[:, None] == a[None, :], b[:, None] == b[None, :])


class TestIntervalLabels(unittest.TestCase):

    def test_counts_and_cover(self) -> None:
        for delta in (1.0, 0.5, 0.1, 0.02):
            labels = percolation.interval_labels(delta)
            self.assertEqual(len(labels), 2 * round(1 / delta) - 1)
            self.assertEqual(labels.intervals[0, 0], 0.0)
            self.assertEqual(labels.intervals[-1, 1], 1.0)
            np.testing.assert_allclose(labels.intervals[:, 1] - labels.intervals[:, 0], delta)

    def test_containing(self) -> None:
        labels = percolation.interval_labels(0.5)
        self.assertEqual(labels.containing(0.5), [0, 1, 2])
        self.assertEqual(labels.containing(0.1), [0])
        self.assertEqual(labels.containing(0.8), [2])

    def test_invalid_delta(self) -> None:
        for bad in (0.0, 0.3, 1.5):
            with self.assertRaises(ValueError, msg=str(bad)):
                percolation.interval_labels(bad)


class TestLipschitz(unittest.TestCase):
    """Test cases for spectral norms and the grid pitch they imply."""

    def test_dense_norms_match_svd(self) -> None:
        net = tiny_mlp(2)
        norms = percolation.layer_spectral_norms(net)
        self.assertEqual(len(norms), 2)
        np.testing.assert_allclose(norms, [np.linalg.norm(net.params[0]["weight"], 2),
                                           np.linalg.norm(net.params[2]["weight"], 2)], rtol=1e-12)
        self.assertAlmostEqual(percolation.lipschitz_bound(net), norms[0] * norms[1])

    def test_conv_norm_matches_dense_matrix(self) -> None:
        net = tiny_cnn(1)
        matrix = self._conv_matrix(net, 0)
        norm = percolation.layer_spectral_norms(net)[0]
        self.assertAlmostEqual(norm / np.linalg.norm(matrix, 2), 1.0, places=6)

    def test_bound_holds_on_random_pairs(self) -> None:
        net = tiny_mlp(4)
        bound = percolation.lipschitz_bound(net)
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b = rng.uniform(0, 1, (2, 4))
            gap = np.linalg.norm(netcore.forward_logits(net, a) - netcore.forward_logits(net, b))
            self.assertLessEqual(gap, bound * np.linalg.norm(a - b) + 1e-12)

    def _conv_matrix(self, net, index: int) -> np.ndarray:
        shape = net.shapes[index]
        size = int(np.prod(shape))
        columns = [netcore.linear_map(net, index, np.eye(size)[i].reshape(shape)).ravel() for i in range(size)]
        return np.stack(columns, axis=1)

    def test_layer_bounds_are_at_least_the_svd_value(self) -> None:
        strided = Network.initialize([LayerSpec("conv2d", in_channels=1, out_channels=2, kernel_size=3, stride=2,
                                                padding=1),
                                      LayerSpec("relu"),
                                      LayerSpec("flatten"),
                                      LayerSpec("dense", in_features=2 * 4 * 4, out_features=3)], (1, 7, 7), 3, 6)
        for net in (tiny_cnn(1), tiny_cnn(7), strided):
            bounds = percolation.layer_norm_bounds(net)
            exact = np.linalg.norm(self._conv_matrix(net, 0), 2)
            self.assertGreaterEqual(bounds[0], exact * (1.0 - 1e-12))
            self.assertGreaterEqual(bounds[0], percolation.layer_spectral_norms(net)[0] * (1.0 - 1e-12))
            self.assertAlmostEqual(bounds[-1], np.linalg.norm(net.params[-1]["weight"], 2), places=12)
            self.assertAlmostEqual(percolation.lipschitz_bound(net), float(np.prod(bounds)))

    def test_pointwise_conv_bound_is_tight(self) -> None:
        layers = [LayerSpec("conv2d", in_channels=1, out_channels=1, kernel_size=1, stride=1, padding=0),
                  LayerSpec("flatten"),
                  LayerSpec("dense", in_features=9, out_features=2)]
        params = [{"weight": np.full((1, 1, 1, 1), -2.5), "bias": np.zeros(1)}, {},
                  {"weight": np.eye(2, 9), "bias": np.zeros(2)}]
        net = Network(layers, params, (1, 3, 3), 2)
        self.assertAlmostEqual(percolation.layer_norm_bounds(net)[0], 2.5, places=12)
        self.assertAlmostEqual(percolation.lipschitz_bound(net), 2.5, places=12)

    def test_conv_bound_holds_on_random_pairs(self) -> None:
        net = tiny_cnn(3)
        bound = percolation.lipschitz_bound(net)
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = rng.uniform(0, 1, (2,) + net.input_shape)
            gap = np.linalg.norm(netcore.forward_logits(net, a) - netcore.forward_logits(net, b))
            self.assertLessEqual(gap, bound * np.linalg.norm(a - b) + 1e-12)

    def test_epsilon_and_cube(self) -> None:
        eps = percolation.epsilon_grid(2.0, 0.1, 0.02)
        self.assertAlmostEqual(eps, 0.04)
        self.assertAlmostEqual(percolation.cube_side(eps, 4), 0.02)
        for args in ((0.0, 0.1, 0.02), (2.0, 0.1, 0.1), (2.0, 0.1, 0.0)):
            with self.assertRaises(ValueError, msg=str(args)):
                percolation.epsilon_grid(*args)


class TestLatticeConfig(unittest.TestCase):

    def test_derived_quantities(self) -> None:
        cfg = LatticeConfig(3, 4, labels=4)
        self.assertEqual(cfg.num_sites, 64)
        self.assertEqual(cfg.per_label_probability, 0.25)
        self.assertAlmostEqual(cfg.q, 0.75)
        threshold = LatticeConfig(2, 4, mode="threshold", delta=0.1)
        self.assertAlmostEqual(threshold.q, 2 * (0.2 - 0.01))
        self.assertEqual(threshold.param, 0.1)

    def test_invalid(self) -> None:
        for bad in ({"mode": "bond"}, {"side": 1}, {"occupation": 0.6}, {"trials": 0}, {"dimension": 0},
                    {"side": 10 ** 4, "dimension": 2}):
            values = dict(dimension=2, side=4)
            values.update(bad)
            with self.assertRaises(ValueError, msg=str(bad)):
                LatticeConfig(**values)


class TestComponents(unittest.TestCase):
    """Test cases for `find_components` and `pair_connectivity`."""

    def _check_against_bfs(self, cfg: LatticeConfig) -> None:
        values = percolation.label_lattice(cfg, spawn_rng(cfg.seed))
        roots = percolation.find_components(values, cfg)
        self.assertTrue(_same_partition(roots, _bfs_components(values, cfg)), str(cfg))

    def test_discrete_matches_bfs(self) -> None:
        for d, side, seed in ((1, 30, 0), (2, 7, 1), (3, 4, 2)):
            self._check_against_bfs(LatticeConfig(d, side, labels=2, occupation=0.4, seed=seed))

    def test_threshold_matches_bfs(self) -> None:
        self._check_against_bfs(LatticeConfig(2, 6, mode="threshold", delta=0.2, seed=3))

    def test_periodic_matches_bfs(self) -> None:
        self._check_against_bfs(LatticeConfig(2, 5, labels=1, occupation=0.6, periodic=True, seed=4))
        self._check_against_bfs(LatticeConfig(3, 3, mode="threshold", delta=0.3, periodic=True, seed=5))

    def test_pair_connectivity_matches_brute_force(self) -> None:
        for cfg in (LatticeConfig(2, 6, labels=2, occupation=0.45, seed=6),
                    LatticeConfig(2, 6, mode="threshold", delta=0.25, seed=7)):
            values = percolation.label_lattice(cfg, spawn_rng(cfg.seed))
            roots = percolation.find_components(values, cfg)
            compatible = connected = 0
            for i, j in itertools.combinations(range(cfg.num_sites), 2):
                if cfg.mode == "threshold":
                    ok = abs(values[i] - values[j]) <= cfg.delta
                else:
                    ok = values[i] != percolation.VACANT and values[i] == values[j]
                if ok:
                    compatible += 1
                    connected += int(roots[i] == roots[j])
            self.assertAlmostEqual(percolation.pair_connectivity(values, roots, cfg), connected / compatible)

    def test_no_compatible_pairs(self) -> None:
        cfg = LatticeConfig(1, 3, labels=1, occupation=0.5)
        values = np.array([0.0, -1.0, -1.0])
        roots = percolation.find_components(values, cfg)
        self.assertTrue(math.isnan(percolation.pair_connectivity(values, roots, cfg)))


class TestSimulation(unittest.TestCase):

    def test_component_sizes_cover_the_lattice(self) -> None:
        cfg = LatticeConfig(2, 10, labels=2, trials=3, seed=1)
        result = percolation.simulate_lattice(cfg)
        self.assertEqual(int(result.component_sizes.sum()), 100)
        self.assertTrue(np.all(np.diff(result.component_sizes) <= 0))
        self.assertEqual(result.trial_largest.shape, (3,))
        self.assertAlmostEqual(result.largest_frac, float(np.mean(result.trial_largest)))

    def test_deterministic_across_workers(self) -> None:
        cfg = LatticeConfig(3, 6, mode="threshold", delta=0.15, trials=4, seed=9)
        first = percolation.simulate_lattice(cfg, workers=1)
        second = percolation.simulate_lattice(cfg, workers=4)
        np.testing.assert_array_equal(first.trial_pair_conn, second.trial_pair_conn)
        np.testing.assert_array_equal(first.component_sizes, second.component_sizes)

    def test_full_threshold_connects_everything(self) -> None:
        result = percolation.simulate_lattice(LatticeConfig(2, 5, mode="threshold", delta=1.0))
        self.assertEqual(result.largest_frac, 1.0)
        self.assertEqual(result.pair_conn, 1.0)


class TestMeanField(unittest.TestCase):

    def test_subcritical_is_zero(self) -> None:
        for q in (0.0, 0.5, 1.0):
            self.assertEqual(percolation.mean_field_P(q), 0.0)

    def test_fixed_point(self) -> None:
        self.assertAlmostEqual(percolation.mean_field_P(2.0), 0.7968121300, places=9)
        for q in (1.1, 1.5, 3.0, 10.0):
            p = percolation.mean_field_P(q)
            self.assertGreater(p, 0.0)
            self.assertAlmostEqual(p, 1.0 - math.exp(-q * p), places=12)

    def test_negative_q(self) -> None:
        with self.assertRaises(ValueError):
            percolation.mean_field_P(-1.0)


class TestSweeps(unittest.TestCase):
    """Test cases for dimension sweeps and the decay fit."""

    def test_side_for_dimension(self) -> None:
        self.assertEqual(percolation.side_for_dimension(2, 100), 10)
        self.assertEqual(percolation.side_for_dimension(3, 999), 9)
        self.assertEqual(percolation.side_for_dimension(7, 10 ** 5), 5)
        self.assertEqual(percolation.side_for_dimension(20, 10), 2)

    def test_sweep_rows(self) -> None:
        rows = percolation.connectivity_vs_dimension([2, 3], 1.5, max_sites=400, trials=2, seed=3)
        self.assertEqual([(r.d, r.L) for r in rows], [(2, 20), (3, 7)])
        for row in rows:
            self.assertAlmostEqual(row.q, 1.5)
            self.assertAlmostEqual(row.mean_field_P, percolation.mean_field_P(row.q))
        again = percolation.connectivity_vs_dimension([2, 3], 1.5, max_sites=400, trials=2, seed=3, workers=2)
        self.assertEqual(rows, again)

    def test_threshold_sweep(self) -> None:
        rows = percolation.connectivity_vs_dimension([2, 4], 1.2, mode="threshold", max_sites=300, trials=1)
        for row in rows:
            self.assertAlmostEqual(2 * row.param - row.param ** 2, 1.2 / row.d)

    def test_q_out_of_range(self) -> None:
        with self.assertRaises(ValueError):
            percolation.connectivity_vs_dimension([1], 2.0, max_sites=100)

    def test_exponential_fit(self) -> None:
        rows = [SweepRow(d, 10, "discrete", 0.5, 1.0, 0.5, 1.0 - math.exp(0.3 - 0.5 * d), 0.0, 0.0, 0)
                for d in range(2, 6)]
        rate, intercept = percolation.fit_exponential_decay(rows)
        self.assertAlmostEqual(rate, 0.5)
        self.assertAlmostEqual(intercept, 0.3)
        with self.assertRaises(InsufficientDataError):
            percolation.fit_exponential_decay(rows[:1])

    def test_csv(self) -> None:
        rows = [SweepRow(2, 10, "discrete", 0.5, 1.0, 0.25, 0.125, 0.0, 0.0, 7)]
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "sweep.csv")
            percolation.write_sweep_csv(rows, path)
            with open(path, encoding="utf-8", newline="") as f:
                table = list(csv.reader(f))
        self.assertEqual(tuple(table[0]), percolation.SWEEP_COLUMNS)
        self.assertEqual(table[1][:3], ["2", "10", "discrete"])
        self.assertEqual(float(table[1][6]), 0.125)


if __name__ == '__main__':
    unittest.main()
