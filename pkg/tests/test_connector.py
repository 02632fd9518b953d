"""
Unit tests for barrier optimisation and recursive path refinement in the
modeconn.connector module.
"""
import json
import os
import tempfile
import unittest

import numpy as np

from src.modeconn import connector
from src.modeconn import netcore
from src.modeconn.connector import ConnectorConfig
from src.modeconn.exceptions import DegenerateChordError, NotConnectedError
from tests._nets import numeric_gradient, ridge_net, tiny_cnn

_A = np.array([-1.0, 0.0])
_C = np.array([1.0, 0.0])


def _ridge_config(**overrides) -> ConnectorConfig:
    values = dict(lr=0.01, iters=600, lambda_mse=1e-5, lambda_hf=0.0, clamp_range=None,
                  n_primary=101, n_segment=51)
    values.update(overrides)
    return ConnectorConfig(**values)


class TestHighFrequencyPenalty(unittest.TestCase):
    """Test cases for `hf_penalty` and its gradient."""

    def test_constant_image(self) -> None:
        self.assertEqual(connector.hf_penalty(np.full((2, 4, 4), 0.7)), 0.0)

    def test_single_pair(self) -> None:
        self.assertAlmostEqual(connector.hf_penalty(np.array([[[0.2, 0.9]]])), 0.49)

    def test_matches_loop_oracle(self) -> None:
        img = np.random.default_rng(0).uniform(0, 1, (2, 5, 4))
        expected = 0.0
        for ch in range(2):
            for i in range(5):
                for j in range(4):
                    if j + 1 < 4:
                        expected += (img[ch, i, j + 1] - img[ch, i, j]) ** 2
                    if i + 1 < 5:
                        expected += (img[ch, i + 1, j] - img[ch, i, j]) ** 2
        self.assertAlmostEqual(connector.hf_penalty(img), expected, places=12)

    def test_gradient_matches_finite_differences(self) -> None:
        img = np.random.default_rng(1).uniform(0, 1, (1, 4, 3))
        np.testing.assert_allclose(connector.hf_penalty_gradient(img),
                                   numeric_gradient(connector.hf_penalty, img), atol=1e-7)

    def test_rejects_flat_input(self) -> None:
        with self.assertRaises(ValueError):
            connector.hf_penalty(np.zeros(4))


class TestConnectorConfig(unittest.TestCase):

    def test_defaults(self) -> None:
        cfg = ConnectorConfig()
        self.assertEqual((cfg.lr, cfg.iters, cfg.lambda_mse, cfg.delta, cfg.max_depth),
                         (0.005, 1024, 0.1, 0.001, 4))

    def test_invalid_values(self) -> None:
        for bad in ({"lr": 0.0}, {"delta": 0.0}, {"lambda_mse": -1.0}, {"iters": 0},
                    {"clamp_range": (1.0, 0.0)}):
            with self.assertRaises(ValueError, msg=str(bad)):
                ConnectorConfig(**bad)


class TestOptimizeBarrierPoint(unittest.TestCase):
    """Test cases for `optimize_barrier_point`."""

    def test_bypasses_the_ridge_barrier(self) -> None:
        net = ridge_net()
        b = np.zeros(2)
        self.assertGreater(netcore.cross_entropy(netcore.forward_logits(net, b), 0), 1.0)
        b_prime = connector.optimize_barrier_point(net, _A, _C, b, 0, _ridge_config())
        self.assertLess(netcore.cross_entropy(netcore.forward_logits(net, b_prime), 0), 0.001)
        self.assertEqual(b_prime[0], 0.0)
        self.assertGreater(b_prime[1], 0.0)

    def test_displacement_is_orthogonal_and_loss_never_increases(self) -> None:
        net = tiny_cnn(3)
        rng = np.random.default_rng(3)
        a, c = rng.uniform(0, 1, (1, 6, 6)), rng.uniform(0, 1, (1, 6, 6))
        b = 0.5 * (a + c)
        cfg = ConnectorConfig(iters=50, lr=0.01)
        b_prime = connector.optimize_barrier_point(net, a, c, b, 1, cfg)
        chord = (c - a).ravel()
        disp = (b_prime - b).ravel()
        self.assertLessEqual(abs(float(disp @ chord)), 1e-6 * np.linalg.norm(disp) * np.linalg.norm(chord) + 1e-15)
        loss_b = netcore.cross_entropy(netcore.forward_logits(net, b), 1)
        self.assertLessEqual(netcore.cross_entropy(netcore.forward_logits(net, b_prime), 1), loss_b)

    def test_degenerate_chord(self) -> None:
        with self.assertRaises(DegenerateChordError):
            connector.optimize_barrier_point(ridge_net(), _A, _A, _A, 0, _ridge_config())

    def test_is_deterministic(self) -> None:
        net = ridge_net()
        cfg = _ridge_config(iters=100)
        first = connector.optimize_barrier_point(net, _A, _C, np.zeros(2), 0, cfg)
        second = connector.optimize_barrier_point(net, _A, _C, np.zeros(2), 0, cfg)
        np.testing.assert_array_equal(first, second)


class TestConnect(unittest.TestCase):
    """Test cases for `connect`."""

    def test_connects_ridge_modes_with_one_bypass(self) -> None:
        net = ridge_net()
        cfg = _ridge_config()
        result = connector.connect(net, _A, _C, 0, cfg)
        self.assertEqual(result.num_segments, 2)
        self.assertEqual(result.depth_used, 1)
        np.testing.assert_array_equal(result.path.waypoints[0], _A)
        np.testing.assert_array_equal(result.path.waypoints[-1], _C)
        self.assertTrue(np.all(result.curve.losses <= cfg.delta))
        self.assertGreater(result.curve.losses.size, 0)
        self.assertGreater(float(np.max(result.primary_curve.losses)), 1.0)
        self.assertEqual(len(result.refinements), 1)
        self.assertAlmostEqual(result.refinements[0].alpha, 0.5)
        self.assertLess(result.orthogonality_residuals[0], 1e-6)

    def test_identical_endpoints(self) -> None:
        result = connector.connect(ridge_net(), _A, _A.copy(), 0, _ridge_config())
        self.assertEqual(result.num_segments, 1)
        self.assertEqual(result.refinements, [])
        self.assertEqual(result.depth_used, 0)

    def test_already_connected_pair(self) -> None:
        result = connector.connect(ridge_net(), _A, np.array([-0.9, 0.0]), 0, _ridge_config())
        self.assertEqual(result.num_segments, 1)
        self.assertEqual(result.refinements, [])

    def test_endpoints_must_be_modes(self) -> None:
        with self.assertRaises(ValueError):
            connector.connect(ridge_net(), np.zeros(2), _C, 0, _ridge_config())

    def test_depth_exhaustion_carries_best_path(self) -> None:
        cfg = _ridge_config(iters=1, max_depth=1)
        with self.assertRaises(NotConnectedError) as ctx:
            connector.connect(ridge_net(), _A, _C, 0, cfg)
        path = ctx.exception.path
        self.assertIsNotNone(ctx.exception.curve)
        self.assertLessEqual(path.num_segments - 1, 2 ** cfg.max_depth - 1)
        np.testing.assert_array_equal(path.waypoints[0], _A)
        np.testing.assert_array_equal(path.waypoints[-1], _C)

    def test_report_files(self) -> None:
        result = connector.connect(ridge_net(), _A, _C, 0, _ridge_config())
        with tempfile.TemporaryDirectory() as tmp:
            report_path = connector.write_connection_report(result, tmp)
            with open(report_path, encoding="utf-8") as f:
                report = json.load(f)
            for key in ("waypoints_file", "curve_file", "primary_curve_file"):
                self.assertTrue(os.path.isfile(os.path.join(tmp, report[key])), key)
        self.assertEqual(report["num_segments"], 2)
        self.assertEqual(len(report["segment_max_loss"]), 2)
        self.assertGreater(report["primary_barrier"]["gap"], 1.0)


if __name__ == '__main__':
    unittest.main()
