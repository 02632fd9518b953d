"""
Unit tests for interpolation, loss curves and barriers in the modeconn.paths module.
"""
import os
import tempfile
import unittest

import numpy as np

from src.modeconn import netcore
from src.modeconn import paths
from src.modeconn.paths import LossCurve, Path
from tests._nets import tiny_cnn, tiny_mlp


def _curve(losses) -> LossCurve:
    losses = np.asarray(losses, dtype=np.float64)
    alphas = np.linspace(0.0, 1.0, losses.size)
    return LossCurve(alphas, losses, np.zeros(losses.size, dtype=np.int64), np.array([0.0, 1.0]))


class TestInterpolate(unittest.TestCase):
    """Test cases for `interpolate`."""

    def test_endpoints_are_exact(self) -> None:
        rng = np.random.default_rng(0)
        x_i, x_j = rng.standard_normal(10), rng.standard_normal(10)
        np.testing.assert_array_equal(paths.interpolate(x_i, x_j, 1.0), x_i)
        np.testing.assert_array_equal(paths.interpolate(x_i, x_j, 0.0), x_j)

    def test_midpoint_and_equal_inputs(self) -> None:
        np.testing.assert_allclose(paths.interpolate(np.array([0.0, 2.0]), np.array([2.0, 0.0]), 0.5), [1.0, 1.0])
        x = np.array([0.3, -0.7])
        np.testing.assert_allclose(paths.interpolate(x, x, 0.37), x)

    def test_invalid_arguments(self) -> None:
        with self.assertRaises(ValueError):
            paths.interpolate(np.zeros(2), np.zeros(3), 0.5)
        with self.assertRaises(ValueError):
            paths.interpolate(np.zeros(2), np.zeros(2), 1.5)
        with self.assertRaises(ValueError):
            paths.interpolate(np.zeros(2), np.zeros(2), -0.1)


class TestPathType(unittest.TestCase):

    def test_validation(self) -> None:
        with self.assertRaises(ValueError):
            Path([np.zeros(2)], 0)
        with self.assertRaises(ValueError):
            Path([np.zeros(2), np.zeros(3)], 0)
        with self.assertRaises(ValueError):
            Path([np.zeros(2), np.ones(2), np.ones(2)], 0)
        # A degenerate two-point path is allowed.
        self.assertEqual(Path([np.zeros(2), np.zeros(2)], 0).num_segments, 1)


class TestLossCurve(unittest.TestCase):
    """Test cases for `sample_loss_curve`."""

    def setUp(self) -> None:
        self.net = tiny_mlp(1)
        rng = np.random.default_rng(1)
        self.a, self.b, self.c = (rng.uniform(0, 1, 4) for _ in range(3))

    def test_three_points_on_one_segment(self) -> None:
        curve = paths.sample_loss_curve(self.net, Path([self.a, self.c], 0), 3)
        np.testing.assert_allclose(curve.alphas, [0.0, 0.5, 1.0])
        self.assertEqual(len(curve), 3)

    def test_losses_match_direct_evaluation(self) -> None:
        curve = paths.sample_loss_curve(self.net, Path([self.a, self.c], 2), 11)
        for alpha, loss in zip(curve.alphas, curve.losses):
            # Global alpha runs from A (0) to C (1), so A carries weight 1 - alpha.
            x = paths.interpolate(self.c, self.a, alpha)
            self.assertAlmostEqual(loss, netcore.cross_entropy(netcore.forward_logits(self.net, x), 2), places=12)

    def test_multi_segment_joints_are_not_duplicated(self) -> None:
        path = Path([self.a, self.b, self.c], 1)
        curve = paths.sample_loss_curve(self.net, path, 5)
        self.assertEqual(len(curve), 9)
        self.assertTrue(np.all(np.diff(curve.alphas) > 0))
        self.assertEqual(curve.alphas[0], 0.0)
        self.assertEqual(curve.alphas[-1], 1.0)
        np.testing.assert_allclose(curve.boundaries, [0.0, 0.5, 1.0])
        self.assertEqual(list(curve.segments), [0, 0, 0, 0, 0, 1, 1, 1, 1])
        joint = netcore.cross_entropy(netcore.forward_logits(self.net, self.b), 1)
        self.assertAlmostEqual(curve.losses[4], joint, places=12)
        self.assertEqual(len(curve.segment_max()), 2)

    def test_reversed_path_gives_reversed_losses(self) -> None:
        path = Path([self.a, self.b, self.c], 0)
        forward = paths.sample_loss_curve(self.net, path, 7)
        backward = paths.sample_loss_curve(self.net, path.reversed(), 7)
        np.testing.assert_allclose(backward.losses, forward.losses[::-1], atol=1e-12)
        np.testing.assert_allclose(backward.alphas, 1.0 - forward.alphas[::-1], atol=1e-12)

    def test_identical_waypoints_give_constant_curve(self) -> None:
        curve = paths.sample_loss_curve(self.net, Path([self.a, self.a], 0), 6)
        self.assertTrue(np.all(curve.losses == curve.losses[0]))

    def test_needs_two_points(self) -> None:
        with self.assertRaises(ValueError):
            paths.sample_loss_curve(self.net, Path([self.a, self.c], 0), 1)

    def test_image_paths(self) -> None:
        net = tiny_cnn(3)
        rng = np.random.default_rng(2)
        curve = paths.sample_loss_curve(net, Path([rng.uniform(0, 1, (1, 6, 6)), rng.uniform(0, 1, (1, 6, 6))], 1), 4)
        self.assertTrue(np.all(curve.losses >= 0))


class TestBarrier(unittest.TestCase):
    """Test cases for `find_barrier` and `is_delta_connected`."""

    def test_interior_barrier(self) -> None:
        report = paths.find_barrier(_curve([0.0001, 9.8, 0.0001]))
        self.assertEqual(report.max_loss, 9.8)
        self.assertAlmostEqual(report.gap, 9.7999)
        self.assertEqual(report.argmax_alpha, 0.5)
        self.assertEqual(report.endpoint_losses, (0.0001, 0.0001))

    def test_monotone_curve_has_no_gap(self) -> None:
        report = paths.find_barrier(_curve([0.1, 0.2, 0.3, 0.4]))
        self.assertEqual(report.gap, 0.0)
        self.assertEqual(report.argmax_alpha, 1.0)

    def test_tie_break_toward_smallest_alpha(self) -> None:
        report = paths.find_barrier(_curve([0.0, 2.0, 1.0, 2.0, 2.0, 0.0]))
        self.assertAlmostEqual(report.argmax_alpha, 0.2)

    def test_max_loss_equals_curve_max(self) -> None:
        losses = np.random.default_rng(4).uniform(0, 3, 50)
        self.assertEqual(paths.find_barrier(_curve(losses)).max_loss, float(np.max(losses)))

    def test_empty_curve(self) -> None:
        with self.assertRaises(ValueError):
            paths.find_barrier(_curve([]))

    def test_delta_connectivity(self) -> None:
        self.assertTrue(paths.is_delta_connected(_curve([0.0, 0.0]), 1e-9))
        self.assertTrue(paths.is_delta_connected(_curve([0.0, 0.0009, 0.0]), 0.001))
        self.assertFalse(paths.is_delta_connected(_curve([0.0, 0.0011, 0.0]), 0.001))
        self.assertTrue(paths.is_delta_connected(_curve([0.0, 0.0011, 0.0]), 0.002))
        with self.assertRaises(ValueError):
            paths.is_delta_connected(_curve([0.0]), 0.0)


class TestDifferencePattern(unittest.TestCase):
    """Test cases for the B' - B diagnostics."""

    def test_pattern_is_unit_peak(self) -> None:
        b = np.zeros((1, 3, 3))
        b_prime = b.copy()
        b_prime[0, 1, 1] = -0.4
        b_prime[0, 0, 0] = 0.2
        pattern = paths.difference_pattern(b, b_prime)
        self.assertEqual(float(np.max(np.abs(pattern))), 1.0)
        self.assertEqual(pattern[0, 1, 1], -1.0)
        np.testing.assert_array_equal(paths.difference_pattern(b, b), np.zeros_like(b))

    def test_scaling_is_triangular_on_bypass(self) -> None:
        a, c = np.array([0.0, 0.0]), np.array([2.0, 0.0])
        b, b_prime = np.array([1.0, 0.0]), np.array([1.0, 0.5])
        path = Path([a, b_prime, c], 0)
        scales = paths.difference_scaling(path, b, b_prime, [0.0, 0.25, 0.5, 0.75, 1.0])
        np.testing.assert_allclose(scales, [0.0, 0.5, 1.0, 0.5, 0.0], atol=1e-12)
        np.testing.assert_array_equal(paths.difference_scaling(path, b, b, [0.5]), [0.0])

    def test_point_at(self) -> None:
        path = Path([np.array([0.0]), np.array([1.0]), np.array([3.0])], 0)
        self.assertEqual(float(paths.point_at(path, 0.0)[0]), 0.0)
        self.assertAlmostEqual(float(paths.point_at(path, 0.25)[0]), 0.5)
        self.assertAlmostEqual(float(paths.point_at(path, 0.75)[0]), 2.0)
        self.assertEqual(float(paths.point_at(path, 1.0)[0]), 3.0)


class TestCurveCsv(unittest.TestCase):

    def test_write_and_read(self) -> None:
        curve = paths.sample_loss_curve(tiny_mlp(0), Path([np.zeros(4), np.ones(4)], 1), 9)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "curve.csv")
            paths.write_curve_csv(curve, path)
            with open(path, encoding="utf-8") as f:
                self.assertEqual(f.readline().strip(), "alpha,loss,segment")
            restored = paths.read_curve_csv(path)
        np.testing.assert_array_equal(restored.alphas, curve.alphas)
        np.testing.assert_array_equal(restored.losses, curve.losses)


if __name__ == '__main__':
    unittest.main()
