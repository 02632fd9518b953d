"""
Unit tests for feature visualisation by optimisation in the modeconn.synth module.
"""
import json
import os
import tempfile
import unittest

import numpy as np

from src.modeconn import config
from src.modeconn import netcore
from src.modeconn import synth
from src.modeconn.connector import hf_penalty
from src.modeconn.exceptions import ThresholdNotReachedError
from src.modeconn.netcore import Network
from src.modeconn.storage import load_blob
from src.modeconn.synth import FvoConfig
from tests._nets import linear_image_net, linear_net, numeric_gradient, tiny_mlp

_SLOW = bool(os.environ.get("MODECONN_SLOW_TESTS"))


class TestSurrogateObjective(unittest.TestCase):
    """Test cases for the dot-product times root-cosine surrogate."""

    def test_one_hot_logits(self) -> None:
        self.assertAlmostEqual(synth.surrogate_objective(np.array([0.0, 1.0, 0.0]), 1), 0.5)

    def test_orthogonal_logits(self) -> None:
        self.assertEqual(synth.surrogate_objective(np.array([0.0, 3.0, -2.0]), 0), 0.0)
        self.assertEqual(synth.surrogate_objective(np.zeros(3), 0), 0.0)

    def test_scale_along_target(self) -> None:
        values = [synth.surrogate_objective(c * np.eye(4)[2], 2) for c in (0.5, 1.0, 2.0, 8.0)]
        np.testing.assert_allclose(values, [0.25, 0.5, 1.0, 4.0])

    def test_matches_extended_precision_formula(self) -> None:
        rng = np.random.default_rng(0)
        for _ in range(10):
            z = rng.standard_normal(5)
            y = int(rng.integers(5))
            zl = z.astype(np.longdouble)
            dot = zl[y]
            cosine = dot / np.sqrt(np.sum(zl * zl))
            expected = 0.5 * dot * np.sqrt(max(np.longdouble(0), cosine))
            self.assertAlmostEqual(synth.surrogate_objective(z, y), float(expected), places=13)

    def test_gradient_matches_finite_differences(self) -> None:
        z = np.array([0.3, 1.7, -0.4, 0.9])
        np.testing.assert_allclose(synth.surrogate_gradient(z, 1),
                                   numeric_gradient(lambda v: synth.surrogate_objective(v, 1), z), atol=1e-7)
        np.testing.assert_array_equal(synth.surrogate_gradient(np.array([1.0, -1.0]), 1), np.zeros(2))


class TestFvoConfig(unittest.TestCase):

    def test_defaults(self) -> None:
        cfg = FvoConfig()
        self.assertEqual((cfg.init_std, cfg.lr, cfg.weight_decay, cfg.max_iters, cfg.loss_threshold),
                         (0.01, 0.05, 1e-7, 4096, 0.0005))

    def test_invalid_values(self) -> None:
        for bad in ({"init_std": 0.0}, {"loss_threshold": 0.0}, {"max_iters": 0}, {"objective": "mse"},
                    {"hf_weight": -1.0}):
            with self.assertRaises(ValueError, msg=str(bad)):
                FvoConfig(**bad)


class TestGenerateOptimalInput(unittest.TestCase):
    """Test cases for `generate_optimal_input` and `generate_diverse_pair`."""

    def test_cross_entropy_objective_reaches_threshold(self) -> None:
        net = linear_net(1)
        cfg = FvoConfig(max_iters=2000)
        for y in range(3):
            result = synth.generate_optimal_input(net, y, cfg, seed=0)
            loss = netcore.cross_entropy(netcore.forward_logits(net, result.input), y)
            self.assertLessEqual(loss, cfg.loss_threshold)
            self.assertAlmostEqual(result.loss, loss)
            self.assertEqual(int(np.argmax(netcore.forward_logits(net, result.input))), y)

    def test_surrogate_objective_meets_the_loss_contract(self) -> None:
        net = linear_net(2)
        cfg = FvoConfig(max_iters=3000, objective="surrogate")
        for y in range(3):
            result = synth.generate_optimal_input(net, y, cfg, seed=1)
            self.assertLessEqual(netcore.cross_entropy(netcore.forward_logits(net, result.input), y),
                                 cfg.loss_threshold)

    def test_same_seed_is_bit_identical(self) -> None:
        net = linear_net(3)
        first = synth.generate_optimal_input(net, 0, FvoConfig(max_iters=2000), seed=5)
        second = synth.generate_optimal_input(net, 0, FvoConfig(max_iters=2000), seed=5)
        np.testing.assert_array_equal(first.input, second.input)
        self.assertEqual(first.iterations, second.iterations)

    def test_threshold_not_reached_carries_best_input(self) -> None:
        # tanh saturates, so the logit margin of this net is bounded.
        net = tiny_mlp(0)
        with self.assertRaises(ThresholdNotReachedError) as ctx:
            synth.generate_optimal_input(net, 0, FvoConfig(max_iters=20, loss_threshold=1e-12), seed=0)
        self.assertEqual(ctx.exception.iterations, 20)
        self.assertEqual(ctx.exception.best_input.shape, (4,))
        self.assertTrue(np.isfinite(ctx.exception.best_loss))

    def test_invalid_class(self) -> None:
        with self.assertRaises(ValueError):
            synth.generate_optimal_input(linear_net(), 3, FvoConfig(), seed=0)

    def test_diverse_pair(self) -> None:
        net = linear_image_net(4)
        cfg = FvoConfig(max_iters=3000, hf_weight=0.05)
        plain, smooth = synth.generate_diverse_pair(net, 1, cfg, (0, 1))
        for member in (plain, smooth):
            probs = np.exp(-netcore.cross_entropy(netcore.forward_logits(net, member.input), 1))
            self.assertGreater(probs, 1.0 - cfg.loss_threshold)
        self.assertEqual(plain.cfg.hf_weight, 0.0)
        self.assertEqual(smooth.cfg.hf_weight, 0.05)
        self.assertLess(hf_penalty(smooth.input), hf_penalty(plain.input))
        self.assertGreater(float(np.linalg.norm(plain.input - smooth.input)), 0.0)
        with self.assertRaises(ValueError):
            synth.generate_diverse_pair(net, 1, cfg, (3, 3))

    def test_save_synthetic(self) -> None:
        net = linear_image_net(5)
        result = synth.generate_optimal_input(net, 2, FvoConfig(max_iters=2000), seed=0)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "synthetic.bin")
            synth.save_synthetic(result, path)
            header, tensors = load_blob(path)
            with open(path + ".json", encoding="utf-8") as f:
                sidecar = json.load(f)
        self.assertEqual(header["target_class"], 2)
        self.assertEqual(tensors[0][0], "input")
        np.testing.assert_array_equal(tensors[0][1], result.input.astype(np.float32))
        self.assertIn("hf_penalty", sidecar)
        self.assertEqual(sidecar["config"]["objective"], "cross_entropy")

    @unittest.skipUnless(_SLOW, "set MODECONN_SLOW_TESTS=1 to run")
    def test_untrained_reference_cnn_reaches_threshold(self) -> None:
        shape = (1, config.SYNTH_IMAGE_SIZE, config.SYNTH_IMAGE_SIZE)
        net = Network.from_architecture("cnn", shape, 10, seed=0)
        result = synth.generate_optimal_input(net, 3, FvoConfig(), seed=0)
        self.assertLessEqual(result.loss, 0.0005)


if __name__ == '__main__':
    unittest.main()
