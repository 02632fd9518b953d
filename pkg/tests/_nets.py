"""
Small networks and datasets shared by the unit tests.

Everything here is seeded and small enough to keep each test well under a second.
"""
from typing import Tuple

import numpy as np

from src.modeconn.netcore import LabeledDataset, LayerSpec, Network, TrainConfig, train
from src.modeconn.utils import spawn_rng


def tiny_mlp(seed: int = 0, inputs: int = 4, hidden: int = 6, classes: int = 3) -> Network:
    """dense -> tanh -> dense on flat inputs."""
    layers = [LayerSpec("dense", in_features=inputs, out_features=hidden),
              LayerSpec("tanh"),
              LayerSpec("dense", in_features=hidden, out_features=classes)]
    return Network.initialize(layers, (inputs,), classes, seed)


def tiny_cnn(seed: int = 0, size: int = 6, classes: int = 3) -> Network:
    """conv(3x3, pad 1) -> tanh -> maxpool(2) -> flatten -> dense on (1, size, size) images."""
    layers = [LayerSpec("conv2d", in_channels=1, out_channels=2, kernel_size=3, stride=1, padding=1),
              LayerSpec("tanh"),
              LayerSpec("maxpool2d", kernel_size=2, stride=2),
              LayerSpec("flatten"),
              LayerSpec("dense", in_features=2 * (size // 2) ** 2, out_features=classes)]
    return Network.initialize(layers, (1, size, size), classes, seed)


def blobs(seed: int = 0, per_class: int = 20, classes: int = 3, dim: int = 4, spread: float = 0.05) -> LabeledDataset:
    """Well separated Gaussian clusters in [0, 1]^dim, one per class."""
    rng = spawn_rng(seed, 99)
    centres = np.linspace(0.2, 0.8, classes)
    inputs, labels = [], []
    for c in range(classes):
        points = centres[c] + spread * rng.standard_normal((per_class, dim))
        inputs.append(np.clip(points, 0.0, 1.0))
        labels.append(np.full(per_class, c))
    return LabeledDataset(np.concatenate(inputs), np.concatenate(labels))


def numeric_gradient(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function."""
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        step = np.zeros_like(x)
        step.reshape(-1)[i] = h
        flat[i] = (f(x + step) - f(x - step)) / (2.0 * h)
    return grad


def trained_mlp(seed: int = 0, epochs: int = 150) -> Tuple[Network, LabeledDataset]:
    """A tiny_mlp fitted to `blobs`; returns (network, dataset)."""
    data = blobs(seed)
    net, _ = train(tiny_mlp(seed), data, TrainConfig(lr=0.05, epochs=epochs, batch_size=20, seed=seed))
    return net, data


def ridge_net() -> Network:
    """
    Hand-set two-class net on the plane with logit_0 = 20|x0| + 20 relu(x1 + 0.05) - 11.

    The class-0 modes (-1, 0) and (1, 0) have loss ~4.5e-5; the straight path
    between them peaks at the origin (loss ~10), and the barrier can be bypassed
    by moving up along x1.
    """
    layers = [LayerSpec("dense", in_features=2, out_features=3),
              LayerSpec("relu"),
              LayerSpec("dense", in_features=3, out_features=2)]
    params = [{"weight": np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]), "bias": np.array([0.0, 0.0, 0.05])},
              {},
              {"weight": np.array([[20.0, 20.0, 20.0], [0.0, 0.0, 0.0]]), "bias": np.array([-11.0, 0.0])}]
    return Network(layers, params, (2,), 2)


def linear_net(seed: int = 0, inputs: int = 4, classes: int = 3) -> Network:
    """A single dense layer; every class has an unbounded logit margin."""
    return Network.initialize([LayerSpec("dense", in_features=inputs, out_features=classes)],
                              (inputs,), classes, seed)


def linear_image_net(seed: int = 0, size: int = 4, classes: int = 3) -> Network:
    """flatten -> dense on (1, size, size) images."""
    layers = [LayerSpec("flatten"), LayerSpec("dense", in_features=size * size, out_features=classes)]
    return Network.initialize(layers, (1, size, size), classes, seed)
