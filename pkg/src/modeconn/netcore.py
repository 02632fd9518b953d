"""
Minimal differentiable neural-network engine.

Provides layer specifications for small dense/convolutional classifiers, forward
evaluation, numerically stable cross-entropy, exact gradients with respect to
inputs and parameters (hand-written reverse mode per layer), the Adam update and
a seeded training loop. All arithmetic is float64; a Tensor is a numpy array.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp, softmax

from . import config
from .exceptions import ConfigError, EmptyBatchError, InputShapeError, TrainingDivergedError
from .storage import load_blob, require_field, save_blob
from .utils import spawn_rng

logger = logging.getLogger(__name__)

# Type alias: a dense float64 array; the universal currency for inputs, logits and gradients.
Tensor = np.ndarray
Shape = Tuple[int, ...]
ParamDict = Dict[str, Tensor]

LAYER_KINDS: Tuple[str, ...] = ("dense", "conv2d", "relu", "tanh", "flatten", "maxpool2d")
_FORWARD_CHUNK: int = 256


@dataclass(frozen=True)
class LayerSpec:
    """
    One layer of a network.

    Only the fields relevant to `kind` are used: dense layers need in/out
    features, conv2d layers need channel counts, kernel size, stride and padding,
    maxpool2d needs kernel_size (its stride equals the kernel size).
    """
    kind: str
    in_features: Optional[int] = None
    out_features: Optional[int] = None
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"Unknown layer kind '{self.kind}'; expected one of {LAYER_KINDS}")
        if self.kind == "dense" and not (self.in_features and self.out_features):
            raise ValueError("dense layer needs positive in_features and out_features")
        if self.kind == "conv2d":
            if not (self.in_channels and self.out_channels and self.kernel_size > 0):
                raise ValueError("conv2d layer needs channel counts and a positive kernel_size")
            if self.stride < 1 or self.padding < 0:
                raise ValueError("conv2d stride must be >= 1 and padding >= 0")
        if self.kind == "maxpool2d" and self.kernel_size < 1:
            raise ValueError("maxpool2d needs a positive kernel_size")

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "conv2d")

    def param_shapes(self) -> Dict[str, Shape]:
        """Shapes of this layer's weight and bias, empty for parameter-free layers."""
        if self.kind == "dense":
            return {"weight": (self.out_features, self.in_features), "bias": (self.out_features,)}
        if self.kind == "conv2d":
            k = self.kernel_size
            return {"weight": (self.out_channels, self.in_channels, k, k), "bias": (self.out_channels,)}
        return {}

    def fan_in(self) -> int:
        if self.kind == "dense":
            return int(self.in_features)
        if self.kind == "conv2d":
            return int(self.in_channels) * self.kernel_size * self.kernel_size
        return 0

    def output_shape(self, input_shape: Shape) -> Shape:
        """
        Computes the per-sample output shape for a per-sample input shape.

        Raises:
            InputShapeError: If the layer cannot consume `input_shape`.
        """
        if self.kind == "dense":
            if tuple(input_shape) != (self.in_features,):
                raise InputShapeError(f"dense layer expects ({self.in_features},), got {tuple(input_shape)}")
            return (int(self.out_features),)
        if self.kind == "conv2d":
            if len(input_shape) != 3 or input_shape[0] != self.in_channels:
                raise InputShapeError(
                    f"conv2d layer expects ({self.in_channels}, H, W), got {tuple(input_shape)}")
            _, h, w = input_shape
            k, s, p = self.kernel_size, self.stride, self.padding
            out_h, out_w = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
            if out_h < 1 or out_w < 1:
                raise InputShapeError(f"conv2d kernel {k} does not fit input {tuple(input_shape)}")
            return (int(self.out_channels), out_h, out_w)
        if self.kind == "maxpool2d":
            if len(input_shape) != 3:
                raise InputShapeError(f"maxpool2d expects (C, H, W), got {tuple(input_shape)}")
            c, h, w = input_shape
            k = self.kernel_size
            if h // k < 1 or w // k < 1:
                raise InputShapeError(f"maxpool2d window {k} does not fit input {tuple(input_shape)}")
            return (c, h // k, w // k)
        if self.kind == "flatten":
            return (int(np.prod(input_shape)),)
        return tuple(input_shape)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LayerSpec":
        return cls(**data)


def build_layers(layer_dicts: Sequence[Dict[str, Any]], input_shape: Shape, num_classes: int) -> List[LayerSpec]:
    """
    Expands a declared architecture (see config.ARCHITECTURES) into LayerSpecs.

    Input widths are inferred from the running shape; an `out_features` of None
    means `num_classes`.

    Args:
        layer_dicts: Layer declarations with at least a "kind" key.
        input_shape: Per-sample input shape.
        num_classes: Width of the final logit vector.

    Returns:
        Fully specified layers whose shapes compose.
    """
    layers: List[LayerSpec] = []
    shape: Shape = tuple(input_shape)
    for declared in layer_dicts:
        spec: Dict[str, Any] = dict(declared)
        kind: str = spec["kind"]
        if kind == "dense":
            spec["in_features"] = int(np.prod(shape)) if len(shape) == 1 else None
            if spec["in_features"] is None:
                raise InputShapeError(f"dense layer after non-flat shape {shape}; add a flatten layer")
            if spec.get("out_features") is None:
                spec["out_features"] = num_classes
        elif kind == "conv2d":
            if len(shape) != 3:
                raise InputShapeError(f"conv2d layer after non-image shape {shape}")
            spec["in_channels"] = shape[0]
        elif kind == "maxpool2d":
            spec["stride"] = spec.get("kernel_size", 0)
        layer = LayerSpec(**spec)
        shape = layer.output_shape(shape)
        layers.append(layer)
    return layers


@dataclass
class Network:
    """
    Ordered layer specifications plus parameter values.

    Attributes:
        layers: The layer specifications.
        params: One dict per layer ({"weight", "bias"} or empty).
        input_shape: Per-sample input shape.
        num_classes: Length of the logit vector.
        seed: Initialisation seed, recorded in checkpoints.
    """
    layers: List[LayerSpec]
    params: List[ParamDict]
    input_shape: Shape
    num_classes: int
    seed: Optional[int] = None
    shapes: List[Shape] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if len(self.params) != len(self.layers):
            raise ValueError("params must hold one entry per layer")
        shapes: List[Shape] = [self.input_shape]
        self.params = [{name: np.asarray(value, dtype=np.float64) for name, value in layer_params.items()}
                       for layer_params in self.params]
        for layer, layer_params in zip(self.layers, self.params):
            expected = layer.param_shapes()
            if set(layer_params) != set(expected):
                raise ValueError(f"{layer.kind} layer needs parameters {sorted(expected)}")
            for name, shape in expected.items():
                if tuple(np.shape(layer_params[name])) != shape:
                    raise InputShapeError(f"{layer.kind}.{name} has shape "
                                          f"{np.shape(layer_params[name])}, expected {shape}")
            shapes.append(layer.output_shape(shapes[-1]))
        if shapes[-1] != (self.num_classes,):
            raise InputShapeError(f"network outputs {shapes[-1]}, expected ({self.num_classes},)")
        self.shapes = shapes

    @classmethod
    def initialize(cls, layers: Sequence[LayerSpec], input_shape: Shape, num_classes: int,
                   seed: int = 0) -> "Network":
        """
        Creates a network with seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) parameters.
        """
        params: List[ParamDict] = []
        for index, layer in enumerate(layers):
            rng = spawn_rng(seed, index)
            layer_params: ParamDict = {}
            if layer.has_params:
                bound = 1.0 / np.sqrt(layer.fan_in())
                shapes = layer.param_shapes()
                for name in ("weight", "bias"):
                    layer_params[name] = rng.uniform(-bound, bound, size=shapes[name])
            params.append(layer_params)
        return cls(list(layers), params, tuple(input_shape), num_classes, seed)

    @classmethod
    def from_architecture(cls, name: str, input_shape: Shape, num_classes: int, seed: int = 0) -> "Network":
        """Initialises one of the architectures declared in config.ARCHITECTURES ("cnn" or "mlp")."""
        if name not in config.ARCHITECTURES:
            raise ValueError(f"Unknown architecture '{name}'; expected one of {sorted(config.ARCHITECTURES)}")
        layers = build_layers(config.ARCHITECTURES[name], input_shape, num_classes)
        return cls.initialize(layers, input_shape, num_classes, seed)

    def with_params(self, params: List[ParamDict]) -> "Network":
        return Network(list(self.layers), params, self.input_shape, self.num_classes, self.seed)

    def copy(self) -> "Network":
        return self.with_params(copy_params(self.params))

    @property
    def num_params(self) -> int:
        return int(sum(p.size for layer_params in self.params for p in layer_params.values()))


@dataclass
class LabeledDataset:
    """
    Inputs stacked along axis 0 with integer class labels.
    """
    inputs: Tensor
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative class indices")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> Shape:
        return tuple(self.inputs.shape[1:])

    def validate(self, num_classes: int) -> None:
        if self.labels.size and self.labels.max() >= num_classes:
            raise ValueError(f"label {int(self.labels.max())} is not < num_classes={num_classes}")

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx])

    def class_indices(self, y: int) -> np.ndarray:
        return np.flatnonzero(self.labels == y)


# --- Layer primitives (batched: axis 0 is the sample axis) ---

def _dense_forward(x: Tensor, p: ParamDict) -> Tuple[Tensor, Any]:
    return x @ p["weight"].T + p["bias"], x


def _dense_backward(g: Tensor, cache: Any, p: ParamDict, need_params: bool) -> Tuple[Tensor, ParamDict]:
    x = cache
    grads: ParamDict = {}
    if need_params:
        grads = {"weight": g.T @ x, "bias": g.sum(axis=0)}
    return g @ p["weight"], grads


def _conv_windows(x: Tensor, layer: LayerSpec) -> Tensor:
    pad = layer.padding
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    k, s = layer.kernel_size, layer.stride
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]


def _conv_forward(x: Tensor, p: ParamDict, layer: LayerSpec) -> Tuple[Tensor, Any]:
    windows = _conv_windows(x, layer)
    out = np.einsum("nchwij,ocij->nohw", windows, p["weight"], optimize=True)
    return out + p["bias"][None, :, None, None], (x.shape, windows)


def _conv_input_backward(g: Tensor, weight: Tensor, x_shape: Shape, layer: LayerSpec) -> Tensor:
    n, c, h, w = x_shape
    k, s, pad = layer.kernel_size, layer.stride, layer.padding
    out_h, out_w = g.shape[2], g.shape[3]
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * (out_h - 1) + 1:s, j:j + s * (out_w - 1) + 1:s] += \
                np.einsum("nohw,oc->nchw", g, weight[:, :, i, j], optimize=True)
    return dxp[:, :, pad:pad + h, pad:pad + w]


def _conv_backward(g: Tensor, cache: Any, p: ParamDict, layer: LayerSpec,
                   need_params: bool) -> Tuple[Tensor, ParamDict]:
    x_shape, windows = cache
    grads: ParamDict = {}
    if need_params:
        grads = {"weight": np.einsum("nohw,nchwij->ocij", g, windows, optimize=True),
                 "bias": g.sum(axis=(0, 2, 3))}
    return _conv_input_backward(g, p["weight"], x_shape, layer), grads


def _pool_windows(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.shape
    out_h, out_w = h // k, w // k
    cropped = x[:, :, :out_h * k, :out_w * k]
    return cropped.reshape(n, c, out_h, k, out_w, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, out_h, out_w, k * k)


def _maxpool_forward(x: Tensor, layer: LayerSpec) -> Tuple[Tensor, Any]:
    windows = _pool_windows(x, layer.kernel_size)
    # argmax picks the first maximum, so ties route the gradient to one element.
    idx = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def _maxpool_backward(g: Tensor, cache: Any, layer: LayerSpec) -> Tensor:
    x_shape, idx = cache
    n, c, h, w = x_shape
    k = layer.kernel_size
    out_h, out_w = g.shape[2], g.shape[3]
    gw = np.zeros((n, c, out_h, out_w, k * k))
    np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
    gx = gw.reshape(n, c, out_h, out_w, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, out_h * k, out_w * k)
    dx = np.zeros(x_shape)
    dx[:, :, :out_h * k, :out_w * k] = gx
    return dx


def _forward(net: Network, xb: Tensor) -> Tuple[Tensor, List[Any]]:
    caches: List[Any] = []
    h = xb
    for layer, p in zip(net.layers, net.params):
        if layer.kind == "dense":
            h, cache = _dense_forward(h, p)
        elif layer.kind == "conv2d":
            h, cache = _conv_forward(h, p, layer)
        elif layer.kind == "relu":
            cache = h
            h = np.maximum(h, 0.0)
        elif layer.kind == "tanh":
            h = np.tanh(h)
            cache = h
        elif layer.kind == "flatten":
            cache = h.shape
            h = h.reshape(h.shape[0], -1)
        else:
            h, cache = _maxpool_forward(h, layer)
        caches.append(cache)
    return h, caches


def _backward(net: Network, caches: List[Any], dlogits: Tensor,
              need_params: bool) -> Tuple[Tensor, List[ParamDict]]:
    grads: List[ParamDict] = [{} for _ in net.layers]
    g = dlogits
    for index in range(len(net.layers) - 1, -1, -1):
        layer, p, cache = net.layers[index], net.params[index], caches[index]
        if layer.kind == "dense":
            g, grads[index] = _dense_backward(g, cache, p, need_params)
        elif layer.kind == "conv2d":
            g, grads[index] = _conv_backward(g, cache, p, layer, need_params)
        elif layer.kind == "relu":
            g = g * (cache > 0.0)
        elif layer.kind == "tanh":
            g = g * (1.0 - cache * cache)
        elif layer.kind == "flatten":
            g = g.reshape(cache)
        else:
            g = _maxpool_backward(g, cache, layer)
    return g, grads


def _check_input(net: Network, x: Tensor) -> Tensor:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != net.input_shape:
        raise InputShapeError(f"input shape {arr.shape} does not match network input shape {net.input_shape}")
    return arr


def _check_batch(net: Network, xs: Tensor) -> Tensor:
    arr = np.asarray(xs, dtype=np.float64)
    if arr.shape[1:] != net.input_shape:
        raise InputShapeError(f"batch sample shape {arr.shape[1:]} does not match {net.input_shape}")
    return arr


# --- Public operations ---

def forward_logits(net: Network, x: Tensor) -> Tensor:
    """
    Evaluates the network on one input.

    Args:
        net: The network.
        x: An input of shape net.input_shape.

    Returns:
        The logit vector of length net.num_classes.

    Raises:
        InputShapeError: If x has the wrong shape.
    """
    arr = _check_input(net, x)
    logits, _ = _forward(net, arr[None])
    return logits[0]


def forward_batch(net: Network, xs: Tensor) -> Tensor:
    """Evaluates the network on a stack of inputs, returning an (N, num_classes) array."""
    arr = _check_batch(net, xs)
    if arr.shape[0] == 0:
        return np.zeros((0, net.num_classes))
    chunks = [_forward(net, arr[start:start + _FORWARD_CHUNK])[0]
              for start in range(0, arr.shape[0], _FORWARD_CHUNK)]
    return np.concatenate(chunks, axis=0)


def predict(net: Network, xs: Tensor) -> np.ndarray:
    """Arg-max class for each input of a stack."""
    return np.argmax(forward_batch(net, xs), axis=1)


def accuracy(net: Network, data: LabeledDataset) -> float:
    if len(data) == 0:
        return float("nan")
    return float(np.mean(predict(net, data.inputs) == data.labels))


def cross_entropy(logits: Tensor, y: int) -> float:
    """
    Returns -log softmax(logits)[y], computed with a max-shifted log-sum-exp.

    Raises:
        ValueError: If y is not a valid index of logits.
    """
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= int(y) < z.shape[-1]:
        raise ValueError(f"class {y} out of range for {z.shape[-1]} logits")
    return max(0.0, float(logsumexp(z) - z[int(y)]))


def cross_entropy_batch(logits: Tensor, labels: Sequence[int]) -> np.ndarray:
    """Per-row cross-entropy of an (N, K) logit array."""
    z = np.asarray(logits, dtype=np.float64)
    ys = np.asarray(labels, dtype=np.int64)
    values = logsumexp(z, axis=1) - z[np.arange(z.shape[0]), ys]
    return np.maximum(values, 0.0)


def batch_losses(net: Network, xs: Tensor, labels: Sequence[int]) -> np.ndarray:
    """Cross-entropy of every input in a stack against its label."""
    return cross_entropy_batch(forward_batch(net, xs), np.broadcast_to(labels, (len(xs),)))


def loss_and_input_gradient(net: Network, x: Tensor, y: int) -> Tuple[float, Tensor]:
    """
    Cross-entropy at x and its exact gradient with respect to x.

    The network parameters are only read.
    """
    arr = _check_input(net, x)
    logits, caches = _forward(net, arr[None])
    if not 0 <= int(y) < net.num_classes:
        raise ValueError(f"class {y} out of range for {net.num_classes} classes")
    dlogits = softmax(logits, axis=1)
    dlogits[0, int(y)] -= 1.0
    dx, _ = _backward(net, caches, dlogits, need_params=False)
    return cross_entropy(logits[0], y), dx[0]


def input_gradient(net: Network, x: Tensor, y: int) -> Tensor:
    """Gradient of cross_entropy(forward_logits(net, x), y) with respect to x."""
    return loss_and_input_gradient(net, x, y)[1]


def input_vjp(net: Network, x: Tensor, cotangent: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Vector-Jacobian product of the logits with respect to the input.

    Args:
        net: The network.
        x: The input.
        cotangent: A vector of length num_classes.

    Returns:
        (logits, d<cotangent, logits>/dx).
    """
    arr = _check_input(net, x)
    logits, caches = _forward(net, arr[None])
    dx, _ = _backward(net, caches, np.asarray(cotangent, dtype=np.float64)[None], need_params=False)
    return logits[0], dx[0]


def logit_jacobian(net: Network, x: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Full Jacobian of the logits with respect to one input.

    The input is replicated once per class so a single batched backward pass
    yields every row.

    Returns:
        (logits, jacobian) with jacobian of shape (num_classes, *input_shape).
    """
    arr = _check_input(net, x)
    k = net.num_classes
    stacked = np.broadcast_to(arr, (k,) + arr.shape).copy()
    logits, caches = _forward(net, stacked)
    jac, _ = _backward(net, caches, np.eye(k), need_params=False)
    return logits[0], jac


def _loss_and_param_gradient(net: Network, inputs: Tensor, labels: np.ndarray) -> Tuple[float, List[ParamDict]]:
    xb = _check_batch(net, inputs)
    n = xb.shape[0]
    if n == 0:
        raise EmptyBatchError("parameter gradient requested for an empty batch")
    logits, caches = _forward(net, xb)
    ys = np.asarray(labels, dtype=np.int64)
    loss = float(np.mean(cross_entropy_batch(logits, ys)))
    dlogits = softmax(logits, axis=1)
    dlogits[np.arange(n), ys] -= 1.0
    dlogits /= n
    _, grads = _backward(net, caches, dlogits, need_params=True)
    return loss, grads


def param_gradient(net: Network, batch: LabeledDataset) -> List[ParamDict]:
    """
    Mean-over-batch gradient of the cross-entropy with respect to every parameter.

    Returns:
        One dict per layer, mirroring net.params.

    Raises:
        EmptyBatchError: If the batch is empty.
    """
    if len(batch) == 0:
        raise EmptyBatchError("parameter gradient requested for an empty batch")
    return _loss_and_param_gradient(net, batch.inputs, batch.labels)[1]


def linear_map(net: Network, index: int, v: Tensor) -> Tensor:
    """Applies the weights of dense/conv layer `index` (no bias) to one sample v of shape net.shapes[index]."""
    layer, p = net.layers[index], net.params[index]
    if layer.kind == "dense":
        return p["weight"] @ v
    if layer.kind == "conv2d":
        zero_bias = {"weight": p["weight"], "bias": np.zeros_like(p["bias"])}
        return _conv_forward(v[None], zero_bias, layer)[0][0]
    raise ValueError(f"layer {index} ({layer.kind}) has no weights")


def linear_map_adjoint(net: Network, index: int, u: Tensor) -> Tensor:
    """Transpose of `linear_map`: maps an output-shaped u back to the layer's input shape."""
    layer, p = net.layers[index], net.params[index]
    if layer.kind == "dense":
        return p["weight"].T @ u
    if layer.kind == "conv2d":
        return _conv_input_backward(u[None], p["weight"], (1,) + net.shapes[index], layer)[0]
    raise ValueError(f"layer {index} ({layer.kind}) has no weights")


# --- Adam ---

@dataclass
class AdamState:
    """First and second moment estimates plus the step counter."""
    m: Tensor
    v: Tensor
    t: int = 0

    @classmethod
    def zeros(cls, shape: Shape) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape), 0)


def adam_step(state: AdamState, grad: Tensor, lr: float, beta1: float = config.ADAM_BETA1,
              beta2: float = config.ADAM_BETA2, eps: float = config.ADAM_EPS) -> Tuple[AdamState, Tensor]:
    """
    One Adam update with bias correction.

    Args:
        state: Current moments; not modified.
        grad: Gradient with the same shape as the moments.
        lr: Learning rate.
        beta1: Decay of the first moment.
        beta2: Decay of the second moment.
        eps: Denominator offset.

    Returns:
        The new state and the additive step (-lr * m_hat / (sqrt(v_hat) + eps)).
    """
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != state.m.shape:
        raise InputShapeError(f"gradient shape {g.shape} does not match Adam state {state.m.shape}")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * (g * g)
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    step = -lr * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(m, v, t), step


# --- Training ---

@dataclass(frozen=True)
class TrainConfig:
    lr: float = config.DEFAULT_TRAIN_LR
    epochs: int = config.DEFAULT_EPOCHS
    batch_size: int = config.DEFAULT_BATCH_SIZE
    beta1: float = config.ADAM_BETA1
    beta2: float = config.ADAM_BETA2
    eps: float = config.ADAM_EPS
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class TrainLogEntry:
    batch: int
    epoch: int
    loss: float


BatchCallback = Callable[[int, int, Network], None]


def train(net: Network, data: LabeledDataset, opt: TrainConfig,
          on_batch: Optional[BatchCallback] = None,
          on_epoch: Optional[BatchCallback] = None) -> Tuple[Network, List[TrainLogEntry]]:
    """
    Trains a copy of `net` with mini-batch Adam.

    Args:
        net: The starting network; left untouched.
        data: Training data.
        opt: Optimiser and schedule settings.
        on_batch: Called as on_batch(global_batch_index, epoch, network) after every
            batch (1-based index), e.g. to checkpoint.
        on_epoch: Called as on_epoch(global_batch_index, epoch, network) after every
            epoch (1-based epoch).

    Returns:
        The trained network and the per-batch loss log.

    Raises:
        EmptyBatchError: If data is empty.
        TrainingDivergedError: If the loss becomes NaN or infinite.
    """
    if len(data) == 0:
        raise EmptyBatchError("cannot train on an empty dataset")
    data.validate(net.num_classes)
    trained = net.copy()
    states: List[Dict[str, AdamState]] = [
        {name: AdamState.zeros(value.shape) for name, value in layer_params.items()}
        for layer_params in trained.params
    ]
    log: List[TrainLogEntry] = []
    global_batch = 0
    for epoch in range(opt.epochs):
        order = spawn_rng(opt.seed, epoch).permutation(len(data))
        for start in range(0, len(data), opt.batch_size):
            idx = order[start:start + opt.batch_size]
            loss, grads = _loss_and_param_gradient(trained, data.inputs[idx], data.labels[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"training loss became {loss} at epoch {epoch}, batch {global_batch}")
            for layer_params, layer_grads, layer_states in zip(trained.params, grads, states):
                for name in layer_params:
                    layer_states[name], step = adam_step(layer_states[name], layer_grads[name], opt.lr,
                                                         opt.beta1, opt.beta2, opt.eps)
                    layer_params[name] = layer_params[name] + step
            log.append(TrainLogEntry(global_batch, epoch, loss))
            global_batch += 1
            if on_batch is not None:
                on_batch(global_batch, epoch, trained.copy())
        epoch_loss = float(np.mean([entry.loss for entry in log if entry.epoch == epoch]))
        logger.info(f"Epoch {epoch + 1}/{opt.epochs}: mean training loss {epoch_loss:.6f}")
        if on_epoch is not None:
            on_epoch(global_batch, epoch + 1, trained.copy())
    return trained, log


def copy_params(params: List[ParamDict]) -> List[ParamDict]:
    return [{name: value.copy() for name, value in layer_params.items()} for layer_params in params]


# --- Checkpoints ---

def save_checkpoint(net: Network, filepath: str) -> None:
    """
    Writes the network as an MCNET1 blob: JSON header (layers, shapes, seed) then
    float32 parameters in declaration order (layer order, weight before bias).
    """
    header: Dict[str, Any] = {
        "format": "modeconn-network",
        "layers": [layer.to_dict() for layer in net.layers],
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "seed": net.seed,
    }
    tensors = [(f"{index}.{name}", layer_params[name])
               for index, layer_params in enumerate(net.params)
               for name in ("weight", "bias") if name in layer_params]
    save_blob(filepath, header, tensors)
    logger.info(f"Saved checkpoint with {net.num_params} parameters to {filepath}")


def load_checkpoint(filepath: str) -> Network:
    """
    Reads a checkpoint written by `save_checkpoint`.

    Raises:
        ConfigError: If the header lacks a field or holds one of the wrong type.
    """
    header, tensors = load_blob(filepath)
    if header.get("format") != "modeconn-network":
        raise ConfigError(f"{filepath} does not hold a network checkpoint", field="format")
    layers = require_field(header, "layers", lambda v: [LayerSpec.from_dict(d) for d in v], filepath)
    input_shape = require_field(header, "input_shape", lambda v: tuple(int(s) for s in v), filepath)
    num_classes = require_field(header, "num_classes", int, filepath)
    params: List[ParamDict] = [{} for _ in layers]
    for name, value in tensors:
        # Tensor names are "<layer index>.<parameter>".
        index, _, param_name = name.partition(".")
        if not index.isdigit() or int(index) >= len(layers) or not param_name:
            raise ConfigError(f"{filepath} holds an unexpected tensor '{name}'", field="tensors")
        params[int(index)][param_name] = value
    return Network(layers, params, input_shape, num_classes, header.get("seed"))
