"""Dense/conv network with explicit forward and backward passes.

Arrays are float64 numpy arrays throughout. A model is described by a
:class:`ModelSpec` (immutable architecture) and a list of
:class:`LayerState` (weights plus the per-step activations and
activation gradients), one state per layer.

Activation hooks let a regularizer rewrite a layer's output during the
forward pass. A hook is called as ``hook(layer_index, activation)`` and
returns ``(new_activation, factor)``; ``factor`` is the elementwise
multiplier the hook applied (``None`` for an identity hook) and is reused
by :func:`backward` to route gradients through the mask.

Layout conventions:
    Dense weights are ``(in_features, out_features)``: ``y = x @ W + b``.
    Conv2D weights are ``(out_ch, in_ch, k, k)``, inputs ``(n, C, H, W)``,
    no padding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import NumericError, ShapeError, StateError


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class SoftmaxCrossEntropy:
    pass


Layer = Union[Dense, ReLU, Conv2D, Flatten, SoftmaxCrossEntropy]
Hook = Callable[[int, np.ndarray], "tuple[np.ndarray, Optional[np.ndarray]]"]

PARAM_LAYERS = (Dense, Conv2D)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; layer compatibility is checked on construction."""

    input_shape: tuple
    layers: tuple
    seed: int = 0
    shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "shapes", _infer_shapes(self.input_shape, self.layers))

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def param_layer_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, PARAM_LAYERS)]

    def relu_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, ReLU)]


def _infer_shapes(input_shape: tuple, layers: tuple) -> tuple:
    if not layers or not isinstance(layers[-1], SoftmaxCrossEntropy):
        raise ShapeError("model must end with exactly one SoftmaxCrossEntropy head")
    if any(isinstance(layer, SoftmaxCrossEntropy) for layer in layers[:-1]):
        raise ShapeError("SoftmaxCrossEntropy head must be the last layer and appear once")
    shape = input_shape
    shapes = []
    for i, layer in enumerate(layers):
        if isinstance(layer, Dense):
            if len(shape) != 1 or shape[0] != layer.in_features:
                raise ShapeError(f"layer {i}: Dense expects ({layer.in_features},), got {shape}")
            shape = (layer.out_features,)
        elif isinstance(layer, Conv2D):
            if len(shape) != 3 or shape[0] != layer.in_channels:
                raise ShapeError(
                    f"layer {i}: Conv2D expects ({layer.in_channels}, H, W), got {shape}")
            _, h, w = shape
            k, s = layer.kernel, layer.stride
            if k < 1 or s < 1 or h < k or w < k:
                raise ShapeError(f"layer {i}: kernel {k}/stride {s} incompatible with {shape}")
            shape = (layer.out_channels, (h - k) // s + 1, (w - k) // s + 1)
        elif isinstance(layer, Flatten):
            shape = (math.prod(shape),)
        elif isinstance(layer, SoftmaxCrossEntropy):
            if len(shape) != 1:
                raise ShapeError(f"layer {i}: loss head needs flat logits, got {shape}")
        elif not isinstance(layer, ReLU):
            raise ShapeError(f"layer {i}: unknown layer type {type(layer).__name__}")
        shapes.append(shape)
    return tuple(shapes)


@dataclass
class LayerState:
    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    last_activation: Optional[np.ndarray] = None
    last_activation_grad: Optional[np.ndarray] = None
    # backward caches
    last_input: Optional[np.ndarray] = field(default=None, repr=False)
    mask_factor: Optional[np.ndarray] = field(default=None, repr=False)
    weight_grad: Optional[np.ndarray] = field(default=None, repr=False)
    bias_grad: Optional[np.ndarray] = field(default=None, repr=False)


def init_states(model: ModelSpec) -> list[LayerState]:
    """Kaiming-uniform (fan-in) weights, zero biases, seeded by ``model.seed``."""
    rng = np.random.default_rng(model.seed)
    states = []
    for layer in model.layers:
        st = LayerState()
        if isinstance(layer, Dense):
            bound = math.sqrt(6.0 / layer.in_features)
            st.weights = rng.uniform(-bound, bound, (layer.in_features, layer.out_features))
            st.bias = np.zeros(layer.out_features)
        elif isinstance(layer, Conv2D):
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            bound = math.sqrt(6.0 / fan_in)
            shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            st.weights = rng.uniform(-bound, bound, shape)
            st.bias = np.zeros(layer.out_channels)
        states.append(st)
    return states


def parameters(model: ModelSpec, states: Sequence[LayerState]) -> list[np.ndarray]:
    """Flat ``[W0, b0, W1, b1, ...]`` list over parametric layers (views, not copies)."""
    out = []
    for i in model.param_layer_indices():
        out.extend([states[i].weights, states[i].bias])
    return out


def gradients(model: ModelSpec, states: Sequence[LayerState]) -> list[np.ndarray]:
    out = []
    for i in model.param_layer_indices():
        if states[i].weight_grad is None:
            raise StateError(f"layer {i}: no gradient; call backward first")
        out.extend([states[i].weight_grad, states[i].bias_grad])
    return out


# -- per-layer kernels -------------------------------------------------------

def _conv_slices(k_row: int, k_col: int, stride: int, h_out: int, w_out: int):
    return (slice(k_row, k_row + stride * (h_out - 1) + 1, stride),
            slice(k_col, k_col + stride * (w_out - 1) + 1, stride))


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    n, _, h, wd = x.shape
    o, _, k, _ = w.shape
    h_out = (h - k) // stride + 1
    w_out = (wd - k) // stride + 1
    acc = np.zeros((n, h_out, w_out, o))
    for p in range(k):
        for q in range(k):
            rs, cs = _conv_slices(p, q, stride, h_out, w_out)
            acc += np.tensordot(x[:, :, rs, cs], w[:, :, p, q], axes=([1], [1]))
    return acc.transpose(0, 3, 1, 2) + b[None, :, None, None]


def conv2d_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int):
    """Return ``(dx, dw, db)`` for :func:`conv2d_forward`."""
    _, _, h_out, w_out = dout.shape
    k = w.shape[2]
    d = dout.transpose(0, 2, 3, 1)
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for p in range(k):
        for q in range(k):
            rs, cs = _conv_slices(p, q, stride, h_out, w_out)
            dw[:, :, p, q] = np.tensordot(d, x[:, :, rs, cs], axes=([0, 1, 2], [0, 2, 3]))
            dx[:, :, rs, cs] += np.tensordot(d, w[:, :, p, q], axes=([3], [0])).transpose(0, 3, 1, 2)
    return dx, dw, dout.sum(axis=(0, 2, 3))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy_per_sample(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return -log_softmax(logits)[np.arange(len(labels)), labels]


def _layer_forward(layer: Layer, st: LayerState, x: np.ndarray) -> np.ndarray:
    if isinstance(layer, Dense):
        return x @ st.weights + st.bias
    if isinstance(layer, ReLU):
        return np.maximum(x, 0.0)
    if isinstance(layer, Conv2D):
        return conv2d_forward(x, st.weights, st.bias, layer.stride)
    if isinstance(layer, Flatten):
        return x.reshape(len(x), -1)
    raise ShapeError(f"cannot run {type(layer).__name__} as a hidden layer")


def _as_batch(model: ModelSpec, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 0 or x[0].size != math.prod(model.input_shape):
        raise ShapeError(
            f"batch of shape {x.shape} does not match model input {model.input_shape}")
    return x.reshape((len(x),) + model.input_shape)


def _run(model: ModelSpec, states: Sequence[LayerState], batch: np.ndarray,
         hooks: Mapping[int, Hook], store: bool) -> np.ndarray:
    x = _as_batch(model, batch)
    for i, layer in enumerate(model.layers[:-1]):
        x_in = x
        # overflow is reported below with the layer index, not as a warning
        with np.errstate(over="ignore", invalid="ignore"):
            x = _layer_forward(layer, states[i], x)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite activation at layer {i} ({type(layer).__name__})")
        factor = None
        if store:
            states[i].last_input = x_in
            states[i].last_activation = x
        hook = hooks.get(i)
        if hook is not None:
            x, factor = hook(i, x)
        if store:
            states[i].mask_factor = factor
    return x


def forward(model: ModelSpec, states: Sequence[LayerState], batch: np.ndarray,
            labels: np.ndarray, reg_hooks: Optional[Mapping[int, Hook]] = None):
    """Training-mode forward pass.

    Stores each layer's input and (pre-hook) activation in its state and
    returns ``(logits, mean_cross_entropy)``.
    """
    logits = _run(model, states, batch, reg_hooks or {}, store=True)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(logits),):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {len(logits)}")
    loss = float(cross_entropy_per_sample(logits, labels).mean())
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss at layer {len(model.layers) - 1} (loss head)")
    head = states[-1]
    head.last_input = logits
    head.last_activation = logits
    return logits, loss


def backward(model: ModelSpec, states: Sequence[LayerState], labels: np.ndarray) -> list[np.ndarray]:
    """Backpropagate mean cross-entropy from the last :func:`forward`.

    Fills ``last_activation_grad`` (gradient with respect to each layer's
    pre-hook output) and the weight gradients, and returns the gradients in
    :func:`parameters` order.
    """
    head = states[-1]
    if head.last_input is None:
        raise StateError("backward called before forward")
    logits = head.last_input
    labels = np.asarray(labels, dtype=np.int64)
    n = len(logits)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {n}")
    d = np.exp(log_softmax(logits))
    d[np.arange(n), labels] -= 1.0
    d /= n
    for i in range(len(model.layers) - 2, -1, -1):
        layer, st = model.layers[i], states[i]
        if st.mask_factor is not None:
            d = d * st.mask_factor
        st.last_activation_grad = d
        x = st.last_input
        if isinstance(layer, Dense):
            st.weight_grad = x.T @ d
            st.bias_grad = d.sum(axis=0)
            d = d @ st.weights.T
        elif isinstance(layer, ReLU):
            d = d * (x > 0)
        elif isinstance(layer, Conv2D):
            d, st.weight_grad, st.bias_grad = conv2d_backward(d, x, st.weights, layer.stride)
        elif isinstance(layer, Flatten):
            d = d.reshape(x.shape)
    return gradients(model, states)


def logits_of(model: ModelSpec, states: Sequence[LayerState], batch: np.ndarray) -> np.ndarray:
    """Evaluation-mode logits; no hooks, no state mutation."""
    return _run(model, states, batch, {}, store=False)


def predict(model: ModelSpec, states: Sequence[LayerState], batch: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, so ties go to the lowest class.
    return np.argmax(logits_of(model, states, batch), axis=1)
