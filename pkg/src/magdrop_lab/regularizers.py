"""Activation regularizers: momentum-adaptive dropout and the baselines.

The momentum-adaptive rule (MAGDrop) keeps, per hooked layer, an
exponential moving average ``m`` of the activation gradient and turns it
into a per-sample drop rate::

    m      <- beta * m + (1 - beta) * g          (m := g on first call)
    p_i    =  p_base * |m_i| / mean_j |m_j| * sigmoid(|g_i - m_i| / tau)
    p_i    <- clip(p_i, 0, clamp_max)
    a'     =  a * Bernoulli(1 - p_i) / (1 - mean_i p_i)

Norms are 2-norms over each sample's flattened non-batch dimensions. The
gradient ``g`` is the activation gradient from the *previous* step's
backward pass, since the mask is needed before the current loss exists;
the very first training batch therefore passes through untouched.

Baselines: ``none``, fixed-rate inverted dropout, and an approximation of
adaptive gradient regularization (AGR) that rescales each weight gradient
in proportion to its relative norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, StateError


@dataclass
class MagDropState:
    p_base: float = 0.3
    beta: float = 0.9
    tau: float = 0.1
    clamp_max: float = 0.6
    rng_seed: int = 0
    momentum: dict = field(default_factory=dict)
    rate_trace: dict = field(default_factory=dict)
    _rngs: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not 0.0 < self.p_base < 1.0:
            raise ConfigError(f"p_base must lie in (0, 1), got {self.p_base}")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError(f"beta must lie in [0, 1), got {self.beta}")
        if not self.tau > 0.0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0.0 < self.clamp_max < 1.0:
            raise ConfigError(f"clamp_max must lie in (0, 1), got {self.clamp_max}")

    def rng(self, layer_index: int) -> np.random.Generator:
        """Mask stream for one layer, independent of every other stream."""
        if layer_index not in self._rngs:
            seq = np.random.SeedSequence([self.rng_seed, layer_index])
            self._rngs[layer_index] = np.random.default_rng(seq)
        return self._rngs[layer_index]


@dataclass
class DropoutDecision:
    per_sample_rate: np.ndarray
    mask: np.ndarray
    scale: float

    @property
    def factor(self) -> np.ndarray:
        return self.mask / self.scale


def _per_sample_norm(x: np.ndarray) -> np.ndarray:
    return np.linalg.norm(x.reshape(len(x), -1), axis=1)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # callers only pass x >= 0, where exp(-x) cannot overflow
    return 1.0 / (1.0 + np.exp(-x))


def magdrop_update_momentum(state: MagDropState, layer_index: int, grad: np.ndarray) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    prev = state.momentum.get(layer_index)
    if prev is None:
        new = grad.copy()
    else:
        if prev.shape != grad.shape:
            raise StateError(
                f"layer {layer_index}: gradient shape changed from {prev.shape} to {grad.shape}")
        # m + (1 - beta)(g - m) == beta*m + (1 - beta)*g, and keeps m == g exactly fixed
        new = prev + (1.0 - state.beta) * (grad - prev)
    state.momentum[layer_index] = new
    return new


def magdrop_rate(state: MagDropState, grad: np.ndarray, momentum: np.ndarray) -> np.ndarray:
    """Clamped per-sample drop rates; all zero when every momentum norm is zero."""
    if not state.tau > 0.0:
        raise ConfigError(f"tau must be positive, got {state.tau}")
    grad = np.asarray(grad, dtype=np.float64)
    momentum = np.asarray(momentum, dtype=np.float64)
    if grad.shape != momentum.shape or grad.ndim == 0 or len(grad) == 0:
        raise StateError(f"grad {grad.shape} and momentum {momentum.shape} must share a batch shape")
    mom_norm = _per_sample_norm(momentum)
    total = math.fsum(mom_norm)
    if total == 0.0:
        return np.zeros(len(grad))
    # |m_i| / mean|m| written as n|m_i| / sum|m|: exactly 1 for identical samples
    ratio = len(mom_norm) * mom_norm / total
    diff_norm = _per_sample_norm(grad - momentum)
    raw = state.p_base * ratio * _sigmoid(diff_norm / state.tau)
    return np.clip(raw, 0.0, state.clamp_max)


def magdrop_apply(state: MagDropState, activation: np.ndarray, rate: np.ndarray,
                  layer_index: int = 0, training: bool = True):
    """Sample the mask and rescale surviving units by ``1 - mean(rate)``.

    Returns ``(activation', decision)``; ``decision`` is ``None`` in
    evaluation mode, where the activation is returned as is.
    """
    if not training:
        return activation, None
    rate = np.asarray(rate, dtype=np.float64)
    if rate.shape != (len(activation),):
        raise StateError(
            f"layer {layer_index}: {len(rate)} rates for a batch of {len(activation)}")
    scale = 1.0 - float(rate.mean())
    assert scale > 0.0, "clamped rates cannot average to 1"
    keep = (1.0 - rate).reshape((-1,) + (1,) * (activation.ndim - 1))
    mask = (state.rng(layer_index).random(activation.shape) < keep).astype(np.float64)
    decision = DropoutDecision(per_sample_rate=rate, mask=mask, scale=scale)
    state.rate_trace.setdefault(layer_index, []).append(float(rate.mean()))
    return activation * mask / scale, decision


def fixed_dropout_apply(activation: np.ndarray, p_fixed: float, seed, training: bool = True):
    """Inverted dropout at a fixed rate.

    ``seed`` is an int or a ``numpy.random.Generator``. Returns
    ``(activation', decision)`` so callers can route gradients through the
    mask; ``decision`` is ``None`` in evaluation mode.
    """
    if not 0.0 <= p_fixed < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {p_fixed}")
    if not training:
        return activation, None
    rng = np.random.default_rng(seed)
    mask = (rng.random(activation.shape) < 1.0 - p_fixed).astype(np.float64)
    scale = 1.0 - p_fixed
    rate = np.full(len(activation), float(p_fixed))
    return activation * mask / scale, DropoutDecision(per_sample_rate=rate, mask=mask, scale=scale)


def agr_penalty(weight_grads: Sequence[np.ndarray], lam: float = 0.01) -> list[np.ndarray]:
    """Scale each gradient by ``1 + lam * |g_k| / mean_j |g_j|``.

    This is a stand-in for adaptive gradient regularization, which has no
    closed form here: gradients with above-average norm are amplified
    relative to the rest. All-zero gradient lists come back unchanged.
    """
    norms = np.array([np.linalg.norm(g) for g in weight_grads])
    mean = norms.mean() if len(norms) else 0.0
    if lam == 0.0 or mean == 0.0:
        return [np.array(g, dtype=np.float64, copy=True) for g in weight_grads]
    return [g * (1.0 + lam * n / mean) for g, n in zip(weight_grads, norms)]


# -- training-loop adapters ---------------------------------------------------
#
# Each regularizer exposes the same small surface to the trainer:
#   hook(layer_index, activation, stale_grad) -> (activation', factor | None)
#   transform_grads(grads) -> grads
#   rate_trace: {layer_index: [mean applied rate per step]}


class NoRegularizer:
    name = "none"

    def __init__(self):
        self.rate_trace: dict = {}

    def hook(self, layer_index, activation, stale_grad):
        self.rate_trace.setdefault(layer_index, []).append(0.0)
        return activation, None

    def transform_grads(self, grads):
        return grads


class FixedDropout(NoRegularizer):
    name = "dropout"

    def __init__(self, p: float, seed: int = 0):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {p}")
        self.p = p
        self.seed = seed
        self._rngs: dict = {}

    def hook(self, layer_index, activation, stale_grad):
        if layer_index not in self._rngs:
            seq = np.random.SeedSequence([self.seed, layer_index])
            self._rngs[layer_index] = np.random.default_rng(seq)
        out, decision = fixed_dropout_apply(activation, self.p, self._rngs[layer_index])
        self.rate_trace.setdefault(layer_index, []).append(self.p)
        return out, decision.factor


class AGR(NoRegularizer):
    name = "agr"

    def __init__(self, lam: float = 0.01):
        super().__init__()
        self.lam = lam

    def transform_grads(self, grads):
        # only weight tensors are rescaled; biases sit at odd positions
        weights = agr_penalty(grads[0::2], self.lam)
        out = list(grads)
        out[0::2] = weights
        return out


class MagDrop(NoRegularizer):
    name = "magdrop"

    def __init__(self, p_base=0.3, beta=0.9, tau=0.1, clamp_max=0.6, seed=0):
        super().__init__()
        self.state = MagDropState(p_base=p_base, beta=beta, tau=tau,
                                  clamp_max=clamp_max, rng_seed=seed)
        self.rate_trace = self.state.rate_trace
        self.last_decision: dict = {}

    def hook(self, layer_index, activation, stale_grad):
        if stale_grad is None:
            return activation, None
        if len(stale_grad) != len(activation):
            raise StateError(
                f"layer {layer_index}: previous gradient has batch {len(stale_grad)}, "
                f"activation has batch {len(activation)}; use equal-size training batches")
        momentum = magdrop_update_momentum(self.state, layer_index, stale_grad)
        rate = magdrop_rate(self.state, stale_grad, momentum)
        out, decision = magdrop_apply(self.state, activation, rate, layer_index)
        self.last_decision[layer_index] = decision
        return out, decision.factor


def build_regularizer(spec: dict, seed: int = 0):
    """Instantiate a regularizer from its config dict (``{"kind": ..., ...}``)."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    try:
        if kind == "none":
            return NoRegularizer(**spec)
        if kind == "dropout":
            return FixedDropout(seed=seed, **spec)
        if kind == "agr":
            return AGR(lam=spec.pop("lambda", 0.01), **spec)
        if kind == "magdrop":
            return MagDrop(seed=seed, **spec)
    except TypeError as exc:
        raise ConfigError(f"bad {kind} regularizer parameters: {exc}") from None
    raise ConfigError(f"unknown regularizer kind {kind!r}")
