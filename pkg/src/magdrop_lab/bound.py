"""Computable PAC-Bayes bound for momentum-adaptive dropout.

The bound on the true risk is::

    R <= R_hat + sqrt( (W + E + K + C) / (2 m) )

with, all logarithms natural,

    W = E_Q[|w|^2] / (2 sigma^2)                 weight (KL) term
    E = ln(1 / (alpha * (1 - E[p])))             entropy term
    K = ln(m / delta)                            confidence term
    C = c * B^2 * X^2 * exp(sum_l kappa_l * sqrt(E[p_l]))   covering term

``W + E`` is the KL bound, ``alpha = 0.5`` and ``c = 2 ln 2`` by default.
The prior width ``sigma`` has no default: it must be given or back-solved
from a target bound value with :func:`back_solve_sigma`.

Also provided: the raw Catoni bound in its temperature ``lambda`` and the
closed form obtained by optimizing it, spectral-norm estimation by power
iteration, and measurement of every input from a trained model.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DomainError, StateError

log = logging.getLogger(__name__)

ALPHA = 0.5
COVERING_C = 2.0 * math.log(2.0)


@dataclass(frozen=True)
class LayerTerm:
    kappa: float
    expected_rate: float


@dataclass(frozen=True)
class BoundInputs:
    """Every scalar the bound consumes.

    The perturbation sum ``sum_l kappa_l sqrt(E[p_l])`` comes from
    ``per_layer`` when that is non-empty; when only the aggregate is known it
    can be passed as ``perturbation_sum`` instead.
    """

    weight_norm_sq: float
    expected_rate: float
    m: int
    delta: float = 0.05
    B: float = 1.0
    X_sq: float = 1.0
    sigma: Optional[float] = None
    alpha: float = ALPHA
    c: float = COVERING_C
    empirical_risk: float = 0.0
    per_layer: tuple = ()
    perturbation_sum: Optional[float] = None
    source: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        layers = tuple(t if isinstance(t, LayerTerm) else LayerTerm(**t) if isinstance(t, dict)
                       else LayerTerm(*t) for t in self.per_layer)
        object.__setattr__(self, "per_layer", layers)

    def validate(self, need_sigma: bool = True) -> None:
        if not 0.0 <= self.expected_rate < 1.0:
            raise DomainError("entropy_term", f"expected_rate must lie in [0, 1), got {self.expected_rate}")
        for i, t in enumerate(self.per_layer):
            if not 0.0 <= t.expected_rate < 1.0:
                raise DomainError("covering_term", f"layer {i} rate {t.expected_rate} outside [0, 1)")
            if not t.kappa >= 0.0:
                raise DomainError("covering_term", f"layer {i} kappa {t.kappa} is negative")
        if self.per_layer and self.perturbation_sum is not None:
            raise DomainError("covering_term", "give per_layer or perturbation_sum, not both")
        if self.perturbation_sum is not None and not self.perturbation_sum >= 0.0:
            raise DomainError("covering_term", f"perturbation_sum {self.perturbation_sum} is negative")
        if self.m < 1:
            raise DomainError("confidence_term", f"m must be >= 1, got {self.m}")
        if not 0.0 < self.delta < 1.0:
            raise DomainError("confidence_term", f"delta must lie in (0, 1), got {self.delta}")
        if not self.weight_norm_sq >= 0.0:
            raise DomainError("kl_term", f"weight_norm_sq {self.weight_norm_sq} is negative")
        if not 0.0 < self.alpha * (1.0 - self.expected_rate) <= 1.0:
            raise DomainError("entropy_term", "alpha * (1 - expected_rate) must lie in (0, 1]")
        if self.B <= 0.0 or self.X_sq < 0.0 or self.c <= 0.0:
            raise DomainError("covering_term", "need B > 0, X_sq >= 0, c > 0")
        if need_sigma:
            if self.sigma is None:
                raise ConfigError(
                    "sigma (prior width) is required: it cannot be derived from the other inputs, "
                    "so supply it explicitly or back-solve it from a target bound value")
            if not self.sigma > 0.0:
                raise DomainError("kl_term", f"sigma must be positive, got {self.sigma}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_layer"] = [asdict(t) for t in self.per_layer]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BoundInputs":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown BoundInputs keys: {sorted(unknown)}")
        missing = {"weight_norm_sq", "expected_rate", "m"} - set(d)
        if missing:
            raise ConfigError(f"missing BoundInputs keys: {sorted(missing)}")
        return cls(**d)

    def with_sigma(self, sigma: float) -> "BoundInputs":
        return replace(self, sigma=sigma)


@dataclass(frozen=True)
class BoundReport:
    kl_term: float
    entropy_term: float
    confidence_term: float
    covering_term: float
    numerator: float
    bound_gap: float
    total_bound: float
    perturbation_sum: float
    inputs: BoundInputs
    label: str = ""
    diagnostics: tuple = ()

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "inputs"}
        d["diagnostics"] = list(self.diagnostics)
        d["inputs"] = self.inputs.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)


# -- spectral norm -------------------------------------------------------------

def matricize(weight: np.ndarray) -> np.ndarray:
    """Conv kernels ``(out, in, k, k)`` become ``out x (in*k*k)``."""
    w = np.asarray(weight, dtype=np.float64)
    if w.ndim == 2:
        return w
    if w.ndim < 2:
        return w.reshape(1, -1)
    return w.reshape(w.shape[0], -1)


def measure_spectral_norm(weight: np.ndarray, iters: int = 1000, tol: float = 1e-9,
                          seed: int = 0) -> float:
    """Largest singular value by power iteration on ``W^T W``."""
    w = matricize(weight)
    if not np.any(w):
        return 0.0
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(w.shape[1])
    v /= np.linalg.norm(v)
    est = prev = 0.0
    for _ in range(iters):
        u = w @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            # start vector fell in the null space; restart
            v = rng.standard_normal(w.shape[1])
            v /= np.linalg.norm(v)
            continue
        v = w.T @ (u / nu)
        est = np.linalg.norm(v)
        v /= est
        if abs(est - prev) <= tol * est:
            break
        prev = est
    return float(est)


# -- individual terms ----------------------------------------------------------

def kl_weight_term(weight_norm_sq: float, sigma: float) -> float:
    if not sigma > 0.0:
        raise DomainError("kl_term", f"sigma must be positive, got {sigma}")
    return weight_norm_sq / (2.0 * sigma * sigma)


def entropy_term(alpha: float, expected_rate: float) -> float:
    if not expected_rate < 1.0:
        raise DomainError("entropy_term", f"expected_rate must be < 1, got {expected_rate}")
    inner = alpha * (1.0 - expected_rate)
    if not inner > 0.0:
        raise DomainError("entropy_term", f"alpha * (1 - rate) = {inner} is not positive")
    return -math.log(inner)


def kl_bound(weight_norm_sq: float, sigma: float, alpha: float, expected_rate: float) -> float:
    return kl_weight_term(weight_norm_sq, sigma) + entropy_term(alpha, expected_rate)


def confidence_term(m: int, delta: float) -> float:
    if m < 1 or not 0.0 < delta < 1.0:
        raise DomainError("confidence_term", f"need m >= 1 and delta in (0, 1), got {m}, {delta}")
    return math.log(m / delta)


def perturbation_sum(per_layer: Sequence) -> float:
    return math.fsum(t.kappa * math.sqrt(t.expected_rate) for t in per_layer)


def covering_term(B: float, X_sq: float, c: float, per_layer: Sequence = (),
                  pert_sum: Optional[float] = None) -> float:
    """``c * B^2 * X^2 * exp(sum)``; ``inf`` (with a logged warning) on overflow."""
    s = perturbation_sum(per_layer) if pert_sum is None else pert_sum
    try:
        growth = math.exp(s)
    except OverflowError:
        log.warning("covering term overflow: perturbation sum %.6g is too large for exp()", s)
        return math.inf
    return c * B * B * X_sq * growth


# -- combined bound ------------------------------------------------------------

def _pert_sum(inputs: BoundInputs) -> float:
    if inputs.perturbation_sum is not None:
        return float(inputs.perturbation_sum)
    return perturbation_sum(inputs.per_layer)


def magdrop_bound(inputs: BoundInputs, label: str = "") -> BoundReport:
    inputs.validate()
    s = _pert_sum(inputs)
    w = kl_weight_term(inputs.weight_norm_sq, inputs.sigma)
    e = entropy_term(inputs.alpha, inputs.expected_rate)
    k = confidence_term(inputs.m, inputs.delta)
    cov = covering_term(inputs.B, inputs.X_sq, inputs.c, pert_sum=s)
    diagnostics = []
    if math.isinf(cov):
        diagnostics.append(f"covering term overflowed: perturbation sum {s:.6g} too large for exp()")
    numerator = w + e + k + cov
    gap = math.sqrt(numerator / (2.0 * inputs.m))
    if inputs.empirical_risk > inputs.B:
        diagnostics.append(f"empirical risk {inputs.empirical_risk} exceeds loss bound B={inputs.B}")
    return BoundReport(kl_term=w, entropy_term=e, confidence_term=k, covering_term=cov,
                       numerator=numerator, bound_gap=gap, total_bound=inputs.empirical_risk + gap,
                       perturbation_sum=s, inputs=inputs, label=label,
                       diagnostics=tuple(diagnostics))


def back_solve_sigma(target_bound_gap: float, inputs: BoundInputs) -> float:
    """Prior width for which :func:`magdrop_bound` returns ``target_bound_gap``."""
    inputs.validate(need_sigma=False)
    if inputs.weight_norm_sq <= 0.0:
        raise DomainError("kl_term", "sigma is unidentifiable when weight_norm_sq is 0")
    rest = (entropy_term(inputs.alpha, inputs.expected_rate)
            + confidence_term(inputs.m, inputs.delta)
            + covering_term(inputs.B, inputs.X_sq, inputs.c, pert_sum=_pert_sum(inputs)))
    residual = target_bound_gap ** 2 * 2.0 * inputs.m - rest
    if not residual > 0.0:
        raise DomainError(
            "kl_term", f"target {target_bound_gap} is infeasible: the other terms alone give "
                       f"{math.sqrt(rest / (2.0 * inputs.m)):.6g} (residual {residual:.6g})")
    return math.sqrt(inputs.weight_norm_sq / (2.0 * residual))


def catoni_bound(empirical_risk: float, kl: float, m: int, delta: float, B: float,
                 lam: float) -> float:
    """``R_hat + (KL + ln(1/delta)) / lam + B * lam / (2m)``."""
    if not lam > 0.0:
        raise DomainError("catoni", f"lambda must be positive, got {lam}")
    return empirical_risk + (kl + math.log(1.0 / delta)) / lam + B * lam / (2.0 * m)


def catoni_bound_optimized(empirical_risk: float, kl: float, m: int, delta: float,
                           B: float) -> float:
    """``R_hat + sqrt(B^2 (KL + ln(1/delta) + ln(2 sqrt(m))) / (2m))``."""
    return empirical_risk + math.sqrt(
        B * B * (kl + math.log(1.0 / delta) + math.log(2.0 * math.sqrt(m))) / (2.0 * m))


def catoni_slack(kl: float, m: int, delta: float, B: float) -> float:
    """How much the ``ln(2 sqrt(m))`` term adds to the optimized closed form."""
    base = math.sqrt(B * B * (kl + math.log(1.0 / delta)) / (2.0 * m))
    return catoni_bound_optimized(0.0, kl, m, delta, B) - base


def compare_report(report_a: BoundReport, report_b: BoundReport) -> float:
    """Percentage by which ``report_b``'s gap improves on ``report_a``'s."""
    if report_a.inputs.m != report_b.inputs.m:
        raise ConfigError(f"reports use different m ({report_a.inputs.m} vs {report_b.inputs.m})")
    if report_a.bound_gap == 0.0:
        raise DomainError("compare", "reference bound gap is zero")
    return (report_a.bound_gap - report_b.bound_gap) / report_a.bound_gap * 100.0


# -- measurement ---------------------------------------------------------------

def time_mean(values) -> float:
    """Mean that returns a constant sequence's value exactly."""
    values = [float(v) for v in values]
    x0 = values[0]
    return x0 + math.fsum(v - x0 for v in values) / len(values)


def measure_from_run(model, states, rate_trace: dict, dataset, *, delta: float = 0.05,
                     B: float = 1.0, sigma: Optional[float] = None, alpha: float = ALPHA,
                     c: float = COVERING_C, power_iters: int = 1000) -> BoundInputs:
    """Collect bound inputs from a trained model.

    Each parametric layer is paired with the dropout rate applied to the
    first hooked (ReLU) activation after it, or 0 if none follows before
    the next parametric layer. ``rate_trace`` maps hooked layer index to
    the per-step mean applied rate.
    """
    from .nn import ReLU, cross_entropy_per_sample, logits_of, parameters

    hooked = model.relu_indices()
    missing = [i for i in hooked if not rate_trace.get(i)]
    if missing:
        raise StateError(f"no rate trace recorded for hooked layers {missing}")
    layer_rates = {i: time_mean(rate_trace[i]) for i in hooked}

    params = parameters(model, states)
    weight_norm_sq = math.fsum(float(np.sum(p * p)) for p in params)

    per_layer = []
    param_idx = model.param_layer_indices()
    for n, i in enumerate(param_idx):
        end = param_idx[n + 1] if n + 1 < len(param_idx) else len(model.layers)
        follow = [j for j in range(i + 1, end) if isinstance(model.layers[j], ReLU)]
        rate = layer_rates[follow[0]] if follow else 0.0
        kappa = measure_spectral_norm(states[i].weights, iters=power_iters)
        per_layer.append(LayerTerm(kappa=kappa, expected_rate=rate))

    expected_rate = time_mean(layer_rates.values()) if layer_rates else 0.0

    losses = []
    for start in range(0, len(dataset), 1000):
        sl = slice(start, start + 1000)
        logits = logits_of(model, states, dataset.images[sl])
        losses.append(cross_entropy_per_sample(logits, dataset.labels[sl]))
    loss = np.concatenate(losses) if losses else np.zeros(0)
    clipped = float(np.mean(loss > B)) if len(loss) else 0.0
    if clipped > 0.0:
        log.info("clipped %.2f%% of training losses at B=%g", 100 * clipped, B)
    risk = float(np.mean(np.minimum(loss, B))) if len(loss) else 0.0

    return BoundInputs(weight_norm_sq=weight_norm_sq, expected_rate=expected_rate,
                       m=len(dataset), delta=delta, B=B,
                       X_sq=float(dataset.input_norm_bound) ** 2, sigma=sigma, alpha=alpha,
                       c=c, empirical_risk=risk, per_layer=tuple(per_layer),
                       source={"clipped_loss_fraction": clipped,
                               "layer_rates": {str(k): v for k, v in layer_rates.items()}})


# -- text table ----------------------------------------------------------------

def format_table(reports: Sequence[BoundReport]) -> str:
    header = f"{'Method':<20} {'E[|w|^2]':>10} {'E[p_t]':>8} {'sum k*sqrt(p)':>14} {'Bound':>8}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(f"{r.label or '-':<20} {r.inputs.weight_norm_sq:>10.1f} "
                     f"{r.inputs.expected_rate:>8.3f} {r.perturbation_sum:>14.2f} {r.bound_gap:>8.3f}")
    return "\n".join(lines)
