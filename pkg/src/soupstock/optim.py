"""Stateful elementwise optimizers over weight maps.

Four update rules — GD, Adagrad, Adam, Adadelta — consume pseudogradients and
produce new iterates. All state lives in per-tensor float32 buffers keyed by
tensor name; the step counter increments inside each step call *before* the
learning-rate schedule is evaluated, so the first update runs at index 1.

Adam follows the ensembling formulation exactly: the moving averages are the
moments themselves (no separate bias-corrected copies),

    m_i = b1*m_{i-1} + (1-b1)*g_i        v_i = b2*v_{i-1} + (1-b2)*g_i^2
    w_i = w_{i-1} - eta_i/(1-b1^i) * m_i / (sqrt(v_i)/sqrt(1-b2^i) + eps)

with eps *inside* the denominator after the corrected root (algebraically the
original bias-corrected rule). Set ``standard_form=True`` for the common
library rewrite that folds the corrections into the step size and adds eps to
the *uncorrected* root,

    w_i = w_{i-1} - eta_i * sqrt(1-b2^i)/(1-b1^i) * m_i / (sqrt(v_i) + eps),

which genuinely differs (its eps is not scaled by the bias correction).

Weight decay is decoupled: w <- w - eta_i*lambda*w before the optimizer update.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .pseudograd import Pseudogradient, Schedule, schedule_eval
from .weightstore import WeightMap, _check_compatible

__all__ = [
    "GD",
    "Adagrad",
    "Adam",
    "Adadelta",
    "OptimizerVariant",
    "OptimizerSpec",
    "OptimizerState",
    "gd_step",
    "adagrad_step",
    "adam_step",
    "adadelta_step",
    "optimizer_step",
    "project_to_ball",
]


@dataclass(frozen=True)
class GD:
    lr: Schedule


@dataclass(frozen=True)
class Adagrad:
    lr: Schedule
    eps: float = 1e-8


@dataclass(frozen=True)
class Adam:
    lr: Schedule
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    standard_form: bool = False
    # Scalar initial moments, broadcast over every tensor. v0 must be positive
    # whenever either is overridden (the convergence analysis divides by it).
    m0: float = 0.0
    v0: float = 0.0


@dataclass(frozen=True)
class Adadelta:
    lr: Schedule
    rho: float = 0.9
    eps: float = 1e-6


OptimizerVariant = GD | Adagrad | Adam | Adadelta


@dataclass(frozen=True)
class OptimizerSpec:
    variant: OptimizerVariant
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        v = self.variant
        if isinstance(v, Adagrad) and v.eps <= 0:
            raise ValueError(f"adagrad eps must be > 0, got {v.eps}")
        if isinstance(v, Adam):
            if not (0.0 <= v.beta1 < 1.0 and 0.0 <= v.beta2 < 1.0):
                raise ValueError(f"adam betas must lie in [0, 1), got {v.beta1}, {v.beta2}")
            if v.eps <= 0:
                raise ValueError(f"adam eps must be > 0, got {v.eps}")
            if (v.m0 != 0.0 or v.v0 != 0.0) and v.v0 <= 0.0:
                raise ValueError("adam v0 must be > 0 when initial moments are overridden")
            if v.beta1**2 >= v.beta2:
                warnings.warn(
                    f"adam beta1^2={v.beta1 ** 2:g} >= beta2={v.beta2:g}: the decaying-schedule "
                    "convergence guarantee needs beta1^2 < beta2",
                    stacklevel=2,
                )
        if isinstance(v, Adadelta):
            if not (0.0 <= v.rho < 1.0):
                raise ValueError(f"adadelta rho must lie in [0, 1), got {v.rho}")
            if v.eps <= 0:
                raise ValueError(f"adadelta eps must be > 0, got {v.eps}")


@dataclass
class OptimizerState:
    """Per-tensor accumulators plus the global step counter.

    Buffers are allocated lazily from the first pseudogradient's schema:
    sq_sum (Adagrad), m/v (Adam moments), acc_grad_sq/acc_update_sq (Adadelta).
    """

    step: int = 0
    sq_sum: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    acc_grad_sq: dict[str, np.ndarray] = field(default_factory=dict)
    acc_update_sq: dict[str, np.ndarray] = field(default_factory=dict)

    def clone(self) -> "OptimizerState":
        return OptimizerState(
            step=self.step,
            sq_sum={k: a.copy() for k, a in self.sq_sum.items()},
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            acc_grad_sq={k: a.copy() for k, a in self.acc_grad_sq.items()},
            acc_update_sq={k: a.copy() for k, a in self.acc_update_sq.items()},
        )


def _ensure(buffers: dict[str, np.ndarray], g: WeightMap, fill: float = 0.0) -> None:
    if not buffers:
        for name, arr in g.arrays().items():
            buffers[name] = np.full(arr.shape, np.float32(fill), dtype=np.float32)


def _begin_step(
    w: WeightMap,
    g: Pseudogradient,
    state: OptimizerState,
    spec: OptimizerSpec,
    schedule_step: int | None,
) -> tuple[dict[str, np.ndarray], float, int]:
    """Advance the counter, evaluate the lr, and apply decoupled weight decay.

    Returns mutable working arrays for w, the step size, and the global step.
    """
    _check_compatible(w, g.values)
    state.step += 1
    idx = state.step if schedule_step is None else schedule_step
    eta = schedule_eval(spec.variant.lr, idx)
    if spec.weight_decay > 0.0:
        keep = np.float32(1.0 - eta * spec.weight_decay)
        work = {name: arr * keep for name, arr in w.arrays().items()}
    else:
        work = {name: arr.copy() for name, arr in w.arrays().items()}
    return work, eta, state.step


def _finish(work: dict[str, np.ndarray]) -> WeightMap:
    for arr in work.values():
        arr.setflags(write=False)
    return WeightMap._wrap(work)


def gd_step(
    w: WeightMap,
    g: Pseudogradient,
    state: OptimizerState,
    spec: OptimizerSpec,
    schedule_step: int | None = None,
) -> WeightMap:
    """w - eta_i * g."""
    work, eta, _ = _begin_step(w, g, state, spec, schedule_step)
    eta32 = np.float32(eta)
    for name, arr in g.values.arrays().items():
        work[name] -= eta32 * arr
    return _finish(work)


def adagrad_step(
    w: WeightMap,
    g: Pseudogradient,
    state: OptimizerState,
    spec: OptimizerSpec,
    schedule_step: int | None = None,
) -> WeightMap:
    """w - eta_i * g / (sqrt(sum of squared gradients) + eps), per element."""
    work, eta, _ = _begin_step(w, g, state, spec, schedule_step)
    variant: Adagrad = spec.variant
    _ensure(state.sq_sum, g.values)
    eta32 = np.float32(eta)
    eps32 = np.float32(variant.eps)
    for name, arr in g.values.arrays().items():
        sq = state.sq_sum[name]
        sq += arr * arr
        work[name] -= eta32 * arr / (np.sqrt(sq) + eps32)
    return _finish(work)


def adam_step(
    w: WeightMap,
    g: Pseudogradient,
    state: OptimizerState,
    spec: OptimizerSpec,
    schedule_step: int | None = None,
) -> WeightMap:
    work, eta, step = _begin_step(w, g, state, spec, schedule_step)
    variant: Adam = spec.variant
    _ensure(state.m, g.values, fill=variant.m0)
    _ensure(state.v, g.values, fill=variant.v0)
    b1 = np.float32(variant.beta1)
    b2 = np.float32(variant.beta2)
    one_m_b1 = np.float32(1.0 - variant.beta1)
    one_m_b2 = np.float32(1.0 - variant.beta2)
    eps32 = np.float32(variant.eps)
    bias1 = 1.0 - float(variant.beta1) ** step
    bias2 = 1.0 - float(variant.beta2) ** step
    for name, arr in g.values.arrays().items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += one_m_b1 * arr
        v *= b2
        v += one_m_b2 * arr * arr
        if variant.standard_form:
            folded = np.float32(eta * math.sqrt(bias2) / bias1)
            work[name] -= folded * m / (np.sqrt(v) + eps32)
        else:
            denom = np.sqrt(v) / np.float32(math.sqrt(bias2)) + eps32
            work[name] -= np.float32(eta / bias1) * m / denom
    return _finish(work)


def adadelta_step(
    w: WeightMap,
    g: Pseudogradient,
    state: OptimizerState,
    spec: OptimizerSpec,
    schedule_step: int | None = None,
) -> WeightMap:
    """Accumulator-ratio updates, scaled by eta_i.

    acc_g <- rho*acc_g + (1-rho)*g^2
    delta  = -sqrt(acc_u + eps)/sqrt(acc_g + eps) * g
    acc_u <- rho*acc_u + (1-rho)*delta^2
    w     <- w + eta_i*delta
    """
    work, eta, _ = _begin_step(w, g, state, spec, schedule_step)
    variant: Adadelta = spec.variant
    _ensure(state.acc_grad_sq, g.values)
    _ensure(state.acc_update_sq, g.values)
    rho = np.float32(variant.rho)
    one_m_rho = np.float32(1.0 - variant.rho)
    eps32 = np.float32(variant.eps)
    eta32 = np.float32(eta)
    for name, arr in g.values.arrays().items():
        acc_g = state.acc_grad_sq[name]
        acc_u = state.acc_update_sq[name]
        acc_g *= rho
        acc_g += one_m_rho * arr * arr
        delta = -np.sqrt(acc_u + eps32) / np.sqrt(acc_g + eps32) * arr
        acc_u *= rho
        acc_u += one_m_rho * delta * delta
        work[name] += eta32 * delta
    return _finish(work)


_STEP_FNS = {GD: gd_step, Adagrad: adagrad_step, Adam: adam_step, Adadelta: adadelta_step}


def optimizer_step(
    w: WeightMap,
    g: Pseudogradient,
    state: OptimizerState,
    spec: OptimizerSpec,
    schedule_step: int | None = None,
) -> WeightMap:
    """Dispatch to the step rule for spec.variant."""
    return _STEP_FNS[type(spec.variant)](w, g, state, spec, schedule_step)


def project_to_ball(w: WeightMap, center: WeightMap, radius: float) -> WeightMap:
    """Euclidean projection onto the closed ball of given radius around center."""
    if radius <= 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    _check_compatible(w, center)
    dist = 0.0
    for name, arr in w.arrays().items():
        d = arr.astype(np.float64) - center.array(name)
        dist += float(np.dot(d.reshape(-1), d.reshape(-1)))
    dist = math.sqrt(dist)
    if dist <= radius:
        return w
    shrink = np.float32(radius / dist)
    out: dict[str, np.ndarray] = {}
    for name, arr in w.arrays().items():
        res = center.array(name) + (arr - center.array(name)) * shrink
        res.setflags(write=False)
        out[name] = res
    return WeightMap._wrap(out)
