"""Ranger: RAdam inner updates wrapped by Lookahead slow-weight synchronization.

Parameters are a ``dict[str, np.ndarray]`` updated in place. States are
single-owner and mutated by the step functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Params = dict[str, np.ndarray]

RECTIFY_THRESHOLD = 4.0


class OptimizerError(ValueError):
    pass


@dataclass
class RAdamState:
    m: Params
    v: Params
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def for_params(cls, params: Params, **hyper) -> RAdamState:
        return cls(m={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
                   v={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
                   **hyper)


@dataclass
class LookaheadState:
    slow: Params
    k: int = 5
    alpha: float = 0.5
    inner_count: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise OptimizerError("lookahead k must be >= 1")
        if not 0.0 < self.alpha <= 1.0:
            raise OptimizerError("lookahead alpha must be in (0, 1]")

    @classmethod
    def for_params(cls, params: Params, **hyper) -> LookaheadState:
        return cls(slow={k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()},
                   **hyper)


def rho_inf(beta2: float) -> float:
    return 2.0 / (1.0 - beta2) - 1.0


def rho(t: int, beta2: float) -> float:
    """Length of the approximated simple moving average after ``t`` steps."""
    b2t = beta2 ** t
    return rho_inf(beta2) - 2.0 * t * b2t / (1.0 - b2t)


def rectification(t: int, beta2: float) -> float:
    r_t, r_inf = rho(t, beta2), rho_inf(beta2)
    return math.sqrt((r_t - 4.0) * (r_t - 2.0) * r_inf / ((r_inf - 4.0) * (r_inf - 2.0) * r_t))


def radam_step(params: Params, grads: Params, state: RAdamState) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for {name}")
    state.t += 1
    t, b1, b2 = state.t, state.beta1, state.beta2
    rho_t = rho(t, b2)
    bias1 = 1.0 - b1 ** t
    if rho_t > RECTIFY_THRESHOLD:
        step = state.lr * rectification(t, b2) / bias1
        bias2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if rho_t > RECTIFY_THRESHOLD:
            p -= step * m / (np.sqrt(v / bias2) + state.eps)
        else:
            p -= (state.lr / bias1) * m


def lookahead_sync(fast: Params, state: LookaheadState) -> None:
    if state.inner_count != state.k:
        raise OptimizerError(
            f"lookahead sync after {state.inner_count} inner steps; expected {state.k}")
    for name, p in fast.items():
        slow = state.slow[name]
        if state.alpha == 1.0:
            slow[...] = p
        else:
            slow += state.alpha * (p - slow)
        p[...] = slow
    state.inner_count = 0


def ranger_step(params: Params, grads: Params, radam: RAdamState,
                lookahead: LookaheadState) -> bool:
    """One RAdam step plus a Lookahead sync every ``k`` steps. Returns True on sync."""
    radam_step(params, grads, radam)
    lookahead.inner_count += 1
    if lookahead.inner_count == lookahead.k:
        lookahead_sync(params, lookahead)
        return True
    return False


@dataclass
class Ranger:
    """Convenience bundle of both states for a fixed parameter dict."""

    params: Params
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    k: int = 5
    alpha: float = 0.5
    radam: RAdamState = field(init=False)
    lookahead: LookaheadState = field(init=False)

    def __post_init__(self) -> None:
        self.radam = RAdamState.for_params(self.params, lr=self.lr, beta1=self.beta1,
                                           beta2=self.beta2, eps=self.eps)
        self.lookahead = LookaheadState.for_params(self.params, k=self.k, alpha=self.alpha)

    def step(self, grads: Params) -> bool:
        return ranger_step(self.params, grads, self.radam, self.lookahead)
