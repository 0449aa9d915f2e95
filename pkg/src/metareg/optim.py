"""Gradient-based optimizers and the linear meta-learning-rate decay."""

from dataclasses import dataclass, field

import numpy as np

from .core import ParamVector


def sgd_step(params: ParamVector, grads: ParamVector, lr: float) -> ParamVector:
    """params - lr * grads, elementwise."""
    params.check_layout(grads)
    return ParamVector(params.values - np.float32(lr) * grads.values, params.layout)


@dataclass
class AdamState:
    """Per-parameter moment estimates for bias-corrected Adam."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: ParamVector, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            m=np.zeros_like(params.values),
            v=np.zeros_like(params.values),
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(state: AdamState, params: ParamVector, grads: ParamVector) -> ParamVector:
    """One bias-corrected Adam update; increments state.t and updates its moments."""
    params.check_layout(grads)
    if state.m.shape != params.values.shape:
        raise ValueError("optimizer state does not match parameter layout")
    state.t += 1
    b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
    g = grads.values
    state.m = b1 * state.m + (np.float32(1.0) - b1) * g
    state.v = b2 * state.v + (np.float32(1.0) - b2) * (g * g)
    m_hat = state.m / np.float32(1.0 - state.beta1**state.t)
    v_hat = state.v / np.float32(1.0 - state.beta2**state.t)
    step = np.float32(state.lr) * m_hat / (np.sqrt(v_hat) + np.float32(state.eps))
    return ParamVector(params.values - step, params.layout)


@dataclass
class LinearDecay:
    start_value: float = 0.5
    end_value: float = 1e-5
    total_steps: int = 200_000

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")

    def value(self, step: int) -> float:
        step = min(int(step), self.total_steps)
        frac = step / self.total_steps
        return self.start_value + (self.end_value - self.start_value) * frac
