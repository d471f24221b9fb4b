"""Adam optimizer over named parameter arrays.

The update is the standard bias-corrected rule with defaults
lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8.  It always steps in the
descent direction of the supplied gradients; trainers in this package
minimize negative objectives (negative ELBO, negative log-likelihood).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["AdamState", "init_adam", "adam_step"]


@dataclass
class AdamState:
    """Step count plus per-parameter first/second moment accumulators."""

    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(
    params: dict[str, np.ndarray],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    return AdamState(
        step=0,
        first_moment={k: np.zeros_like(v) for k, v in params.items()},
        second_moment={k: np.zeros_like(v) for k, v in params.items()},
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update; returns new params and state, inputs untouched.

    Parameters missing from ``grads`` are treated as having zero gradient.
    The step count increases by exactly 1.
    """
    t = state.step + 1
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"'{name}' shape {p.shape}"
            )
        m_prev = state.first_moment.get(name, np.zeros_like(p))
        v_prev = state.second_moment.get(name, np.zeros_like(p))
        if m_prev.shape != p.shape or v_prev.shape != p.shape:
            raise ValueError(f"accumulator shape mismatch for parameter '{name}'")
        m = state.beta1 * m_prev + (1.0 - state.beta1) * g
        v = state.beta2 * v_prev + (1.0 - state.beta2) * (g * g)
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        new_params[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(
        step=t,
        first_moment=new_m,
        second_moment=new_v,
        lr=state.lr,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
    )
