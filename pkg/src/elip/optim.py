"""Adam optimizer with decoupled weight decay.

Decay applies only to tensors flagged ``decay=True`` (weight matrices);
biases, layer-norm gains and positional tables are exempt. The decay term
``p -= lr * wd * p`` runs before the adaptive update, so a zero gradient
with nonzero decay still shrinks weights.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class AdamState:
    """Per-parameter first/second moments plus a shared step counter."""

    def __init__(self, params: dict[str, Tensor], learning_rate: float = 1e-3,
                 weight_decay: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float | None = None) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    ``grads`` maps a subset of parameter names to gradient arrays; names
    absent from it are left untouched (their moments do not advance).
    """
    if lr is None:
        lr = state.learning_rate
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} of shape {p.data.shape}")
        if state.weight_decay > 0.0 and p.decay:
            p.data -= lr * state.weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def step_from_grads(params: dict[str, Tensor], state: AdamState,
                    names: list[str] | None = None, lr: float | None = None) -> None:
    """Apply adam_step using the ``.grad`` buffers of selected parameters."""
    if names is None:
        names = list(params)
    grads = {n: params[n].grad for n in names if params[n].grad is not None}
    adam_step(params, grads, state, lr=lr)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
