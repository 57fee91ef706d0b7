"""Adam optimizer over a parameter store."""

from __future__ import annotations

import numpy as np


class NonFiniteGradient(RuntimeError):
    """A gradient contained NaN/Inf; the step was rejected before any
    parameter was touched."""


def adam_init(params):
    """Fresh first/second-moment state matching ``params`` shapes."""
    return {
        "t": 0,
        "m": [np.zeros_like(p) for p in params],
        "v": [np.zeros_like(p) for p in params],
    }


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update.

    ``params`` are mutated; ``state`` moments update alongside.  The whole
    step is rejected (no mutation at all) if any gradient is non-finite.
    """
    if len(params) != len(grads):
        raise ValueError(f"got {len(params)} params but {len(grads)} grads")
    for p, (m, v) in zip(params, zip(state["m"], state["v"])):
        if m.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"optimizer state shape {m.shape} does not match param {p.shape}")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter index {i}")

    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


class Adam:
    """Adam bound to a :class:`~docseg.layers.ParamStore`.

    Parameters with no gradient after backward contribute zero gradients,
    so untouched branches simply decay their moments.
    """

    def __init__(self, store, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = adam_init([p.data for p in store.params()])

    def step(self):
        params = self.store.params()
        grads = [
            p.grad if p.grad is not None else np.zeros_like(p.data) for p in params
        ]
        grads = [np.asarray(g, dtype=np.float32) for g in grads]
        adam_step(
            [p.data for p in params],
            grads,
            self.state,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
        )
        self.store.zero_grad()
