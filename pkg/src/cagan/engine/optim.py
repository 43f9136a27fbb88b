"""Adam and plain SGD over named parameter dicts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, ParameterError


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ParameterError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ParameterError("learning rate must be positive")


def adam_step(params, grads, state):
    """Apply one bias-corrected Adam update in place.

    ``params`` maps names to Tensors; ``grads`` maps the same names to arrays.
    Parameters without a gradient entry are skipped, but the step counter is
    shared by the whole group.
    """
    if state.kind != "adam":
        raise ParameterError("adam_step called with a non-adam optimizer state")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = (b1 * m + (1 - b1) * g).astype(p.dtype, copy=False)
        v = (b2 * v + (1 - b2) * (g * g)).astype(p.dtype, copy=False)
        state.m[name], state.v[name] = m, v
        update = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.data = (p.data - update).astype(p.dtype, copy=False)


def sgd_step(params, grads, state):
    if state.kind != "sgd":
        raise ParameterError("sgd_step called with a non-sgd optimizer state")
    state.step += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        p.data = (p.data - state.learning_rate * g).astype(p.dtype, copy=False)


def step(params, state):
    """Update ``params`` from their ``.grad`` fields and clear them."""
    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    (adam_step if state.kind == "adam" else sgd_step)(params, grads, state)
    for p in params.values():
        p.grad = None
