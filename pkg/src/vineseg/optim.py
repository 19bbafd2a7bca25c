"""Adam with bias correction, operating on named parameter arrays in place."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 < b < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {b}")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


def _array(p):
    return p.data if isinstance(p, Tensor) else p


def adam_step(params: Mapping[str, object], grads: Mapping[str, np.ndarray], state: AdamState) -> AdamState:
    """One Adam update of every parameter in ``params`` (arrays or tensors), in place.

    All gradients are validated before anything is modified, so an abort
    leaves parameters and moments untouched.
    """
    for name, p in params.items():
        if name not in grads:
            raise KeyError(f"no gradient for parameter {name!r}")
        g = np.asarray(grads[name])
        if g.shape != _array(p).shape:
            raise ValueError(f"{name}: gradient shape {g.shape} does not match parameter {_array(p).shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(name)

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        arr = _array(p)
        g = np.asarray(grads[name], dtype=arr.dtype)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        arr -= update.astype(arr.dtype, copy=False)
    return state


def model_grads(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
