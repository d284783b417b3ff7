"""AdamW with decoupled weight decay, written against the named-tensor dicts.

Update per tensor, with step count n starting at 1:

    m <- b1*m + (1-b1)*g          mhat = m / (1 - b1^n)
    v <- b2*v + (1-b2)*g*g        vhat = v / (1 - b2^n)
    theta <- theta * (1 - lr*wd)                 (decay, decoupled)
    theta <- theta - lr * mhat / (sqrt(vhat) + eps_opt)

Weight decay multiplies the parameter directly and never enters the
moment estimates, so zero gradients reduce the whole update to the
multiplicative shrink.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StructuralError
from .network import LfdnParams

BETA1 = 0.9
BETA2 = 0.999
EPS_OPT = 1e-8


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS_OPT

    @classmethod
    def init(cls, params: LfdnParams) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(t) for k, t in params.tensors.items()},
            v={k: np.zeros_like(t) for k, t in params.tensors.items()},
        )


def adamw_update(params: LfdnParams, grads: dict[str, np.ndarray],
                 state: AdamWState, lr: float, wd: float) -> None:
    """One in-place optimizer step over every tensor."""
    if set(grads) != set(params.tensors) or set(state.m) != set(params.tensors):
        raise StructuralError("gradient/state tensor names do not match parameters")
    state.step += 1
    n = state.step
    bc1 = 1.0 - state.beta1 ** n
    bc2 = 1.0 - state.beta2 ** n
    for name, theta in params.tensors.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise StructuralError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if wd != 0.0:
            theta *= 1.0 - lr * wd
        theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
