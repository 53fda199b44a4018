"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nn import Parameter


@dataclass
class OptimState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-5
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Sequence[tuple[str, Parameter]], st: OptimState) -> OptimState:
    """One in-place AdamW update of every parameter that has a gradient.

    Decay is applied to the weights before the adaptive step:
    theta <- theta * (1 - lr * wd), then theta -= lr * m_hat / (sqrt(v_hat) + eps).
    """
    for name, p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name}")
    st.t += 1
    b1, b2 = st.betas
    bc1 = 1.0 - b1 ** st.t
    bc2 = 1.0 - b2 ** st.t
    for name, p in params:
        g = p.grad
        if g is None:
            continue
        if name not in st.m:
            st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        m, v = st.m[name], st.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if st.weight_decay:
            p.data *= 1.0 - st.lr * st.weight_decay
        p.data -= (st.lr * (m / bc1) / (np.sqrt(v / bc2) + st.eps)).astype(p.dtype)
    return st


def cosine_lr(step: int, total_steps: int, lr0: float, eta_min: float = 0.0) -> float:
    if total_steps <= 0:
        return lr0
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return eta_min + 0.5 * (lr0 - eta_min) * (1.0 + math.cos(math.pi * step / total_steps))
