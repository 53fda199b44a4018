"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


class NonDeterministicError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    tol: float
    names: list[str] = field(default_factory=list)
    checked: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_error)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)

    def summary(self) -> str:
        lines = []
        for i, err in enumerate(self.max_rel_error):
            name = self.names[i] if i < len(self.names) else f"input{i}"
            status = "ok" if err <= self.tol else "FAIL"
            lines.append(f"{name}: max rel err {err:.3e} over {self.checked[i]} entries [{status}]")
        return "\n".join(lines)


def _scalar(f: Callable[[], Tensor]) -> float:
    out = f()
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    return float(out.data.reshape(()))


def _central(f: Callable[[], Tensor], flat: np.ndarray, i: int, step: float) -> float:
    orig = flat[i]
    flat[i] = orig + step
    plus = _scalar(f)
    flat[i] = orig - step
    minus = _scalar(f)
    flat[i] = orig
    return (plus - minus) / (2 * step)


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    tol: float = 1e-4,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    names: Optional[Sequence[str]] = None,
    entries: Optional[Sequence[Optional[np.ndarray]]] = None,
    atol: float = 1e-8,
) -> GradCheckReport:
    """Compare autodiff gradients of ``f()`` with central differences.

    ``f`` takes no arguments and reads the current values of ``inputs``;
    entries are perturbed in place. Per input the reported error is
    max |g_ad - g_fd| / (|g_ad| + |g_fd| + eps). When ``max_entries`` is set,
    a random subsample of that many entries per input is checked;
    ``entries`` pins explicit flat indices per input instead (None = default).
    An entry that misses ``tol`` is re-measured at eps/10 and eps/100 so a
    kink (ReLU6 clip, max-pool switch) inside the first stencil is not
    mistaken for an error; a wrong gradient misses at every step size.
    Entries where both the analytic and the numeric value are below ``atol``
    are skipped: a parameter with an identically zero gradient (a bias feeding
    a batch-statistics normalization) otherwise scores finite-difference
    round-off as O(1e-3) relative error.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check expects float64 inputs; build them under default_dtype(np.float64)")
    rng = rng or np.random.default_rng(0)

    first = _scalar(f)
    if _scalar(f) != first:
        raise NonDeterministicError(
            "function is not deterministic (active dropout or training-mode randomness?); "
            "put the model in eval mode before checking gradients"
        )

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f()
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    errors, counts = [], []
    for k, (t, g_ad) in enumerate(zip(inputs, analytic)):
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        if entries is not None and entries[k] is not None:
            idx = np.asarray(entries[k], dtype=np.int64)
        worst = 0.0
        g_ad_flat = g_ad.reshape(-1)
        for i in idx:
            a = g_ad_flat[i]
            err = None
            for step in (eps, eps / 10, eps / 100):
                g_fd = _central(f, flat, i, step)
                if max(abs(a), abs(g_fd)) <= atol:
                    err = 0.0
                    break
                e = abs(a - g_fd) / (abs(a) + abs(g_fd) + eps)
                err = e if err is None else min(err, e)
                if err <= tol:
                    break
            worst = max(worst, float(err))
        errors.append(worst)
        counts.append(len(idx))
    for t in inputs:
        t.grad = None
    return GradCheckReport(errors, tol, list(names or []), counts)
