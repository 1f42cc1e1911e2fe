"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import core
from .core import Tensor


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    flagged: list[tuple[int, int]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.max_rel_error < 1e-4


def _rel(analytic: float, numeric: float, eps: float) -> float:
    return abs(analytic - numeric) / (abs(numeric) + eps)


def check_tensors(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-6,
    eps: float = 1e-6,
    max_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
    kink_tol: float = 1e-3,
) -> GradCheckResult:
    """Compare analytic gradients of scalar ``f()`` w.r.t. ``tensors`` to central differences.

    Components where the two one-sided slopes disagree by more than
    ``kink_tol`` (relative) sit on a kink (e.g. a max-pool tie or the SELU
    origin); they are reported in ``flagged`` and excluded from the error.
    """
    for t in tensors:
        t.grad = None
    loss = f()
    core.backward(loss)
    f0 = loss.item()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    checked = 0
    flagged: list[tuple[int, int]] = []
    with core.no_grad():
        for ti, t in enumerate(tensors):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_tensor is not None and flat.size > max_per_tensor:
                gen = rng if rng is not None else np.random.default_rng(0)
                idx = np.sort(gen.choice(flat.size, size=max_per_tensor, replace=False))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                numeric = (fp - fm) / (2 * h)
                right = (fp - f0) / h
                left = (f0 - fm) / h
                if abs(right - left) > kink_tol * (abs(numeric) + 1e-3):
                    flagged.append((ti, int(i)))
                    continue
                worst = max(worst, _rel(float(analytic[ti].reshape(-1)[i]), numeric, eps))
                checked += 1
    return GradCheckResult(worst, checked, flagged)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6, eps: float = 1e-6) -> float:
    """Max over components of |analytic - central difference| / (|central difference| + eps)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    x.requires_grad = True
    return check_tensors(lambda: f(x), [x], h=h, eps=eps).max_rel_error


def grad_check_detail(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6, eps: float = 1e-6) -> GradCheckResult:
    x = x if isinstance(x, Tensor) else Tensor(x)
    x.requires_grad = True
    return check_tensors(lambda: f(x), [x], h=h, eps=eps)
