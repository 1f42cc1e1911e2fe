from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")


class Optimizer:
    """SGD or bias-corrected Adam over a fixed set of named parameters.

    A parameter whose ``requires_grad`` is False at step time is frozen and
    left untouched, moments included.
    """

    def __init__(self, named_params, kind: str = "adam", lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: float | None = None):
        self.params: list[tuple[str, Tensor]] = list(named_params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.state = OptimizerState(kind=kind, lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
        self.clip_norm = clip_norm

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        st = self.state
        live = [(n, p) for n, p in self.params if p.requires_grad and p.grad is not None]
        for name, p in live:
            if p.grad.shape != p.shape:
                raise ValueError(f"gradient shape {p.grad.shape} does not match parameter {name} {p.shape}")
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(f"non-finite gradient in parameter {name!r}")
        scale = 1.0
        if self.clip_norm is not None and live:
            total = np.sqrt(sum(float(np.sum(p.grad * p.grad)) for _, p in live))
            if total > self.clip_norm:
                scale = self.clip_norm / total
        st.step += 1
        if st.kind == "sgd":
            for _, p in live:
                p.data = p.data - st.lr * (scale * p.grad)
            return
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1**st.step
        c2 = 1.0 - b2**st.step
        for name, p in live:
            g = scale * p.grad
            m = st.m.get(name)
            v = st.v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            st.m[name] = m
            st.v[name] = v
            p.data = p.data - st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)


def optimizer_step(named_params, state: OptimizerState) -> None:
    """Functional form: apply one update in place using ``state``."""
    opt = Optimizer(named_params, kind=state.kind, lr=state.lr, betas=(state.beta1, state.beta2), eps=state.eps)
    opt.state = state
    opt.step()
