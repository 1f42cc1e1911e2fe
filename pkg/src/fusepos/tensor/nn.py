"""Layers built on the autodiff core: dense, conv, LSTM, and a small Module base."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import core as T
from .core import Tensor
from .rng import RngStream


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def uniform_init(rng: RngStream, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Container that discovers parameters and sub-modules from its attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            # constants (normalisers etc.) live as plain ndarrays, never Tensors
            if isinstance(val, Tensor):
                if not key.startswith("_"):
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, "Module", str]]:
        """Non-trainable ndarray attributes (normalisers): (qualified name, owner, attribute)."""
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, np.ndarray):
                yield name, self, key
            elif isinstance(val, Module):
                yield from val.named_buffers(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {n: p.data.copy() for n, p in self.named_parameters()}
        for n, owner, key in self.named_buffers():
            state[n] = np.asarray(getattr(owner, key), dtype=np.float64).copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        bufs = {n: (owner, key) for n, owner, key in self.named_buffers()}
        if strict:
            missing = (set(own) | set(bufs)) - set(state)
            unexpected = set(state) - set(own) - set(bufs)
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, value in state.items():
            value = np.asarray(value, dtype=np.float64)
            if name in bufs:
                owner, key = bufs[name]
                if value.shape != np.shape(getattr(owner, key)):
                    raise ValueError(f"shape mismatch for {name}: {value.shape} vs {np.shape(getattr(owner, key))}")
                setattr(owner, key, value.copy())
                continue
            if name not in own:
                continue
            p = own[name]
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.data = value.copy()

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Dense(Module):
    """Affine map ``x @ W + b`` followed by an optional activation."""

    def __init__(self, n_in: int, n_out: int, rng: RngStream, activation: str | None = None):
        self.W = parameter(uniform_init(rng, (n_in, n_out), n_in))
        self.b = parameter(uniform_init(rng, (n_out,), n_in))
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        return activate(T.matmul(x, self.W) + self.b, self.activation)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel, rng: RngStream, stride=1, padding=0, activation: str | None = None):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        fan_in = c_in * kh * kw
        self.W = parameter(uniform_init(rng, (c_out, c_in, kh, kw), fan_in))
        self.b = parameter(uniform_init(rng, (c_out,), fan_in))
        self.stride = stride
        self.padding = padding
        self.activation = activation

    @property
    def kernel(self) -> tuple[int, int]:
        return self.W.shape[2], self.W.shape[3]

    def forward(self, x: Tensor) -> Tensor:
        out = T.conv2d(x, self.W, self.b, stride=self.stride, padding=self.padding)
        return activate(out, self.activation)


def activate(x: Tensor, activation: str | None) -> Tensor:
    if activation is None or activation == "linear":
        return x
    if activation == "selu":
        return T.selu(x)
    if activation == "tanh":
        return T.tanh(x)
    if activation == "sigmoid":
        return T.sigmoid(x)
    raise ValueError(f"unknown activation {activation!r}")


class LSTMCell(Module):
    def __init__(self, n_in: int, hidden: int, rng: RngStream):
        self.hidden = hidden
        self.W = parameter(uniform_init(rng, (n_in, 4 * hidden), hidden))
        self.U = parameter(uniform_init(rng, (hidden, 4 * hidden), hidden))
        self.b = parameter(uniform_init(rng, (4 * hidden,), hidden))

    def forward(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        return T.lstm_cell(x, h, c, self.W, self.U, self.b)

    def run(self, x: Tensor, reverse: bool = False, h0: Tensor | None = None, c0: Tensor | None = None):
        """Unroll over ``x`` (B, T, F).  Returns the hidden sequence (B, T, H) in
        input time order and the final (h, c)."""
        B, steps, _ = x.shape
        if x.shape[-1] != self.W.shape[0]:
            raise ValueError(f"LSTM expects {self.W.shape[0]} input features, got {x.shape[-1]}")
        gx = T.matmul(x, self.W) + self.b
        h = h0 if h0 is not None else Tensor(np.zeros((B, self.hidden)))
        c = c0 if c0 is not None else Tensor(np.zeros((B, self.hidden)))
        outs: list[Tensor] = [None] * steps  # type: ignore[list-item]
        order = range(steps - 1, -1, -1) if reverse else range(steps)
        for t in order:
            gates = gx[:, t] + T.matmul(h, self.U)
            h, c = T.lstm_gates(gates, c)
            outs[t] = h
        return T.stack(outs, axis=1), (h, c)


class LSTM(Module):
    """Stacked, optionally bidirectional LSTM over (B, T, F) inputs."""

    def __init__(self, n_in: int, hidden: int, rng: RngStream, num_layers: int = 2, bidirectional: bool = True):
        self.hidden = hidden
        self.bidirectional = bidirectional
        dirs = 2 if bidirectional else 1
        self.fwd = [LSTMCell(n_in if i == 0 else hidden * dirs, hidden, rng.child(f"fwd{i}")) for i in range(num_layers)]
        self.bwd = (
            [LSTMCell(n_in if i == 0 else hidden * dirs, hidden, rng.child(f"bwd{i}")) for i in range(num_layers)]
            if bidirectional
            else []
        )

    @property
    def output_size(self) -> int:
        return self.hidden * (2 if self.bidirectional else 1)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (sequence output of the last layer, last-moment summary).

        The summary concatenates the forward direction's state after the final
        step with the backward direction's state after it has consumed the
        whole window (which sits at time index 0).
        """
        seq = x
        last = None
        for i in range(len(self.fwd)):
            out_f, (h_f, _) = self.fwd[i].run(seq)
            if self.bidirectional:
                out_b, (h_b, _) = self.bwd[i].run(seq, reverse=True)
                seq = T.concat([out_f, out_b], axis=2)
                last = T.concat([h_f, h_b], axis=1)
            else:
                seq = out_f
                last = h_f
        return seq, last
