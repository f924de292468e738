"""Layer primitives built on :mod:`dyntrans.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .rng import RngStream
from .tensor import Tensor, as_tensor, layer_norm, linear, lstm_pointwise, scale_mask, stack


class Module:
    """Parameter container.

    Parameters are discovered from attributes (Tensors that require grad,
    sub-modules, and lists of sub-modules) in definition order. A tensor
    reachable through two paths is reported once, under its first name, so
    shared layers have a single gradient accumulation point.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        yield from self._walk(prefix, seen)

    def _walk(self, prefix, seen):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad and id(val) not in seen:
                    seen.add(id(val))
                    yield name, val
            elif isinstance(val, Module):
                yield from val._walk(name + ".", seen)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item._walk(f"{name}.{i}.", seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: RngStream, bias: bool = True):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = _param(rng.uniform((d_in, d_out), -bound, bound))
        self.bias = _param(np.zeros(d_out)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = _param(np.ones(dim))
        self.beta = _param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: RngStream):
        self.weight = _param(rng.normal((num, dim), 1.0 / math.sqrt(dim)))

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.weight.shape[0]):
            raise ValueError("embedding index out of range")
        return self.weight[ids]


class LSTMCell(Module):
    """Single LSTM layer; gate order is (input, forget, candidate, output)."""

    def __init__(self, d_in: int, d_hidden: int, rng: RngStream):
        bound = 1.0 / math.sqrt(d_hidden)
        self.w_ih = _param(rng.uniform((d_in, 4 * d_hidden), -bound, bound))
        self.w_hh = _param(rng.uniform((d_hidden, 4 * d_hidden), -bound, bound))
        self.bias = _param(np.zeros(4 * d_hidden))
        self.d_in, self.d_hidden = d_in, d_hidden

    def step(self, x, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        return lstm_step(x, state, self)

    def run(self, xs: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, tuple[Tensor, Tensor]]:
        """Unroll over axis -2 of ``xs`` ([..., steps, d_in])."""
        proj = linear(xs, self.w_ih, self.bias)
        h, c = state
        H = self.d_hidden
        outs = []
        for t in range(xs.shape[-2]):
            gates = proj[..., t, :] + h @ self.w_hh
            hc = lstm_pointwise(gates, c)
            h, c = hc[..., :H], hc[..., H:]
            outs.append(h)
        return stack(outs, axis=-2), (h, c)


def lstm_step(x, state: tuple[Tensor, Tensor], params: LSTMCell) -> tuple[Tensor, Tensor]:
    """One LSTM cell update: returns ``(h', c')``."""
    h, c = state
    x = as_tensor(x)
    if x.shape[-1] != params.d_in or h.shape[-1] != params.d_hidden or c.shape[-1] != params.d_hidden:
        raise ValueError("lstm_step: state or input width does not match params")
    gates = linear(x, params.w_ih, params.bias) + as_tensor(h) @ params.w_hh
    hc = lstm_pointwise(gates, c)
    H = params.d_hidden
    return hc[..., :H], hc[..., H:]


def dropout_apply(x, rate: float, rng: RngStream | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = ~rng.bernoulli(rate, x.shape)
    return scale_mask(x, keep, 1.0 / (1.0 - rate))
