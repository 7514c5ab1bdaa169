"""Small layer library on top of the tape: linear, layer norm, attention, ViT blocks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from ..errors import ConfigError, DimensionError
from . import ops
from .tensor import Tensor


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Tracks parameters (trainable tensors) and child modules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._children[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise DimensionError(f"state is missing parameters: {missing}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = parameter(rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = parameter(np.ones(d))
        self.bias = parameter(np.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(..., T, d) -> (..., heads, T, d/heads)."""
    *lead, T, d = x.shape
    x = ops.reshape(x, (*lead, T, n_heads, d // n_heads))
    k = len(lead)
    return ops.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))


def merge_heads(x: Tensor) -> Tensor:
    """(..., heads, T, dh) -> (..., T, heads*dh)."""
    *lead, h, T, dh = x.shape
    k = len(lead)
    x = ops.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))
    return ops.reshape(x, (*lead, T, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the second-to-last axis of k/v."""
    scores = ops.mul(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    weights = ops.softmax(scores, axis=-1)
    return ops.matmul(weights, v), weights


class MultiHeadAttention(Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        if d % n_heads:
            raise ConfigError(f"model width {d} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q = Linear(d, d, rng, bias)
        self.k = Linear(d, d, rng, bias)
        self.v = Linear(d, d, rng, bias)
        self.o = Linear(d, d, rng, bias)

    def forward(self, x_q: Tensor, x_kv: Tensor | None = None) -> Tensor:
        x_kv = x_q if x_kv is None else x_kv
        q = split_heads(self.q(x_q), self.n_heads)
        k = split_heads(self.k(x_kv), self.n_heads)
        v = split_heads(self.v(x_kv), self.n_heads)
        out, _ = attention(q, k, v)
        return self.o(merge_heads(out))


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm encoder block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, rng)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d, mlp_ratio * d, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = ops.add(x, self.attn(self.ln1(x)))
        return ops.add(x, self.ffn(self.ln2(x)))
