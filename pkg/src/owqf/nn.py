"""Parameter containers and an Adam optimizer on top of :mod:`owqf.tensor`."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, layernorm, linear, multi_head_attention, relu


class Module:
    """Attribute-registered parameter tree.

    Any attribute holding a :class:`Tensor` is a parameter; attributes holding a
    :class:`Module` or a list of them are walked recursively, in assignment
    order, so parameter names are stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield from m.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for n, p in params.items():
            if state[n].shape != p.shape:
                raise ValueError(f"{n}: shape {state[n].shape} != {p.shape}")
            p.data = np.array(state[n], dtype=np.float64)

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> Tensor:
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return param(rng.uniform(-bound, bound, size=(fan_in, fan_out)))


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, zero: bool = False):
        self.weight = param(np.zeros((d_in, d_out))) if zero else xavier(rng, d_in, d_out)
        self.bias = param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = param(np.ones(d))
        self.bias = param(np.zeros(d))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gain, self.bias, self._eps)


class MLP(Module):
    """Two-layer ReLU perceptron; ``zero_last`` zero-initializes the output layer."""

    def __init__(self, rng, d_in: int, d_hidden: int, d_out: int, zero_last: bool = False):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out, zero=zero_last)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))


class Attention(Module):
    def __init__(self, rng, d: int, heads: int):
        self.wq, self.bq = xavier(rng, d, d), param(np.zeros(d))
        self.wk, self.bk = xavier(rng, d, d), param(np.zeros(d))
        self.wv, self.bv = xavier(rng, d, d), param(np.zeros(d))
        self.wo, self.bo = xavier(rng, d, d), param(np.zeros(d))
        self._heads = heads

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
        return multi_head_attention(q, k, v, self._heads, mask, self)


class Adam:
    """Adam over the parameters that currently require gradients."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = 1.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        grads = [p.grad if (p.requires_grad and p.grad is not None) else None for p in self.params]
        if self.clip_norm is not None:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads if g is not None))
            if total > self.clip_norm:
                scale = self.clip_norm / total
                grads = [None if g is None else g * scale for g in grads]
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
