"""Parameter containers for the layers MRX uses."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter registry: attributes that are Tensors, Modules or lists of Modules."""

    training = True

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((prefix + name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(f"{prefix}{name}."))
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    out.extend(m.named_parameters(f"{prefix}{name}.{i}."))
        return out

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = []
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                out.append((prefix + name, value))
            elif isinstance(value, Module):
                out.extend(value.named_buffers(f"{prefix}{name}."))
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    out.extend(m.named_buffers(f"{prefix}{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True):
        for m in self._modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def _modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value._modules()
            elif isinstance(value, list):
                for m in value:
                    if isinstance(m, Module):
                        yield from m._modules()


def _uniform(rng, shape, bound, dtype):
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = _uniform(rng, (n_out, n_in), bound, dtype)
        self.bias = _uniform(rng, (n_out,), bound, dtype)

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, features: int, dtype=np.float64, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(features, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(features, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(features, dtype=dtype)
        self.running_var = np.ones(features, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x):
        return T.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps)


class BiLSTMStacks(Module):
    """``stacks`` independent multi-layer BLSTMs evaluated together.

    Each layer maps its input to ``2 * hidden`` features (forward ‖ backward).
    """

    def __init__(self, stacks: int, layers: int, n_in: int, hidden: int, rng: np.random.Generator, dtype=np.float64):
        self.stacks = stacks
        self.w_ih, self.w_hh, self.b = [], [], []
        bound = 1.0 / np.sqrt(hidden)
        for layer in range(layers):
            d = n_in if layer == 0 else 2 * hidden
            self.w_ih.append(_uniform(rng, (stacks, 2, 4 * hidden, d), bound, dtype))
            self.w_hh.append(_uniform(rng, (stacks, 2, 4 * hidden, hidden), bound, dtype))
            b = rng.uniform(-bound, bound, size=(stacks, 2, 4 * hidden)).astype(dtype)
            b[..., hidden : 2 * hidden] = 1.0  # forget gate
            self.b.append(Tensor(b, requires_grad=True))

    def named_parameters(self, prefix: str = ""):
        out = []
        for i, (a, b_, c) in enumerate(zip(self.w_ih, self.w_hh, self.b)):
            out += [(f"{prefix}layer{i}.w_ih", a), (f"{prefix}layer{i}.w_hh", b_), (f"{prefix}layer{i}.b", c)]
        return out

    def __call__(self, x) -> Tensor:
        """``x (B, T, D)`` shared by every stack → ``(stacks, B, T, 2H)``."""
        h = T.stack([x] * self.stacks, axis=0)
        for w_ih, w_hh, b in zip(self.w_ih, self.w_hh, self.b):
            h = T.bilstm_group(h, w_ih, w_hh, b)
        return h
