"""Parameterized layers built on the autodiff tensors.

A Module tracks its parameter tensors and submodules through attribute
assignment, torch-style, so optimizers and checkpoints can address every
parameter by a dotted path.
"""

from __future__ import annotations

from typing import Iterator, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Base class with parameter and submodule registration."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self) -> Iterator[Tensor]:
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for mod in self._modules.values():
            mod.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class ModuleList(Module):
    """Sequence of submodules registered under their index."""

    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for mod in modules:
            self.append(mod)

    def append(self, mod: Module) -> None:
        self._modules[str(len(self._items))] = mod
        self._items.append(mod)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    """Affine map on the trailing axis: y = x W + b."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float32, zero_init: bool = False,
                 bias_init: float = 0.0):
        super().__init__()
        if zero_init:
            w = np.zeros((n_in, n_out), dtype=dtype)
        else:
            w = glorot_uniform(rng, n_in, n_out, dtype=dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = None
        if bias:
            b = np.full(n_out, bias_init, dtype=dtype)
            self.bias = Tensor(b, requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(
                f"linear: input channels {x.shape[-1]} != weight rows {self.weight.shape[0]}"
            )
        if x.ndim > 2:
            lead = x.shape[:-1]
            flat = T.reshape(x, (-1, x.shape[-1]))
            out = T.matmul(flat, self.weight)
            out = T.reshape(out, lead + (self.weight.shape[1],))
        else:
            out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out

    __call__ = forward


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)

    __call__ = forward


class Embedding(Module):
    """Learned id-to-vector table; hook point for externally trained vectors."""

    def __init__(self, num_embeddings: int, dim: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.num_embeddings = num_embeddings
        table = glorot_uniform(rng, num_embeddings, dim, dtype=dtype)
        self.weight = Tensor(table, requires_grad=True)

    def forward(self, ids: np.ndarray) -> Tensor:
        return T.embedding_lookup(self.weight, ids)

    def load_vectors(self, vectors: np.ndarray) -> None:
        if vectors.shape != self.weight.shape:
            raise DimensionError(
                f"embedding file shape {vectors.shape} != table shape {self.weight.shape}"
            )
        self.weight.data = vectors.astype(self.weight.data.dtype)

    __call__ = forward


class Dropout(Module):
    """Inverted dropout driven by an externally seeded generator."""

    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate
        self.rng: Optional[np.random.Generator] = None

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.rate <= 0.0 or self.rng is None:
            return x
        return T.dropout(x, self.rate, self.rng)

    __call__ = forward


class FeedForward(Module):
    """Position-wise expansion MLP: Linear -> ReLU -> Linear."""

    def __init__(self, dim: int, rng: np.random.Generator, hidden: Optional[int] = None,
                 dtype=np.float32):
        super().__init__()
        hidden = hidden or 4 * dim
        self.up = Linear(dim, hidden, rng, dtype=dtype)
        self.down = Linear(hidden, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(T.relu(self.up(x)))

    __call__ = forward


class LSTM(Module):
    """Single-layer LSTM over a fixed-length sequence (batch, steps, channels)."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.w_x = Tensor(glorot_uniform(rng, input_dim, 4 * hidden_dim, dtype=dtype), requires_grad=True)
        self.w_h = Tensor(glorot_uniform(rng, hidden_dim, 4 * hidden_dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(4 * hidden_dim, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        """Return the full hidden-state sequence (batch, steps, hidden)."""
        batch, steps, _ = x.shape
        h_dim = self.hidden_dim
        dtype = self.w_x.data.dtype
        h = Tensor(np.zeros((batch, h_dim), dtype=dtype))
        c = Tensor(np.zeros((batch, h_dim), dtype=dtype))
        xw = self.time_major_gates(x)
        states = []
        for t in range(steps):
            gates = T.add(T.add(xw[t], T.matmul(h, self.w_h)), self.bias)
            i = T.sigmoid(T.tensor_slice(gates, 1, 0, h_dim))
            f = T.sigmoid(T.tensor_slice(gates, 1, h_dim, 2 * h_dim))
            g = T.tanh(T.tensor_slice(gates, 1, 2 * h_dim, 3 * h_dim))
            o = T.sigmoid(T.tensor_slice(gates, 1, 3 * h_dim, 4 * h_dim))
            c = T.add(T.mul(f, c), T.mul(i, g))
            h = T.mul(o, T.tanh(c))
            states.append(T.reshape(h, (batch, 1, h_dim)))
        return T.concat(states, axis=1)

    def time_major_gates(self, x: Tensor):
        """Precompute x_t W_x for every step with one large product."""
        batch, steps, _ = x.shape
        flat = T.reshape(x, (batch * steps, x.shape[-1]))
        proj = T.matmul(flat, self.w_x)
        proj = T.reshape(proj, (batch, steps, 4 * self.hidden_dim))
        return [
            T.reshape(T.tensor_slice(proj, 1, t, t + 1), (batch, 4 * self.hidden_dim))
            for t in range(steps)
        ]

    __call__ = forward


class GRUCell(Module):
    """Gated recurrent cell used to roll up a handful of summary steps."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.w_x = Tensor(glorot_uniform(rng, input_dim, 3 * hidden_dim, dtype=dtype), requires_grad=True)
        self.w_h = Tensor(glorot_uniform(rng, hidden_dim, 3 * hidden_dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(3 * hidden_dim, dtype=dtype), requires_grad=True)

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        d = self.hidden_dim
        xg = T.add(T.matmul(x, self.w_x), self.bias)
        hg = T.matmul(h, self.w_h)
        r = T.sigmoid(T.add(T.tensor_slice(xg, 1, 0, d), T.tensor_slice(hg, 1, 0, d)))
        z = T.sigmoid(T.add(T.tensor_slice(xg, 1, d, 2 * d), T.tensor_slice(hg, 1, d, 2 * d)))
        n = T.tanh(T.add(T.tensor_slice(xg, 1, 2 * d, 3 * d),
                         T.mul(r, T.tensor_slice(hg, 1, 2 * d, 3 * d))))
        one_minus_z = T.add(T.scale(z, -1.0), 1.0)
        return T.add(T.mul(one_minus_z, n), T.mul(z, h))
