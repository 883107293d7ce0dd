"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 by default, float64 for gradient
verification) and record the operations that produced them.  Calling
``backward()`` on a scalar result walks the recorded graph in reverse
topological order and accumulates gradients into every ``requires_grad``
leaf.  Gradients are never reset implicitly; call ``zero_grad()``.

Broadcasting follows numpy's trailing-dimension alignment.  Rank is
capped at 4 (batch x heads x sequence x channels), which is all the
model needs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

MAX_RANK = 4
FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A dense array with optional gradient tracking.

    Attributes:
        data: the numpy payload (row-major).
        requires_grad: whether backward() should accumulate into ``grad``.
        grad: same-shape numpy accumulator, or None until first backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = _as_array(data, dtype)
        if arr.ndim > MAX_RANK:
            raise DimensionError(
                f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}"
            )
        if 0 in arr.shape:
            raise DimensionError(f"zero-sized extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    # -- introspection ---------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self._op})"

    # -- gradient machinery ----------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.ndim != 0:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        if not self.requires_grad:
            raise ContractError("backward() on a tensor without requires_grad")
        order = topo_order(self)
        self.grad = np.ones((), dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.dtype != parent.data.dtype:
                    g = g.astype(parent.data.dtype)
                if parent.grad is None:
                    # grads are never mutated in place, so views (including
                    # 0-d and broadcast views) are safe to hold directly
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
            # reverse topological order guarantees this node's gradient is
            # complete, so interior accumulators can be released early
            node.grad = None

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)


def topo_order(root: Tensor) -> list:
    """Topologically ordered operation records reachable from ``root``.

    Parents appear before children; backward walks the reversed list and
    therefore visits every node exactly once.
    """
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data)
    if track:
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _coerce(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcastable"
        ) from None


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, like=a)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, like=a)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, like=a)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return _result(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, like=a)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    b_data = b.data

    def backward(g):
        ga = _unbroadcast(g / b_data, a.shape)
        gb = _unbroadcast(-g * out / b_data, b.shape)
        return ga, gb

    return _result(out, (a, b), backward, "div")


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar (dtype preserving)."""
    c = float(c)
    out = x.data * c

    def backward(g):
        return (g * c,)

    return _result(out, (x,), backward, "scale")


# -- activations ---------------------------------------------------------------


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _result(out, (x,), backward, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), backward, "sigmoid")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward(g):
        return (g * (x.data > 0),)

    return _result(out, (x,), backward, "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _result(out, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _result(out, (x,), backward, "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _result(out, (x,), backward, "sqrt")


# -- matrix product ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy-style stacking on leading axes.

    Gradients follow dA = dC . B^T and dB = A^T . dC, summed over any
    broadcast batch axes.
    """
    a = _coerce(a)
    b = _coerce(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul requires rank >= 2 operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape} vs {b.shape}"
        )
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(
            f"matmul batch axes not broadcastable: {a.shape} vs {b.shape}"
        ) from None
    a_data, b_data = a.data, b.data

    def backward(g):
        ga = np.matmul(g, b_data.swapaxes(-1, -2))
        gb = np.matmul(a_data.swapaxes(-1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward, "matmul")


# -- reductions ------------------------------------------------------------


def _norm_axis(axis, ndim: int, op: str):
    if axis is None:
        return None
    if axis < 0:
        axis += ndim
    if not 0 <= axis < ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, x.ndim, "sum")
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(g.dtype, copy=False),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape),)

    return _result(out, (x,), backward, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, x.ndim, "mean")
    out = x.data.mean(axis=axis, keepdims=keepdims)
    shape = x.shape
    n = x.data.size if axis is None else shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).astype(g.dtype, copy=False),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, shape).astype(g.dtype, copy=False),)

    return _result(out, (x,), backward, "mean")


# -- shape manipulation ------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return _result(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _result(out, (x,), backward, "transpose")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along ``axis``; gradient routes slabs back to inputs."""
    xs = [_coerce(x) for x in xs]
    if not xs:
        raise DimensionError("concat of an empty list")
    axis = _norm_axis(axis, xs[0].ndim, "concat")
    base = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis
        ):
            raise DimensionError(
                f"concat: non-axis extents differ: {xs[0].shape} vs {x.shape}"
            )
    out = np.concatenate([x.data for x in xs], axis=axis)
    sizes = [x.shape[axis] for x in xs]

    def backward(g):
        grads = []
        offset = 0
        for size in sizes:
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + size)
            grads.append(g[tuple(idx)])
            offset += size
        return tuple(grads)

    return _result(out, tuple(xs), backward, "concat")


def tensor_slice(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slab along ``axis``; slice(concat(xs)) recovers xs exactly."""
    axis = _norm_axis(axis, x.ndim, "slice")
    extent = x.shape[axis]
    if not (0 <= start < stop <= extent):
        raise DimensionError(
            f"slice range [{start}:{stop}) invalid for extent {extent}"
        )
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx]
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _result(out, (x,), backward, "slice")


# -- softmax family ------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``."""
    if axis is not None and axis >= x.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for rank {x.ndim}")
    ax = axis if axis >= 0 else x.ndim + axis
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=ax, keepdims=True)
        return (out * (g - dot),)

    return _result(out, (x,), backward, "softmax")


def masked_softmax(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over positions where ``mask`` is True; masked entries get 0.

    Raises ContractError if any row has no unmasked position.
    """
    ax = axis if axis >= 0 else x.ndim + axis
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=ax).all():
        raise ContractError("masked_softmax: a row has every position masked")
    neg = np.where(mask, x.data, -np.inf)
    shifted = neg - neg.max(axis=ax, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    out = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=ax, keepdims=True)
        return (out * (g - dot),)

    return _result(out.astype(x.data.dtype, copy=False), (x,), backward, "masked_softmax")


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of integer ``labels`` against ``logits`` rows."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (batch, classes), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {n}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(n)
    out = np.asarray(-logp[rows, labels].mean(), dtype=z.dtype)

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _result(out, (logits,), backward, "cross_entropy")


# -- gather / scatter ----------------------------------------------------------


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _result(out, (table,), backward, "embedding")


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-example row pick: out[b] = x[b, idx[b]] for x of shape (B, n, d)."""
    if x.ndim != 3:
        raise DimensionError(f"take_rows expects rank 3, got {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    batch = np.arange(x.shape[0])
    out = x.data[batch, idx]
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[batch, idx] = g
        return (full,)

    return _result(out, (x,), backward, "take_rows")


def permute_rows(x: Tensor, perm: np.ndarray) -> Tensor:
    """Per-example row permutation: out[b, i] = x[b, perm[b, i]].

    ``perm`` rows must each be a permutation of range(n); the gradient is
    the inverse permutation (exact, no accumulation).
    """
    if x.ndim != 3:
        raise DimensionError(f"permute_rows expects rank 3, got {x.shape}")
    perm = np.asarray(perm, dtype=np.int64)
    batch = np.arange(x.shape[0])[:, None]
    out = x.data[batch, perm]
    inverse = np.argsort(perm, axis=1)

    def backward(g):
        return (g[batch, inverse],)

    return _result(out, (x,), backward, "permute_rows")


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only in training mode (rate 0 is the identity)."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    factor = 1.0 / (1.0 - rate)
    out = x.data * keep * factor

    def backward(g):
        return (g * keep * factor,)

    return _result(out, (x,), backward, "dropout")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then affine."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm: parameter shapes {gamma.shape}/{beta.shape} do not match "
            f"channels {x.shape[-1]}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data
    g_data = gamma.data

    def backward(g):
        sum_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=sum_axes)
        dbeta = g.sum(axis=sum_axes)
        dxhat = g * g_data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), backward, "layer_norm")


# -- gradient verification -----------------------------------------------------


@dataclass
class GradCheckResult:
    """Per-input relative errors between analytic and central-difference grads."""

    rel_errors: list
    max_rel_err: float
    tol: float
    eps: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return f"gradcheck {status}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e})"


def _eval_scalar(f: Callable, inputs: list) -> Tensor:
    out = f(*inputs)
    if not isinstance(out, Tensor):
        raise ContractError("gradcheck function must return a Tensor")
    if out.ndim != 0:
        out = reduce_sum(out)
    return out


def gradcheck(
    f: Callable,
    inputs,
    eps: float = 1e-4,
    tol: float = 1e-3,
) -> GradCheckResult:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` takes the given tensors and returns a Tensor (non-scalars are
    summed).  ``f`` must be deterministic; this is verified by evaluating
    twice and requiring bit-identical outputs.  Run in float64 for
    meaningful tolerances.
    """
    if eps <= 0:
        raise ContractError("gradcheck eps must be positive")
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for x in inputs:
        if not x.requires_grad:
            raise ContractError("gradcheck inputs must have requires_grad")

    first = _eval_scalar(f, inputs)
    second = _eval_scalar(f, inputs)
    if first.data.tobytes() != second.data.tobytes():
        raise ContractError("gradcheck: function is not deterministic")

    for x in inputs:
        x.zero_grad()
    out = _eval_scalar(f, inputs)
    out.backward()
    analytic = [
        np.zeros_like(x.data) if x.grad is None else np.array(x.grad, copy=True)
        for x in inputs
    ]

    rel_errors = []
    with no_grad():
        for x, a in zip(inputs, analytic):
            numeric = np.zeros_like(x.data)
            flat = x.data.reshape(-1)
            num_flat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = _eval_scalar(f, inputs).item()
                flat[i] = orig - eps
                lo = _eval_scalar(f, inputs).item()
                flat[i] = orig
                num_flat[i] = (hi - lo) / (2.0 * eps)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-10)
            err = np.abs(a - numeric) / denom
            err[(a == 0) & (numeric == 0)] = 0.0
            rel_errors.append(err)

    max_err = max(float(e.max()) for e in rel_errors) if rel_errors else 0.0
    return GradCheckResult(rel_errors=rel_errors, max_rel_err=max_err, tol=tol, eps=eps)
