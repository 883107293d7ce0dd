"""Scaled dot-product attention, multi-head attention with an optional
multiplicative gate, and the post-norm self-attention encoder layer used to
build the four-layer feature chains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import Dropout, FeedForward, LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass
class AttentionConfig:
    model_dim: int = 512
    num_heads: int = 16
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.model_dim <= 0 or self.num_heads <= 0:
            raise ConfigError("model_dim and num_heads must be positive")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate {self.dropout_rate} outside [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def _ensure_batched(x: Tensor):
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"attention expects (heads, n, d) or (batch, heads, n, d), got {x.shape}")


def scaled_attention(q: Tensor, k: Tensor, v: Tensor,
                     gate: Optional[Tensor] = None,
                     key_mask: Optional[np.ndarray] = None,
                     renormalize_gate: bool = True,
                     trace: Optional[dict] = None) -> Tensor:
    """Attention over stacked heads with an optional multiplicative gate.

    q, k, v: (batch, heads, n, head_dim); a leading batch axis of 1 is added
    for rank-3 inputs.  The attention map is softmax(q k^T / sqrt(head_dim))
    with masked keys excluded.  A gate of shape (batch, n_q, n_k) multiplies
    the map, broadcast over heads; rows are renormalized to sum 1 unless
    ``renormalize_gate`` is off, in which case the literal gated product
    weighs the values.
    """
    q, squeezed = _ensure_batched(q)
    k, _ = _ensure_batched(k)
    v, _ = _ensure_batched(v)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query/key head dims differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key/value lengths differ: {k.shape} vs {v.shape}")
    n_q, n_k = q.shape[-2], k.shape[-2]

    logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(q.shape[-1]))
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool)
        if mask.ndim == 1:
            mask = mask[None, :]
        attn = T.masked_softmax(logits, mask[:, None, None, :], axis=-1)
    else:
        attn = T.softmax(logits, axis=-1)

    if gate is not None:
        if gate.ndim == 2:
            gate = T.reshape(gate, (1,) + gate.shape)
        if gate.shape[-2:] != (n_q, n_k):
            raise DimensionError(
                f"gate shape {gate.shape[-2:]} does not match attention map ({n_q}, {n_k})"
            )
        gate4 = T.reshape(gate, (gate.shape[0], 1, n_q, n_k))
        attn = T.mul(attn, gate4)
        if trace is not None:
            # row mass of the gated map before any renormalization; measures
            # how strongly each query row couples through the gate
            trace["gated_mass"] = attn.data.sum(axis=-1).copy()
        if renormalize_gate:
            attn = T.div(attn, T.reduce_sum(attn, axis=-1, keepdims=True))

    if trace is not None:
        trace["map"] = attn.data.copy()
    out = T.matmul(attn, v)
    if squeezed:
        out = T.reshape(out, out.shape[1:])
    return out


class MultiHeadAttention(Module):
    """Projected multi-head attention: split heads, attend, concat, project."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.w_q = Linear(d, d, rng, dtype=dtype)
        self.w_k = Linear(d, d, rng, dtype=dtype)
        self.w_v = Linear(d, d, rng, dtype=dtype)
        self.w_out = Linear(d, d, rng, dtype=dtype)

    def _split_heads(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        h, hd = self.cfg.num_heads, self.cfg.head_dim
        return T.transpose(T.reshape(x, (b, n, h, hd)), (0, 2, 1, 3))

    def _merge_heads(self, x: Tensor) -> Tensor:
        b, h, n, hd = x.shape
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * hd))

    def forward(self, query: Tensor, key: Tensor, value: Tensor,
                gate: Optional[Tensor] = None,
                key_mask: Optional[np.ndarray] = None,
                renormalize_gate: bool = True,
                trace: Optional[dict] = None) -> Tensor:
        for name, x in (("query", query), ("key", key), ("value", value)):
            if x.shape[-1] != self.cfg.model_dim:
                raise DimensionError(
                    f"{name} channels {x.shape[-1]} != model_dim {self.cfg.model_dim}"
                )
        q = self._split_heads(self.w_q(query))
        k = self._split_heads(self.w_k(key))
        v = self._split_heads(self.w_v(value))
        ctx = scaled_attention(q, k, v, gate=gate, key_mask=key_mask,
                               renormalize_gate=renormalize_gate, trace=trace)
        return self.w_out(self._merge_heads(ctx))

    __call__ = forward


class SelfAttentionLayer(Module):
    """Post-norm transformer encoder layer; the Sa in the layer chains.

    y = LayerNorm(x + Dropout(MHA(x, x, x)))
    out = LayerNorm(y + Dropout(FFN(y)))
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.mha = MultiHeadAttention(cfg, rng, dtype=dtype)
        self.norm_attn = LayerNorm(cfg.model_dim, dtype=dtype)
        self.norm_ffn = LayerNorm(cfg.model_dim, dtype=dtype)
        self.ffn = FeedForward(cfg.model_dim, rng, dtype=dtype)
        self.drop_attn = Dropout(cfg.dropout_rate)
        self.drop_ffn = Dropout(cfg.dropout_rate)

    def forward(self, x: Tensor, key_mask: Optional[np.ndarray] = None) -> Tensor:
        attended = self.mha(x, x, x, key_mask=key_mask)
        y = self.norm_attn(T.add(x, self.drop_attn(attended)))
        out = self.norm_ffn(T.add(y, self.drop_ffn(self.ffn(y))))
        return out

    __call__ = forward
