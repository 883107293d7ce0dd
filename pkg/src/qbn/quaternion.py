"""Quaternion coupling of four-layer feature stacks.

The four layers of one modality (the raw features plus three successive
self-attention encodings) are treated as the components (r, i, j, k) of a
quaternion.  Crossing two such stacks with the Hamilton product yields four
signed combinations of pairwise similarity maps; softmax-normalizing those
along the key axis gives one attention gate per layer.

For matrix-valued layers, each pairwise product xv * yw is realized as the
scaled similarity map xv . yw^T / sqrt(d), so every score has the shape of
the cross-attention map it will gate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

# Sign/operand layout of the Hamilton product with the v operand on the left:
# each output component is a signed sum of four (v-component, w-component)
# products.  Tuples are (sign, v_component, w_component).
HAMILTON_TERMS = {
    "r": ((+1, "r", "r"), (-1, "i", "i"), (-1, "j", "j"), (-1, "k", "k")),
    "i": ((+1, "i", "r"), (+1, "r", "i"), (-1, "k", "j"), (+1, "j", "k")),
    "j": ((+1, "j", "r"), (+1, "k", "i"), (+1, "r", "j"), (-1, "i", "k")),
    "k": ((+1, "k", "r"), (-1, "j", "i"), (+1, "i", "j"), (+1, "r", "k")),
}

COMPONENTS = ("r", "i", "j", "k")


def hamilton_product(v, w):
    """Hamilton product of two quaternions given as (r, i, j, k) scalars.

    Works elementwise on numpy arrays as well.  The first argument is the
    left operand: hamilton_product((0,1,0,0), (0,0,1,0)) == (0,0,0,1),
    i.e. i x j = k.
    """
    rv, iv, jv, kv = v
    rw, iw, jw, kw = w
    comp = {"r": rv, "i": iv, "j": jv, "k": kv}
    wmp = {"r": rw, "i": iw, "j": jw, "k": kw}
    out = []
    for name in COMPONENTS:
        total = 0.0
        for sign, cv, cw in HAMILTON_TERMS[name]:
            total = total + sign * comp[cv] * wmp[cw]
        out.append(total)
    return tuple(out)


@dataclass
class QuaternionFeatureStack:
    """Four equally shaped feature layers of one modality."""

    r: Tensor
    i: Tensor
    j: Tensor
    k: Tensor

    def __post_init__(self):
        shapes = {layer.shape for layer in self.layers()}
        if len(shapes) != 1:
            raise DimensionError(f"stack layers disagree in shape: {sorted(shapes)}")

    def layers(self):
        return (self.r, self.i, self.j, self.k)

    def layer(self, name: str) -> Tensor:
        return getattr(self, name)

    @property
    def channels(self) -> int:
        return self.r.shape[-1]


@dataclass
class QuaternionGate:
    """Four score maps and, after normalization, four row-stochastic gates."""

    scores: dict
    gates: Optional[dict] = None

    def score(self, name: str) -> Tensor:
        return self.scores[name]

    def gate(self, name: str) -> Tensor:
        if self.gates is None:
            raise ContractError("gates requested before quaternion_softmax")
        return self.gates[name]


def _similarity(a: Tensor, b: Tensor, inv_sqrt_d: float) -> Tensor:
    """Scaled similarity map a . b^T / sqrt(d) on (batch, n, d) stacks."""
    bt = T.transpose(b, (0, 2, 1))
    return T.scale(T.matmul(a, bt), inv_sqrt_d)


def quaternion_scores(v_stack: QuaternionFeatureStack,
                      w_stack: QuaternionFeatureStack) -> QuaternionGate:
    """Signed similarity combinations between two stacks.

    ``v_stack`` rows are queries (rows of each score map), ``w_stack`` rows
    are keys (columns).  Both must be (batch, n, d) with a common channel
    count d; per-pair terms are scaled by 1/sqrt(d) before the signed sum.
    """
    if v_stack.channels != w_stack.channels:
        raise DimensionError(
            f"channel mismatch between stacks: {v_stack.channels} vs {w_stack.channels}"
        )
    inv = 1.0 / math.sqrt(v_stack.channels)
    sims = {}
    for cv in COMPONENTS:
        for cw in COMPONENTS:
            sims[(cv, cw)] = _similarity(v_stack.layer(cv), w_stack.layer(cw), inv)
    scores = {}
    for name in COMPONENTS:
        total = None
        for sign, cv, cw in HAMILTON_TERMS[name]:
            term = sims[(cv, cw)] if sign > 0 else T.scale(sims[(cv, cw)], -1.0)
            total = term if total is None else T.add(total, term)
        scores[name] = total
    return QuaternionGate(scores=scores)


def quaternion_softmax(gate: QuaternionGate,
                       key_mask: Optional[np.ndarray] = None) -> QuaternionGate:
    """Normalize each score map along the key axis, independently per map.

    ``key_mask`` (batch, n_k) restricts the normalization to real key
    positions so the gates stay row-stochastic over them.
    """
    gates = {}
    for name in COMPONENTS:
        score = gate.scores[name]
        if key_mask is None:
            gates[name] = T.softmax(score, axis=-1)
        else:
            mask = np.asarray(key_mask, dtype=bool)[:, None, :]
            gates[name] = T.masked_softmax(score, mask, axis=-1)
    return QuaternionGate(scores=gate.scores, gates=gates)
