"""Central-difference gradient battery over every differentiable piece.

Runs each op, the quaternion score/softmax pipeline, a full encoder layer,
and a tiny end-to-end model in float64 and compares analytic gradients
against central differences.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, SelfAttentionLayer, scaled_attention
from .model import QBNConfig, build_model
from .quaternion import (
    COMPONENTS,
    HAMILTON_TERMS,
    QuaternionFeatureStack,
    quaternion_scores,
    quaternion_softmax,
)
from .tensor import Tensor, gradcheck


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _weighted(rng, shape):
    """A fixed random projection so reductions exercise every element."""
    return np.asarray(rng.standard_normal(shape), dtype=np.float64)


def op_checks(rng: np.random.Generator, tol: float = 1e-3, eps: float = 1e-5):
    """Yield (name, GradCheckResult) for every tensor op."""
    x = _rand(rng, 3, 4)
    y = _rand(rng, 3, 4)
    vec = _rand(rng, 4)
    a = _rand(rng, 3, 4)
    b = _rand(rng, 4, 2)
    wy = _weighted(rng, (3, 4))
    wm = _weighted(rng, (3, 2))

    cases = [
        ("add", lambda u, v: T.reduce_sum(T.mul(Tensor(wy), T.add(u, v))), [x, y]),
        ("add_broadcast", lambda u, v: T.reduce_sum(T.mul(Tensor(wy), T.add(u, v))), [x, vec]),
        ("sub", lambda u, v: T.reduce_sum(T.mul(Tensor(wy), T.sub(u, v))), [x, y]),
        ("mul", lambda u, v: T.reduce_sum(T.mul(Tensor(wy), T.mul(u, v))), [x, y]),
        ("div", lambda u, v: T.reduce_sum(T.mul(Tensor(wy), T.div(u, T.add(T.mul(v, v), 1.0)))), [x, y]),
        ("scale", lambda u: T.reduce_sum(T.mul(Tensor(wy), T.scale(u, -2.5))), [x]),
        ("matmul", lambda u, v: T.reduce_sum(T.mul(Tensor(wm), T.matmul(u, v))), [a, b]),
        ("tanh", lambda u: T.reduce_sum(T.mul(Tensor(wy), T.tanh(u))), [x]),
        ("sigmoid", lambda u: T.reduce_sum(T.mul(Tensor(wy), T.sigmoid(u))), [x]),
        ("relu", lambda u: T.reduce_sum(T.mul(Tensor(wy), T.relu(T.add(u, 0.05)))), [x]),
        ("exp", lambda u: T.reduce_sum(T.mul(Tensor(wy), T.exp(u))), [x]),
        ("log", lambda u: T.reduce_sum(T.mul(Tensor(wy), T.log(T.add(T.mul(u, u), 1.0)))), [x]),
        ("sqrt", lambda u: T.reduce_sum(T.mul(Tensor(wy), T.sqrt(T.add(T.mul(u, u), 1.0)))), [x]),
        ("sum_axis", lambda u: T.reduce_sum(T.mul(Tensor(wy[0]), T.reduce_sum(u, axis=0))), [x]),
        ("mean_axis", lambda u: T.reduce_sum(T.mul(Tensor(wy[:, 0]), T.reduce_mean(u, axis=1))), [x]),
        ("concat", lambda u, v: T.reduce_sum(T.mul(Tensor(np.vstack([wy, wy])), T.concat([u, v], axis=0))), [x, y]),
        ("slice", lambda u: T.reduce_sum(T.mul(Tensor(wy[:, 1:3]), T.tensor_slice(u, 1, 1, 3))), [x]),
        ("reshape", lambda u: T.reduce_sum(T.mul(Tensor(wy.reshape(4, 3)), T.reshape(u, (4, 3)))), [x]),
        ("transpose", lambda u: T.reduce_sum(T.mul(Tensor(wy.T), T.transpose(u, (1, 0)))), [x]),
        ("softmax", lambda u: T.reduce_sum(T.mul(Tensor(wy), T.softmax(u, axis=-1))), [x]),
        ("layer_norm", lambda u, g, bb: T.reduce_sum(T.mul(Tensor(wy), T.layer_norm(u, g, bb))),
         [x, _rand(rng, 4), _rand(rng, 4)]),
    ]

    mask = np.array([[True, True, False, True]] * 3)
    cases.append((
        "masked_softmax",
        lambda u: T.reduce_sum(T.mul(Tensor(wy), T.masked_softmax(u, mask, axis=-1))),
        [x],
    ))
    labels = np.array([0, 2, 1])
    logits = _rand(rng, 3, 4)
    cases.append((
        "cross_entropy",
        lambda u: T.cross_entropy_logits(u, labels),
        [logits],
    ))
    table = _rand(rng, 5, 3)
    ids = np.array([[0, 2], [4, 4]])
    wemb = _weighted(rng, (2, 2, 3))
    cases.append((
        "embedding",
        lambda t: T.reduce_sum(T.mul(Tensor(wemb), T.embedding_lookup(t, ids))),
        [table],
    ))
    seq = _rand(rng, 2, 3, 4)
    wrow = _weighted(rng, (2, 4))
    cases.append((
        "take_rows",
        lambda u: T.reduce_sum(T.mul(Tensor(wrow), T.take_rows(u, np.array([1, 2])))),
        [seq],
    ))
    perm = np.array([[2, 0, 1], [1, 2, 0]])
    wperm = _weighted(rng, (2, 3, 4))
    cases.append((
        "permute_rows",
        lambda u: T.reduce_sum(T.mul(Tensor(wperm), T.permute_rows(u, perm))),
        [seq],
    ))

    for name, fn, inputs in cases:
        yield name, gradcheck(fn, inputs, eps=eps, tol=tol)


def quaternion_pipeline_check(rng: np.random.Generator, tol: float = 1e-3, eps: float = 1e-5):
    """Gradcheck the scores -> softmax pipeline on a small stack pair."""
    shapes = dict(n_q=2, n_k=3, d=4)
    layers = [_rand(rng, 1, shapes["n_q"], shapes["d"]) for _ in range(4)]
    layers += [_rand(rng, 1, shapes["n_k"], shapes["d"]) for _ in range(4)]
    w = _weighted(rng, (1, shapes["n_q"], shapes["n_k"]))

    def fn(*ls):
        v_stack = QuaternionFeatureStack(*ls[:4])
        w_stack = QuaternionFeatureStack(*ls[4:])
        gate = quaternion_softmax(quaternion_scores(v_stack, w_stack))
        total = None
        for name in ("r", "i", "j", "k"):
            term = T.reduce_sum(T.mul(Tensor(w), gate.gate(name)))
            total = term if total is None else T.add(total, term)
        return total

    return gradcheck(fn, layers, eps=eps, tol=tol)


def hamilton_wrapper_check(rng: np.random.Generator, tol: float = 1e-3, eps: float = 1e-5):
    """Gradcheck the pointwise Hamilton product through tensor ops."""
    v = _rand(rng, 4)
    w = _rand(rng, 4)
    coeff = _weighted(rng, (4,))

    def fn(vv, ww):
        parts = {n: T.tensor_slice(vv, 0, i, i + 1) for i, n in enumerate(COMPONENTS)}
        warts = {n: T.tensor_slice(ww, 0, i, i + 1) for i, n in enumerate(COMPONENTS)}
        total = None
        for ci, name in enumerate(COMPONENTS):
            comp = None
            for sign, cv, cw in HAMILTON_TERMS[name]:
                term = T.mul(parts[cv], warts[cw])
                if sign < 0:
                    term = T.scale(term, -1.0)
                comp = term if comp is None else T.add(comp, term)
            comp = T.scale(comp, float(coeff[ci]))
            total = comp if total is None else T.add(total, comp)
        return T.reduce_sum(total)

    return gradcheck(fn, [v, w], eps=eps, tol=tol)


def sa_layer_check(rng: np.random.Generator, tol: float = 1e-2, eps: float = 1e-5):
    """Gradcheck one full encoder layer (params and input) at small dims."""
    cfg = AttentionConfig(model_dim=8, num_heads=2, dropout_rate=0.0)
    layer = SelfAttentionLayer(cfg, rng, dtype=np.float64)
    layer.eval()
    x = _rand(rng, 1, 3, 8)
    params = [p for _, p in layer.named_parameters()]
    w = _weighted(rng, (1, 3, 8))

    def fn(xx, *_params):
        return T.reduce_sum(T.mul(Tensor(w), layer(xx)))

    return gradcheck(fn, [x] + params, eps=eps, tol=tol)


def gated_attention_check(rng: np.random.Generator, tol: float = 1e-3, eps: float = 1e-5):
    """Gradcheck gated scaled attention including the renormalization."""
    q = _rand(rng, 1, 2, 2)
    k = _rand(rng, 1, 3, 2)
    v = _rand(rng, 1, 3, 2)
    gate_logits = _rand(rng, 2, 3)
    w = _weighted(rng, (1, 2, 2))

    def fn(qq, kk, vv, gl):
        gate = T.softmax(gl, axis=-1)
        out = scaled_attention(qq, kk, vv, gate=gate, renormalize_gate=True)
        return T.reduce_sum(T.mul(Tensor(w), out))

    return gradcheck(fn, [q, k, v, gate_logits], eps=eps, tol=tol)


def tiny_model_check(rng: np.random.Generator, tol: float = 1e-2, eps: float = 1e-4):
    """Gradcheck every parameter of a tiny end-to-end model against the loss."""
    cfg = QBNConfig(
        model_dim=8, num_heads=2, num_blocks=1, question_len=3, num_regions=2,
        region_spatial=1, region_channels=8, vocab_size=6, num_answers=3,
        dropout_rate=0.0,
    )
    model = build_model(cfg, seed=3, dtype=np.float64)
    model.eval()
    regions = rng.standard_normal((2, 2, 1, 1, 8))
    tokens = np.array([[1, 2, 0], [3, 4, 5]])
    labels = np.array([0, 2])
    params = [p for _, p in model.named_parameters()]

    def fn(*_params):
        logits = model(regions, tokens)
        return T.cross_entropy_logits(logits, labels)

    return gradcheck(fn, params, eps=eps, tol=tol)


def run_battery(tol: float = None, rng_seed: int = 0):
    """Run everything; yields (name, GradCheckResult)."""
    rng = np.random.default_rng(rng_seed)
    for name, result in op_checks(rng, tol=tol or 1e-3):
        yield f"op/{name}", result
    yield "quaternion/pipeline", quaternion_pipeline_check(rng, tol=tol or 1e-3)
    yield "quaternion/hamilton", hamilton_wrapper_check(rng, tol=tol or 1e-3)
    yield "attention/gated", gated_attention_check(rng, tol=tol or 1e-3)
    yield "attention/sa_layer", sa_layer_check(rng, tol=tol or 1e-2)
    yield "model/tiny", tiny_model_check(rng, tol=tol or 1e-2)
