"""The full fusion network.

Pipeline per forward pass:
  1. embed + LSTM-encode the question; keep per-word states and the state
     at the last real token as the question vector,
  2. scale raw region grids channelwise by factors predicted from the
     question vector, pool spatially, project to the model width,
  3. run each modality through three self-attention encodings, giving a
     four-layer stack (r, i, j, k) per modality,
  4. summarize the text stack (masked mean per layer, four-step GRU),
  5. couple the stacks through the quaternion product into four gates,
  6. update each visual layer by gated cross-attention over the text layer
     plus the broadcast summary,
  7. fuse the four updated layers back into one visual stream, emit the
     deepest text layer for the next block,
  8. after the last block, attention-pool regions with the question vector
     and classify.

Region features carry no positional encoding, so the network is
permutation-equivariant over regions.  Regions are reordered internally to
a content-canonical order (and restored on output) so that equivariance
holds bitwise, not just mathematically; see ``_canonical_region_order``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, MultiHeadAttention, SelfAttentionLayer, scaled_attention
from .errors import ConfigError, ContractError, DimensionError, InputError
from .nn import Dropout, Embedding, FeedForward, GRUCell, LayerNorm, Linear, LSTM, Module, ModuleList
from .quaternion import COMPONENTS, QuaternionFeatureStack, QuaternionGate, quaternion_scores, quaternion_softmax
from .tensor import Tensor


@dataclass
class QBNConfig:
    """Architecture and ablation hyperparameters."""

    model_dim: int = 512
    num_heads: int = 16
    num_blocks: int = 4
    question_len: int = 14
    num_regions: int = 16
    region_spatial: int = 2
    region_channels: int = 64
    vocab_size: int = 32
    num_answers: int = 19
    use_relationship_gate: bool = True
    use_content_learning: bool = True
    gate_renormalize: bool = True
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if self.question_len < 1 or self.num_regions < 1:
            raise ConfigError("question_len and num_regions must be >= 1")
        if self.region_spatial not in (1, 2):
            raise ConfigError(f"region_spatial must be 1 or 2, got {self.region_spatial}")
        if self.vocab_size < 2 or self.num_answers < 2:
            raise ConfigError("vocab_size and num_answers must be >= 2")
        # reuses the divisibility check
        AttentionConfig(self.model_dim, self.num_heads, self.dropout_rate)

    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.model_dim, self.num_heads, self.dropout_rate)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "QBNConfig":
        known = set(QBNConfig.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return QBNConfig(**d)


@dataclass
class QuestionEncoding:
    """Per-word LSTM states plus the question vector (state at last real token)."""

    word_states: Tensor
    question_vector: Tensor
    mask: np.ndarray


@dataclass
class ContentSummary:
    """Masked per-layer means of the text stack and their GRU roll-up."""

    layer_means: dict
    multi_qn: Optional[Tensor]


class QuestionEncoder(Module):
    def __init__(self, cfg: QBNConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.embedding = Embedding(cfg.vocab_size, cfg.model_dim, rng, dtype=dtype)
        self.lstm = LSTM(cfg.model_dim, cfg.model_dim, rng, dtype=dtype)

    def forward(self, tokens: np.ndarray) -> QuestionEncoding:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise DimensionError(f"tokens must be (batch, question_len), got {tokens.shape}")
        if tokens.shape[1] != self.cfg.question_len:
            raise DimensionError(
                f"question length {tokens.shape[1]} != configured {self.cfg.question_len}"
            )
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise InputError(
                f"token ids must lie in [0, {self.cfg.vocab_size}), "
                f"got range [{tokens.min()}, {tokens.max()}]"
            )
        mask = tokens != 0
        states = self.lstm(self.embedding(tokens))
        lengths = mask.sum(axis=1)
        last = np.where(lengths > 0, lengths - 1, self.cfg.question_len - 1)
        q_t = T.take_rows(states, last)
        return QuestionEncoding(word_states=states, question_vector=q_t, mask=mask)

    __call__ = forward


class FilmConditioner(Module):
    """Question-conditioned channel scaling of raw region grids.

    gamma and beta are affine heads over the question vector; every spatial
    cell is mapped to gamma * cell + beta, the cells are average-pooled
    (identity for 1x1 grids), and the result is projected to model_dim.
    """

    def __init__(self, cfg: QBNConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        c = cfg.region_channels
        # conditioning heads start neutral (gamma = 1, beta = 0) so the
        # visual stream is undistorted until the heads learn something
        self.gamma_head = Linear(cfg.model_dim, c, rng, dtype=dtype, zero_init=True, bias_init=1.0)
        self.beta_head = Linear(cfg.model_dim, c, rng, dtype=dtype, zero_init=True)
        self.project = Linear(c, cfg.model_dim, rng, dtype=dtype)

    def scale_grid(self, regions: Tensor, q_t: Tensor) -> Tensor:
        """Channelwise gamma * R + beta on (batch, regions, cells, channels)."""
        if regions.shape[-1] != self.cfg.region_channels:
            raise DimensionError(
                f"region channels {regions.shape[-1]} != configured {self.cfg.region_channels}"
            )
        gamma = self.gamma_head(q_t)
        beta = self.beta_head(q_t)
        b = gamma.shape[0]
        gamma = T.reshape(gamma, (b, 1, 1, self.cfg.region_channels))
        beta = T.reshape(beta, (b, 1, 1, self.cfg.region_channels))
        return T.add(T.mul(gamma, regions), beta)

    def forward(self, regions: Tensor, q_t: Tensor) -> Tensor:
        cells = self.cfg.region_spatial ** 2
        if regions.ndim != 4 or regions.shape[2] != cells:
            raise DimensionError(
                f"regions must be (batch, num_regions, {cells}, channels), got {regions.shape}"
            )
        scaled = self.scale_grid(regions, q_t)
        pooled = T.reduce_mean(scaled, axis=2)
        return self.project(pooled)

    __call__ = forward


class LayerChain(Module):
    """r = x0, i = Sa(r), j = Sa(i), k = Sa(j) with three distinct Sa layers."""

    def __init__(self, cfg: QBNConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        attn = cfg.attention()
        self.sa = ModuleList([SelfAttentionLayer(attn, rng, dtype=dtype) for _ in range(3)])

    def forward(self, x0: Tensor, key_mask: Optional[np.ndarray] = None) -> QuaternionFeatureStack:
        r = x0
        i = self.sa[0](r, key_mask=key_mask)
        j = self.sa[1](i, key_mask=key_mask)
        k = self.sa[2](j, key_mask=key_mask)
        return QuaternionFeatureStack(r=r, i=i, j=j, k=k)

    __call__ = forward


class ContentSummarizer(Module):
    """Masked mean per text layer, rolled up by a four-step GRU in r,i,j,k order."""

    def __init__(self, cfg: QBNConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.gru = GRUCell(cfg.model_dim, cfg.model_dim, rng, dtype=dtype)

    def layer_means(self, stack: QuaternionFeatureStack, word_mask: np.ndarray) -> dict:
        word_mask = np.asarray(word_mask, dtype=bool)
        counts = word_mask.sum(axis=1)
        if (counts == 0).any():
            raise ContractError("content summary requires at least one real token per example")
        weights = (word_mask / counts[:, None]).astype(stack.r.data.dtype)
        weights = Tensor(weights[:, None, :])
        means = {}
        for name in COMPONENTS:
            layer = stack.layer(name)
            pooled = T.matmul(weights, layer)
            means[name] = T.reshape(pooled, (layer.shape[0], layer.shape[2]))
        return means

    def forward(self, stack: QuaternionFeatureStack, word_mask: np.ndarray) -> ContentSummary:
        means = self.layer_means(stack, word_mask)
        batch = stack.r.shape[0]
        h = Tensor(np.zeros((batch, self.cfg.model_dim), dtype=stack.r.data.dtype))
        for name in COMPONENTS:
            h = self.gru.step(means[name], h)
        return ContentSummary(layer_means=means, multi_qn=h)

    __call__ = forward


class QuaternionBlock(Module):
    """One fusion stage: layer chains, content summary, quaternion gates,
    gated co-attention updates, and feed-forward fusion back to one stream."""

    def __init__(self, cfg: QBNConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.visual_chain = LayerChain(cfg, rng, dtype=dtype)
        self.text_chain = LayerChain(cfg, rng, dtype=dtype)
        self.summarizer = ContentSummarizer(cfg, rng, dtype=dtype)
        self.coattention = MultiHeadAttention(cfg.attention(), rng, dtype=dtype)
        self.fuse = Linear(4 * cfg.model_dim, cfg.model_dim, rng, dtype=dtype)
        self.ffn = FeedForward(cfg.model_dim, rng, dtype=dtype)
        self.norm = LayerNorm(cfg.model_dim, dtype=dtype)
        self.drop_co = Dropout(cfg.dropout_rate)
        self.drop_fuse = Dropout(cfg.dropout_rate)

    def content_summary(self, w_stack: QuaternionFeatureStack, word_mask: np.ndarray) -> ContentSummary:
        if self.cfg.use_content_learning:
            return self.summarizer(w_stack, word_mask)
        batch = w_stack.r.shape[0]
        zero = Tensor(np.zeros((batch, self.cfg.model_dim), dtype=w_stack.r.data.dtype))
        return ContentSummary(layer_means={}, multi_qn=zero)

    def relationship_gate(self, v_stack: QuaternionFeatureStack,
                          w_stack: QuaternionFeatureStack,
                          word_mask: np.ndarray) -> Optional[QuaternionGate]:
        if not self.cfg.use_relationship_gate:
            return None
        return quaternion_softmax(quaternion_scores(v_stack, w_stack), key_mask=word_mask)

    def coattention_update(self, v_stack: QuaternionFeatureStack,
                           w_stack: QuaternionFeatureStack,
                           summary: ContentSummary,
                           gate: Optional[QuaternionGate],
                           word_mask: np.ndarray,
                           trace: Optional[dict] = None) -> dict:
        """Per layer x: attend xv over (xw + summary) keys/values, gated by gate_x."""
        mq = summary.multi_qn
        mq3 = T.reshape(mq, (mq.shape[0], 1, mq.shape[1]))
        updates = {}
        for name in COMPONENTS:
            keys = T.add(w_stack.layer(name), mq3)
            layer_trace = {} if trace is not None else None
            updates[name] = self.drop_co(self.coattention(
                v_stack.layer(name), keys, keys,
                gate=gate.gate(name) if gate is not None else None,
                key_mask=word_mask,
                renormalize_gate=self.cfg.gate_renormalize,
                trace=layer_trace,
            ))
            if trace is not None:
                trace.setdefault("coattention", {})[name] = layer_trace["map"]
                if "gated_mass" in layer_trace:
                    trace.setdefault("coattention_mass", {})[name] = layer_trace["gated_mass"]
        return updates

    def forward(self, v_in: Tensor, w_in: Tensor, word_mask: np.ndarray,
                trace: Optional[dict] = None):
        v_stack = self.visual_chain(v_in)
        w_stack = self.text_chain(w_in, key_mask=word_mask)
        summary = self.content_summary(w_stack, word_mask)
        gate = self.relationship_gate(v_stack, w_stack, word_mask)
        if trace is not None and gate is not None:
            trace["gates"] = {name: gate.gate(name).data.copy() for name in COMPONENTS}
        updates = self.coattention_update(v_stack, w_stack, summary, gate, word_mask, trace=trace)
        stacked = T.concat([updates[name] for name in COMPONENTS], axis=-1)
        fused = self.ffn(self.fuse(stacked))
        v_out = self.norm(T.add(v_in, self.drop_fuse(fused)))
        w_out = w_stack.k
        if trace is not None:
            trace["per_region_aggregate"] = _region_aggregate(trace)
        return v_out, w_out

    __call__ = forward


def _region_aggregate(block_trace: dict) -> np.ndarray:
    """Per-region coupling strength: mean gated attention mass each region
    row carries across the four co-attention maps and heads (mass taken
    before renormalization), normalized to sum 1 over regions.  Without a
    gate every row carries mass 1 and the aggregate is uniform."""
    masses = block_trace.get("coattention_mass")
    if masses is None:
        masses = {name: grid.sum(axis=-1) for name, grid in block_trace["coattention"].items()}
    total = None
    for mass in masses.values():
        per_region = mass.mean(axis=1)
        total = per_region if total is None else total + per_region
    return total / total.sum(axis=-1, keepdims=True)


class AnswerClassifier(Module):
    """Attention-pool regions with the question vector, fuse, and score answers."""

    def __init__(self, cfg: QBNConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.pool_q = Linear(d, d, rng, dtype=dtype)
        self.pool_k = Linear(d, d, rng, dtype=dtype)
        # neutral start: fused == pooled until the modulation head trains
        self.fuse_q = Linear(d, d, rng, dtype=dtype, zero_init=True, bias_init=1.0)
        self.hidden = Linear(d, d, rng, dtype=dtype)
        self.out = Linear(d, cfg.num_answers, rng, dtype=dtype, zero_init=True)

    def forward(self, v_final: Tensor, q_t: Tensor, trace: Optional[dict] = None) -> Tensor:
        b, mu, d = v_final.shape
        q = T.reshape(self.pool_q(q_t), (b, 1, 1, d))
        k = T.reshape(self.pool_k(v_final), (b, 1, mu, d))
        v = T.reshape(v_final, (b, 1, mu, d))
        pool_trace = {} if trace is not None else None
        pooled = scaled_attention(q, k, v, trace=pool_trace)
        pooled = T.reshape(pooled, (b, d))
        if trace is not None:
            trace["classifier_pooling"] = pool_trace["map"].reshape(b, mu)
        fused = T.mul(pooled, self.fuse_q(q_t))
        return self.out(T.relu(self.hidden(fused)))

    __call__ = forward


def _canonical_region_order(regions: np.ndarray) -> np.ndarray:
    """Content-determined region permutation, one row per example.

    Regions are ordered lexicographically by their flattened feature bytes;
    identical regions are interchangeable, so ties are harmless.  Running
    the network in this canonical order makes permutation equivariance hold
    bitwise even though float reductions are order-sensitive.
    """
    b, mu = regions.shape[0], regions.shape[1]
    flat = regions.reshape(b, mu, -1)
    perm = np.empty((b, mu), dtype=np.int64)
    for idx in range(b):
        perm[idx] = np.lexsort(flat[idx].T[::-1])
    return perm


class QBNModel(Module):
    """Stacked quaternion fusion blocks over synthetic region grids and
    tokenized questions."""

    def __init__(self, cfg: QBNConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.encoder = QuestionEncoder(cfg, rng, dtype=dtype)
        self.film = FilmConditioner(cfg, rng, dtype=dtype)
        self.word_positions = Tensor(
            0.02 * rng.standard_normal((cfg.question_len, cfg.model_dim)).astype(dtype),
            requires_grad=True,
        )
        self.blocks = ModuleList([QuaternionBlock(cfg, rng, dtype=dtype) for _ in range(cfg.num_blocks)])
        self.classifier = AnswerClassifier(cfg, rng, dtype=dtype)
        self.eval()

    def set_dropout_rng(self, rng: Optional[np.random.Generator]) -> None:
        for mod in self._walk():
            if isinstance(mod, Dropout):
                mod.rng = rng

    def _walk(self):
        stack = [self]
        while stack:
            mod = stack.pop()
            yield mod
            stack.extend(mod._modules.values())

    def _validate_inputs(self, regions: np.ndarray, tokens: np.ndarray):
        cells = self.cfg.region_spatial ** 2
        if regions.ndim == 4 and tokens.ndim == 1:
            regions = regions[None]
            tokens = tokens[None]
            single = True
        else:
            single = False
        if regions.ndim != 5:
            raise DimensionError(
                f"regions must be (batch, regions, s, s, channels), got {regions.shape}"
            )
        b, mu, s1, s2, c = regions.shape
        if (s1, s2) != (self.cfg.region_spatial, self.cfg.region_spatial):
            raise DimensionError(
                f"region grid {s1}x{s2} != configured {self.cfg.region_spatial}x{self.cfg.region_spatial}"
            )
        if mu != self.cfg.num_regions:
            raise DimensionError(f"num_regions {mu} != configured {self.cfg.num_regions}")
        if c != self.cfg.region_channels:
            raise DimensionError(f"region channels {c} != configured {self.cfg.region_channels}")
        flat = regions.reshape(b, mu, cells, c).astype(self.dtype, copy=False)
        return flat, np.asarray(tokens, dtype=np.int64), single

    def forward(self, regions: np.ndarray, tokens: np.ndarray,
                trace: Optional[dict] = None) -> Tensor:
        """Answer logits for raw region grids (batch, mu, s, s, c) and token
        ids (batch, question_len).  Unbatched inputs get a batch axis of 1."""
        flat, tokens, single = self._validate_inputs(np.asarray(regions), np.asarray(tokens))
        b, mu = flat.shape[0], flat.shape[1]

        perm = _canonical_region_order(flat)
        batch_idx = np.arange(b)[:, None]
        canonical = flat[batch_idx, perm]
        inverse = np.argsort(perm, axis=1)

        enc = self.encoder(tokens)
        q_t = enc.question_vector
        w = T.add(enc.word_states, self.word_positions)
        v = self.film(Tensor(canonical), q_t)

        block_traces = [] if trace is not None else None
        for block in self.blocks:
            btrace = {} if trace is not None else None
            v, w = block(v, w, enc.mask, trace=btrace)
            if trace is not None:
                block_traces.append(btrace)

        cls_trace = {} if trace is not None else None
        logits = self.classifier(v, q_t, trace=cls_trace)

        if trace is not None:
            for btrace in block_traces:
                _unpermute_block_trace(btrace, inverse)
            pooling = cls_trace["classifier_pooling"]
            trace["blocks"] = block_traces
            trace["classifier_pooling"] = np.take_along_axis(pooling, inverse, axis=1)
            trace["v_final"] = T.permute_rows(v, inverse).data
            trace["question_mask"] = enc.mask
        if single:
            logits = T.reshape(logits, (self.cfg.num_answers,))
        return logits

    __call__ = forward

    def parameters_dict(self) -> dict:
        return dict(self.named_parameters())


def _unpermute_block_trace(btrace: dict, inverse: np.ndarray) -> None:
    """Restore input region order in every region-indexed trace array."""
    for key in ("gates", "coattention"):
        if key in btrace:
            for name, grid in btrace[key].items():
                if grid.ndim == 4:
                    idx = inverse[:, None, :, None]
                    btrace[key][name] = np.take_along_axis(grid, idx, axis=2)
                else:
                    btrace[key][name] = np.take_along_axis(grid, inverse[:, :, None], axis=1)
    if "per_region_aggregate" in btrace:
        btrace["per_region_aggregate"] = np.take_along_axis(
            btrace["per_region_aggregate"], inverse, axis=1
        )


def build_model(cfg: QBNConfig, seed: int = 0, dtype=np.float32) -> QBNModel:
    return QBNModel(cfg, seed=seed, dtype=dtype)
