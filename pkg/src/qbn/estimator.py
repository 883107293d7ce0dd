"""Scikit-learn style front end.

QBNClassifier wraps model construction and the training loop behind the
usual fit/predict/score surface so the network slots into pipelines,
grid searches, and cross-validation drivers.  Inputs are multimodal, so X
is either a VQADataset or a (region_grids, question_tokens) pair of
arrays; y is the integer answer ids (taken from the dataset when omitted).
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from . import tensor as T
from .data import VQADataset, default_num_answers, default_vocab_size
from .errors import DimensionError, InputError
from .model import QBNConfig, build_model
from .tensor import no_grad
from .train import Adam, TrainConfig, train


def check_inputs(X, y=None) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Validate and normalize X into (regions, tokens, answers)."""
    if isinstance(X, VQADataset):
        answers = X.answers if y is None else np.asarray(y, dtype=np.int64)
        return X.regions, X.tokens, answers
    if isinstance(X, (tuple, list)) and len(X) == 2:
        regions = np.asarray(X[0], dtype=np.float32)
        tokens = np.asarray(X[1], dtype=np.int64)
    else:
        raise InputError(
            "X must be a VQADataset or a (region_grids, question_tokens) pair"
        )
    if regions.ndim != 5:
        raise DimensionError(
            f"region grids must be (n, regions, s, s, channels), got {regions.shape}"
        )
    if tokens.ndim != 2 or tokens.shape[0] != regions.shape[0]:
        raise DimensionError(
            f"tokens must be (n, question_len) aligned with regions, got {tokens.shape}"
        )
    answers = None if y is None else np.asarray(y, dtype=np.int64)
    if answers is not None and answers.shape != (regions.shape[0],):
        raise DimensionError(f"y shape {answers.shape} does not match n={regions.shape[0]}")
    return regions, tokens, answers


class QBNClassifier(BaseEstimator, ClassifierMixin):
    """Quaternion-block fusion classifier with an sklearn estimator surface.

    Defaults are desk-scale; raise model_dim/num_blocks for capacity.
    """

    def __init__(self, model_dim=64, num_heads=4, num_blocks=2, question_len=14,
                 num_regions=16, region_spatial=2, region_channels=64,
                 vocab_size=None, num_answers=None,
                 use_relationship_gate=True, use_content_learning=True,
                 gate_renormalize=True, dropout_rate=0.1,
                 learning_rate=1e-4, epochs=13, batch_size=32, seed=0):
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.num_blocks = num_blocks
        self.question_len = question_len
        self.num_regions = num_regions
        self.region_spatial = region_spatial
        self.region_channels = region_channels
        self.vocab_size = vocab_size
        self.num_answers = num_answers
        self.use_relationship_gate = use_relationship_gate
        self.use_content_learning = use_content_learning
        self.gate_renormalize = gate_renormalize
        self.dropout_rate = dropout_rate
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def _model_config(self, tokens, answers) -> QBNConfig:
        vocab_size = self.vocab_size or max(default_vocab_size(), int(tokens.max()) + 1)
        num_answers = self.num_answers or max(default_num_answers(), int(answers.max()) + 1)
        return QBNConfig(
            model_dim=self.model_dim, num_heads=self.num_heads,
            num_blocks=self.num_blocks, question_len=self.question_len,
            num_regions=self.num_regions, region_spatial=self.region_spatial,
            region_channels=self.region_channels, vocab_size=vocab_size,
            num_answers=num_answers,
            use_relationship_gate=self.use_relationship_gate,
            use_content_learning=self.use_content_learning,
            gate_renormalize=self.gate_renormalize,
            dropout_rate=self.dropout_rate,
        )

    def fit(self, X, y=None):
        if isinstance(X, VQADataset) and y is None:
            cfg = TrainConfig(
                learning_rate=self.learning_rate, epochs=self.epochs,
                batch_size=self.batch_size, seed=self.seed,
                val_fraction=0.0,
                model=self._model_config(X.tokens, X.answers),
            )
            report, model = train(cfg, dataset=X)
            self.model_ = model
            self.history_ = report.to_dict()
            self.classes_ = np.arange(model.cfg.num_answers)
            return self
        regions, tokens, answers = check_inputs(X, y)
        if answers is None:
            raise InputError("fit requires answer labels")
        model_cfg = self._model_config(tokens, answers)
        model = build_model(model_cfg, seed=self.seed)
        model.train()
        model.set_dropout_rng(np.random.default_rng(self.seed + 1))
        optimizer = Adam(dict(model.named_parameters()), lr=self.learning_rate)
        rng = np.random.default_rng(self.seed)
        losses = []
        for _ in range(self.epochs):
            order = rng.permutation(len(answers))
            for start in range(0, len(order), self.batch_size):
                idx = order[start:start + self.batch_size]
                logits = model(regions[idx], tokens[idx])
                loss = T.cross_entropy_logits(logits, answers[idx])
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                losses.append(loss.item())
        model.eval()
        self.model_ = model
        self.history_ = {"losses": losses}
        self.classes_ = np.arange(model_cfg.num_answers)
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this QBNClassifier instance is not fitted yet")

    def decision_function(self, X) -> np.ndarray:
        self._require_fitted()
        regions, tokens, _ = check_inputs(X)
        outputs = []
        with no_grad():
            for start in range(0, len(tokens), self.batch_size):
                sl = slice(start, start + self.batch_size)
                logits = self.model_(regions[sl], tokens[sl])
                outputs.append(logits.data)
        return np.concatenate(outputs, axis=0)

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X).argmax(axis=-1)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    def score(self, X, y=None) -> float:
        _, _, answers = check_inputs(X, y)
        if answers is None:
            raise InputError("score requires answer labels")
        return float((self.predict(X) == answers).mean())
