"""Quaternion-gated multimodal fusion blocks for toy visual question
answering, built on a minimal numpy autodiff core."""

from .attention import AttentionConfig, MultiHeadAttention, SelfAttentionLayer, scaled_attention
from .data import DatasetSpec, SyntheticVQAExample, VQADataset, generate, load_features
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    InputError,
    NonFiniteError,
    QBNError,
)
from .estimator import QBNClassifier
from .model import QBNConfig, QBNModel, build_model
from .quaternion import (
    QuaternionFeatureStack,
    QuaternionGate,
    hamilton_product,
    quaternion_scores,
    quaternion_softmax,
)
from .tensor import Tensor, gradcheck, no_grad
from .train import (
    Adam,
    RunReport,
    TrainConfig,
    attention_agreement,
    dump_attention,
    evaluate,
    load_checkpoint,
    run_ablations,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "MultiHeadAttention", "SelfAttentionLayer", "scaled_attention",
    "DatasetSpec", "SyntheticVQAExample", "VQADataset", "generate", "load_features",
    "ConfigError", "ContractError", "DimensionError", "FormatError", "InputError",
    "NonFiniteError", "QBNError",
    "QBNClassifier",
    "QBNConfig", "QBNModel", "build_model",
    "QuaternionFeatureStack", "QuaternionGate", "hamilton_product",
    "quaternion_scores", "quaternion_softmax",
    "Tensor", "gradcheck", "no_grad",
    "Adam", "RunReport", "TrainConfig", "attention_agreement", "dump_attention",
    "evaluate", "load_checkpoint", "run_ablations", "save_checkpoint", "train",
]
