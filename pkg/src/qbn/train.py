"""Training, evaluation, checkpointing, attention dumps, and the ablation
runner.

Checkpoints use the same binary container as datasets: every parameter,
the optimizer moments, and the JSON-encoded training config (whose hash is
stored alongside and re-verified on load).
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import tensor as T
from .container import bytes_to_record, read_container, record_to_bytes, write_container
from .data import DatasetSpec, TEMPLATE_NAMES, VQADataset, generate, load_features, mix64
from .errors import ConfigError, FormatError, InputError, NonFiniteError
from .model import QBNConfig, QBNModel, build_model
from .tensor import no_grad


# -- optimizer -------------------------------------------------------------


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              step: int, lr: float, beta1: float, beta2: float, eps: float):
    """One bias-corrected update; mutates m, v, and param in place.

    update = lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps), computed
    with a single temporary per parameter.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    denom = v / (1.0 - beta2 ** step)
    np.sqrt(denom, out=denom)
    denom += eps
    np.divide(m, denom, out=denom)
    denom *= lr / (1.0 - beta1 ** step)
    param -= denom


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: Optional[float] = None) -> None:
        self.step_count += 1
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient in parameter '{name}'")
            adam_step(p.data, g, self.m[name], self.v[name],
                      self.step_count, lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_records(self) -> dict:
        records = {f"adam/m/{k}": v for k, v in self.m.items()}
        records.update({f"adam/v/{k}": v for k, v in self.v.items()})
        records["adam/step"] = np.array([self.step_count], dtype=np.float32)
        return records

    def load_state_records(self, records: dict) -> None:
        for k in self.m:
            self.m[k] = records[f"adam/m/{k}"].astype(self.m[k].dtype).reshape(self.m[k].shape)
            self.v[k] = records[f"adam/v/{k}"].astype(self.v[k].dtype).reshape(self.v[k].shape)
        self.step_count = int(records["adam/step"][0])


# -- configuration -----------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 13
    batch_size: int = 32
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_dir: Optional[str] = None
    keep_all_checkpoints: bool = False
    dataset_path: Optional[str] = None
    dataset: Optional[dict] = None
    val_count: Optional[int] = None
    val_fraction: float = 0.1
    warmup_steps: int = 0
    early_stop_val_accuracy: Optional[float] = None
    early_stop_train_accuracy: Optional[float] = None
    eval_every_steps: Optional[int] = None
    quick_eval_size: int = 256
    diagnostic: Optional[dict] = None
    model: QBNConfig = field(default_factory=QBNConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = QBNConfig.from_dict(self.model)
        self.adam_betas = tuple(self.adam_betas)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not (0 < self.adam_betas[0] < 1 and 0 < self.adam_betas[1] < 1):
            raise ConfigError("adam betas must lie in (0, 1)")
        if isinstance(self.dataset, DatasetSpec):
            self.dataset = self.dataset.to_dict()
        elif self.dataset is not None:
            # normalize early so config hashing is stable
            self.dataset = DatasetSpec.from_dict(self.dataset).to_dict()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["model"] = self.model.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = set(TrainConfig.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return TrainConfig(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass
class RunReport:
    config_hash: str
    epochs: list = field(default_factory=list)
    first_losses: list = field(default_factory=list)
    steps: int = 0
    best_val_accuracy: float = 0.0
    train_majority_baseline: float = 0.0
    val_majority_baseline: float = 0.0
    total_seconds: float = 0.0
    stopped_early: bool = False
    final_checkpoint: Optional[str] = None
    best_checkpoint: Optional[str] = None
    attention_agreement: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(path, model: QBNModel, cfg: TrainConfig,
                    optimizer: Optional[Adam] = None) -> None:
    records = {f"param/{k}": p.data for k, p in model.named_parameters()}
    if optimizer is not None:
        records.update(optimizer.state_records())
    cfg_json = json.dumps(cfg.to_dict(), sort_keys=True)
    records["meta/config_json"] = bytes_to_record(cfg_json.encode("utf-8"))
    records["meta/config_hash"] = bytes_to_record(cfg.config_hash().encode("utf-8"))
    write_container(path, records)


def load_checkpoint(path):
    """Rebuild (model, cfg, records).  Verifies the stored config hash."""
    records = read_container(path)
    if "meta/config_json" not in records:
        raise FormatError(f"checkpoint {path} has no embedded config")
    cfg_json = record_to_bytes(records["meta/config_json"]).decode("utf-8")
    cfg = TrainConfig.from_dict(json.loads(cfg_json))
    stored_hash = record_to_bytes(records["meta/config_hash"]).decode("utf-8")
    if stored_hash != cfg.config_hash():
        raise FormatError(
            f"checkpoint {path}: stored config hash {stored_hash[:12]} does not match "
            f"recomputed {cfg.config_hash()[:12]}"
        )
    model = build_model(cfg.model, seed=cfg.seed)
    for name, p in model.named_parameters():
        key = f"param/{name}"
        if key not in records:
            raise FormatError(f"checkpoint {path} is missing parameter '{name}'")
        arr = records[key]
        if arr.shape != p.data.shape:
            raise FormatError(
                f"checkpoint {path}: parameter '{name}' has shape {arr.shape}, "
                f"model expects {p.data.shape}"
            )
        p.data = arr.astype(p.data.dtype)
    return model, cfg, records


def load_optimizer(model: QBNModel, cfg: TrainConfig, records: dict) -> Adam:
    opt = Adam(dict(model.named_parameters()), lr=cfg.learning_rate,
               betas=cfg.adam_betas, eps=cfg.adam_eps)
    if "adam/step" in records:
        opt.load_state_records(records)
    return opt


# -- dataset resolution --------------------------------------------------------


def resolve_dataset(cfg: TrainConfig) -> VQADataset:
    if cfg.dataset_path is not None:
        return load_features(cfg.dataset_path)
    if cfg.dataset is not None:
        return generate(DatasetSpec.from_dict(cfg.dataset))
    raise ConfigError("train config needs either dataset_path or a dataset spec")


def _check_compatible(model_cfg: QBNConfig, dataset: VQADataset) -> None:
    if model_cfg.vocab_size < len(dataset.vocab):
        raise InputError(
            f"model vocab_size {model_cfg.vocab_size} < dataset vocabulary {len(dataset.vocab)}"
        )
    if model_cfg.num_answers != len(dataset.answer_vocab):
        raise InputError(
            f"model num_answers {model_cfg.num_answers} != dataset answers {len(dataset.answer_vocab)}"
        )
    if model_cfg.question_len != dataset.spec.question_len:
        raise InputError(
            f"model question_len {model_cfg.question_len} != dataset {dataset.spec.question_len}"
        )
    if model_cfg.num_regions != dataset.spec.num_regions:
        raise InputError(
            f"model num_regions {model_cfg.num_regions} != dataset {dataset.spec.num_regions}"
        )
    if model_cfg.region_spatial != dataset.spec.region_spatial:
        raise InputError(
            f"model region_spatial {model_cfg.region_spatial} != dataset {dataset.spec.region_spatial}"
        )
    if model_cfg.region_channels != dataset.spec.region_channels:
        raise InputError(
            f"model region_channels {model_cfg.region_channels} != dataset {dataset.spec.region_channels}"
        )


# -- evaluation ------------------------------------------------------------


def evaluate(model: QBNModel, dataset: VQADataset, batch_size: int = 64) -> dict:
    """Top-1 accuracy, overall and per question template."""
    if len(dataset) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    _check_compatible(model.cfg, dataset)
    was_training = model.training
    model.eval()
    correct = np.zeros(len(dataset), dtype=bool)
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            sl = slice(start, min(start + batch_size, len(dataset)))
            logits = model(dataset.regions[sl], dataset.tokens[sl])
            pred = logits.data.argmax(axis=-1)
            correct[sl] = pred == dataset.answers[sl]
    if was_training:
        model.train()
    per_template = {}
    for t, name in enumerate(TEMPLATE_NAMES):
        m = dataset.templates == t
        if m.any():
            per_template[name] = {
                "accuracy": float(correct[m].mean()),
                "count": int(m.sum()),
            }
    return {
        "accuracy": float(correct.mean()),
        "count": len(dataset),
        "per_template": per_template,
    }


def evaluate_checkpoint(ckpt_path, dataset: VQADataset, batch_size: int = 64) -> dict:
    model, _, _ = load_checkpoint(ckpt_path)
    return evaluate(model, dataset, batch_size=batch_size)


# -- training loop -----------------------------------------------------------


def _epoch_checkpoint(cfg: TrainConfig, model, optimizer, epoch: int,
                      previous: Optional[str]) -> Optional[str]:
    if cfg.checkpoint_dir is None:
        return previous
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    path = os.path.join(cfg.checkpoint_dir, f"epoch_{epoch:03d}.qbnt")
    save_checkpoint(path, model, cfg, optimizer)
    if previous and not cfg.keep_all_checkpoints and previous != path:
        if os.path.exists(previous):
            os.remove(previous)
    return path


def train(cfg: TrainConfig, dataset: Optional[VQADataset] = None):
    """Run the training schedule; returns (report, model).

    Writes one checkpoint per finished epoch (pruned to the latest unless
    keep_all_checkpoints), tracks the best validation accuracy, and aborts
    with the last good checkpoint named if the loss goes non-finite.
    """
    start_time = time.time()
    if dataset is None:
        dataset = resolve_dataset(cfg)
    _check_compatible(cfg.model, dataset)
    train_set, val_set = dataset.split(val_count=cfg.val_count, val_fraction=cfg.val_fraction)
    if len(train_set) == 0:
        raise InputError("training split is empty")

    model = build_model(cfg.model, seed=cfg.seed)
    model.train()
    model.set_dropout_rng(np.random.default_rng(mix64(cfg.seed ^ 0xD120)))
    optimizer = Adam(dict(model.named_parameters()), lr=cfg.learning_rate,
                     betas=cfg.adam_betas, eps=cfg.adam_eps)

    report = RunReport(config_hash=cfg.config_hash())
    report.train_majority_baseline = train_set.majority_baseline()
    report.val_majority_baseline = val_set.majority_baseline() if len(val_set) else 0.0

    shuffle_rng = np.random.default_rng(mix64(cfg.seed ^ 0x5F0))
    quick_val = val_set.subset(np.arange(min(cfg.quick_eval_size, len(val_set)))) \
        if len(val_set) else None

    last_checkpoint = None
    best_path = None
    target = cfg.early_stop_val_accuracy

    def full_val_accuracy():
        if len(val_set) == 0:
            return 0.0
        return evaluate(model, val_set, batch_size=max(cfg.batch_size, 64))["accuracy"]

    if cfg.epochs == 0 and cfg.checkpoint_dir is not None:
        last_checkpoint = _epoch_checkpoint(cfg, model, optimizer, 0, None)
        report.final_checkpoint = last_checkpoint

    step = 0
    stop = False
    for epoch in range(cfg.epochs):
        epoch_start = time.time()
        order = shuffle_rng.permutation(len(train_set))
        losses = []
        seen = 0
        hits = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits = model(train_set.regions[idx], train_set.tokens[idx])
            loss = T.cross_entropy_logits(logits, train_set.answers[idx])
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise NonFiniteError(
                    f"loss became non-finite at step {step + 1}; "
                    f"last good checkpoint: {last_checkpoint}"
                )
            optimizer.zero_grad()
            loss.backward()
            step += 1
            lr = cfg.learning_rate
            if cfg.warmup_steps > 0:
                lr *= min(1.0, step / cfg.warmup_steps)
            optimizer.step(lr=lr)
            losses.append(loss_value)
            if len(report.first_losses) < 10:
                report.first_losses.append(loss_value)
            hits += int((logits.data.argmax(axis=-1) == train_set.answers[idx]).sum())
            seen += len(idx)
            if (target is not None and quick_val is not None and cfg.eval_every_steps
                    and step % cfg.eval_every_steps == 0):
                quick = evaluate(model, quick_val, batch_size=max(cfg.batch_size, 64))
                if quick["accuracy"] >= target:
                    val_acc = full_val_accuracy()
                    if val_acc >= target:
                        report.stopped_early = True
                        stop = True
                        break
        val_acc = full_val_accuracy() if not stop else val_acc
        epoch_train_acc = hits / seen if seen else None
        entry = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else None,
            "train_accuracy": epoch_train_acc,
            "val_accuracy": val_acc,
            "seconds": time.time() - epoch_start,
        }
        report.epochs.append(entry)
        last_checkpoint = _epoch_checkpoint(cfg, model, optimizer, epoch, last_checkpoint)
        if val_acc >= report.best_val_accuracy and cfg.checkpoint_dir is not None:
            best_path = os.path.join(cfg.checkpoint_dir, "best.qbnt")
            save_checkpoint(best_path, model, cfg, optimizer)
        report.best_val_accuracy = max(report.best_val_accuracy, val_acc)
        if stop or (target is not None and val_acc >= target):
            report.stopped_early = stop = True
        train_target = cfg.early_stop_train_accuracy
        if (not stop and train_target is not None and epoch_train_acc is not None
                and epoch_train_acc >= train_target):
            # confirm with a clean dropout-free pass before stopping
            clean = evaluate(model, train_set, batch_size=max(cfg.batch_size, 64))
            entry["train_accuracy"] = clean["accuracy"]
            if clean["accuracy"] >= train_target:
                report.stopped_early = stop = True
        if stop:
            break

    report.steps = step
    report.total_seconds = time.time() - start_time
    report.final_checkpoint = last_checkpoint
    report.best_checkpoint = best_path
    if cfg.diagnostic is not None:
        diag = generate(DatasetSpec.from_dict(cfg.diagnostic))
        report.attention_agreement = attention_agreement(model, diag)["agreement"]
    if cfg.checkpoint_dir is not None:
        os.makedirs(cfg.checkpoint_dir, exist_ok=True)
        with open(os.path.join(cfg.checkpoint_dir, "run_report.json"), "w") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    model.eval()
    return report, model


# -- attention dumps -----------------------------------------------------------

ATTENTION_DUMP_SCHEMA = {
    "type": "object",
    "required": ["example_index", "tokens", "question", "answer", "predicted",
                 "attention_target", "blocks", "classifier_pooling", "agreement"],
    "properties": {
        "example_index": {"type": "integer"},
        "tokens": {"type": "array", "items": {"type": "integer"}},
        "question": {"type": "array", "items": {"type": "string"}},
        "answer": {"type": "string"},
        "predicted": {"type": "string"},
        "attention_target": {"type": ["integer", "null"]},
        "agreement": {"type": ["boolean", "null"]},
        "classifier_pooling": {"type": "array", "items": {"type": "number"}},
        "blocks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["gates", "coattention", "per_region_aggregate"],
                "properties": {
                    "gates": {"type": "object"},
                    "coattention": {"type": "object"},
                    "per_region_aggregate": {
                        "type": "array", "items": {"type": "number"}
                    },
                },
            },
        },
    },
}


def _map_to_lists(grid: np.ndarray) -> list:
    """Head-averaged (rows, cols) map as nested lists."""
    if grid.ndim == 4:
        grid = grid.mean(axis=1)
    return [[float(x) for x in row] for row in grid[0]]


def attention_trace(model: QBNModel, dataset: VQADataset, index: int) -> dict:
    if not 0 <= index < len(dataset):
        raise InputError(f"example index {index} out of range [0, {len(dataset)})")
    example = dataset[index]
    trace: dict = {}
    model.eval()
    with no_grad():
        logits = model(example.region_grid[None], example.question_tokens[None], trace=trace)
    predicted = int(logits.data.argmax(axis=-1)[0])
    pooling = trace["classifier_pooling"][0]
    target = example.attention_target
    blocks = []
    for btrace in trace["blocks"]:
        blocks.append({
            "gates": {name: _map_to_lists(grid[:, None])
                      for name, grid in btrace.get("gates", {}).items()},
            "coattention": {name: _map_to_lists(grid)
                            for name, grid in btrace["coattention"].items()},
            "per_region_aggregate": [float(x) for x in btrace["per_region_aggregate"][0]],
        })
    return {
        "example_index": index,
        "tokens": [int(t) for t in example.question_tokens],
        "question": [dataset.vocab[t] for t in example.question_tokens if t != 0],
        "answer": dataset.answer_vocab[example.answer_id],
        "predicted": dataset.answer_vocab[predicted],
        "attention_target": target,
        "agreement": None if target is None else bool(int(pooling.argmax()) == target),
        "classifier_pooling": [float(x) for x in pooling],
        "blocks": blocks,
    }


def dump_attention(model: QBNModel, dataset: VQADataset, index: int, out_path) -> dict:
    payload = attention_trace(model, dataset, index)
    with open(out_path, "w") as fh:
        json.dump(payload, fh, indent=2)
    return payload


def attention_agreement(model: QBNModel, dataset: VQADataset, batch_size: int = 64) -> dict:
    """Fraction of targeted examples whose classifier pooling argmax hits the
    annotated target region."""
    targeted = np.flatnonzero(dataset.targets >= 0)
    if targeted.size == 0:
        raise InputError("dataset has no examples with an attention target")
    model.eval()
    agree = 0
    with no_grad():
        for start in range(0, targeted.size, batch_size):
            idx = targeted[start:start + batch_size]
            trace: dict = {}
            model(dataset.regions[idx], dataset.tokens[idx], trace=trace)
            pred_region = trace["classifier_pooling"].argmax(axis=1)
            agree += int((pred_region == dataset.targets[idx]).sum())
    return {"agreement": agree / targeted.size, "count": int(targeted.size)}


# -- ablation runner -----------------------------------------------------------

HEAD_ARMS = (8, 12, 16)
BLOCK_ARMS = (1, 2, 3, 4)


def _arm_configs(base: TrainConfig):
    def variant(name, **model_overrides):
        model = QBNConfig.from_dict({**base.model.to_dict(), **model_overrides})
        cfg_dict = base.to_dict()
        cfg_dict["model"] = model.to_dict()
        cfg = TrainConfig.from_dict(cfg_dict)
        return name, cfg

    arms = [variant("full")]
    arms.append(variant("no_relationship", use_relationship_gate=False))
    arms.append(variant("no_content", use_content_learning=False))
    arms.append(variant("region_1x1", region_spatial=1))
    for h in HEAD_ARMS:
        arms.append(variant(f"heads_{h}", num_heads=h))
    for b in BLOCK_ARMS:
        arms.append(variant(f"blocks_{b}", num_blocks=b))
    return arms


def run_ablations(base: TrainConfig, out_dir: Optional[str] = None) -> dict:
    """Train every ablation arm on identical data and seed; emit a table.

    The base model_dim must be divisible by every head-count arm so each
    arm changes exactly one variable.
    """
    for h in HEAD_ARMS:
        if base.model.model_dim % h != 0:
            raise ConfigError(
                f"ablations need model_dim divisible by {HEAD_ARMS}, got {base.model.model_dim}"
            )
    if base.dataset is None:
        raise ConfigError("ablation runs require an inline dataset spec")
    out_dir = out_dir or base.checkpoint_dir
    base_spec = DatasetSpec.from_dict(base.dataset)
    datasets = {base_spec.region_spatial: generate(base_spec)}
    if 1 not in datasets:
        # the 1x1 arm consumes the same scenes rendered without spatial cells
        datasets[1] = generate(DatasetSpec.from_dict({**base.dataset, "region_spatial": 1}))

    rows = []
    for name, cfg in _arm_configs(base):
        cfg.checkpoint_dir = None
        arm_started = time.time()
        data = datasets[cfg.model.region_spatial]
        report, model = train(cfg, dataset=data)
        _, val_set = data.split(val_count=cfg.val_count, val_fraction=cfg.val_fraction)
        val = evaluate(model, val_set) if len(val_set) else {"accuracy": float("nan")}
        last = report.epochs[-1] if report.epochs else {}
        rows.append({
            "arm": name,
            "val_accuracy": val["accuracy"],
            "train_accuracy": last.get("train_accuracy"),
            "train_loss": last.get("train_loss"),
            "num_heads": cfg.model.num_heads,
            "num_blocks": cfg.model.num_blocks,
            "region_spatial": cfg.model.region_spatial,
            "use_relationship_gate": cfg.model.use_relationship_gate,
            "use_content_learning": cfg.model.use_content_learning,
            "seconds": time.time() - arm_started,
        })

    table = {"base_config_hash": base.config_hash(), "rows": rows}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation_report.json"), "w") as fh:
            json.dump(table, fh, indent=2, sort_keys=True)
        with open(os.path.join(out_dir, "ablation_report.md"), "w") as fh:
            fh.write(ablation_markdown(table))
    return table


def ablation_markdown(table: dict) -> str:
    lines = [
        "| arm | val acc | train acc | heads | blocks | spatial | gate | content |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for row in table["rows"]:
        train_acc = row["train_accuracy"]
        lines.append(
            "| {arm} | {val:.4f} | {tr} | {heads} | {blocks} | {spatial}x{spatial} | {gate} | {content} |".format(
                arm=row["arm"],
                val=row["val_accuracy"],
                tr="-" if train_acc is None else f"{train_acc:.4f}",
                heads=row["num_heads"],
                blocks=row["num_blocks"],
                spatial=row["region_spatial"],
                gate="on" if row["use_relationship_gate"] else "off",
                content="on" if row["use_content_learning"] else "off",
            )
        )
    return "\n".join(lines) + "\n"
