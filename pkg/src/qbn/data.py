"""Deterministic synthetic VQA task and dataset files.

Scenes place colored/sized shapes into a grid of region slots; questions
are templated over the scene and every answer is uniquely determined by
scene plus question.  Region features encode the attribute triple of each
object as a fixed seeded channel pattern (plus the quadrant signature of
the cell the object occupies when the grid is 2x2) with additive Gaussian
noise.

All randomness comes from a 64-bit counter-based generator (the splitmix64
finalizer over ``base(seed, stream) + index``), so draw i of any stream is
a pure function of (seed, stream, i): datasets are bit-reproducible and
generation parallelizes by example index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import Optional, Tuple

import numpy as np

from .container import bytes_to_record, read_container, record_to_bytes, write_container
from .errors import ConfigError, FormatError, InputError

_M64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

STREAM_PATTERN = 1 << 60
STREAM_NOISE = 1 << 61
_SPLIT_SALT = 0x5B1D_5EED_0F00_D5ED


def mix64(z: int) -> int:
    """splitmix64 finalizer on a 64-bit integer."""
    z = (z + _GAMMA) & _M64
    z = ((z ^ (z >> 30)) * _MIX1) & _M64
    z = ((z ^ (z >> 27)) * _MIX2) & _M64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z + np.uint64(_GAMMA)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def _stream_base(seed: int, stream: int) -> int:
    return mix64((seed & _M64) ^ mix64(stream & _M64))


def counter_u64(seed: int, stream: int, index) -> np.ndarray:
    """Draw ``index`` (scalar or array) of the (seed, stream) output stream."""
    base = np.uint64(_stream_base(seed, stream))
    idx = np.asarray(index, dtype=np.uint64)
    return _mix64_array(base + idx * np.uint64(_GAMMA))


def counter_uniform(seed: int, stream: int, index) -> np.ndarray:
    """Uniform floats in [0, 1) with 53 significant bits."""
    return (counter_u64(seed, stream, index) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def counter_normal(seed: int, stream: int, start: int, count: int) -> np.ndarray:
    """Standard normals via Box-Muller over paired uniform draws."""
    pairs = (count + 1) // 2
    idx = start + np.arange(2 * pairs, dtype=np.uint64)
    u = (counter_u64(seed, stream, idx) >> np.uint64(11)).astype(np.float64)
    u1 = (u[:pairs] + 1.0) * 2.0 ** -53
    u2 = u[pairs:] * 2.0 ** -53
    radius = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(2 * pairs)
    out[0::2] = radius * np.cos(2.0 * np.pi * u2)
    out[1::2] = radius * np.sin(2.0 * np.pi * u2)
    return out[:count]


class CounterRNG:
    """Stateful cursor over one counter stream, for scalar scene draws."""

    def __init__(self, seed: int, stream: int):
        self._base = _stream_base(seed, stream)
        self._cursor = 0

    def u64(self) -> int:
        value = mix64((self._base + (self._cursor + 1) * _GAMMA) & _M64)
        self._cursor += 1
        return value

    def uniform(self) -> float:
        return (self.u64() >> 11) * 2.0 ** -53

    def randint(self, n: int) -> int:
        """Integer in [0, n); modulo bias is negligible for small n."""
        return self.u64() % n

    def randint_range(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        return lo + self.randint(hi - lo + 1)

    def choice(self, seq):
        return seq[self.randint(len(seq))]

    def sample_indices(self, count: int, n: int) -> list:
        """``count`` distinct indices from range(n), partial Fisher-Yates."""
        pool = list(range(n))
        for i in range(count):
            j = i + self.randint(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:count]


# -- task vocabulary -------------------------------------------------------

SHAPES = ("circle", "square", "triangle", "star")
COLORS = ("red", "green", "blue", "yellow", "purple")
SIZES = ("small", "large")
CORNERS = ("top-left", "top-right", "bottom-left", "bottom-right")
COUNT_WORDS = ("zero", "one", "two", "three")

PAD = "<pad>"
VOCAB = (
    PAD, "what", "color", "is", "the", "shape", "object", "objects",
    "how", "many", "are", "there", "a", "which", "corner", "in",
) + SHAPES + COLORS
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}

ANSWERS = COLORS + SHAPES + COUNT_WORDS + ("yes", "no") + CORNERS
ANSWER_TO_ID = {w: i for i, w in enumerate(ANSWERS)}

TEMPLATE_NAMES = ("color", "shape", "count", "exists", "corner")
T_COLOR, T_SHAPE, T_COUNT, T_EXISTS, T_CORNER = range(5)


def default_vocab_size() -> int:
    return len(VOCAB)


def default_num_answers() -> int:
    return len(ANSWERS)


@dataclass
class DatasetSpec:
    """Everything that determines a dataset, bit for bit."""

    seed: int = 0
    num_examples: int = 1000
    num_regions: int = 16
    region_spatial: int = 2
    region_channels: int = 64
    noise_sigma: float = 0.1
    template_weights: Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)
    question_len: int = 14
    min_objects: int = 1
    max_objects: int = 4

    def __post_init__(self):
        if self.num_examples < 0:
            raise ConfigError("num_examples must be >= 0")
        if self.region_spatial not in (1, 2):
            raise ConfigError("region_spatial must be 1 or 2")
        if self.region_channels < 8:
            raise ConfigError("region_channels must be >= 8 for decodable patterns")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")
        if self.max_objects > self.num_regions:
            raise ConfigError(
                f"max_objects {self.max_objects} exceeds num_regions {self.num_regions}: "
                "scenes cannot be placed"
            )
        weights = tuple(float(w) for w in self.template_weights)
        if len(weights) != len(TEMPLATE_NAMES):
            raise ConfigError(f"template_weights needs {len(TEMPLATE_NAMES)} entries")
        if any(w < 0 for w in weights) or sum(weights) <= 0:
            raise ConfigError("template_weights must be non-negative with positive sum")
        self.template_weights = weights
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        longest = 6
        if self.question_len < longest:
            raise ConfigError(f"question_len must be >= {longest} to fit every template")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["template_weights"] = list(self.template_weights)
        return d

    @staticmethod
    def from_dict(d: dict) -> "DatasetSpec":
        known = set(DatasetSpec.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset spec keys: {sorted(unknown)}")
        d = dict(d)
        if "template_weights" in d:
            d["template_weights"] = tuple(d["template_weights"])
        return DatasetSpec(**d)


@dataclass
class SyntheticVQAExample:
    region_grid: np.ndarray
    question_tokens: np.ndarray
    answer_id: int
    attention_target: Optional[int]
    template_id: int
    scene_id: int


def attribute_patterns(spec: DatasetSpec) -> dict:
    """The fixed seeded channel patterns for every attribute value.

    Keys: ("shape", idx), ("color", idx), ("size", idx), ("quadrant", idx).
    """
    c = spec.region_channels
    patterns = {}
    slot = 0
    for kind, values in (("shape", SHAPES), ("color", COLORS),
                         ("size", SIZES), ("quadrant", CORNERS)):
        for idx in range(len(values)):
            vec = counter_normal(spec.seed, STREAM_PATTERN + slot, 0, c)
            patterns[(kind, idx)] = vec
            slot += 1
    return patterns


def _question(template_id: int, shape_idx: int, color_idx: int) -> list:
    shape = SHAPES[shape_idx] if shape_idx is not None else None
    color = COLORS[color_idx] if color_idx is not None else None
    if template_id == T_COLOR:
        words = ["what", "color", "is", "the", shape]
    elif template_id == T_SHAPE:
        words = ["what", "shape", "is", "the", color, "object"]
    elif template_id == T_COUNT:
        words = ["how", "many", shape, "objects", "are", "there"]
    elif template_id == T_EXISTS:
        words = ["is", "there", "a", color, shape]
    elif template_id == T_CORNER:
        words = ["which", "corner", "is", "the", shape, "in"]
    else:
        raise ConfigError(f"unknown template id {template_id}")
    return [WORD_TO_ID[w] for w in words]


def _template_schedule(weights, n: int):
    """Deterministic stride schedule: exact proportions, smooth interleave.

    Returns (template_id, occurrence_index) per example.
    """
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    counts = np.zeros(len(w))
    schedule = np.empty(n, dtype=np.int64)
    occurrence = np.empty(n, dtype=np.int64)
    finish = np.where(w > 0, 1.0 / np.maximum(w, 1e-300), np.inf)
    for i in range(n):
        virtual = np.where(w > 0, (counts + 1.0) * finish, np.inf)
        t = int(np.argmin(virtual))
        schedule[i] = t
        occurrence[i] = counts[t]
        counts[t] += 1
    return schedule, occurrence


def _legal_answers(template_id: int, spec: DatasetSpec) -> list:
    if template_id == T_COLOR:
        return [ANSWER_TO_ID[c] for c in COLORS]
    if template_id == T_SHAPE:
        return [ANSWER_TO_ID[s] for s in SHAPES]
    if template_id == T_COUNT:
        top = min(len(COUNT_WORDS) - 1, spec.max_objects)
        return [ANSWER_TO_ID[COUNT_WORDS[k]] for k in range(top + 1)]
    if template_id == T_EXISTS:
        return [ANSWER_TO_ID["yes"], ANSWER_TO_ID["no"]]
    if template_id == T_CORNER:
        return [ANSWER_TO_ID[c] for c in CORNERS]
    raise ConfigError(f"unknown template id {template_id}")


def _build_scene(template_id: int, answer_id: int, spec: DatasetSpec, rng: CounterRNG):
    """Objects as (shape, color, size, quadrant) tuples plus question slots.

    Returns (objects, target_index, shape_slot, color_slot); target_index
    points into ``objects`` or is None.
    """
    n_total = rng.randint_range(spec.min_objects, spec.max_objects)
    answer = ANSWERS[answer_id]

    def random_distractor(exclude_shape=None, exclude_color=None, exclude_pair=None):
        while True:
            s = rng.randint(len(SHAPES))
            c = rng.randint(len(COLORS))
            if exclude_shape is not None and s == exclude_shape:
                continue
            if exclude_color is not None and c == exclude_color:
                continue
            if exclude_pair is not None and (s, c) == exclude_pair:
                continue
            return (s, c, rng.randint(len(SIZES)), rng.randint(4))

    if template_id == T_COLOR:
        shape = rng.randint(len(SHAPES))
        target = (shape, COLORS.index(answer), rng.randint(len(SIZES)), rng.randint(4))
        objects = [target] + [random_distractor(exclude_shape=shape) for _ in range(n_total - 1)]
        return objects, 0, shape, None
    if template_id == T_SHAPE:
        color = rng.randint(len(COLORS))
        target = (SHAPES.index(answer), color, rng.randint(len(SIZES)), rng.randint(4))
        objects = [target] + [random_distractor(exclude_color=color) for _ in range(n_total - 1)]
        return objects, 0, None, color
    if template_id == T_COUNT:
        shape = rng.randint(len(SHAPES))
        k = COUNT_WORDS.index(answer)
        others = n_total - k
        if others < 0:
            others = 0
        if k + others == 0:
            others = 1
        objects = [
            (shape, rng.randint(len(COLORS)), rng.randint(len(SIZES)), rng.randint(4))
            for _ in range(k)
        ]
        objects += [random_distractor(exclude_shape=shape) for _ in range(others)]
        return objects, None, shape, None
    if template_id == T_EXISTS:
        shape = rng.randint(len(SHAPES))
        color = rng.randint(len(COLORS))
        if answer == "yes":
            target = (shape, color, rng.randint(len(SIZES)), rng.randint(4))
            objects = [target] + [random_distractor() for _ in range(n_total - 1)]
            return objects, 0, shape, color
        objects = [random_distractor(exclude_pair=(shape, color)) for _ in range(n_total)]
        return objects, None, shape, color
    if template_id == T_CORNER:
        shape = rng.randint(len(SHAPES))
        quadrant = CORNERS.index(answer)
        target = (shape, rng.randint(len(COLORS)), rng.randint(len(SIZES)), quadrant)
        objects = [target] + [random_distractor(exclude_shape=shape) for _ in range(n_total - 1)]
        return objects, 0, shape, None
    raise ConfigError(f"unknown template id {template_id}")


def _render_regions(objects, placement, spec: DatasetSpec, patterns: dict) -> np.ndarray:
    """Write object patterns into their region cells (no noise yet).

    The attribute pattern fills every spatial cell of the region; the
    quadrant signature is added only to the cell the object occupies, so
    2x2 grids keep position information through average pooling while 1x1
    grids (no cells to distinguish) carry none.
    """
    s = spec.region_spatial
    grid = np.zeros((spec.num_regions, s, s, spec.region_channels))
    size_scale = {0: 0.75, 1: 1.25}
    for obj, region in zip(objects, placement):
        shape, color, size, quadrant = obj
        pattern = (patterns[("shape", shape)] + patterns[("color", color)]
                   + patterns[("size", size)]) * size_scale[size]
        grid[region, :, :] = pattern
        if s == 2:
            qy, qx = divmod(quadrant, 2)
            grid[region, qy, qx] += patterns[("quadrant", quadrant)]
    return grid


class VQADataset:
    """Columnar store of synthetic examples plus the generating spec."""

    def __init__(self, spec: DatasetSpec, regions, tokens, answers, targets,
                 templates, scene_ids, vocab=VOCAB, answer_vocab=ANSWERS):
        self.spec = spec
        self.regions = np.asarray(regions, dtype=np.float32)
        self.tokens = np.asarray(tokens, dtype=np.int64)
        self.answers = np.asarray(answers, dtype=np.int64)
        self.targets = np.asarray(targets, dtype=np.int64)
        self.templates = np.asarray(templates, dtype=np.int64)
        self.scene_ids = np.asarray(scene_ids, dtype=np.int64)
        self.vocab = tuple(vocab)
        self.answer_vocab = tuple(answer_vocab)

    def __len__(self) -> int:
        return len(self.answers)

    def __getitem__(self, i: int) -> SyntheticVQAExample:
        if not 0 <= i < len(self):
            raise InputError(f"example index {i} out of range [0, {len(self)})")
        target = int(self.targets[i])
        return SyntheticVQAExample(
            region_grid=self.regions[i],
            question_tokens=self.tokens[i],
            answer_id=int(self.answers[i]),
            attention_target=None if target < 0 else target,
            template_id=int(self.templates[i]),
            scene_id=int(self.scene_ids[i]),
        )

    def subset(self, indices) -> "VQADataset":
        idx = np.asarray(indices, dtype=np.int64)
        return VQADataset(self.spec, self.regions[idx], self.tokens[idx],
                          self.answers[idx], self.targets[idx], self.templates[idx],
                          self.scene_ids[idx], self.vocab, self.answer_vocab)

    def split(self, val_count: Optional[int] = None, val_fraction: float = 0.1):
        """Hash-ordered partition by scene id: lowest-ranked ids go to
        validation.  Disjoint by construction for distinct scene ids."""
        n = len(self)
        if val_count is None:
            val_count = int(round(n * val_fraction))
        if not 0 <= val_count <= n:
            raise InputError(f"val_count {val_count} out of range for {n} examples")
        salt = mix64(self.spec.seed ^ _SPLIT_SALT)
        ranks = _mix64_array(self.scene_ids.astype(np.uint64) ^ np.uint64(salt))
        order = np.argsort(ranks, kind="stable")
        val_idx = np.sort(order[:val_count])
        train_idx = np.sort(order[val_count:])
        return self.subset(train_idx), self.subset(val_idx)

    def majority_baseline(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.bincount(self.answers).max() / len(self))

    def answer_distribution(self) -> dict:
        """Per-template answer shares, for balance checks and manifests."""
        dist = {}
        for t, name in enumerate(TEMPLATE_NAMES):
            mask = self.templates == t
            if not mask.any():
                continue
            ids, counts = np.unique(self.answers[mask], return_counts=True)
            dist[name] = {
                self.answer_vocab[i]: int(c) for i, c in zip(ids, counts)
            }
        return dist

    def manifest(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "num_examples": len(self),
            "majority_baseline": self.majority_baseline(),
            "template_counts": {
                TEMPLATE_NAMES[t]: int((self.templates == t).sum())
                for t in range(len(TEMPLATE_NAMES))
            },
            "answer_distribution": self.answer_distribution(),
        }

    def save(self, path) -> None:
        """Write the QBNT container plus a JSON manifest sidecar."""
        meta = {
            "spec": self.spec.to_dict(),
            "vocab": list(self.vocab),
            "answer_vocab": list(self.answer_vocab),
        }
        records = {
            "data/regions": self.regions,
            "data/tokens": self.tokens,
            "data/answers": self.answers,
            "data/targets": self.targets,
            "data/templates": self.templates,
            "data/scene_ids": self.scene_ids,
            "meta/dataset_json": bytes_to_record(
                json.dumps(meta, sort_keys=True).encode("utf-8")
            ),
        }
        write_container(path, records)
        with open(str(path) + ".manifest.json", "w") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)


def generate(spec: DatasetSpec) -> VQADataset:
    """Deterministic dataset for ``spec``; same spec, same bytes."""
    n = spec.num_examples
    s = spec.region_spatial
    mu, c, length = spec.num_regions, spec.region_channels, spec.question_len
    patterns = attribute_patterns(spec)

    regions = np.zeros((n, mu, s, s, c), dtype=np.float32)
    tokens = np.zeros((n, length), dtype=np.int64)
    answers = np.zeros(n, dtype=np.int64)
    targets = np.full(n, -1, dtype=np.int64)
    schedule, occurrence = _template_schedule(spec.template_weights, n)

    cell_count = mu * s * s * c
    for i in range(n):
        template = int(schedule[i])
        legal = _legal_answers(template, spec)
        offset = mix64(spec.seed ^ (template + 101)) % len(legal)
        answer_id = legal[(int(occurrence[i]) + offset) % len(legal)]
        rng = CounterRNG(spec.seed, stream=i)
        objects, target_pos, shape_slot, color_slot = _build_scene(template, answer_id, spec, rng)
        placement = rng.sample_indices(len(objects), mu)
        grid = _render_regions(objects, placement, spec, patterns)
        if spec.noise_sigma > 0:
            noise = counter_normal(spec.seed, STREAM_NOISE + i, 0, cell_count)
            grid = grid + spec.noise_sigma * noise.reshape(mu, s, s, c)
        regions[i] = grid
        words = _question(template, shape_slot, color_slot)
        tokens[i, : len(words)] = words
        answers[i] = answer_id
        if target_pos is not None:
            targets[i] = placement[target_pos]

    templates = schedule
    scene_ids = np.arange(n, dtype=np.int64)
    return VQADataset(spec, regions, tokens, answers, targets, templates, scene_ids)


def load_features(path) -> VQADataset:
    """Load a dataset container written by ``VQADataset.save`` (or an
    external feature extractor following the same schema)."""
    records = read_container(path)
    required = ["data/regions", "data/tokens", "data/answers", "data/targets",
                "data/templates", "data/scene_ids", "meta/dataset_json"]
    missing = [name for name in required if name not in records]
    if missing:
        raise FormatError(f"dataset container is missing records: {missing}")
    meta = json.loads(record_to_bytes(records["meta/dataset_json"]).decode("utf-8"))
    spec = DatasetSpec.from_dict(meta["spec"])
    return VQADataset(
        spec,
        records["data/regions"],
        records["data/tokens"].astype(np.int64),
        records["data/answers"].astype(np.int64),
        records["data/targets"].astype(np.int64),
        records["data/templates"].astype(np.int64),
        records["data/scene_ids"].astype(np.int64),
        vocab=tuple(meta["vocab"]),
        answer_vocab=tuple(meta["answer_vocab"]),
    )
