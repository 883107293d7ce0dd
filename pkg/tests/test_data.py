"""Synthetic task generator, counter PRNG, and the container format."""

import json
import os

import numpy as np
import pytest

from qbn.container import bytes_to_record, read_container, record_to_bytes, write_container
from qbn.data import (
    ANSWERS,
    COLORS,
    CORNERS,
    COUNT_WORDS,
    CounterRNG,
    DatasetSpec,
    SHAPES,
    SIZES,
    TEMPLATE_NAMES,
    VOCAB,
    attribute_patterns,
    counter_normal,
    counter_u64,
    counter_uniform,
    generate,
    load_features,
    mix64,
)
from qbn.errors import ConfigError, FormatError, InputError


class TestCounterRNG:
    def test_scalar_and_vector_paths_agree(self):
        idx = np.arange(1, 11, dtype=np.uint64)
        vec = counter_u64(seed=42, stream=7, index=idx)
        rng = CounterRNG(seed=42, stream=7)
        scalars = [rng.u64() for _ in range(10)]
        assert [int(v) for v in vec] == scalars

    def test_pure_function_of_counter(self):
        a = counter_u64(5, 1, np.arange(100, dtype=np.uint64))
        b = counter_u64(5, 1, np.arange(100, dtype=np.uint64))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, counter_u64(6, 1, np.arange(100, dtype=np.uint64)))
        assert not np.array_equal(a, counter_u64(5, 2, np.arange(100, dtype=np.uint64)))

    def test_uniform_range_and_moments(self):
        u = counter_uniform(0, 3, np.arange(200_000, dtype=np.uint64))
        assert (u >= 0).all() and (u < 1).all()
        assert abs(u.mean() - 0.5) < 0.005

    def test_normal_moments(self):
        z = counter_normal(0, 9, 0, 200_000)
        assert abs(z.mean()) < 0.01
        assert abs(z.std() - 1.0) < 0.01

    def test_mix64_is_bijective_sample(self):
        xs = [0, 1, 2, 2 ** 63, 2 ** 64 - 1]
        assert len({mix64(x) for x in xs}) == len(xs)

    def test_sample_indices_distinct(self):
        rng = CounterRNG(1, 2)
        picked = rng.sample_indices(5, 16)
        assert len(set(picked)) == 5
        assert all(0 <= p < 16 for p in picked)


class TestContainer:
    def test_roundtrip(self, tmp_path, rng):
        path = tmp_path / "t.qbnt"
        records = {
            "a/x": rng.standard_normal((2, 3)).astype(np.float32),
            "b": np.arange(5, dtype=np.float32),
            "scalar": np.float32(4.0),
        }
        write_container(path, records)
        back = read_container(path)
        assert set(back) == set(records)
        for k in records:
            assert np.array_equal(back[k], np.asarray(records[k], dtype=np.float32))

    def test_bad_magic_names_offset(self, tmp_path):
        path = tmp_path / "bad.qbnt"
        path.write_bytes(b"NOPE" + b"\x00" * 10)
        with pytest.raises(FormatError, match="offset 0"):
            read_container(path)

    def test_truncated_payload_names_offset(self, tmp_path, rng):
        path = tmp_path / "t.qbnt"
        write_container(path, {"x": rng.standard_normal((4, 4)).astype(np.float32)})
        blob = path.read_bytes()
        cut = path.with_suffix(".cut")
        cut.write_bytes(blob[:-7])
        with pytest.raises(FormatError, match="offset"):
            read_container(cut)

    def test_byte_metadata_roundtrip(self):
        msg = json.dumps({"k": [1, 2, 3]}).encode("utf-8")
        assert record_to_bytes(bytes_to_record(msg)) == msg

    def test_sorted_record_order_is_canonical(self, tmp_path):
        a, b = tmp_path / "a.qbnt", tmp_path / "b.qbnt"
        r1 = {"z": np.ones(2, np.float32), "a": np.zeros(3, np.float32)}
        r2 = {"a": np.zeros(3, np.float32), "z": np.ones(2, np.float32)}
        write_container(a, r1)
        write_container(b, r2)
        assert a.read_bytes() == b.read_bytes()

    def test_oversized_ints_rejected(self, tmp_path):
        with pytest.raises(FormatError):
            write_container(tmp_path / "x.qbnt", {"ids": np.array([2 ** 30])})


def small_spec(**kw):
    base = dict(seed=11, num_examples=60, num_regions=8, region_spatial=2,
                region_channels=16, noise_sigma=0.05, max_objects=3)
    base.update(kw)
    return DatasetSpec(**base)


class TestSpecValidation:
    def test_unsatisfiable_placement(self):
        with pytest.raises(ConfigError, match="cannot be placed"):
            DatasetSpec(num_regions=2, max_objects=4)

    def test_bad_weights(self):
        with pytest.raises(ConfigError):
            DatasetSpec(template_weights=(1, 1, 1))
        with pytest.raises(ConfigError):
            DatasetSpec(template_weights=(0, 0, 0, 0, 0))

    def test_roundtrip_dict(self):
        spec = small_spec()
        assert DatasetSpec.from_dict(spec.to_dict()) == spec

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            DatasetSpec.from_dict({"wat": 1})


class TestGenerate:
    def test_requested_shapes(self):
        spec = DatasetSpec(seed=0, num_examples=4, num_regions=16, region_spatial=2,
                           region_channels=64)
        ds = generate(spec)
        assert ds.regions.shape == (4, 16, 2, 2, 64)
        assert ds.tokens.shape == (4, 14)

    def test_same_spec_identical_bytes(self, tmp_path):
        a = tmp_path / "a.qbnt"
        b = tmp_path / "b.qbnt"
        generate(small_spec()).save(a)
        generate(small_spec()).save(b)
        assert a.read_bytes() == b.read_bytes()
        assert (tmp_path / "a.qbnt.manifest.json").read_text() == \
            (tmp_path / "b.qbnt.manifest.json").read_text()

    def test_different_seed_differs(self):
        a = generate(small_spec())
        b = generate(small_spec(seed=12))
        assert not np.array_equal(a.regions, b.regions)

    def test_tokens_and_answers_in_range(self):
        ds = generate(small_spec(num_examples=100))
        assert ds.tokens.max() < len(VOCAB)
        assert ds.tokens.min() >= 0
        assert ds.answers.max() < len(ANSWERS)

    def test_answer_balance_within_five_percent(self):
        ds = generate(DatasetSpec(seed=3, num_examples=2000))
        for t, name in enumerate(TEMPLATE_NAMES):
            mask = ds.templates == t
            answers = ds.answers[mask]
            ids, counts = np.unique(answers, return_counts=True)
            shares = counts / counts.sum()
            assert np.abs(shares - 1.0 / len(ids)).max() < 0.05, name

    def test_attention_targets_valid(self):
        ds = generate(small_spec(num_examples=200))
        targeted = ds.targets[ds.targets >= 0]
        assert (targeted < ds.spec.num_regions).all()
        # color/shape/corner templates always carry a target
        for t in (0, 1, 4):
            assert (ds.targets[ds.templates == t] >= 0).all()
        # count never does
        assert (ds.targets[ds.templates == 2] < 0).all()

    def test_getitem_bounds(self):
        ds = generate(small_spec(num_examples=5))
        with pytest.raises(InputError):
            ds[5]

    def test_one_by_one_grid_is_patterns_without_quadrants(self):
        flat = generate(small_spec(region_spatial=1, noise_sigma=0.0, num_examples=30))
        assert flat.regions.shape[2:4] == (1, 1)


class TestSplit:
    def test_disjoint_and_sized(self):
        ds = generate(small_spec(num_examples=200))
        train, val = ds.split(val_count=40)
        assert len(train) == 160 and len(val) == 40
        assert not set(train.scene_ids.tolist()) & set(val.scene_ids.tolist())

    def test_split_deterministic(self):
        ds = generate(small_spec(num_examples=100))
        t1, v1 = ds.split(val_fraction=0.2)
        t2, v2 = ds.split(val_fraction=0.2)
        assert np.array_equal(v1.scene_ids, v2.scene_ids)
        assert np.array_equal(t1.scene_ids, t2.scene_ids)

    def test_majority_baseline_matches_counts(self):
        ds = generate(small_spec(num_examples=300))
        counts = np.bincount(ds.answers)
        assert ds.majority_baseline() == counts.max() / 300


class TestSaveLoad:
    def test_roundtrip_equal(self, tmp_path):
        ds = generate(small_spec(num_examples=40))
        path = tmp_path / "d.qbnt"
        ds.save(path)
        back = load_features(path)
        assert np.array_equal(back.regions, ds.regions)
        assert np.array_equal(back.tokens, ds.tokens)
        assert np.array_equal(back.answers, ds.answers)
        assert np.array_equal(back.targets, ds.targets)
        assert back.spec == ds.spec
        assert back.vocab == ds.vocab and back.answer_vocab == ds.answer_vocab

    def test_truncated_file_errors_with_offset(self, tmp_path):
        ds = generate(small_spec(num_examples=10))
        path = tmp_path / "d.qbnt"
        ds.save(path)
        blob = path.read_bytes()
        (tmp_path / "cut.qbnt").write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError, match="offset"):
            load_features(tmp_path / "cut.qbnt")

    def test_empty_dataset_roundtrip(self, tmp_path):
        ds = generate(small_spec(num_examples=0))
        path = tmp_path / "empty.qbnt"
        ds.save(path)
        back = load_features(path)
        assert len(back) == 0

    def test_manifest_contents(self, tmp_path):
        ds = generate(small_spec(num_examples=50))
        path = tmp_path / "d.qbnt"
        ds.save(path)
        manifest = json.loads((tmp_path / "d.qbnt.manifest.json").read_text())
        assert manifest["num_examples"] == 50
        assert manifest["spec"] == ds.spec.to_dict()
        assert 0 < manifest["majority_baseline"] < 1


# -- rule oracle over generated scenes ----------------------------------------


def decode_region(cell_grid, patterns, spatial):
    """Recover (shape, color, size, quadrant) from one noiseless region, or
    None for an empty region, by exhaustive pattern matching."""
    if np.allclose(cell_grid, 0.0, atol=1e-5):
        return None
    size_scale = {0: 0.75, 1: 1.25}
    for shape in range(len(SHAPES)):
        for color in range(len(COLORS)):
            for size in range(len(SIZES)):
                base = (patterns[("shape", shape)] + patterns[("color", color)]
                        + patterns[("size", size)]) * size_scale[size]
                if spatial == 1:
                    if np.allclose(cell_grid[0, 0], base, atol=1e-4):
                        return shape, color, size, None
                    continue
                for quadrant in range(4):
                    qy, qx = divmod(quadrant, 2)
                    expect = np.broadcast_to(base, cell_grid.shape).copy()
                    expect[qy, qx] = base + patterns[("quadrant", quadrant)]
                    if np.allclose(cell_grid, expect, atol=1e-4):
                        return shape, color, size, quadrant
    raise AssertionError("region matched no attribute combination")


def rule_answer(example, scene, vocab):
    """Answer the templated question from the decoded scene."""
    words = [vocab[t] for t in example.question_tokens if t != 0]
    objs = [obj for obj in scene if obj is not None]
    if words[:2] == ["what", "color"]:
        shape = SHAPES.index(words[4])
        matches = [o for o in objs if o[0] == shape]
        assert len(matches) == 1
        return COLORS[matches[0][1]]
    if words[:2] == ["what", "shape"]:
        color = COLORS.index(words[4])
        matches = [o for o in objs if o[1] == color]
        assert len(matches) == 1
        return SHAPES[matches[0][0]]
    if words[:2] == ["how", "many"]:
        shape = SHAPES.index(words[2])
        return COUNT_WORDS[sum(1 for o in objs if o[0] == shape)]
    if words[:2] == ["is", "there"]:
        color = COLORS.index(words[3])
        shape = SHAPES.index(words[4])
        return "yes" if any(o[0] == shape and o[1] == color for o in objs) else "no"
    if words[:2] == ["which", "corner"]:
        shape = SHAPES.index(words[4])
        matches = [o for o in objs if o[0] == shape]
        assert len(matches) == 1
        return CORNERS[matches[0][3]]
    raise AssertionError(f"unrecognized question {words}")


class TestRuleOracle:
    def test_noiseless_scenes_fully_recoverable(self):
        spec = DatasetSpec(seed=21, num_examples=150, num_regions=8,
                           region_channels=16, noise_sigma=0.0, max_objects=3)
        ds = generate(spec)
        patterns = attribute_patterns(spec)
        agreements = 0
        for i in range(len(ds)):
            ex = ds[i]
            scene = [decode_region(ex.region_grid[r], patterns, spec.region_spatial)
                     for r in range(spec.num_regions)]
            answer = rule_answer(ex, scene, ds.vocab)
            assert ANSWERS[ex.answer_id] == answer
            agreements += 1
        assert agreements == len(ds)

    def test_single_object_scenes(self):
        spec = DatasetSpec(seed=5, num_examples=60, num_regions=8, region_channels=16,
                           noise_sigma=0.0, min_objects=1, max_objects=1,
                           template_weights=(1, 1, 0, 0, 1))
        ds = generate(spec)
        patterns = attribute_patterns(spec)
        for i in range(len(ds)):
            ex = ds[i]
            scene = [decode_region(ex.region_grid[r], patterns, spec.region_spatial)
                     for r in range(spec.num_regions)]
            occupied = [r for r, o in enumerate(scene) if o is not None]
            assert occupied == [ex.attention_target]
            assert ANSWERS[ex.answer_id] == rule_answer(ex, scene, ds.vocab)
