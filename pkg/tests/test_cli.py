"""CLI subcommands end to end, in process."""

import json
import os

import numpy as np
import pytest

from qbn.cli import main
from qbn.data import DatasetSpec, generate
from qbn.model import QBNConfig
from qbn.train import TrainConfig


@pytest.fixture
def cli_config(tmp_path):
    model = QBNConfig(model_dim=16, num_heads=2, num_blocks=1, question_len=8,
                      num_regions=4, region_channels=8, vocab_size=25,
                      num_answers=19, dropout_rate=0.0)
    cfg = TrainConfig(
        learning_rate=2e-3, epochs=1, batch_size=16, seed=5,
        dataset=dict(seed=7, num_examples=60, num_regions=4, region_channels=8,
                     noise_sigma=0.05, max_objects=3, question_len=8),
        val_fraction=0.2, model=model, checkpoint_dir=str(tmp_path / "run"),
    )
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg.to_dict()))
    return path, cfg, tmp_path


class TestTrainEval:
    def test_train_then_eval_and_dump(self, tmp_path, cli_config, capsys):
        config_path, cfg, root = cli_config
        assert main(["train", "--config", str(config_path)]) == 0
        out = json.loads(capsys.readouterr().out)
        ckpt = out["final_checkpoint"]
        assert ckpt and os.path.exists(ckpt)

        assert main(["eval", "--ckpt", ckpt, "--split", "val"]) == 0
        result = json.loads(capsys.readouterr().out)
        assert 0.0 <= result["accuracy"] <= 1.0

        dump_path = root / "attn.json"
        assert main(["dump-attention", "--ckpt", ckpt, "--example", "0",
                     "--out", str(dump_path)]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["example_index"] == 0
        payload = json.loads(dump_path.read_text())
        assert len(payload["blocks"]) == cfg.model.num_blocks

    def test_eval_against_container_and_spec_file(self, tmp_path, cli_config, capsys):
        config_path, cfg, root = cli_config
        assert main(["train", "--config", str(config_path), "--out", str(root / "o2")]) == 0
        ckpt = json.loads(capsys.readouterr().out)["final_checkpoint"]

        spec = DatasetSpec.from_dict(cfg.dataset)
        data_path = root / "data.qbnt"
        generate(spec).save(data_path)
        assert main(["eval", "--ckpt", ckpt, "--data", str(data_path)]) == 0
        from_container = json.loads(capsys.readouterr().out)

        spec_path = root / "spec.json"
        spec_path.write_text(json.dumps(spec.to_dict()))
        assert main(["eval", "--ckpt", ckpt, "--data", str(spec_path)]) == 0
        from_spec = json.loads(capsys.readouterr().out)
        assert from_spec == from_container

    def test_seed_override_changes_hash(self, cli_config, capsys):
        config_path, cfg, root = cli_config
        assert main(["train", "--config", str(config_path), "--seed", "99",
                     "--out", str(root / "o3")]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["config_hash"] != cfg.config_hash()


class TestErrors:
    def test_missing_checkpoint_machine_parsable(self, capsys):
        code = main(["eval", "--ckpt", "/nonexistent/x.qbnt"])
        err = capsys.readouterr().err.strip()
        assert code != 0
        assert err.startswith("qbn-error code=")
        assert err.count("\n") == 0

    def test_bad_config_json(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{nope")
        code = main(["train", "--config", str(bad)])
        err = capsys.readouterr().err.strip()
        assert code == 1
        assert "code=CONFIG" in err

    def test_dump_index_out_of_range(self, tmp_path, cli_config, capsys):
        config_path, cfg, root = cli_config
        assert main(["train", "--config", str(config_path), "--out", str(root / "o4")]) == 0
        ckpt = json.loads(capsys.readouterr().out)["final_checkpoint"]
        code = main(["dump-attention", "--ckpt", ckpt, "--example", "100000",
                     "--out", str(root / "x.json")])
        err = capsys.readouterr().err.strip()
        assert code == 1
        assert "code=INPUT" in err

    def test_ablate_rejects_indivisible_dim(self, cli_config, capsys):
        config_path, _, _ = cli_config
        code = main(["ablate", "--config", str(config_path)])
        err = capsys.readouterr().err.strip()
        assert code == 1
        assert "code=CONFIG" in err
