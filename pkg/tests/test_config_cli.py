import filecmp
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from structsr.cli import main
from structsr.config import (
    RunConfig,
    apply_overrides,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
)
from structsr.data import load_png, read_manifest
from structsr.degrade import replay
from structsr.errors import ParameterError

SMALL_DATA = [
    "data.num_train=10",
    "data.num_val=4",
    "data.image_size=32",
]


class TestConfig:
    def test_defaults_round_trip(self, tmp_path):
        cfg = RunConfig()
        path = tmp_path / "c.yaml"
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ParameterError, match="unknown config key"):
            config_from_dict({"schedule": {"num_steps": 10, "bogus": 1}})
        with pytest.raises(ParameterError, match="unknown config key"):
            config_from_dict({"nonsense": {}})

    def test_partial_dict_fills_defaults(self):
        cfg = config_from_dict({"train": {"iterations": 7}})
        assert cfg.train.iterations == 7
        assert cfg.train.batch_size == RunConfig().train.batch_size

    def test_overrides(self):
        cfg = RunConfig()
        apply_overrides(
            cfg,
            ["train.lr_gen=1e-3", "model.width_mults=[1,2]",
             "train.regularizer=sds", "degradation.second_pass=true"],
        )
        assert cfg.train.lr_gen == pytest.approx(1e-3)
        assert cfg.model.width_mults == (1, 2)
        assert cfg.train.regularizer == "sds"
        assert cfg.degradation.second_pass is True

    def test_bad_overrides(self):
        cfg = RunConfig()
        with pytest.raises(ParameterError):
            apply_overrides(cfg, ["train.nope=1"])
        with pytest.raises(ParameterError):
            apply_overrides(cfg, ["no_equals_sign"])
        with pytest.raises(ParameterError):
            apply_overrides(cfg, ["train=1"])

    def test_dict_round_trip_identical(self):
        cfg = RunConfig()
        apply_overrides(cfg, ["train.iterations=5", "seed=3"])
        assert config_from_dict(config_to_dict(cfg)) == cfg


class TestCliSurface:
    def test_gen_data_writes_dataset_and_config(self, tmp_path):
        out = tmp_path / "run"
        code = main(["gen-data", "--out", str(out), "--seed", "5", *SMALL_DATA])
        assert code == 0
        assert (out / "config_gen_data.yaml").exists()
        recs = read_manifest(out / "data" / "train")
        assert len(recs) == 10
        labels = {r.label for r in recs}
        assert labels == set(RunConfig().data.families)
        resolved = yaml.safe_load((out / "config_gen_data.yaml").read_text())
        assert config_from_dict(resolved).data.num_train == 10

    def test_gen_data_deterministic_bytes(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["gen-data", "--out", str(out), "--seed", "9", *SMALL_DATA]) == 0
            outs.append(out)
        for rel in sorted(
            p.relative_to(outs[0]) for p in outs[0].rglob("*.png")
        ):
            assert filecmp.cmp(outs[0] / rel, outs[1] / rel, shallow=False), rel
        m0 = (outs[0] / "data" / "train" / "manifest.jsonl").read_bytes()
        m1 = (outs[1] / "data" / "train" / "manifest.jsonl").read_bytes()
        assert m0 == m1

    def test_manifest_recipes_replay_to_stored_lq(self, tmp_path):
        out = tmp_path / "run"
        assert main(["gen-data", "--out", str(out), "--seed", "2", *SMALL_DATA]) == 0
        root = out / "data" / "val"
        for rec in read_manifest(root):
            hq = load_png(root / rec.hq_file)
            lq = load_png(root / rec.lq_file)
            replayed = replay(hq, rec.recipe)
            stored = np.clip(replayed * 255.0 + 0.5, 0, 255).astype(np.uint8)
            assert np.array_equal(stored / 255.0, lq), rec.lq_file

    def test_verify_lemma1_exit_zero(self, tmp_path, capsys):
        out = tmp_path / "run"
        code = main(
            ["verify-lemma1", "--out", str(out), "--seed", "3",
             "eval.lemma_trials=500"]
        )
        assert code == 0
        captured = capsys.readouterr()
        assert "max |eps* - eps|" in captured.out
        assert (out / "lemma1.csv").exists()

    def test_dump_cond_writes_planes(self, tmp_path):
        out = tmp_path / "run"
        assert main(["gen-data", "--out", str(out), "--seed", "4", *SMALL_DATA]) == 0
        img = next((out / "data" / "val" / "hq").glob("*.png"))
        code = main(["dump-cond", "--out", str(out), "--image", str(img)])
        assert code == 0
        assert (out / f"{img.stem}_colormap.png").exists()
        assert (out / f"{img.stem}_edges.png").exists()
        edges = load_png(out / f"{img.stem}_edges.png")
        assert set(np.unique(edges)).issubset({0.0, 1.0})

    def test_missing_prerequisite_names_upstream_command(self, tmp_path, capsys):
        out = tmp_path / "empty"
        code = main(["pretrain", "--out", str(out)])
        assert code == 2
        assert "gen-data" in capsys.readouterr().err

    def test_invalid_override_is_validation_failure(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "x"), "train.nope=1"]) == 1

    def test_env_var_default_output_root(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("STRUCTSR_OUT", str(tmp_path / "envrun"))
        code = main(["verify-lemma1", "--seed", "1", "eval.lemma_trials=50"])
        assert code == 0
        assert (tmp_path / "envrun" / "lemma1.csv").exists()
