import json

import pytest

from anchorret import cli
from anchorret.config import ConfigError, RunConfig, defaults_json, from_dict, load_config
from anchorret.synthgen import manifest_hash

SMALL = {
    "lexicon": {"num_classes": 6},
    "data": {"splits": {
        "train": {"styles": [0, 15], "per_class_per_lang": 2},
        "id_eval": {"styles": [15, 20], "per_class_per_lang": 1},
        "ood_eval": {"styles": [20, 28], "per_class_per_lang": 2, "distortion": 1.5},
        "finetune": {"styles": [28, 40], "per_class_per_lang": 2, "distortion": 1.5},
    }},
    "pretrain": {"epochs": 2},
    "finetune": {"epochs": 1},
    "eval": {"ablation_seeds": [0], "calibration_size": 16},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


class TestConfig:
    def test_defaults_valid(self):
        cfg = load_config(None)
        assert cfg.loss.lam == 0.5
        assert cfg.model.embed_dim == 32
        assert cfg.model_config().tau_init == 0.07
        assert json.loads(defaults_json()) == RunConfig().to_json()

    def test_overlay(self):
        cfg = from_dict({"model": {"hidden": 32}})
        assert cfg.model.hidden == 32 and cfg.model.embed_dim == 32

    def test_unknown_keys(self):
        with pytest.raises(ConfigError, match="unknown keys"):
            from_dict({"model": {"hiden": 32}})
        with pytest.raises(ConfigError):
            from_dict({"data": {"splits": {"train": {"style": [0, 1]}}}})

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            from_dict({"data": {"splits": {"ood_eval": {"styles": [10, 22], "per_class_per_lang": 1}}}})
        with pytest.raises(ConfigError):
            from_dict({"ablation": {"v2t": False, "t2v": False, "inv": False}})
        with pytest.raises(ConfigError):
            from_dict({"eval": {"split": "nope"}})

    def test_bad_file(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "c.json")

    def test_output_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("ANCHORRET_OUTPUT", str(tmp_path))
        assert RunConfig().output_root() == tmp_path


class TestCli:
    def test_defaults_dump(self, capsys):
        assert run("config", "--defaults") == 0
        assert json.loads(capsys.readouterr().out)["loss"]["lam"] == 0.5

    def test_gen_deterministic(self, tmp_path, small_config):
        assert run("gen", "--config", small_config, "--seed", 7, "--out", tmp_path / "a") == 0
        assert run("gen", "--config", small_config, "--seed", 7, "--out", tmp_path / "b") == 0
        a = manifest_hash(tmp_path / "a" / "data" / "manifest.jsonl")
        assert a == manifest_hash(tmp_path / "b" / "data" / "manifest.jsonl")

    def test_gen_never_overwrites(self, tmp_path, small_config, capsys):
        assert run("gen", "--config", small_config, "--out", tmp_path) == 0
        before = manifest_hash(tmp_path / "data" / "manifest.jsonl")
        assert run("gen", "--config", small_config, "--seed", 9, "--out", tmp_path) != 0
        err = capsys.readouterr().err.strip()
        assert len(err.splitlines()) == 1 and "error" in err
        assert manifest_hash(tmp_path / "data" / "manifest.jsonl") == before

    def test_missing_inputs(self, tmp_path, capsys):
        assert run("train", "--out", tmp_path) != 0
        assert run("eval", "--out", tmp_path) != 0
        assert len(capsys.readouterr().err.strip().splitlines()) == 2

    def test_invalid_config(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"bogus": 1}))
        assert run("gen", "--config", tmp_path / "c.json", "--out", tmp_path) != 0
        assert "unknown keys" in capsys.readouterr().err
        assert not (tmp_path / "data").exists()

    def test_full_pipeline(self, tmp_path, small_config, capsys):
        out = tmp_path / "root"
        assert run("gen", "--config", small_config, "--out", out) == 0
        assert run("train", "--config", small_config, "--out", out) == 0
        assert sorted(p.name for p in (out / "run").iterdir()) == \
            ["config.json", "history.log", "stage1.ckpt", "stage2.ckpt"]
        # a second train must not touch the existing checkpoints
        ckpt = (out / "run" / "stage2.ckpt").read_bytes()
        assert run("train", "--config", small_config, "--out", out) != 0
        assert (out / "run" / "stage2.ckpt").read_bytes() == ckpt

        for cmd in ("eval", "cross-eval", "characterize", "quantize"):
            assert run(cmd, "--config", small_config, "--out", out) == 0, cmd
        reports = out / "reports"
        ev = json.loads((reports / "eval.json").read_text())
        assert set(ev["protocols"]) == {"within:en", "within:zh", "within:es", "mixed"}
        cross = json.loads((reports / "cross_eval.json").read_text())
        pairs = [p for p in cross["protocols"] if p.startswith("cross:")]
        assert len(pairs) == 6
        assert cross["meta"]["protocols"][:3] == ["cross:en->zh", "cross:zh->en", "cross:zh->es"]
        q = json.loads((reports / "quantize.json").read_text())
        assert q["cost"]["weight_bytes"]["float32"] == 4 * q["cost"]["weight_bytes"]["int8"]
        assert (reports / "eval.meta.json").exists()

        # rerun is byte-identical; timing lives in the sidecar only
        first = (reports / "eval.json").read_bytes()
        assert run("eval", "--config", small_config, "--out", out) == 0
        assert (reports / "eval.json").read_bytes() == first

    def test_single_stage_and_ablate(self, tmp_path, small_config):
        out = tmp_path / "root"
        assert run("gen", "--config", small_config, "--out", out) == 0
        assert run("train", "--config", small_config, "--out", out, "--stage", "pretrain",
                   "--run", out / "s1") == 0
        assert run("train", "--config", small_config, "--out", out, "--stage", "finetune",
                   "--init", out / "s1" / "stage1.ckpt", "--run", out / "s2") == 0
        assert (out / "s2" / "stage2.ckpt").exists()
        assert run("ablate", "--config", small_config, "--out", out) == 0
        rows = json.loads((out / "reports" / "ablate.json").read_text())["rows"]
        assert len(rows) == 14
        assert [(r["v2t"], r["t2v"], r["inv"], r["ft"]) for r in rows[:4]] == [
            (True, False, False, False), (True, False, False, True),
            (True, False, True, False), (True, False, True, True)]
        assert len((out / "reports" / "ablate.csv").read_text().splitlines()) == 15
