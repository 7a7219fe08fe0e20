"""Run-config loading, validation, and override tests."""

import json

import pytest

from flexinet import config as C
from flexinet.config import ConfigError, load_config
from flexinet.model import REFERENCE_CONFIGS


class TestLoadConfig:
    def test_defaults(self):
        cfg = load_config()
        assert cfg["train"]["epochs"] == 250
        assert cfg["train"]["batch_size"] == 256
        assert cfg["augment"]["adir"]["energy_threshold"] == 323.0

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"train": {"epochz": 5}}))
        with pytest.raises(ConfigError, match="train.epochz"):
            load_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"banana": 1}))
        with pytest.raises(ConfigError, match="banana"):
            load_config(path)

    def test_file_merge(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"train": {"epochs": 3},
                                    "data": {"synthetic": {"seed": 5}}}))
        cfg = load_config(path)
        assert cfg["train"]["epochs"] == 3
        assert cfg["train"]["lr"] == 0.01  # untouched default
        assert cfg["data"]["synthetic"] == {"seed": 5}

    def test_set_overrides(self):
        cfg = load_config(overrides=["train.epochs=7", "augment.fms.enable=false",
                                     "arch.preset=sm-b"])
        assert cfg["train"]["epochs"] == 7
        assert cfg["augment"]["fms"]["enable"] is False
        assert cfg["arch"]["preset"] == "sm-b"

    def test_set_string_fallback(self):
        cfg = load_config(overrides=["data.corpus=/tmp/corpus"])
        assert cfg["data"]["corpus"] == "/tmp/corpus"

    def test_set_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            load_config(overrides=["train.nope=1"])

    def test_set_requires_equals(self):
        with pytest.raises(ConfigError, match="key=value"):
            load_config(overrides=["train.epochs"])

    def test_env_seed_override(self, monkeypatch):
        monkeypatch.setenv("FLEXINET_SEED", "99")
        cfg = load_config()
        assert cfg["train"]["seed"] == 99

    def test_env_seed_invalid(self, monkeypatch):
        monkeypatch.setenv("FLEXINET_SEED", "abc")
        with pytest.raises(ConfigError, match="FLEXINET_SEED"):
            load_config()

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="not found"):
            load_config("/does/not/exist.json")


class TestBuilders:
    def test_arch_preset(self):
        cfg = load_config(overrides=["arch.preset=sm-c"])
        assert C.build_arch(cfg) == REFERENCE_CONFIGS["sm-c"]

    def test_arch_explicit(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"arch": {
            "stem_channels": [4, 6], "stages": [[1, 8, 2]]}}))
        arch = C.build_arch(load_config(path))
        assert arch.stem_channels == (4, 6)
        assert arch.stages[0].channels == 8

    def test_arch_bad_preset(self):
        cfg = load_config(overrides=["arch.preset=sm-z"])
        with pytest.raises(ConfigError, match="sm-z"):
            C.build_arch(cfg)

    def test_policy_disabled_augments(self):
        cfg = load_config(overrides=["augment.fms.enable=false",
                                     "augment.adir.enable=false"])
        policy = C.build_augment_policy(cfg)
        assert policy.fms is None
        assert policy.adir is None

    def test_policy_synthetic_bank(self):
        cfg = load_config(overrides=["augment.adir.prob=0.5"])
        policy = C.build_augment_policy(cfg)
        assert policy.adir is not None
        assert len(policy.adir.dir_bank) == 8

    def test_synthetic_spec_unknown_key(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"data": {"synthetic": {"clipz": 1}}}))
        with pytest.raises(ConfigError, match="clipz"):
            C.build_synthetic_spec(load_config(path))

    def test_mel_config(self):
        cfg = load_config()
        mel = C.build_mel_config(cfg)
        assert mel.n_mels == 256 and mel.hop == 500

    def test_kd_schedule(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"distill": {"schedule": [1.0, 0.3]}}))
        kd = C.build_kd_config(load_config(path))
        assert kd.schedule == (1.0, 0.3)
