import json

import pytest

from lkdnet.model import ConfigError
from lkdnet.runconfig import (
    DataConfig,
    ErfConfig,
    load_run_config,
    resolve_seed,
)


def _write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


class TestLoading:
    def test_defaults_without_file(self):
        cfg = load_run_config(None)
        assert cfg.data.n == 200 and cfg.data.size == 96
        assert cfg.erf.tap == "output" and cfg.erf.input_size == 64
        assert cfg.train.steps == 2000
        assert cfg.model.kernel == 21 and cfg.model.dilation == 3

    def test_sections_merge_over_defaults(self, tmp_path):
        p = _write(tmp_path, {"train": {"steps": 10}, "data": {"n": 3, "size": 16}})
        cfg = load_run_config(p)
        assert cfg.train.steps == 10
        assert cfg.train.batch == 4  # untouched default
        assert cfg.data.n == 3

    def test_variant_preset(self, tmp_path):
        p = _write(tmp_path, {"model": {"variant": "s"}})
        cfg = load_run_config(p)
        assert cfg.model.blocks == (2, 2, 4, 2, 2)

    def test_variant_with_override(self, tmp_path):
        p = _write(tmp_path, {"model": {"variant": "tiny", "use_dlk": False, "lk_kernel": 9}})
        cfg = load_run_config(p)
        assert not cfg.model.use_dlk
        assert cfg.model.lk_kernel == 9

    def test_decomposition_alias(self, tmp_path):
        p = _write(tmp_path, {"model": {"decomposition": [13, 3]}})
        cfg = load_run_config(p)
        assert cfg.model.kernel == 13 and cfg.model.dilation == 3

    def test_decomposition_conflict_rejected(self, tmp_path):
        p = _write(tmp_path, {"model": {"decomposition": [13, 3], "kernel": 21}})
        with pytest.raises(ConfigError):
            load_run_config(p)

    def test_unknown_section_rejected(self, tmp_path):
        p = _write(tmp_path, {"optimizer": {}})
        with pytest.raises(ConfigError):
            load_run_config(p)

    def test_unknown_key_rejected(self, tmp_path):
        p = _write(tmp_path, {"train": {"step": 100}})
        with pytest.raises(ConfigError):
            load_run_config(p)

    def test_bad_json_rejected(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError):
            load_run_config(p)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "absent.json")

    def test_non_object_section_rejected(self, tmp_path):
        p = _write(tmp_path, {"train": [1, 2]})
        with pytest.raises(ConfigError):
            load_run_config(p)


class TestSectionValidation:
    def test_data_config(self):
        with pytest.raises(ConfigError):
            DataConfig(n=0)
        with pytest.raises(ConfigError):
            DataConfig(size=18)
        with pytest.raises(ConfigError):
            DataConfig(clean_source="directory")

    def test_erf_config(self):
        with pytest.raises(ConfigError):
            ErfConfig(tap="middle")
        with pytest.raises(ConfigError):
            ErfConfig(input_size=30)


class TestSeedPrecedence:
    def test_flag_wins(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LKD_SEED", "99")
        p = _write(tmp_path, {"data": {"seed": 5}})
        cfg = load_run_config(p)
        assert resolve_seed(cfg, "data", 7) == 7

    def test_config_explicit_beats_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LKD_SEED", "99")
        p = _write(tmp_path, {"data": {"seed": 5}})
        cfg = load_run_config(p)
        assert resolve_seed(cfg, "data", None) == 5

    def test_env_beats_default(self, monkeypatch):
        monkeypatch.setenv("LKD_SEED", "99")
        cfg = load_run_config(None)
        assert resolve_seed(cfg, "data", None) == 99

    def test_default_when_nothing_set(self, monkeypatch):
        monkeypatch.delenv("LKD_SEED", raising=False)
        cfg = load_run_config(None)
        assert resolve_seed(cfg, "train", None) == 0

    def test_bad_env_rejected(self, monkeypatch):
        monkeypatch.setenv("LKD_SEED", "forty-two")
        cfg = load_run_config(None)
        with pytest.raises(ConfigError):
            resolve_seed(cfg, "data", None)

    def test_explicit_seed_tracked_per_section(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LKD_SEED", "99")
        p = _write(tmp_path, {"data": {"seed": 5}})
        cfg = load_run_config(p)
        # train has no explicit seed, so the environment fills it.
        assert resolve_seed(cfg, "train", None) == 99
        assert cfg.explicit_seeds == frozenset({"data"})
