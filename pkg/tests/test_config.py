import json

import pytest

from tagi.config import RunConfig, config_from_dict, load_config
from tagi.errors import ConfigError


def test_defaults_roundtrip():
    cfg = RunConfig()
    again = config_from_dict(cfg.to_dict())
    assert again.config_hash == cfg.config_hash


def test_unknown_key_reports_path():
    with pytest.raises(ConfigError, match="train.lamda1"):
        config_from_dict({"train": {"lamda1": 2.0}})
    with pytest.raises(ConfigError, match="'bogus'"):
        config_from_dict({"bogus": {}})


def test_type_checks():
    with pytest.raises(ConfigError, match="model.d_model"):
        config_from_dict({"model": {"d_model": "64"}})
    with pytest.raises(ConfigError, match="train.use_kl"):
        config_from_dict({"train": {"use_kl": 1}})


def test_int_accepted_for_float_field():
    cfg = config_from_dict({"train": {"lambda1": 2}})
    assert cfg.train.lambda1 == 2.0 and isinstance(cfg.train.lambda1, float)


def test_hash_is_key_order_independent_and_rounded():
    a = config_from_dict({"train": {"lr": 1e-4, "lambda1": 5.0}})
    b = config_from_dict({"train": {"lambda1": 5.0, "lr": 1e-4 + 1e-20}})
    assert a.config_hash == b.config_hash
    c = config_from_dict({"train": {"lambda1": 0.5}})
    assert c.config_hash != a.config_hash


def test_model_hash_ignores_training_section():
    a = config_from_dict({"train": {"lambda1": 0.5}})
    assert a.model_hash == RunConfig().model_hash
    b = config_from_dict({"model": {"lora_rank": 2}})
    assert b.model_hash != a.model_hash


def test_bad_json_reports_line(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{\n  "train": {\n    "lr": 1e-4,\n  }\n}\n')
    with pytest.raises(ConfigError, match="line 4"):
        load_config(str(p))


def test_env_seed_override(tmp_path, monkeypatch):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"seed": 3}}))
    monkeypatch.setenv("TAGI_SEED", "11")
    assert load_config(str(p)).train.seed == 11
    monkeypatch.setenv("TAGI_SEED", "x")
    with pytest.raises(ConfigError):
        load_config(str(p))
    monkeypatch.delenv("TAGI_SEED")
    assert load_config(str(p)).train.seed == 3


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        config_from_dict({"train": {"lambda1": -1.0}})
    with pytest.raises(ConfigError):
        config_from_dict({"suite": {"mode": "few"}})
    with pytest.raises(ConfigError):
        config_from_dict({"model": {"d_model": 10, "n_heads": 4}})


def test_hash_ignores_output_directory():
    a, b = RunConfig(), RunConfig()
    b.paths.out_dir = "elsewhere"
    assert a.config_hash == b.config_hash
    b.paths.corpus_seed = 1
    assert a.config_hash != b.config_hash
