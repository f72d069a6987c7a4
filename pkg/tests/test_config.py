"""Config schema: defaults, rejection of unknown keys, type checking."""

import json

import pytest

from drivesynth.config import default_config_dict, load_config, parse_config
from drivesynth.errors import ConfigurationError


def test_empty_config_gets_all_defaults():
    cfg = parse_config({})
    assert cfg.seed == 0
    assert cfg["backbone"]["embed_dim"] == 64
    assert cfg["adapter"]["rank"] == 4
    assert cfg["dvrs"]["dyn_rescale"] == 10.0
    assert cfg["training"]["learning_rate"] == 0.05


def test_default_dict_parses_cleanly():
    cfg = parse_config(default_config_dict())
    assert cfg.backbone_config().n_tokens == 64


def test_unknown_top_level_key_named():
    with pytest.raises(ConfigurationError, match="trainning"):
        parse_config({"trainning": {}})


def test_unknown_nested_key_named():
    with pytest.raises(ConfigurationError, match="adapter.rnk"):
        parse_config({"adapter": {"rnk": 4}})


def test_type_mismatch_rejected():
    with pytest.raises(ConfigurationError, match="training.steps"):
        parse_config({"training": {"steps": "many"}})


def test_int_promotes_to_float():
    cfg = parse_config({"adapter": {"alpha": 8}})
    assert cfg["adapter"]["alpha"] == 8.0


def test_bool_is_not_int():
    with pytest.raises(ConfigurationError):
        parse_config({"training": {"steps": True}})


def test_bad_divisibility_caught_at_parse_time():
    with pytest.raises(ConfigurationError):
        parse_config({"backbone": {"height": 10, "patch": [2, 4, 4]}})


def test_bad_boundary_rejected():
    with pytest.raises(ConfigurationError):
        parse_config({"adapter": {"boundary": 1.0}})


def test_load_from_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 9, "sampler": {"steps": 3}}))
    cfg = load_config(path)
    assert cfg.seed == 9
    assert cfg["sampler"]["steps"] == 3


def test_missing_file():
    with pytest.raises(ConfigurationError):
        load_config("/nonexistent/config.json")


def test_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_config(path)
