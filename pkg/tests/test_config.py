from __future__ import annotations

import pytest

from simreweight.config import RunConfig, load_config, parse_override
from simreweight.errors import ConfigError, IoError


def test_defaults_validate_and_round_trip():
    cfg = RunConfig().validate()
    again = RunConfig.from_dict(cfg.to_dict())
    assert again.to_yaml() == cfg.to_yaml()


def test_overrides_reach_nested_fields():
    cfg = RunConfig.from_dict({}, {"model.d_model": 16, "reweight.K": 2,
                                   "simulator.ranges.noise_sigma": [0.1, 0.2],
                                   "eval.seeds": [3, 4]})
    assert cfg.model.d_model == 16 and cfg.reweight.K == 2
    assert cfg.simulator.ranges["noise_sigma"] == [0.1, 0.2]
    assert cfg.eval.seeds == [3, 4]


def test_dataset_geometry_is_mirrored_into_model():
    cfg = RunConfig.from_dict({"dataset": {"L_in": 12, "L_token": 6, "L_out": 3}})
    assert (cfg.model.L_in, cfg.model.L_token, cfg.model.L_out) == (12, 6, 3)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"dataset": {"L_in": 12}, "model": {"L_in": 24}})


@pytest.mark.parametrize("doc", [
    {"optimizer": {}},
    {"model": {"d_modle": 8}},
    {"model": {"d_model": "big"}},
    {"train": {"epochs": 2.5}},
    {"train": {"alpha": True}},
    {"reweight": {"phase1_iters": 900, "max_iters": 10}},
    {"simulator": {"ranges": {"unknown_knob": [0, 1]}}},
    {"eval": {"variants": ["full", "huge"]}},
    {"model": {"use_spatial": "yes"}},
])
def test_invalid_documents_are_rejected(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc)


def test_numbers_are_coerced_to_float():
    cfg = RunConfig.from_dict({"train": {"learning_rate": 1}, "reweight": {"w_bound": 3}})
    assert isinstance(cfg.train.learning_rate, float) and cfg.reweight.w_bound == 3.0


def test_parse_override():
    assert parse_override("model.d_model=16") == ("model.d_model", 16)
    assert parse_override("eval.seeds=[0, 1]") == ("eval.seeds", [0, 1])
    assert parse_override("reweight.anchor=fixed") == ("reweight.anchor", "fixed")
    assert parse_override("reweight.epsilon=1e-4") == ("reweight.epsilon", 1e-4)
    with pytest.raises(ConfigError):
        parse_override("model.d_model")
    with pytest.raises(ConfigError):
        RunConfig.from_dict({}, {"d_model": 3})


def test_load_config_from_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("train:\n  epochs: 3\nmodel:\n  d_model: 16\n", encoding="utf-8")
    cfg = load_config(path, {"train.epochs": 5})
    assert cfg.train.epochs == 5 and cfg.model.d_model == 16
    with pytest.raises(IoError):
        load_config(tmp_path / "missing.yaml")
    path.write_text("- just\n- a list\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(path)
