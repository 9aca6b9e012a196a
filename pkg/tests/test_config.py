"""Run configuration: text round trip, dotted overrides, validation."""

import dataclasses

import pytest

from clapopt.config import (CONFIG_SCHEMA, RunConfig, apply_override,
                            config_to_text, parse_config, read_config,
                            write_config)


def test_text_round_trip_identity():
    cfg = RunConfig()
    text = config_to_text(cfg)
    assert parse_config(text) == cfg
    assert config_to_text(parse_config(text)) == text


def test_round_trip_preserves_overrides(tmp_path):
    cfg = RunConfig()
    cfg = apply_override(cfg, "train.tau", "0.05")
    cfg = apply_override(cfg, "spec.n_routes", "5")
    cfg = apply_override(cfg, "delta", "1.25")
    path = str(tmp_path / "run.cfg")
    write_config(cfg, path)
    back = read_config(path)
    assert back == cfg
    assert back.train.tau == 0.05
    assert back.spec.n_routes == 5
    assert back.delta == 1.25


def test_output_is_sorted_and_headed():
    lines = config_to_text(RunConfig()).splitlines()
    assert lines[0] == CONFIG_SCHEMA
    assert lines[1:] == sorted(lines[1:])


def test_override_top_level_and_nested():
    cfg = RunConfig()
    assert apply_override(cfg, "n_roadblocks", "9").n_roadblocks == 9
    assert apply_override(cfg, "planner.weight_seed", "101").planner.weight_seed == 101
    # tuple-valued field parses from comma list
    assert apply_override(cfg, "notice_tokens", "1,2,3").notice_tokens == (1, 2, 3)


def test_override_optional_batch_size():
    cfg = RunConfig()
    assert cfg.train.batch_size is None
    cfg2 = apply_override(cfg, "train.batch_size", "4")
    assert cfg2.train.batch_size == 4
    assert apply_override(cfg2, "train.batch_size", "none").train.batch_size is None


def test_unknown_keys_rejected():
    cfg = RunConfig()
    with pytest.raises(KeyError):
        apply_override(cfg, "train.learning_rate", "0.1")
    with pytest.raises(KeyError):
        apply_override(cfg, "nonsense", "1")
    with pytest.raises(KeyError):
        apply_override(cfg, "train", "1")


def test_bad_header_and_bad_line():
    with pytest.raises(ValueError):
        parse_config("wrong-header v0\n")
    with pytest.raises(ValueError):
        parse_config(CONFIG_SCHEMA + "\nkeywithoutvalue\n")


def test_validation_rules():
    with pytest.raises(ValueError):
        RunConfig(n_roadblocks=0)
    with pytest.raises(ValueError):
        RunConfig(delta=-0.1)
    with pytest.raises(ValueError):
        RunConfig(radius=0.0)
    with pytest.raises(ValueError):
        RunConfig(notice_tokens=(999,))


def test_planner_spec_agreement_enforced():
    """Shared geometry fields must match between planner and generator."""
    cfg = RunConfig()
    bad_spec = dataclasses.replace(cfg.spec, feature_dim=cfg.spec.feature_dim + 1)
    with pytest.raises(ValueError):
        dataclasses.replace(cfg, spec=bad_spec)


def test_default_recipe_is_short_prompts():
    cfg = RunConfig()
    assert cfg.train.m == 8
    assert cfg.train.n == 8
