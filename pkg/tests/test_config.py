import pytest

from vlab.config import (
    ConfigError, ExperimentConfig, apply_overrides, digest, load_config, parse_config, serialize,
)


def test_defaults():
    cfg = load_config()
    assert cfg.optimizer.base_lr == 5e-4
    assert cfg.optimizer.warmup_steps == 1000
    assert cfg.stages.convergence_threshold == 0.8
    assert cfg.adapter.resampler.n_queries == 16
    assert cfg.adapter.resampler.query_dim == cfg.adapter.resampler.hidden_dim == 64
    assert cfg.adapter.baseline_layers == 6


def test_misspelled_key_names_its_path():
    with pytest.raises(ConfigError, match=r"adapter\.resampler\.n_layer: unknown key"):
        parse_config("adapter:\n  resampler:\n    n_layer: 3\n")
    with pytest.raises(ConfigError, match=r"^optimiser: unknown key"):
        parse_config("optimiser: {base_lr: 1.0}\n")


def test_mistyped_and_invalid_values():
    with pytest.raises(ConfigError, match=r"optimizer\.batch_size: expected int"):
        parse_config("optimizer: {batch_size: 3.5}\n")
    with pytest.raises(ConfigError, match=r"adapter\.resampler\.ln_mode"):
        parse_config("adapter: {resampler: {ln_mode: both}}\n")
    with pytest.raises(ConfigError, match=r"adapter\.resampler\.ln_mode"):
        parse_config("adapter: {resampler: {ln_mode: shared, hidden_dim: 32}}\n")
    with pytest.raises(ConfigError, match=r"adapter\.resampler\.n_layers"):
        parse_config("adapter: {resampler: {n_layers: 3}}\n")
    parse_config("adapter: {resampler: {n_layers: 3}, allow_deep: true}\n")
    with pytest.raises(ConfigError):
        parse_config("[1, 2")


def test_serialize_round_trip_is_idempotent():
    cfg = parse_config("optimizer: {base_lr: 0.001}\nstages: {stage1_steps: 1500}\n")
    text = serialize(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize(again) == text
    assert digest(again) == digest(cfg)
    assert digest(cfg) != digest(ExperimentConfig())


def test_overrides():
    cfg = apply_overrides(load_config(), ["optimizer.base_lr=0.003", "adapter.resampler.ln_mode=none"])
    assert cfg.optimizer.base_lr == 0.003
    assert cfg.adapter.resampler.ln_mode == "none"
    with pytest.raises(ConfigError, match="unknown key"):
        apply_overrides(cfg, ["optimizer.lr=1"])
    with pytest.raises(ConfigError, match="unknown section"):
        apply_overrides(cfg, ["optim.base_lr=1"])
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["optimizer.base_lr"])


def test_empty_document_is_defaults():
    assert parse_config("") == ExperimentConfig()
