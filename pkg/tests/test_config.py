"""Configuration: presets, derived budgets, aliases, file loading."""

import pytest

from ftkn.config import (
    PipelineConfig,
    desk_config,
    load_config,
    paper_shape_config,
)
from ftkn.nn.layers import ConfigError


def test_paper_shape_defaults():
    cfg = paper_shape_config()
    assert cfg.model.dim == 256 and cfg.model.heads == 8
    assert cfg.sampling.k == 48 and cfg.sample_budget() == 192
    assert cfg.fusion.frames == 16 and cfg.fusion.groups == 4
    assert cfg.scaling.beta1 == 0.5 and cfg.fusion.beta2 == 0.5


def test_desk_defaults():
    cfg = desk_config()
    assert cfg.model.dim == 64 and cfg.model.heads == 4
    assert cfg.sampling.k == 16 and cfg.sample_budget() == 64
    assert cfg.fusion.frames == 8
    assert cfg.scene.count == 200
    assert cfg.train.epochs == 6


def test_gamma_scales_both_budgets():
    cfg = paper_shape_config()
    cfg.sampling.gamma = 0.5
    assert cfg.focal_k() == 24
    assert cfg.sample_budget() == 96
    cfg.sampling.gamma = 0.25
    assert cfg.focal_k() == 12
    cfg.sampling.gamma = 0.001
    assert cfg.focal_k() == 1  # never collapses to zero


def test_fusion_k_out_fallback():
    cfg = paper_shape_config()
    assert cfg.fusion_k_out() == 48
    cfg.fusion.k_out = 96
    assert cfg.fusion_k_out() == 96


def test_apply_and_aliases():
    cfg = paper_shape_config()
    cfg.apply({"fusion": {"t": 8, "g": 2}, "scaling": {"beta2": 0.7}})
    assert cfg.fusion.frames == 8
    assert cfg.fusion.groups == 2
    assert cfg.fusion.beta2 == 0.7
    with pytest.raises(ConfigError):
        cfg.apply({"fusion": {"subsample": 2}})
    with pytest.raises(ConfigError):
        cfg.apply({"engine": {"x": 1}})
    with pytest.raises(ConfigError):
        cfg.apply({"fusion": 3})


def test_clone_is_deep():
    cfg = desk_config()
    twin = cfg.clone()
    twin.sampling.k = 99
    assert cfg.sampling.k == 16


def test_flat_snapshot():
    flat = desk_config().flat()
    assert flat["model.dim"] == 64
    assert flat["sampling.k"] == 16
    assert list(flat) == sorted(flat)


def test_load_json(tmp_path):
    p = tmp_path / "run.json"
    p.write_text('{"model": {"dim": 32, "heads": 2}, "sampling": {"k": 8}}')
    cfg = load_config(p, desk_config())
    assert cfg.model.dim == 32
    assert cfg.sampling.k == 8
    assert cfg.fusion.frames == 8  # untouched desk value


def test_load_toml_with_preset(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text('preset = "desk"\n[model]\ndim = 16\nheads = 2\n')
    cfg = load_config(p)
    assert cfg.model.dim == 16
    assert cfg.scene.count == 200  # desk preset applied first


def test_load_sniffs_format(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text('[sampling]\nk = 12\n')
    assert load_config(p).sampling.k == 12
    q = tmp_path / "other.cfg"
    q.write_text('{"sampling": {"k": 7}}')
    assert load_config(q).sampling.k == 7


def test_load_rejects_unknown_preset(tmp_path):
    p = tmp_path / "run.json"
    p.write_text('{"preset": "cluster"}')
    with pytest.raises(ConfigError):
        load_config(p)
