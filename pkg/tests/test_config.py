import pytest

from svreid.backbone import StageSpec
from svreid.config import RunConfig, load_config, parse_config_text
from svreid.errors import ConfigError


def test_defaults_follow_training_recipe():
    cfg = RunConfig()
    assert cfg.train.lr == 1e-4 and cfg.train.batch_size == 48 and cfg.train.epochs == 18
    assert (cfg.backbone.height, cfg.backbone.width) == (160, 80)


def test_text_round_trip(tmp_path):
    cfg = RunConfig().with_overrides({"train.lr": "3e-4", "backbone.stages": "k3s1e1c8n1,k5s2e6c16n3", "data.test_ids": "12"})
    path = cfg.write(tmp_path)
    assert load_config(path) == cfg
    assert cfg.backbone.stages == (StageSpec(3, 1, 1, 8, 1), StageSpec(5, 2, 6, 16, 3))


def test_comments_blank_lines_and_spacing():
    values = parse_config_text("# run\n\n  train.lr=0.001   # faster\naugment.flip_prob = 0\n")
    assert values == {"train.lr": "0.001", "augment.flip_prob": "0"}


def test_unknown_key_named(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("train.lr = 1e-3\ntrain.momentum = 0.9\n")
    with pytest.raises(ConfigError, match="train.momentum"):
        load_config(path)
    with pytest.raises(ConfigError, match="nosection.x"):
        RunConfig().with_overrides({"nosection.x": 1})


def test_bad_values():
    with pytest.raises(ConfigError, match="train.epochs"):
        RunConfig().with_overrides({"train.epochs": "many"})
    with pytest.raises(ConfigError):
        RunConfig().with_overrides({"train.rho": "1.5"})
    with pytest.raises(ConfigError):
        parse_config_text("just words\n")


def test_width_multiplier_applies_to_model_config():
    cfg = RunConfig().with_overrides({"backbone.width_mult": "1.1"})
    mc = cfg.model_config()
    assert [s.channels for s in mc.stages] == [16, 24, 48, 72]
    assert mc.head_channels == 144


def test_optional_none():
    cfg = RunConfig().with_overrides({"train.steps": "none", "data.test_ids": "5"})
    assert cfg.train.steps is None and cfg.data.test_ids == 5
