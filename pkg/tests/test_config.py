import pytest

from phototransfer.augment import AugmentPolicy
from phototransfer.config import ConfigError, RunConfig, load_config, parse_config_text
from phototransfer.trainer import TrainConfig


def test_defaults_reproduce_reference_constants():
    cfg = RunConfig()
    assert cfg.train_config() == TrainConfig()
    assert cfg.train_config().policy == AugmentPolicy()
    assert cfg.unet_config().depth == 4
    assert cfg.tile_plan().overlap is None


def test_parse_with_comments_and_types(tmp_path):
    text = """
    # training
    iterations = 20   # short run
    lr = 0.001
    color_permute = false
    rotation = -45, 45
    overlap = auto
    kind = segmentation
    """
    cfg = load_config(None, None).with_values(parse_config_text(text))
    assert cfg.iterations == 20 and cfg.lr == 0.001 and cfg.color_permute is False
    assert cfg.rotation == (-45.0, 45.0) and cfg.overlap is None
    assert cfg.unet_config().head == "logits" and cfg.unet_config().out_channels == 1


def test_unknown_and_malformed_entries():
    with pytest.raises(ConfigError, match="unknown"):
        parse_config_text("iteration = 3")
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_text("iterations 3")
    with pytest.raises(ConfigError, match="bad value"):
        RunConfig().with_values({"iterations": "many"})
    with pytest.raises(ConfigError, match="bad value"):
        RunConfig().with_values({"scale": "1"})
    with pytest.raises(ConfigError, match="bad value"):
        RunConfig().with_values({"color_permute": "maybe"})


def test_precedence_cli_over_file_over_default(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("iterations = 50\nbatch_size = 4\n")
    cfg = load_config(path, {"iterations": "7"})
    assert (cfg.iterations, cfg.batch_size, cfg.lr) == (7, 4, 0.002)


def test_text_round_trip():
    cfg = RunConfig(iterations=12, shear=(-10.0, 5.5), overlap=128, color_permute=False)
    assert RunConfig().with_values(parse_config_text(cfg.to_text())) == cfg
    assert RunConfig().with_values(parse_config_text(RunConfig().to_text())) == RunConfig()
