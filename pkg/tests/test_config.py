import pytest

from config import PipelineConfig, build_config, dump_config, load_config, parse_config_text
from errors import ConfigError


def test_defaults_match_documented_values():
    cfg = PipelineConfig()
    assert cfg.tracking_iterations == 30
    assert cfg.mapping_iterations == 100
    assert cfg.keyframe_interval == 5
    assert cfg.mapping_window == 5
    assert cfg.submap_extent == 50.0
    assert cfg.opacity_min == 0.05
    assert (cfg.loss.lambda_c, cfg.loss.lambda_depth, cfg.loss.lambda_s, cfg.loss.lambda_dino) == (0.8, 0.2, 0.1, 0.1)
    assert (cfg.masking.uncertainty.lambda_dino, cfg.masking.uncertainty.lambda_depth) == (1.0, 0.5)
    assert cfg.masking.sigma_search == (1e-3, 10.0, 64)
    assert cfg.masking.kappa == 3.0
    assert cfg.registration.voxel_size == 1.0
    assert cfg.registration.max_points_per_voxel == 20
    assert cfg.registration.map_range == 100.0


def test_parse_nested_keys_and_comments():
    text = """
    # comment line
    seed = 7
    loss.lambda_c = 0.5   # trailing comment
    masking.enabled = false
    class_names = floor, wall, car
    num_classes = 3
    """
    cfg = build_config(parse_config_text(text))
    assert cfg.seed == 7
    assert cfg.loss.lambda_c == 0.5
    assert cfg.masking.enabled is False
    assert cfg.class_names == ("floor", "wall", "car")


def test_unknown_key_names_key_and_line(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 1\n\nloss.bogus = 3\n")
    with pytest.raises(ConfigError) as exc:
        load_config(str(path))
    msg = str(exc.value)
    assert "loss.bogus" in msg
    assert f"{path}:3" in msg


def test_invalid_values_are_rejected():
    with pytest.raises(ConfigError, match="tracking_iterations"):
        build_config({"tracking_iterations": "0"})
    with pytest.raises(ConfigError, match="lambda_c"):
        build_config({"loss": {"lambda_c": "-1"}})
    with pytest.raises(ConfigError):
        build_config({"masking": {"sigma_min": "5", "sigma_max": "1"}})
    with pytest.raises(ConfigError):
        build_config({"num_classes": "2", "class_names": ("a", "b", "c")})


def test_malformed_line():
    with pytest.raises(ConfigError, match="<config>:2"):
        parse_config_text("seed = 1\njust words\n")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "absent.cfg"))


def test_dump_roundtrip():
    cfg = PipelineConfig(seed=3, num_classes=2, class_names=("a", "b"), hierarchical_losses=False)
    cfg.registration.voxel_size = 0.25
    again = build_config(parse_config_text(dump_config(cfg)))
    assert again == cfg


def test_appearance_only_weights():
    cfg = PipelineConfig(hierarchical_losses=False)
    w = cfg.effective_loss_weights
    assert w.lambda_s == 0.0 and w.lambda_dino == 0.0
    assert w.lambda_c == cfg.loss.lambda_c and w.lambda_depth == cfg.loss.lambda_depth
