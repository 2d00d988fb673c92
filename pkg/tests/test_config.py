import pytest

from dge.config import cli_overrides, load_config, parse_ini, validate
from dge.errors import ConfigError

INI = """
[run]
seed = 7
out_dir = runs/ini

[model]
image_size = 16
patch_size = 2
channels = 16
heads = 2
phi = 1, 2, 4
gamma = 0.25   # budget

[dataset]
image_size = 16
num_classes = 8

[train]
epochs = 2
precision = f64
"""


def test_defaults_validate():
    cfg = validate({})
    assert cfg.model.phi == [1, 2, 4] and cfg.model.granularity.region_size == 4
    assert cfg.train.precision == "f32" and cfg.model.grid_size == 8


def test_ini_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(INI)
    cfg = load_config(path)
    assert cfg.seed == 7 and cfg.out_dir == "runs/ini"
    assert cfg.model.phi == [1, 2, 4] and cfg.model.gamma == 0.25
    assert cfg.train.epochs == 2 and cfg.train.precision == "f64"


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(INI)
    cfg = load_config(path, cli_overrides(seed=9, budget=0.75, phi="1 2", precision="f32"))
    assert cfg.seed == 9 and cfg.model.gamma == 0.75
    assert cfg.model.phi == [1, 2] and cfg.train.precision == "f32"
    assert cfg.out_dir == "runs/ini"


@pytest.mark.parametrize("text, message", [
    ("[model]\nwidth = 3\n", "model.width"),
    ("[sampler]\nkind = x\n", "unknown section"),
    ("[model]\nphi = 2, 1\n", "strictly increasing"),
    ("[model]\nchannels = 10\nheads = 4\n", "not divisible"),
    ("[model]\ngamma = 1.5\n", "gamma"),
    ("[model]\nimage_size = 16\n", "image_size"),
    ("[model]\nregion_size = 16\n", "exceeds"),
    ("no section header\n", "<string>"),
])
def test_invalid_configs(text, message):
    with pytest.raises(ConfigError, match=message):
        validate(parse_ini(text))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read config"):
        load_config(tmp_path / "missing.ini")


def test_layer_wise_region_size_is_allowed():
    cfg = validate({"model": {"region_size": 0}})
    assert cfg.model.granularity.region_size == 0
