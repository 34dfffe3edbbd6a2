import pytest

from lilac.config import RunConfig, load_config, parse_config
from lilac.numerics import ConfigError


def test_defaults_round_trip(tmp_path):
    cfg = load_config(None)
    assert cfg == RunConfig()
    assert cfg.digest() == RunConfig().digest()


def test_sections_parse(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(
        "[backbone]\nlevels = [4, 8]\nembed_dim = 8\n"
        "[train]\nsteps = 50\nwarmup_steps = 10\nbase_lr = 0.01\n"
        "[train.backbone]\nbase_lr = 0.002\n"
        "[data]\nn = 10\ncoupling = 0.3\n"
        "[eval]\nsteps = 5\n"
    )
    cfg = load_config(path)
    assert cfg.backbone.levels == (4, 8)
    assert cfg.train.steps == 50 and cfg.train.base_lr == 0.01
    # the backbone subtable inherits [train] and overrides its own keys
    assert cfg.backbone_train.steps == 50 and cfg.backbone_train.base_lr == 0.002
    assert cfg.data.n == 10 and cfg.data.coupling == 0.3
    assert cfg.eval.steps == 5
    assert cfg.digest() != RunConfig().digest()


@pytest.mark.parametrize("raw", [
    {"model": {}},
    {"train": {"learning_rate": 1}},
    {"backbone": {"levels": []}},
    {"train": {"steps": 5, "warmup_steps": 10}},
])
def test_bad_configs(raw):
    with pytest.raises(ConfigError):
        parse_config(raw)


def test_malformed_toml(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[train\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_seed_and_precision_overrides():
    cfg = RunConfig().with_seed(9).with_precision("f64")
    assert {cfg.train.seed, cfg.backbone_train.seed, cfg.data.seed, cfg.eval.seed} == {9}
    assert cfg.train.precision == cfg.backbone_train.precision == "f64"


def test_partial_sections_keep_the_recipe():
    recipe = RunConfig()
    cfg = parse_config({"train": {"seed": 4}, "backbone": {"embed_dim": 32}})
    assert cfg.train.base_lr == recipe.train.base_lr
    assert cfg.backbone.levels == recipe.backbone.levels and cfg.backbone.embed_dim == 32
    assert cfg.backbone_train.steps == recipe.backbone_train.steps
    assert cfg.backbone_train.seed == 4


def test_wrong_value_type():
    with pytest.raises(ConfigError):
        parse_config({"train": {"steps": "many"}})
