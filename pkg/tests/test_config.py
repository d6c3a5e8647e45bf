import pytest

from stgconvnet import config, net
from stgconvnet.config import ConfigError
from stgconvnet.learner import TrainConfig


def test_parse_keys_and_layers():
    cfg, spec = config.parse("""
# comment
layer = kind=conv3d filters=8 kernel=5x5x5 stride=2x2x2
layer = kind=spatial_full filters=3 kernel=*x*x2 stride=1x1x1
iterations = 7   # trailing comment
layer_rate_scales = 1, 0.5
minibatch_size = all
epsilon = 0.25
recovery_steps = auto
""")
    assert cfg.iterations == 7 and cfg.layer_rate_scales == (1.0, 0.5)
    assert cfg.minibatch_size is None and cfg.epsilon == 0.25 and cfg.recovery_steps is None
    assert spec.layers[1].kind == "spatial_full" and spec.layers[1].kernel[2] == 2


def test_unknown_key_names_key_and_line():
    with pytest.raises(ConfigError, match=r"cfg:3: unknown key 'bogus'"):
        config.parse("iterations = 2\n\nbogus = 1\n", "cfg")


@pytest.mark.parametrize("text, match", [
    ("iterations = many", "bad value"),
    ("iterations = 2\niterations = 3", "duplicate"),
    ("just words", "expected key = value"),
    ("iterations = 0", "iterations"),
    ("net = exp1\nlayer = kind=full filters=1", "not both"),
    ("layer = kind=pool filters=1", "bad layer"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        config.parse(text)


def test_net_reference(tmp_path):
    _, ref = config.parse("net = exp2")
    assert config.resolve_net(ref, 1) == net.preset("exp2", 1)
    (tmp_path / "n.txt").write_text(net.spec_to_text(net.preset("exp3", 3)))
    _, spec = config.parse(f"net = {tmp_path / 'n.txt'}")
    assert config.resolve_net(spec, 1) == net.preset("exp3", 1)
    with pytest.raises(ConfigError):
        config.resolve_net(None, 1)
    with pytest.raises(ConfigError):
        config.resolve_net("exp7", 1)


def test_exp1_template_round_trips():
    text = config.template("exp1")
    assert "kernel=15x15x15 stride=7x7x7" in text
    assert "kernel=7x7x7 stride=3x3x3" in text
    assert "kernel=3x3x2 stride=2x2x1" in text
    cfg, spec = config.parse(text)
    assert [l.num_filters for l in spec.layers] == [120, 40, 20]
    assert cfg.scheme == "layer_by_layer" and cfg.layer_add_every == 400 and cfg.iterations == 1200
    assert cfg.num_chains == 3 and cfg.langevin_steps == 20


@pytest.mark.parametrize("name", ["exp2", "exp2_fire", "exp3"])
def test_templates_parse(name):
    cfg, spec = config.parse(config.template(name))
    assert isinstance(cfg, TrainConfig) and spec == net.preset(name, 1)
