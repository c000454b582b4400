import pytest

from factorrec.cli import PRESETS, preset_path
from factorrec.config import ConfigError, RunConfig, config_to_text, parse_config, parse_config_text


def test_gamma_line():
    assert parse_config_text("gamma = 0.1")["gamma"] == 0.1


def test_gamma_domain(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("gamma = -1\n")
    with pytest.raises(ConfigError, match="gamma"):
        parse_config(p)


def test_override_precedence(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("epochs = 100  # long run\n\n# comment line\nlr = 0.5\n")
    cfg = parse_config(p, {"epochs": "2"})
    assert cfg.epochs == 2 and cfg.lr == 0.5


def test_unknown_and_malformed_keys_name_the_line():
    with pytest.raises(ConfigError, match=r"c:2: unknown key 'gama'"):
        parse_config_text("gamma = 0.1\ngama = 0.1", "c")
    with pytest.raises(ConfigError, match=r"'epochs' \(line 1\)"):
        parse_config_text("epochs = ten", "c")
    with pytest.raises(ConfigError, match="line|:1:"):
        parse_config_text("epochs 10", "c")
    with pytest.raises(ConfigError):
        parse_config(None, {"nope": "1"})


def test_required_paths():
    with pytest.raises(ConfigError, match="interactions"):
        RunConfig().require_data()
    RunConfig(interactions="a", item_entity="b").require_data()


def test_validation():
    for bad in ({"softmax_mode": "sampled:0"}, {"train_frac": 1.0}, {"k_list": ()}, {"C1": 0}, {"lr": 0.0}):
        with pytest.raises(ConfigError):
            RunConfig(**bad)
    assert RunConfig(softmax_mode="sampled:64").n_negatives == 64


def test_text_roundtrip():
    cfg = RunConfig(D=7, decoder_tied=True, k_list=(1, 5), softmax_mode="sampled:9")
    assert parse_config(None, parse_config_text(config_to_text(cfg))) == cfg


@pytest.mark.parametrize(
    "name,expect",
    [
        ("lastfm", dict(D=16, C1=4, C2=4, gamma=0.1, lr=2e-4, l2_weight=1e-8, batch_size=128, epochs=100)),
        ("movielens", dict(D=30, C1=4, C2=4, gamma=0.1, lr=4e-4, l2_weight=1e-8, batch_size=512, epochs=10)),
        ("yelp", dict(D=25, C1=6, C2=6, gamma=0.1, lr=2e-4, l2_weight=5e-9, batch_size=256, epochs=15)),
    ],
)
def test_presets(name, expect):
    assert name in PRESETS
    cfg = parse_config(preset_path(name))
    for k, v in expect.items():
        assert getattr(cfg, k) == v, k
