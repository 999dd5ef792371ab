import pytest

from egru_lm.config import ConfigError, RunConfig, parse_config, parse_config_text


def test_empty_is_defaults(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("")
    assert parse_config(p) == RunConfig()
    assert parse_config(None) == RunConfig()


def test_override_wins(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("[train]\nlr = 0.001\n")
    assert parse_config(p).train.lr == 0.001
    assert parse_config(p, ["train.lr=0.01"]).train.lr == 0.01


def test_bad_value_names_line():
    with pytest.raises(ConfigError, match=r":3: bad value for train\.lr"):
        parse_config_text("[train]\n# comment\nlr = banana\n")


@pytest.mark.parametrize("text", ["[train]\nnope = 1\n", "[bogus]\n", "lr = 1\n", "[train]\njunk\n"])
def test_errors(text):
    with pytest.raises(ConfigError, match=r":\d+:"):
        parse_config_text(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "none.cfg")


def test_bad_override():
    with pytest.raises(ConfigError):
        parse_config_text("", ["lr=1"])


def test_types_and_dotted_keys():
    cfg = parse_config_text("model.hidden_dims = 64, 64\n[model]\ncell = lstm\n"
                            "[train]\nkeep_best = no\nepochs = 3 # inline\n[prune]\nlr_scale = 0.5\n")
    assert cfg.model.hidden_dims == (64, 64)
    assert cfg.model.cell == "lstm"
    assert cfg.train.keep_best is False and cfg.train.epochs == 3
    assert cfg.prune_schedule().lr_scale == 0.5
    assert RunConfig().prune_schedule().lr_scale == 1.0


def test_dumps_roundtrip():
    cfg = parse_config_text("[train]\nlr = 0.003\n[model]\nhidden_dims = 32,32\nembed_dim = 32\n")
    assert parse_config_text(cfg.dumps()) == cfg
    lm = cfg.lm_config(50)
    assert lm.vocab_size == 50 and lm.hidden_dims == (32, 32)
    with pytest.raises(ValueError):
        parse_config_text("[model]\nhidden_dims = 32,31\n").lm_config(50)
