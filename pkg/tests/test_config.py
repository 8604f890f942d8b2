import pytest

from distill_uq.config import ConfigError, RunConfig, apply_overrides, dump_config, load_config, parse_config


def test_defaults_round_trip(tmp_path):
    cfg = RunConfig()
    assert parse_config(dump_config(cfg)) == cfg
    path = tmp_path / "c.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_parse_comments_aliases_and_types():
    cfg = parse_config("# comment\nlambda = 0.1\nhidden_dims = 4, 5\nbalance = yes  # trailing\nepochs=3\n"
                       "final_plain_epochs=1\n")
    assert cfg.lam == 0.1 and cfg.hidden_dims == (4, 5) and cfg.balance is True and cfg.epochs == 3


@pytest.mark.parametrize("text", ["nokey\n", "bogus = 1\n", "epochs = x\n", "method = magic\n",
                                  "alpha = 2\n", "hidden_dims = 8\n", "holdout_class = first\n",
                                  "final_plain_epochs = 200\n"])
def test_bad_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.cfg")


def test_overrides_and_methods():
    cfg = apply_overrides(RunConfig(), {"method": "all", "ensemble-size": "4"})
    assert cfg.ensemble_size == 4
    assert cfg.methods() == ["single", "ensemble", "mcdropout", "selfdistill"]
    assert RunConfig().methods() == ["selfdistill"]
