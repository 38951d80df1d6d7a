import pytest

from lipnext.trainer.config import ConfigError, TrainConfig, load_config, parse_assignments


def test_defaults_validate():
    cfg = TrainConfig()
    assert cfg.batch_size == 128 and cfg.lookahead_k == 5
    assert cfg.eps_train == pytest.approx(36 / 255)
    assert cfg.mode.lookahead and cfg.mode.retraction


def test_parse_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nepochs = 3\neps_train = 72/255  # fraction\nretraction = off\n\npadding = zero\n")
    cfg = load_config(p, ["epochs=5", "seed = 9"])
    assert cfg.epochs == 5 and cfg.seed == 9
    assert cfg.eps_train == pytest.approx(72 / 255)
    assert cfg.retraction is False and cfg.padding == "zero"


def test_round_trip_through_text(tmp_path):
    cfg = TrainConfig(epochs=2, lr=0.5, activation="minmax", metrics="m.csv")
    p = tmp_path / "c.cfg"
    p.write_text(cfg.to_text())
    assert load_config(p) == cfg


@pytest.mark.parametrize(
    "lines,msg",
    [
        (["nope = 1"], "unknown key 'nope'"),
        (["epochs 3"], "expected key = value"),
        (["epochs = three"], "bad value for epochs"),
        (["lookahead = maybe"], "bad value for lookahead"),
    ],
)
def test_parse_errors(lines, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_assignments(lines)


@pytest.mark.parametrize(
    "kw",
    [dict(lr=-1), dict(epochs=0), dict(beta2=1.0), dict(warmup_frac=2), dict(precision="float16"), dict(v0="big")],
)
def test_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.cfg")


def test_model_spec():
    spec = TrainConfig(depth=2, width=16, patch=1).model_spec((8, 8, 1), 10)
    assert spec.depth == 2 and spec.input_shape == (8, 8, 1)
