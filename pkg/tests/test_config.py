import pytest

from csrlab import config
from csrlab.config import ConfigError


def test_defaults_round_trip():
    cfg = config.RunConfig()
    again = config.parse_text(cfg.to_text())
    assert again.flat() == cfg.flat()
    assert cfg.defense.tau == 0.85 and cfg.attack.epsilon == 4 / 255


def test_parse_values():
    cfg = config.parse_text("""
# comment line
attack.epsilon = 8/255   # trailing comment
attack.step_size = auto
attack.random_init = yes
analysis.radii = 2, 4, 8
defense.modes = none, csr
model.lr = 1e-3
""")
    assert cfg.attack.epsilon == 8 / 255
    assert cfg.attack.step_size is None and cfg.attack.random_init is True
    assert cfg.analysis.radii == [2.0, 4.0, 8.0]
    assert cfg.defense.modes == ["none", "csr"]
    assert cfg.model.lr == 1e-3


@pytest.mark.parametrize("text", ["attack.nope = 1", "nosuch.key = 1", "attack = 3", "just words",
                                  "model.epochs = ten", "output.plots = maybe"])
def test_strict_parsing(text):
    with pytest.raises(ConfigError):
        config.parse_text(text)


def test_precedence(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("attack.steps = 20\nattack.seed = 4\nmodel.seed = 4\n")
    cfg = config.load(p)
    assert cfg.attack.steps == 20 and cfg.attack.seed == 4
    cfg = config.load(p, ["attack.steps=30"])
    assert cfg.attack.steps == 30
    cfg = config.load(p, ["attack.seed=5"], seed=9)
    assert cfg.attack.seed == cfg.model.seed == cfg.dataset.seed == 9
    with pytest.raises(ConfigError):
        config.load(p, ["attack.steps"])
