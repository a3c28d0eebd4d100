import pytest

from mdil.config import DEFAULT_CONFIG, ConfigError, build_config, load_config, parse_pairs


def test_default_config_parses():
    cfg = load_config()
    assert cfg.sequence == ["A", "B"] and cfg.method == "ours"
    assert [d.name for d in cfg.domains] == ["A", "B", "C"]
    assert cfg.train.lr == 0.05 and cfg.train.dlr == 100.0
    assert cfg.raw["train.batch_size"] == "4"


def test_echo_is_sorted_and_complete():
    echo = load_config().echo()
    assert echo == sorted(echo)
    assert "domain.C.seed = 33" in echo and "model.decoder_width = 6" in echo


def test_overrides_and_types(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text(DEFAULT_CONFIG + "model.widths = 4,8\n")
    cfg = load_config(str(p), {"method": "ft_multihead", "train.dlr": "freeze-shared"})
    assert cfg.model.widths == (4, 8) and cfg.model.up_kernels == (4, 4)
    assert cfg.train.dlr == "freeze-shared" and cfg.method == "ft_multihead"


@pytest.mark.parametrize("text,msg", [
    ("domain.A.seed = 1\nbogus = 2", "unknown config key"),
    ("domain.A.classes = background,disk", "missing required key 'domain.A.seed'"),
    ("domain.A.seed = 1\ndomain.A.seed = 2", "duplicate key"),
    ("domain.A.seed = x", "cannot parse"),
    ("domain.A.seed = 1\nsequence = Z", "unknown domain"),
    ("domain.A.seed = 1\nmethod = magic", "unknown method"),
    ("domain.A.seed = 1\ntrain.lr = -1", "lr"),
    ("domain.A.seed = 1\ndomain.A.background = 1,2", "expected 3 values"),
    ("train.lr = 0.1", "no domains"),
    ("domain.A.seed = 1\njust text", "expected 'key = value'"),
    ("domain.A.seed = 1\ndomain.B.seed = 2\ndomain.B.classes = background,cross\n"
     "domain.A.classes = background,cross", "exclusive class"),
])
def test_config_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        build_config(parse_pairs(text))


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/x.cfg")
