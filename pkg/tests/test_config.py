import pytest
from hypothesis import given, settings, strategies as st

from stgnn_lab.config import (
    ConfigError, ExperimentConfig, config_hash, parse_config, parse_config_text, serialize_config,
    validate_config,
)


def test_empty_is_defaults():
    cfg = parse_config_text("")
    assert cfg == ExperimentConfig()
    assert cfg.model.hidden == 64 and cfg.train.batch_size == 32 and cfg.train.lr == 0.001
    assert cfg.train.patience == 10 and cfg.model.horizons == (3, 6, 12)
    assert cfg.split.parts == (0.7, 0.1, 0.2)


def test_parses_types(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("""
# comment
[data]
kind = flow
path =
[model]
backbone = rnn
spatial = gat
horizons = 1, 2
output_steps = 2
layers =
; another comment
[train]
time_budget_s = 12.5
[split]
policy = days
parts = 21, 2, 7
""")
    cfg = parse_config(p)
    assert cfg.data.kind == "flow" and cfg.data.path is None
    assert cfg.model.horizons == (1, 2) and cfg.model.layers is None
    assert cfg.train.time_budget_s == 12.5
    assert cfg.split.parts == (21.0, 2.0, 7.0)


@pytest.mark.parametrize("text,key,line", [
    ("[model]\nheads = 4\n", "model.heads", 2),
    ("[model]\nbackbone = rnn\nspatial = gat\nhidden = 32\n", "model.hidden", 4),
    ("[model]\n\nhorizons = 3, 13\n", "model.horizons", 3),
    ("[model]\nbackbone = rnn\nspatial = full-attn\n", "model.spatial", 3),
    ("[train]\nlr = 0\n", "train.lr", 2),
    ("[data]\nkind = volume\n", "data.kind", 2),
])
def test_constraint_errors(text, key, line):
    with pytest.raises(ConfigError) as exc:
        parse_config_text(text)
    assert exc.value.key == key
    assert exc.value.line == line
    assert key in str(exc.value)


def test_head_dim_error_reports_line():
    with pytest.raises(ConfigError) as exc:
        parse_config_text("[model]\nspatial = gat\nhead_dim = 4\n")
    assert exc.value.line == 3


@pytest.mark.parametrize("text,match,line", [
    ("[bogus]\n", "unknown section", 1),
    ("[model]\nwidth = 3\n", "unknown key", 2),
    ("hidden = 3\n", "before any", 1),
    ("[model]\nhidden\n", "key = value", 2),
    ("[model]\nhidden = 3\nhidden = 4\n", "duplicate", 3),
    ("[model]\nhidden = lots\n", "bad value", 2),
    ("[model\n", "malformed", 1),
])
def test_syntax_errors(text, match, line):
    with pytest.raises(ConfigError, match=match) as exc:
        parse_config_text(text)
    assert exc.value.line == line


def test_round_trip():
    cfg = parse_config_text("[model]\nbackbone = rnn\nspatial = gat\n[train]\ntime_budget_s = 30\n")
    assert parse_config_text(serialize_config(cfg)) == cfg


def test_hash_stable_and_sensitive():
    a = ExperimentConfig()
    assert config_hash(a) == config_hash(parse_config_text(serialize_config(a)))
    assert config_hash(a) != config_hash(a.with_train(seed=2))
    assert len(config_hash(a)) == 12


def test_validate_programmatic():
    with pytest.raises(ConfigError):
        validate_config(ExperimentConfig().with_model(output_steps=6))
    with pytest.raises(ConfigError) as exc:
        validate_config(ExperimentConfig().with_model(hidden=32))
    assert exc.value.key == "model.head_dim" and exc.value.line is None


def test_rnn_gcn_ignores_heads():
    cfg = parse_config_text("[model]\nbackbone = rnn\nspatial = gcn\nhidden = 32\n")
    assert cfg.model.hidden == 32


@settings(max_examples=40, deadline=None)
@given(hidden=st.sampled_from([8, 16, 64]), lr=st.floats(1e-5, 1.0), seed=st.integers(0, 10 ** 6),
       spatial=st.sampled_from(["gcn", "gat", "full-attn"]))
def test_round_trip_property(hidden, lr, seed, spatial):
    cfg = ExperimentConfig().with_model(hidden=hidden, heads=hidden // 8, head_dim=8, spatial=spatial)
    cfg = cfg.with_train(lr=lr, seed=seed)
    validate_config(cfg)
    assert parse_config_text(serialize_config(cfg)) == cfg
