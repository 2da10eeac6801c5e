import pytest

from simcurl.config import ConfigError, RunConfig, apply_settings, load_config, parse_config_text
from simcurl.sessions import REFERENCE_SPAN


def test_text_round_trip_keeps_fingerprint(tmp_path):
    cfg = RunConfig().override(**{"model.dim": 32, "pretrain.temperature": 0.5, "seg.kernel": "laplace"})
    path = tmp_path / "run.txt"
    path.write_text(cfg.to_text())
    back = load_config(path)
    assert back == cfg and back.fingerprint == cfg.fingerprint


def test_fingerprint_tracks_settings():
    base = RunConfig()
    assert base.fingerprint == RunConfig().fingerprint
    assert base.with_seed(1).fingerprint != base.fingerprint
    assert base.override(**{"probe.epochs": 3}).fingerprint != base.fingerprint


def test_comments_and_blank_lines():
    text = "# header\n\nmodel.depth = 3  # deeper\nseed=4\n"
    cfg = apply_settings(RunConfig(), parse_config_text(text))
    assert cfg.model.depth == 3 and cfg.seed == 4


@pytest.mark.parametrize("text,match", [
    ("model.width=3\n", "unknown"),
    ("model.depth=three\n", "cannot parse"),
    ("model.dim=7\n", "even"),
    ("seed=1\nseed=2\n", "duplicate"),
    ("just words\n", "key=value"),
    ("model.vocab_size=9\n", "unknown"),
])
def test_rejections(text, match):
    with pytest.raises(ConfigError, match=match):
        apply_settings(RunConfig(), parse_config_text(text))


def test_booleans():
    cfg = apply_settings(RunConfig(), {"pretrain.include_positive": "true", "model.use_user_branch": "no"})
    assert cfg.pretrain.include_positive and not cfg.model.use_user_branch


def test_seed_override_wins(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("seed = 3\n")
    assert load_config(path, seed=9).seed == 9
    assert load_config(path).seed == 3


def test_stage_seeds_are_derived():
    a, b = RunConfig().with_seed(1), RunConfig().with_seed(2)
    assert a.gen_config().seed != b.gen_config().seed
    assert a.pretrain_config().seed != a.probe_config().seed
    assert a.pretrain_config(5).seed == b.pretrain_config(5).seed


def test_segmentation_settings_scale_with_span():
    seg = RunConfig().seg
    assert seg.resolve(REFERENCE_SPAN).q_levels == 2**15
    assert seg.resolve(REFERENCE_SPAN / 2).q_levels == 2**14
    fixed = RunConfig().override(**{"seg.scale_to_span": False}).seg
    assert fixed.resolve(REFERENCE_SPAN / 2).q_levels == 2**15
