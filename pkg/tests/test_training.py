import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import f1_score

import oracles
from simcurl import numerics as nx
from simcurl.corpus import GenConfig, generate_synthetic
from simcurl.features import featurize_corpus
from simcurl.model import ModelConfig, frozen, init_params, encoder_params, save_encoder
from simcurl.numerics import Tensor
from simcurl.sessions import SegmentConfig
from simcurl.training import (
    EXPERIENCE_MERGE,
    ContrastiveConfig,
    EvaluationError,
    LossError,
    PretrainError,
    ProbeConfig,
    accuracy,
    contrastive_loss,
    cosine_sim,
    cross_entropy,
    encode_users,
    fit_linear_probe,
    merge_labels,
    per_class_f1,
    pretrain,
    score,
    weighted_f1,
)

from conftest import finite_difference, rel_err


# -- similarity and loss -------------------------------------------------------


def test_cosine_examples():
    assert cosine_sim([1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0, abs=1e-15)
    assert cosine_sim([1.0, 0.0], [0.0, 3.0]) == 0.0
    assert cosine_sim([1.0, 1.0], [1.0, 0.0], 0.5) == pytest.approx(math.sqrt(2), abs=1e-12)


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.floats(1e-3, 1e3))
@settings(max_examples=100, deadline=None)
def test_cosine_scale_invariance(v, alpha):
    z1 = np.array(v) + np.array([0.5, 0.0, 0.0])
    if np.linalg.norm(z1) < 1e-3:
        z1 = z1 + 1.0
    z2 = np.array([0.3, -1.2, 2.0])
    assert abs(cosine_sim(alpha * z1, z2) - cosine_sim(z1, z2)) < 1e-12


def test_zero_norm_names_the_user():
    with pytest.raises(LossError, match="user 42"):
        cosine_sim([0.0, 0.0], [1.0, 0.0], user_id=42)
    z = np.ones((3, 2))
    z[1] = 0
    with pytest.raises(LossError, match="user 8"):
        contrastive_loss(z, np.ones((3, 2)), user_ids=[7, 8, 9])


def test_all_equal_pair_is_four_ln2():
    z = np.ones((2, 5))
    assert abs(float(contrastive_loss(z, z).data) - 4 * math.log(2)) < 1e-12


@pytest.mark.parametrize("b", [2, 3, 4])
@pytest.mark.parametrize("include_positive", [False, True])
def test_loss_matches_enumeration(b, include_positive):
    rng = np.random.default_rng(b)
    for _ in range(10):
        z1, z2 = rng.normal(size=(b, 6)), rng.normal(size=(b, 6))
        tau = float(rng.uniform(0.2, 2.0))
        got = float(contrastive_loss(z1, z2, tau, include_positive).data)
        assert abs(got - oracles.contrastive_loss(z1, z2, tau, include_positive)) < 1e-10


def test_loss_is_permutation_invariant():
    rng = np.random.default_rng(11)
    z1, z2 = rng.normal(size=(16, 8)), rng.normal(size=(16, 8))
    perm = rng.permutation(16)
    a = float(contrastive_loss(z1, z2, 0.5).data)
    assert abs(a - float(contrastive_loss(z1[perm], z2[perm], 0.5).data)) < 1e-12


def test_batch_of_one_rejected():
    with pytest.raises(LossError):
        contrastive_loss(np.ones((1, 3)), np.ones((1, 3)))


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    y = np.array([0, 2, 1, 2])
    g = nx.gradients(cross_entropy(x, y), {"x": x})["x"]
    p = np.exp(x.data) / np.exp(x.data).sum(axis=1, keepdims=True)
    expected = (p - np.eye(3)[y]) / 4
    assert np.allclose(g, expected, atol=1e-15)
    fd = finite_difference(lambda: float(cross_entropy(Tensor(x.data), y).data), x.data)
    assert rel_err(g, fd) < 1e-6


# -- metrics -------------------------------------------------------------------


def test_metric_examples():
    assert accuracy([1, 2], [1, 2]) == 1.0 and weighted_f1([1, 2], [1, 2]) == 1.0
    assert per_class_f1([0, 0, 1], [0, 1, 1], 2) == pytest.approx([2 / 3, 2 / 3])
    assert weighted_f1([0, 0, 1], [0, 1, 1]) == pytest.approx(2 / 3)
    assert accuracy([0, 0, 1], [0, 1, 1]) == pytest.approx(2 / 3)
    assert accuracy([0, 1, 0, 1], [1, 1, 1, 1]) == 0.5
    assert weighted_f1([0, 1, 0, 1], [1, 1, 1, 1]) == pytest.approx(1 / 3)


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=60))
@settings(max_examples=200, deadline=None)
def test_weighted_f1_agrees_with_sklearn(pairs):
    y, p = zip(*pairs)
    want = f1_score(y, p, average="weighted", labels=range(5), zero_division=0)
    assert weighted_f1(y, p, 5) == pytest.approx(want, abs=1e-12)


def test_empty_split_rejected():
    with pytest.raises(EvaluationError):
        accuracy([], [])
    with pytest.raises(EvaluationError):
        weighted_f1([], [])


def test_experience_merge():
    assert merge_labels(range(8), EXPERIENCE_MERGE).tolist() == [0, 0, 1, 1, 1, 2, 2, 2]
    s = score([0, 3, 7], [1, 4, 5], 8, EXPERIENCE_MERGE)
    assert s["accuracy"] == 0.0 and s["merged_accuracy"] == 1.0


# -- linear probe ----------------------------------------------------------------


def test_probe_separates_separable_data():
    rng = np.random.default_rng(0)
    centers = np.array([[4.0, 0, 0], [0, 4.0, 0], [0, 0, 4.0]])
    y = rng.integers(0, 3, 90)
    x = centers[y] + rng.normal(scale=0.3, size=(90, 3))
    probe = fit_linear_probe(lambda e: x, y, 3, ProbeConfig(epochs=200, lr=0.05, dropout=0.0))
    assert accuracy(y, probe.predict(x)) == 1.0
    assert probe.weight.shape == (3, 3) and probe.bias.shape == (3,)


def test_probe_is_deterministic():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(40, 5)), rng.integers(0, 2, 40)
    a = fit_linear_probe(lambda e: x, y, 2, ProbeConfig(epochs=5, seed=3))
    b = fit_linear_probe(lambda e: x, y, 2, ProbeConfig(epochs=5, seed=3))
    assert all(np.array_equal(a.arrays()[k], b.arrays()[k]) for k in a.arrays())


@pytest.mark.parametrize("bad", [dict(dropout=1.0), dict(fraction=0.0), dict(fraction=1.5)])
def test_probe_config_validation(bad):
    with pytest.raises(ValueError):
        ProbeConfig(**bad).validate()


@pytest.mark.parametrize("bad", [dict(batch_size=1), dict(temperature=0.0), dict(dropout=1.0)])
def test_contrastive_config_validation(bad):
    with pytest.raises(ValueError):
        ContrastiveConfig(**bad).validate()


# -- pretraining -----------------------------------------------------------------

TINY = ModelConfig(vocab_size=30, dim=16, heads=2, depth=1, max_sessions=16)


@pytest.fixture(scope="module")
def tiny_features():
    g = generate_synthetic(GenConfig(n_users=64, vocab_size=30, archetype_count=3, seed=1))
    span = max(u.timestamps[-1] for u in g.corpus.users) - min(u.timestamps[0] for u in g.corpus.users)
    return featurize_corpus(g.corpus, SegmentConfig.scaled_to(span))


def test_pretraining_reduces_loss(tiny_features):
    res = pretrain(tiny_features, range(64), TINY, ContrastiveConfig(batch_size=16, epochs=10, lr=3e-3, seed=2))
    assert len(res.epoch_losses) == 10 and all(np.isfinite(res.epoch_losses))
    assert res.epoch_losses[-1] < res.epoch_losses[0]
    assert not any(k.startswith("head.") for k in res.encoder)
    assert set(res.head) == {"head.1.w", "head.1.b", "head.2.w", "head.2.b"}


def test_pretraining_is_deterministic(tiny_features, tmp_path):
    cfg = ContrastiveConfig(batch_size=16, epochs=2, seed=5)
    for name in ("a", "b"):
        save_encoder(tmp_path / f"{name}.json", pretrain(tiny_features, range(64), TINY, cfg).encoder, TINY)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_zero_dropout_views_are_identical_and_loss_finite(tiny_features):
    res = pretrain(tiny_features, range(32), TINY, ContrastiveConfig(batch_size=8, epochs=1, dropout=0.0))
    assert np.all(np.isfinite(res.step_losses))


def test_nan_loss_reports_where(tiny_features, monkeypatch):
    import simcurl.training as tr

    def broken(*a, **k):
        return Tensor(np.array(np.nan))

    monkeypatch.setattr(tr, "contrastive_loss", broken)
    with pytest.raises(PretrainError, match=r"epoch 0, batch 0, users \["):
        pretrain(tiny_features, range(16), TINY, ContrastiveConfig(batch_size=8, epochs=1))


def test_probe_keeps_encoder_frozen(tiny_features):
    params = encoder_params(init_params(TINY, seed=0))
    before = {k: v.data.copy() for k, v in params.items()}
    ids = list(range(40))
    y = np.arange(40) % 2
    cfg = ProbeConfig(epochs=3, dropout=0.5)
    fit_linear_probe(lambda e: encode_users(params, TINY, tiny_features, ids, cfg.dropout, 0, "probe-view", e), y, 2, cfg)
    assert all(np.array_equal(before[k], params[k].data) for k in params)
    assert all(v.grad is None for v in frozen(params).values())


def test_encode_users_order_and_views(tiny_features):
    params = encoder_params(init_params(TINY, seed=0))
    ids = [5, 3, 9]
    full = encode_users(params, TINY, tiny_features, ids)
    single = np.vstack([encode_users(params, TINY, tiny_features, [u]) for u in ids])
    assert np.max(np.abs(full - single)) < 1e-9
    a = encode_users(params, TINY, tiny_features, ids, 0.5, 1, "probe-view", 0)
    b = encode_users(params, TINY, tiny_features, ids, 0.5, 1, "probe-view", 0)
    assert np.array_equal(a, b)
