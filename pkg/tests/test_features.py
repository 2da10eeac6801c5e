import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simcurl.corpus import UserSequence
from simcurl.features import (
    FeatureError,
    IufVector,
    bow,
    cf_iuf,
    command_frequencies,
    featurize,
    fit_iuf,
    session_features,
    user_features,
)
from simcurl.numerics import DimensionError
from simcurl.sessions import Session


def _user(uid, commands):
    return UserSequence(uid, commands, np.arange(len(commands), dtype=float))


def test_frequency_example():
    assert command_frequencies([0, 0, 1], 3).tolist() == pytest.approx([2 / 3, 1 / 3, 0])


def test_repeated_command_is_one_hot():
    assert command_frequencies([2] * 9, 4).tolist() == [0, 0, 1, 0]


@given(st.lists(st.integers(0, 9), min_size=1, max_size=200), st.randoms(use_true_random=False))
@settings(max_examples=100, deadline=None)
def test_frequencies_are_order_free_and_normalized(commands, rnd):
    f = command_frequencies(commands, 10)
    shuffled = list(commands)
    rnd.shuffle(shuffled)
    assert np.array_equal(f, command_frequencies(shuffled, 10))
    assert abs(f.sum() - 1) < 1e-12 and np.all(f >= 0)


def test_empty_input_rejected():
    with pytest.raises(FeatureError):
        command_frequencies([], 3)


def test_bow_is_user_features():
    u = _user(0, [1, 2, 2])
    assert np.array_equal(bow(u, 4), user_features(u, 4))


def test_session_rows():
    u = _user(0, [0, 0, 1, 2])
    sessions = [Session(0, np.array([0, 1]), 0.0), Session(1, np.array([2, 3]), 3.0)]
    rows = session_features(u, sessions, 3)
    assert rows.tolist() == [[1, 0, 0], [0, 0.5, 0.5]]
    feat = featurize(u, sessions, 3)
    assert feat.n_sessions == 2 and feat.sizes.tolist() == [2, 2]


# -- IUF ---------------------------------------------------------------------


def _four_users():
    # command 0: everyone, command 1: one user, command 2: nobody
    return [_user(0, [0, 1]), _user(1, [0]), _user(2, [0, 0]), _user(3, [0])]


def test_iuf_examples():
    iuf = fit_iuf(_four_users(), 3)
    assert iuf.values[0] == 0.0
    assert iuf.values[1] == pytest.approx(1.386294, abs=1e-6)
    assert iuf.values[2] == pytest.approx(math.log(4))


def test_uniform_command_contributes_nothing():
    iuf = fit_iuf(_four_users(), 3)
    v = cf_iuf(_user(9, [0, 0, 0, 1]), iuf)
    assert v[0] == 0.0 and v[1] == pytest.approx(0.25 * math.log(4))


def test_single_command_user_is_scaled_one_hot():
    iuf = IufVector(np.array([0.5, 2.0, 3.0]), 5)
    assert cf_iuf(_user(0, [1, 1]), iuf).tolist() == [0, 2.0, 0]


def test_cf_iuf_matches_independent_product():
    rng = np.random.default_rng(4)
    users = [_user(i, rng.integers(0, 12, size=rng.integers(1, 30))) for i in range(25)]
    iuf = fit_iuf(users, 12)
    for u in users[:5]:
        counts = np.bincount(u.commands, minlength=12) / len(u)
        n_c = np.array([sum(c in set(v.commands.tolist()) for v in users) for c in range(12)])
        want = counts * np.log(25 / np.maximum(n_c, 1))
        assert np.allclose(cf_iuf(u, iuf), want, rtol=0, atol=1e-15)
        assert np.all(cf_iuf(u, iuf) <= math.log(25) * counts + 1e-15)


def test_iuf_monotone_in_user_count():
    rng = np.random.default_rng(5)
    users = [_user(i, rng.integers(0, 8, size=rng.integers(1, 10))) for i in range(40)]
    iuf = fit_iuf(users, 8)
    n_c = np.array([sum(c in set(v.commands.tolist()) for v in users) for c in range(8)])
    for a in range(8):
        for b in range(8):
            if n_c[a] <= n_c[b]:
                assert iuf.values[a] >= iuf.values[b]


def test_iuf_errors():
    with pytest.raises(FeatureError):
        fit_iuf([], 3)
    with pytest.raises(DimensionError):
        cf_iuf(_user(0, [0]), IufVector(np.zeros(3), 1), vocab_size=4)
