"""Frequency featurizers and the BoW / CF-IUF baseline representations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import UserSequence
from .numerics import DimensionError


class FeatureError(ValueError):
    pass


def command_frequencies(commands, vocab_size: int) -> np.ndarray:
    """L1-normalised command counts."""
    commands = np.asarray(commands, dtype=np.int64)
    if commands.size == 0:
        raise FeatureError("cannot featurize an empty event list")
    return np.bincount(commands, minlength=vocab_size).astype(np.float64) / commands.size


def session_features(user: UserSequence, sessions, vocab_size: int) -> np.ndarray:
    """One frequency row per session, shape (n_sessions, vocab_size)."""
    if not sessions:
        raise FeatureError("no sessions to featurize")
    return np.stack([command_frequencies(user.commands[s.event_indices], vocab_size) for s in sessions])


def user_features(user: UserSequence, vocab_size: int) -> np.ndarray:
    return command_frequencies(user.commands, vocab_size)


bow = user_features


@dataclass
class IufVector:
    values: np.ndarray
    n_users: int


def fit_iuf(users, vocab_size: int) -> IufVector:
    """ln(N / n_c) over training users; commands no one used count as used once."""
    users = list(users)
    if not users:
        raise FeatureError("fit_iuf needs at least one training user")
    used = np.zeros(vocab_size, dtype=np.int64)
    for u in users:
        used[np.unique(u.commands)] += 1
    n = len(users)
    return IufVector(np.log(n / np.maximum(used, 1)), n)


def cf_iuf(user: UserSequence, iuf: IufVector, vocab_size: int | None = None) -> np.ndarray:
    vocab_size = len(iuf.values) if vocab_size is None else vocab_size
    if vocab_size != len(iuf.values):
        raise DimensionError(f"vocabulary size {vocab_size} does not match IUF length {len(iuf.values)}")
    return user_features(user, vocab_size) * iuf.values


@dataclass
class UserFeatures:
    """Precomputed model inputs for one user."""

    user_id: int
    sessions: np.ndarray  # (n_sessions, vocab_size)
    user: np.ndarray  # (vocab_size,)
    sizes: np.ndarray  # events per session

    @property
    def n_sessions(self) -> int:
        return len(self.sessions)


def featurize(user: UserSequence, sessions, vocab_size: int) -> UserFeatures:
    sizes = np.array([len(s) for s in sessions], dtype=np.int64)
    return UserFeatures(user.user_id, session_features(user, sessions, vocab_size), user_features(user, vocab_size), sizes)


def featurize_corpus(corpus, seg_cfg) -> dict[int, UserFeatures]:
    from .sessions import segment

    return {u.user_id: featurize(u, segment(u, seg_cfg), corpus.vocab_size) for u in corpus.users}
