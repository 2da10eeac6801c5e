"""Command-sequence data model, synthetic corpus generator, splits and JSONL I/O."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .seeding import make_rng

log = logging.getLogger(__name__)

DAY = 86400.0

# class indices of the per-archetype expertise tasks
USED, NOT_USED, PLAN_TO_USE = 0, 1, 2
EXPERTISE_CLASSES = ("used", "not_used", "plan_to_use")


class ConfigError(ValueError):
    pass


class ParseError(ValueError):
    pass


class CorpusValidationError(ValueError):
    pass


class SplitError(ValueError):
    pass


class CommandEvent(NamedTuple):
    command_id: int
    timestamp: float


@dataclass
class UserSequence:
    """One user's events, stored column-wise and sorted by timestamp."""

    user_id: int
    commands: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        self.commands = np.asarray(self.commands, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if self.commands.shape != self.timestamps.shape or self.commands.ndim != 1:
            raise CorpusValidationError(f"user {self.user_id}: commands and timestamps must be equal-length 1-D")

    def __len__(self) -> int:
        return len(self.commands)

    @property
    def events(self) -> list[CommandEvent]:
        return [CommandEvent(int(c), float(t)) for c, t in zip(self.commands, self.timestamps)]

    @classmethod
    def from_events(cls, user_id: int, events) -> UserSequence:
        events = list(events)
        commands = [int(c) for c, _ in events]
        times = [float(t) for _, t in events]
        return cls(user_id, np.array(commands, dtype=np.int64), np.array(times, dtype=np.float64))

    def validate(self, vocab_size: int) -> None:
        if len(self) == 0:
            raise CorpusValidationError(f"user {self.user_id}: no events")
        if np.any(self.commands < 0) or np.any(self.commands >= vocab_size):
            bad = int(self.commands[(self.commands < 0) | (self.commands >= vocab_size)][0])
            raise CorpusValidationError(f"user {self.user_id}: command_id {bad} outside vocab of size {vocab_size}")
        if not np.all(np.isfinite(self.timestamps)) or np.any(self.timestamps < 0):
            raise CorpusValidationError(f"user {self.user_id}: timestamps must be finite and >= 0")
        if np.any(np.diff(self.timestamps) < 0):
            raise CorpusValidationError(f"user {self.user_id}: events not sorted by timestamp")


@dataclass
class Corpus:
    vocab: list[str]
    users: list[UserSequence] = field(default_factory=list)

    def __post_init__(self):
        if not self.vocab:
            raise CorpusValidationError("vocabulary must be nonempty")
        ids = [u.user_id for u in self.users]
        if len(set(ids)) != len(ids):
            raise CorpusValidationError("user ids must be unique")
        self._index = {u.user_id: u for u in self.users}

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def user(self, user_id: int) -> UserSequence:
        return self._index[user_id]

    def __contains__(self, user_id) -> bool:
        return user_id in self._index

    def subset(self, user_ids) -> Corpus:
        return Corpus(self.vocab, [self._index[i] for i in user_ids])

    def validate(self) -> None:
        for u in self.users:
            u.validate(self.vocab_size)


@dataclass
class LabeledTask:
    name: str
    n_classes: int
    labels: dict[int, int]

    def validate(self, corpus: Corpus | None = None) -> None:
        for uid, y in self.labels.items():
            if not 0 <= y < self.n_classes:
                raise CorpusValidationError(f"task {self.name}: label {y} for user {uid} outside [0, {self.n_classes})")
            if corpus is not None and uid not in corpus:
                raise CorpusValidationError(f"task {self.name}: labeled user {uid} not in corpus")

    def restrict(self, user_ids) -> LabeledTask:
        keep = set(user_ids)
        return LabeledTask(self.name, self.n_classes, {u: y for u, y in self.labels.items() if u in keep})


@dataclass
class SplitSpec:
    name: str
    train: list[int]
    val: list[int]
    test: list[int]
    seed: int

    def parts(self) -> dict[str, list[int]]:
        return {"train": self.train, "val": self.val, "test": self.test}


# -- synthetic generator -----------------------------------------------------


@dataclass
class GenConfig:
    seed: int = 0
    n_users: int = 2000
    vocab_size: int = 200
    archetype_count: int = 5
    experience_levels: int = 8
    zipf_exponent: float = 1.1
    # multiplicative weight on an archetype's own commands inside its sessions
    affinity: float = 12.0
    mixture_concentration: float = 0.5
    # experience shifts the popularity tilt from novice_tilt down to expert_tilt
    novice_tilt: float = 1.5
    expert_tilt: float = 0.7
    experience_decay: float = 0.8
    extra_bursts_mean: float = 8.0
    max_bursts: int = 40
    burst_events_mean: float = 20.0
    max_burst_events: int = 60
    min_events: int = 50
    intra_gap_mean: float = 20.0
    intra_gap_max: float = 120.0
    burst_rate: float = 0.5  # bursts per day
    inter_gap_min: float = 4 * 3600.0
    start_spread: float = 7 * DAY
    labeled_fraction: float = 0.3
    used_threshold: float = 0.25
    plan_threshold: float = 0.08

    def validate(self) -> None:
        if self.n_users < 1:
            raise ConfigError("n_users must be >= 1")
        if self.archetype_count < 1 or self.vocab_size < self.archetype_count:
            raise ConfigError("need 1 <= archetype_count <= vocab_size")
        if self.experience_levels < 1:
            raise ConfigError("experience_levels must be >= 1")
        if not self.burst_rate > 0 or not math.isfinite(self.burst_rate):
            raise ConfigError("burst_rate must be positive and finite")
        if not self.burst_events_mean > 0 or self.max_burst_events < 1:
            raise ConfigError("bursts must contain events")
        if self.max_bursts < 2:
            raise ConfigError("max_bursts must allow at least two bursts")
        if self.min_events > self.max_bursts * self.max_burst_events:
            raise ConfigError("min_events unreachable with max_bursts * max_burst_events")
        if not 0 < self.intra_gap_mean <= self.intra_gap_max:
            raise ConfigError("need 0 < intra_gap_mean <= intra_gap_max")
        if self.inter_gap_min < 10 * self.intra_gap_max:
            raise ConfigError("inter-burst gaps must be at least 10x the largest intra-burst gap")
        if not 0 <= self.labeled_fraction <= 1:
            raise ConfigError("labeled_fraction must lie in [0, 1]")
        if not 0 <= self.plan_threshold <= self.used_threshold <= 1:
            raise ConfigError("need 0 <= plan_threshold <= used_threshold <= 1")
        if self.mixture_concentration <= 0 or self.affinity < 1:
            raise ConfigError("mixture_concentration must be > 0 and affinity >= 1")


@dataclass
class GeneratedCorpus:
    corpus: Corpus
    tasks: list[LabeledTask]
    boundaries: dict[int, list[int]]
    zipf_weights: np.ndarray
    archetype_of_command: np.ndarray
    mixtures: dict[int, np.ndarray]
    experience: dict[int, int]


def zipf_weights(vocab_size: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, vocab_size + 1, dtype=np.float64) ** exponent
    return w / w.sum()


def _assign_archetypes(cfg: GenConfig) -> np.ndarray:
    # each block of K consecutive popularity ranks holds one command per archetype
    rng = make_rng(cfg.seed, "vocab")
    k = cfg.archetype_count
    homes = np.empty(cfg.vocab_size, dtype=np.int64)
    for start in range(0, cfg.vocab_size, k):
        stop = min(start + k, cfg.vocab_size)
        homes[start:stop] = rng.permutation(k)[: stop - start]
    return homes


def expertise_label(share: float, cfg: GenConfig) -> int:
    if share >= cfg.used_threshold:
        return USED
    if share >= cfg.plan_threshold:
        return PLAN_TO_USE
    return NOT_USED


def _generate_user(cfg: GenConfig, user_id: int, base: np.ndarray, homes: np.ndarray):
    rng = make_rng(cfg.seed, "user", user_id)
    k = cfg.archetype_count
    levels = np.arange(cfg.experience_levels)
    prior = cfg.experience_decay**levels
    level = int(rng.choice(cfg.experience_levels, p=prior / prior.sum()))
    mixture = rng.dirichlet(np.full(k, cfg.mixture_concentration)) if k > 1 else np.ones(1)
    labeled = bool(rng.random() < cfg.labeled_fraction)

    frac = level / max(cfg.experience_levels - 1, 1)
    tilt = cfg.novice_tilt + (cfg.expert_tilt - cfg.novice_tilt) * frac
    tilted = base**tilt

    n_bursts = min(2 + int(rng.poisson(cfg.extra_bursts_mean)), cfg.max_bursts)
    sizes = np.clip(rng.poisson(cfg.burst_events_mean, n_bursts), 1, cfg.max_burst_events)
    deficit = cfg.min_events - int(sizes.sum())
    while deficit > 0:
        room = cfg.max_burst_events - sizes
        j = int(rng.choice(np.flatnonzero(room > 0)))
        add = min(deficit, int(room[j]))
        sizes[j] += add
        deficit -= add

    session_arch = rng.choice(k, size=n_bursts, p=mixture)
    commands, times, starts = [], [], []
    clock = float(rng.uniform(0.0, cfg.start_spread))
    n_done = 0
    for b in range(n_bursts):
        if b > 0:
            clock += cfg.inter_gap_min + float(rng.exponential(DAY / cfg.burst_rate))
        starts.append(n_done)
        n = int(sizes[b])
        gaps = np.clip(rng.exponential(cfg.intra_gap_mean, n - 1), 1.0, cfg.intra_gap_max)
        stamps = clock + np.concatenate([[0.0], np.cumsum(gaps)])
        weights = tilted * np.where(homes == session_arch[b], cfg.affinity, 1.0)
        commands.append(rng.choice(cfg.vocab_size, size=n, p=weights / weights.sum()))
        times.append(stamps)
        clock = float(stamps[-1])
        n_done += n
    stamps = np.round(np.concatenate(times), 3)
    user = UserSequence(user_id, np.concatenate(commands), stamps)
    return user, starts, mixture, level, labeled


def generate_synthetic(cfg: GenConfig | None = None) -> GeneratedCorpus:
    """Deterministic corpus with experience and per-archetype expertise labels.

    Each user gets a Dirichlet mixture over archetypes and an experience
    level. Every burst (ground-truth session) is devoted to one archetype
    drawn from the mixture; its commands follow the Zipf popularity curve,
    tilted flatter for experienced users and boosted on the archetype's own
    commands. Expertise labels threshold the mixture weight: large weight is
    "used", a middling weight is "plan to use", and a small weight is "not used".
    """
    cfg = cfg or GenConfig()
    cfg.validate()
    base = zipf_weights(cfg.vocab_size, cfg.zipf_exponent)
    homes = _assign_archetypes(cfg)
    users, boundaries, mixtures, experience, labeled = [], {}, {}, {}, []
    for uid in range(cfg.n_users):
        user, starts, mixture, level, is_labeled = _generate_user(cfg, uid, base, homes)
        users.append(user)
        boundaries[uid] = starts
        mixtures[uid] = mixture
        experience[uid] = level
        if is_labeled:
            labeled.append(uid)

    tasks = [LabeledTask("experience", cfg.experience_levels, {u: experience[u] for u in labeled})]
    for a in range(cfg.archetype_count):
        tasks.append(
            LabeledTask(f"expertise_{a}", 3, {u: expertise_label(float(mixtures[u][a]), cfg) for u in labeled})
        )
    vocab = [f"cmd_{c:04d}" for c in range(cfg.vocab_size)]
    return GeneratedCorpus(Corpus(vocab, users), tasks, boundaries, base, homes, mixtures, experience)


# -- splits ------------------------------------------------------------------


def _part_sizes(n: int, ratios) -> list[int]:
    ratios = [float(r) for r in ratios]
    if any(r <= 0 for r in ratios):
        raise SplitError("split ratios must be positive")
    if n < len(ratios):
        raise SplitError(f"cannot split {n} users into {len(ratios)} parts")
    total = math.fsum(ratios)
    exact = [n * r / total for r in ratios]
    sizes = [int(math.floor(x)) for x in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    for i, s in enumerate(sizes):
        if s == 0:
            donor = max(range(len(sizes)), key=lambda j: sizes[j])
            sizes[donor] -= 1
            sizes[i] = 1
    return sizes


def split_users(user_ids, ratios, seed: int, name: str) -> SplitSpec:
    ids = sorted(int(u) for u in user_ids)
    sizes = _part_sizes(len(ids), ratios)
    rng = make_rng(seed, "split", len(name), *name.encode())
    order = [ids[i] for i in rng.permutation(len(ids))]
    a, b = sizes[0], sizes[0] + sizes[1]
    return SplitSpec(name, sorted(order[:a]), sorted(order[a:b]), sorted(order[b:]), seed)


def split(corpus: Corpus, tasks, seed: int = 0, unlabeled_ratios=(8, 1, 1), labeled_ratios=(1, 1, 1)) -> dict[str, SplitSpec]:
    """Unlabeled users split 8-1-1, labeled users (any task) split 1-1-1."""
    labeled = set()
    for t in tasks:
        labeled.update(t.labels)
    unlabeled = [u.user_id for u in corpus.users if u.user_id not in labeled]
    out = {}
    if unlabeled:
        out["unlabeled"] = split_users(unlabeled, unlabeled_ratios, seed, "unlabeled")
    if labeled:
        out["labeled"] = split_users(labeled, labeled_ratios, seed, "labeled")
    return out


def subsample_labels(task: LabeledTask, fraction: float, seed: int, train_ids=None) -> LabeledTask:
    """Stratified subsample of the training labels; other labels pass through.

    Each class keeps a prefix of one seeded permutation, so for a fixed seed
    smaller fractions always give subsets of larger ones. A class is never
    emptied: if rounding would drop it, one example is kept and a warning is
    issued.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    train = set(task.labels) if train_ids is None else set(train_ids) & set(task.labels)
    kept = {u: y for u, y in task.labels.items() if u not in train}
    for c in range(task.n_classes):
        members = sorted(u for u in train if task.labels[u] == c)
        if not members:
            continue
        rng = make_rng(seed, "subsample", c, len(task.name), *task.name.encode())
        members = [members[i] for i in rng.permutation(len(members))]
        n = int(round(fraction * len(members)))
        if n < 1:
            msg = f"task {task.name}: fraction {fraction} empties class {c}; keeping one example"
            warnings.warn(msg, stacklevel=2)
            log.warning(msg)
            n = 1
        for u in members[:n]:
            kept[u] = c
    return LabeledTask(task.name, task.n_classes, dict(sorted(kept.items())))


# -- JSONL I/O ---------------------------------------------------------------


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def user_to_json(user: UserSequence) -> str:
    events = [[int(c), float(t)] for c, t in zip(user.commands, user.timestamps)]
    return _dump({"user_id": int(user.user_id), "events": events})


def write_jsonl(corpus: Corpus, path) -> None:
    with open(path, "w") as fh:
        for u in corpus.users:
            fh.write(user_to_json(u) + "\n")


def _iter_json_lines(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None


def read_jsonl(path, vocab) -> Corpus:
    if isinstance(vocab, (str, Path)):
        vocab = read_vocab(vocab)
    users = []
    for lineno, obj in _iter_json_lines(path):
        try:
            uid = obj["user_id"]
            events = obj["events"]
            if not isinstance(uid, int) or not isinstance(events, list):
                raise TypeError
            pairs = [(int(c), float(t)) for c, t in events]
            if any(not isinstance(c, int) for c, _ in events):
                raise TypeError
        except (KeyError, TypeError, ValueError):
            raise ParseError(f"{path}:{lineno}: expected {{'user_id': int, 'events': [[int, float], ...]}}") from None
        user = UserSequence.from_events(uid, pairs)
        try:
            user.validate(len(vocab))
        except CorpusValidationError as exc:
            raise CorpusValidationError(f"{path}:{lineno}: {exc}") from None
        users.append(user)
    return Corpus(list(vocab), users)


def write_vocab(vocab, path, **extra) -> None:
    Path(path).write_text(_dump({"commands": list(vocab), **extra}) + "\n")


def read_vocab(path) -> list[str]:
    obj = json.loads(Path(path).read_text())
    commands = obj.get("commands")
    if not isinstance(commands, list) or not commands:
        raise ParseError(f"{path}: expected {{'commands': [name, ...]}}")
    return [str(c) for c in commands]


def write_labels(tasks, path) -> None:
    with open(path, "w") as fh:
        for t in tasks:
            for uid in sorted(t.labels):
                fh.write(_dump({"task": t.name, "classes": t.n_classes, "user_id": int(uid), "label": int(t.labels[uid])}) + "\n")


def read_labels(path) -> list[LabeledTask]:
    tasks: dict[str, LabeledTask] = {}
    for lineno, obj in _iter_json_lines(path):
        try:
            name, k, uid, y = obj["task"], int(obj["classes"]), int(obj["user_id"]), int(obj["label"])
        except (KeyError, TypeError, ValueError):
            raise ParseError(f"{path}:{lineno}: expected task/classes/user_id/label") from None
        task = tasks.setdefault(name, LabeledTask(name, k, {}))
        if task.n_classes != k:
            raise ParseError(f"{path}:{lineno}: task {name} declared with {k} and {task.n_classes} classes")
        task.labels[uid] = y
    for t in tasks.values():
        t.validate()
    return list(tasks.values())


def write_boundaries(boundaries: dict[int, list[int]], path) -> None:
    with open(path, "w") as fh:
        for uid in sorted(boundaries):
            fh.write(_dump({"user_id": int(uid), "boundaries": [int(b) for b in boundaries[uid]]}) + "\n")


def read_boundaries(path) -> dict[int, list[int]]:
    return {int(o["user_id"]): [int(b) for b in o["boundaries"]] for _, o in _iter_json_lines(path)}
