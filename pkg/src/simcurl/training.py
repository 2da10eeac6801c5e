"""Contrastive pretraining, frozen-encoder linear probes and classification metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .features import UserFeatures
from .model import ModelConfig, SessionBatch, encoder_params, frozen, head_params, init_params, make_batch, project, represent
from .numerics import Tensor
from .seeding import derive_seed, make_rng
from .sessions import dropout_mask

log = logging.getLogger(__name__)


class LossError(ValueError):
    pass


class PretrainError(FloatingPointError):
    pass


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ContrastiveConfig:
    batch_size: int = 64
    temperature: float = 1.0
    dropout: float = 0.3
    epochs: int = 30
    lr: float = 1e-3
    seed: int = 0
    # False reproduces the printed denominator, which leaves out the positive pair
    include_positive: bool = False
    # recompute the user-branch input from the kept sessions of each view
    user_branch_dropout: bool = False

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.epochs < 0 or not self.lr > 0:
            raise ValueError("need epochs >= 0 and lr > 0")


@dataclass(frozen=True)
class ProbeConfig:
    dropout: float = 0.5
    epochs: int = 100
    lr: float = 1e-2
    batch_size: int = 64
    fraction: float = 1.0
    seed: int = 0
    standardize: bool = True

    def validate(self) -> None:
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must lie in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("need epochs >= 1, batch_size >= 1 and lr > 0")


# -- contrastive objective ---------------------------------------------------


def cosine_sim(z1, z2, temperature: float = 1.0, user_id=None) -> float:
    z1, z2 = np.asarray(z1, dtype=np.float64), np.asarray(z2, dtype=np.float64)
    n1, n2 = np.linalg.norm(z1), np.linalg.norm(z2)
    if n1 == 0 or n2 == 0:
        who = f" for user {user_id}" if user_id is not None else ""
        raise LossError(f"zero-norm vector{who}")
    return float(z1 @ z2 / (temperature * n1 * n2))


def _check_norms(z: np.ndarray, user_ids, view: str) -> None:
    bad = np.flatnonzero(np.linalg.norm(z, axis=1) == 0)
    if bad.size:
        who = user_ids[bad[0]] if user_ids is not None else int(bad[0])
        raise LossError(f"zero-norm projection for user {who} ({view} view)")


def contrastive_loss(z1, z2, temperature: float = 1.0, include_positive: bool = False, user_ids=None) -> Tensor:
    """Summed two-view in-batch contrastive loss.

    Row ``i`` of ``z1`` and ``z2`` are the two views of user ``i``. For the
    first view, the denominator runs over the other users' first views and
    their second views; ``include_positive`` also adds the user's own
    second view, which gives the usual NT-Xent form.
    """
    z1, z2 = nx.as_tensor(z1), nx.as_tensor(z2)
    if z1.shape != z2.shape or z1.ndim != 2:
        raise nx.DimensionError(f"views must be matching (B, d) arrays, got {z1.shape} and {z2.shape}")
    b = z1.shape[0]
    if b < 2:
        raise LossError("contrastive loss needs a batch of at least two users")
    _check_norms(z1.data, user_ids, "first")
    _check_norms(z2.data, user_ids, "second")

    n1, n2 = nx.l2_normalize_rows(z1), nx.l2_normalize_rows(z2)
    inv_t = 1.0 / temperature
    s11 = nx.scale(nx.matmul(n1, nx.transpose(n1)), inv_t)
    s22 = nx.scale(nx.matmul(n2, nx.transpose(n2)), inv_t)
    s12 = nx.scale(nx.matmul(n1, nx.transpose(n2)), inv_t)
    off_diag = np.where(np.eye(b, dtype=bool), -np.inf, 0.0)
    cross = np.zeros((b, b)) if include_positive else off_diag
    positive = nx.scale(nx.sum(nx.mul(n1, n2), axis=1), inv_t)

    first = nx.concat([nx.add(s11, off_diag), nx.add(s12, cross)], axis=1)
    second = nx.concat([nx.add(s22, off_diag), nx.add(nx.transpose(s12), cross)], axis=1)
    per_user = nx.sub(nx.add(nx.logsumexp(first), nx.logsumexp(second)), nx.scale(positive, 2.0))
    return nx.sum(per_user)


# -- views and batching ------------------------------------------------------


def view_item(feat: UserFeatures, keep: np.ndarray | None, user_branch_dropout: bool = False):
    if keep is None:
        return feat.sessions, feat.user
    rows = feat.sessions[keep]
    if user_branch_dropout:
        sizes = feat.sizes[keep].astype(np.float64)
        return rows, (rows * sizes[:, None]).sum(axis=0) / sizes.sum()
    return rows, feat.user


def keep_mask(feat: UserFeatures, rate: float, root: int, purpose: str, *ids) -> np.ndarray | None:
    if rate == 0:
        return None
    return dropout_mask(feat.n_sessions, rate, make_rng(root, purpose, *ids))


@dataclass
class PretrainResult:
    encoder: dict[str, Tensor]
    head: dict[str, Tensor]
    epoch_losses: list[float]
    step_losses: list[float] = field(default_factory=list)


def pretrain(features: dict[int, UserFeatures], train_ids, model_cfg: ModelConfig, cfg: ContrastiveConfig, progress=None) -> PretrainResult:
    """Train encoder and projection head with the contrastive loss, then drop the head.

    Each epoch is a seeded shuffle of ``train_ids`` cut into batches of
    ``batch_size``; a trailing partial batch is skipped. Both views of
    every user in a batch go through the network in one forward pass.
    """
    cfg.validate()
    ids = sorted(int(u) for u in train_ids)
    if len(ids) < 2:
        raise ValueError("pretraining needs at least two users")
    params = init_params(model_cfg, seed=derive_seed(cfg.seed, "model"))
    state = nx.AdamState(lr=cfg.lr)
    bsz = min(cfg.batch_size, len(ids))
    n_steps = len(ids) // bsz
    epoch_losses, step_losses = [], []
    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, "pretrain-order", epoch).permutation(ids)
        total = 0.0
        for step in range(n_steps):
            uids = [int(u) for u in order[step * bsz : (step + 1) * bsz]]
            items = []
            for v in (0, 1):
                for u in uids:
                    keep = keep_mask(features[u], cfg.dropout, cfg.seed, "pretrain-view", epoch, u, v)
                    items.append(view_item(features[u], keep, cfg.user_branch_dropout))
            z = project(represent(make_batch(items, model_cfg), params, model_cfg), params)
            z1 = nx.getitem(z, slice(0, bsz))
            z2 = nx.getitem(z, slice(bsz, 2 * bsz))
            loss = contrastive_loss(z1, z2, cfg.temperature, cfg.include_positive, uids)
            value = float(loss.data)
            if not math.isfinite(value):
                raise PretrainError(f"non-finite loss {value} at epoch {epoch}, batch {step}, users {uids}")
            nx.zero_grad(params)
            nx.backward(loss)
            nx.adam_step(params, state)
            step_losses.append(value)
            total += value
        epoch_losses.append(total / n_steps)
        if progress is not None:
            progress(epoch, epoch_losses[-1])
        log.info("pretrain epoch %d loss %.6f", epoch, epoch_losses[-1])
    return PretrainResult(encoder_params(params), head_params(params), epoch_losses, step_losses)


# -- representations ---------------------------------------------------------


def encode_users(params, model_cfg: ModelConfig, features: dict[int, UserFeatures], ids, rate: float = 0.0,
                 root: int = 0, purpose: str = "probe-view", epoch: int = 0, chunk: int = 256) -> np.ndarray:
    """Representations (len(ids), dim) from a gradient-free forward pass."""
    fixed = frozen(params)
    ids = [int(u) for u in ids]
    # group users of similar session counts so padding stays small
    order = sorted(range(len(ids)), key=lambda i: (features[ids[i]].n_sessions, i))
    out = np.empty((len(ids), model_cfg.dim))
    for start in range(0, len(order), chunk):
        idx = order[start : start + chunk]
        items = [view_item(features[ids[i]], keep_mask(features[ids[i]], rate, root, purpose, epoch, ids[i])) for i in idx]
        out[idx] = represent(make_batch(items, model_cfg), fixed, model_cfg).data
    return out


# -- linear probe ------------------------------------------------------------


@dataclass
class ProbeParams:
    weight: np.ndarray  # (classes, dim)
    bias: np.ndarray  # (classes,)
    center: np.ndarray
    scale: np.ndarray

    def logits(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.center) / self.scale) @ self.weight.T + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias, "center": self.center, "scale": self.scale}


def cross_entropy(logits, y) -> Tensor:
    logits = nx.as_tensor(logits)
    y = np.asarray(y, dtype=np.int64)
    picked = nx.getitem(nx.log_softmax(logits), (np.arange(len(y)), y))
    return nx.scale(nx.sum(picked), -1.0 / len(y))


def fit_linear_probe(views, y, n_classes: int, cfg: ProbeConfig, reference: np.ndarray | None = None) -> ProbeParams:
    """Cross-entropy training of a linear head with Adam.

    ``views(epoch)`` returns the (N, dim) training inputs for that epoch, so
    callers can supply a fresh augmentation per epoch. Standardisation
    statistics come from ``reference`` (default: the epoch-0 inputs).
    """
    cfg.validate()
    y = np.asarray(y, dtype=np.int64)
    x0 = views(0)
    ref = x0 if reference is None else reference
    if cfg.standardize:
        center, spread = ref.mean(axis=0), ref.std(axis=0)
        spread = np.where(spread > 1e-12, spread, 1.0)
    else:
        center, spread = np.zeros(ref.shape[1]), np.ones(ref.shape[1])
    w = Tensor(np.zeros((n_classes, ref.shape[1])), requires_grad=True, name="weight")
    b = Tensor(np.zeros(n_classes), requires_grad=True, name="bias")
    params = {"weight": w, "bias": b}
    state = nx.AdamState(lr=cfg.lr)
    n = len(y)
    bsz = min(cfg.batch_size, n)
    for epoch in range(cfg.epochs):
        x = x0 if epoch == 0 else views(epoch)
        x = (x - center) / spread
        order = make_rng(cfg.seed, "probe-order", epoch).permutation(n)
        for start in range(0, n, bsz):
            idx = order[start : start + bsz]
            logits = nx.add(nx.matmul(Tensor(x[idx]), nx.transpose(w)), b)
            loss = cross_entropy(logits, y[idx])
            nx.zero_grad(params)
            nx.backward(loss)
            nx.adam_step(params, state)
    return ProbeParams(w.data.copy(), b.data.copy(), center, spread)


# -- metrics -----------------------------------------------------------------


def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0:
        raise EvaluationError("no examples to score")
    return float(np.mean(y_true == y_pred))


def per_class_f1(y_true, y_pred, n_classes: int) -> np.ndarray:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    f1 = np.zeros(n_classes)
    for c in range(n_classes):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        f1[c] = 2 * tp / denom if denom else 0.0
    return f1


def weighted_f1(y_true, y_pred, n_classes: int | None = None) -> float:
    """Support-weighted mean of per-class F1; a class with P + R = 0 scores 0."""
    y_true, y_pred = np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise EvaluationError("no examples to score")
    k = int(max(y_true.max(), y_pred.max()) + 1) if n_classes is None else n_classes
    support = np.bincount(y_true, minlength=k)
    return float(np.sum(support * per_class_f1(y_true, y_pred, k)) / y_true.size)


def merge_labels(y, mapping) -> np.ndarray:
    return np.asarray(mapping, dtype=np.int64)[np.asarray(y, dtype=np.int64)]


# years 0-1 beginner, 2-4 intermediate, 5-7 experienced
EXPERIENCE_MERGE = (0, 0, 1, 1, 1, 2, 2, 2)


def score(y_true, y_pred, n_classes: int, merge=None) -> dict[str, float]:
    out = {"accuracy": accuracy(y_true, y_pred), "weighted_f1": weighted_f1(y_true, y_pred, n_classes)}
    if merge is not None:
        mt, mp = merge_labels(y_true, merge), merge_labels(y_pred, merge)
        k = int(max(merge)) + 1
        out["merged_accuracy"] = accuracy(mt, mp)
        out["merged_weighted_f1"] = weighted_f1(mt, mp, k)
    return out
