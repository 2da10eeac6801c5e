"""Evaluation harness: probes for every method, few-shot sweep, ablations and the hyperparameter grid.

A :class:`Pipeline` segments and featurizes a corpus once, fixes the splits,
and then trains/evaluates any number of encoders or baselines against them.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .config import RunConfig
from .corpus import Corpus, LabeledTask, split, subsample_labels
from .features import cf_iuf, featurize_corpus, fit_iuf
from .model import init_params, encoder_params
from .seeding import derive_seed
from .training import (
    EXPERIENCE_MERGE,
    EvaluationError,
    ProbeConfig,
    ProbeParams,
    PretrainResult,
    encode_users,
    fit_linear_probe,
    pretrain,
    score,
)

log = logging.getLogger(__name__)

METHODS = ("simcurl", "random-encoder", "bow", "cfiuf")
FEWSHOT_FRACTIONS = (1.0, 0.5, 0.25, 0.125, 0.0625)


def task_group(name: str) -> str:
    return name.split("_", 1)[0] if name.startswith("expertise_") else name


@dataclass
class EvalReport:
    """Test (and validation) metrics for one method on one task group.

    ``accuracy`` and ``weighted_f1`` average the group's sub-tasks; the
    per-sub-task numbers live in ``subtasks``.
    """

    method: str
    group: str
    accuracy: float
    weighted_f1: float
    val_accuracy: float
    val_weighted_f1: float
    subtasks: dict[str, dict[str, float]]
    split_sizes: dict[str, int]
    fingerprint: str
    seed: int
    fraction: float = 1.0
    experiment: str = "main"
    variant: dict = field(default_factory=dict)
    merged: dict[str, float] | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        return cls(**d)


def reports_to_json(reports, fingerprint: str) -> str:
    return json.dumps({"fingerprint": fingerprint, "reports": [r.to_dict() for r in reports]}, indent=1, sort_keys=True) + "\n"


def reports_from_json(text: str) -> tuple[str, list[EvalReport]]:
    obj = json.loads(text)
    return obj["fingerprint"], [EvalReport.from_dict(r) for r in obj["reports"]]


REPORT_COLUMNS = ("experiment", "method", "group", "fraction", "seed", "accuracy", "weighted_f1",
                  "val_accuracy", "val_weighted_f1", "merged_accuracy", "merged_weighted_f1", "variant", "fingerprint")


def _cell(x) -> str:
    return "" if x is None else repr(float(x))


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        merged = r.merged or {}
        w.writerow([r.experiment, r.method, r.group, repr(r.fraction), r.seed, repr(r.accuracy), repr(r.weighted_f1),
                    repr(r.val_accuracy), repr(r.val_weighted_f1), _cell(merged.get("accuracy")),
                    _cell(merged.get("weighted_f1")), json.dumps(r.variant, sort_keys=True), r.fingerprint])
    return buf.getvalue()


class Pipeline:
    def __init__(self, corpus: Corpus, tasks: list[LabeledTask], cfg: RunConfig):
        for t in tasks:
            t.validate(corpus)
        self.corpus = corpus
        self.tasks = tasks
        self.cfg = cfg
        stamps = [u.timestamps for u in corpus.users]
        span = float(max(s.max() for s in stamps) - min(s.min() for s in stamps)) if stamps else 0.0
        self.seg_cfg = cfg.seg.resolve(span)
        self.features = featurize_corpus(corpus, self.seg_cfg)
        self.splits = split(corpus, tasks, seed=derive_seed(cfg.seed, "split"))
        if "labeled" not in self.splits:
            raise EvaluationError("no labeled users to evaluate on")
        self.model_cfg = cfg.model_config(corpus.vocab_size)

    @property
    def labeled(self):
        return self.splits["labeled"]

    def pretrain_ids(self) -> list[int]:
        if "unlabeled" not in self.splits:
            raise EvaluationError("no unlabeled users to pretrain on")
        return self.splits["unlabeled"].train

    def split_sizes(self) -> dict[str, int]:
        out = {}
        for name, spec in self.splits.items():
            for part, ids in spec.parts().items():
                out[f"{name}_{part}"] = len(ids)
        return out

    # -- encoders ----------------------------------------------------------------

    def pretrain(self, run_seed: int | None = None, model_cfg=None, **overrides) -> PretrainResult:
        cc = replace(self.cfg.pretrain_config(run_seed), **overrides)
        return pretrain(self.features, self.pretrain_ids(), model_cfg or self.model_cfg, cc)

    def random_encoder(self, run_seed: int | None = None, model_cfg=None):
        seed = derive_seed(self.cfg.seed if run_seed is None else run_seed, "random-encoder")
        return encoder_params(init_params(model_cfg or self.model_cfg, seed=seed))

    # -- probes --------------------------------------------------------------------

    def _train_sets(self, fraction: float, seed: int) -> dict[str, list[int]]:
        train = self.labeled.train
        out = {}
        for t in self.tasks:
            sub = subsample_labels(t.restrict(train), fraction, derive_seed(seed, "fewshot"))
            out[t.name] = sorted(sub.labels)
        return out

    def probe_encoder(self, params, probe_cfg: ProbeConfig, model_cfg=None, fraction: float = 1.0):
        """Fit one linear probe per task on frozen ``params``."""
        mc = model_cfg or self.model_cfg
        train_all = self.labeled.train
        row = {u: i for i, u in enumerate(train_all)}
        cache: dict[int, np.ndarray] = {}

        def views_all(epoch):
            if epoch not in cache:
                cache[epoch] = encode_users(params, mc, self.features, train_all, probe_cfg.dropout,
                                            probe_cfg.seed, "probe-view", epoch)
            return cache[epoch]

        full_train = encode_users(params, mc, self.features, train_all)
        embed = {"val": encode_users(params, mc, self.features, self.labeled.val),
                 "test": encode_users(params, mc, self.features, self.labeled.test)}
        train_sets = self._train_sets(fraction, probe_cfg.seed)
        probes = {}
        for t in self.tasks:
            ids = train_sets[t.name]
            rows = np.array([row[u] for u in ids])
            y = [t.labels[u] for u in ids]
            probes[t.name] = fit_linear_probe(lambda e, rows=rows: views_all(e)[rows], y, t.n_classes, probe_cfg,
                                              reference=full_train[rows])
        return probes, embed

    def probe_features(self, kind: str, probe_cfg: ProbeConfig, fraction: float = 1.0):
        """Linear probes on fixed BoW or CF-IUF vectors (no augmentation)."""
        train_all = self.labeled.train
        if kind == "bow":
            featurize = lambda ids: np.stack([self.features[u].user for u in ids])  # noqa: E731
        elif kind == "cfiuf":
            iuf = fit_iuf([self.corpus.user(u) for u in train_all], self.corpus.vocab_size)
            featurize = lambda ids: np.stack([cf_iuf(self.corpus.user(u), iuf) for u in ids])  # noqa: E731
        else:
            raise ValueError(f"unknown baseline {kind!r}")
        x_train = featurize(train_all)
        row = {u: i for i, u in enumerate(train_all)}
        embed = {"val": featurize(self.labeled.val), "test": featurize(self.labeled.test)}
        train_sets = self._train_sets(fraction, probe_cfg.seed)
        probes = {}
        for t in self.tasks:
            ids = train_sets[t.name]
            x = x_train[[row[u] for u in ids]]
            probes[t.name] = fit_linear_probe(lambda e, x=x: x, [t.labels[u] for u in ids], t.n_classes, probe_cfg)
        return probes, embed

    def score_probes(self, probes: dict[str, ProbeParams], embed, method: str, seed: int, fraction: float = 1.0,
                     experiment: str = "main", variant=None, merge_classes: bool = True) -> list[EvalReport]:
        per_group: dict[str, dict[str, dict[str, float]]] = {}
        for t in self.tasks:
            p = probes[t.name]
            merge = EXPERIENCE_MERGE if merge_classes and t.name == "experience" and t.n_classes == len(EXPERIENCE_MERGE) else None
            res = {}
            for part in ("val", "test"):
                ids = getattr(self.labeled, part)
                if not ids:
                    raise EvaluationError(f"empty {part} split")
                y = [t.labels[u] for u in ids]
                s = score(y, p.predict(embed[part]), t.n_classes, merge if part == "test" else None)
                res.update({(k if part == "test" else f"val_{k}"): v for k, v in s.items()})
            per_group.setdefault(task_group(t.name), {})[t.name] = res
        reports = []
        for group, subs in per_group.items():
            mean = lambda key: float(np.mean([s[key] for s in subs.values()]))  # noqa: E731
            merged = None
            if "merged_accuracy" in next(iter(subs.values())):
                merged = {"accuracy": mean("merged_accuracy"), "weighted_f1": mean("merged_weighted_f1")}
            reports.append(EvalReport(method, group, mean("accuracy"), mean("weighted_f1"), mean("val_accuracy"),
                                      mean("val_weighted_f1"), subs, self.split_sizes(), self.cfg.fingerprint, int(seed),
                                      float(fraction), experiment, dict(variant or {}), merged))
        return reports

    def evaluate_method(self, method: str, run_seed: int, fraction: float = 1.0, encoder=None, experiment: str = "main",
                        variant=None, probe_overrides=None, model_cfg=None) -> list[EvalReport]:
        pc = replace(self.cfg.probe_config(run_seed), **(probe_overrides or {}))
        if method in ("bow", "cfiuf"):
            probes, embed = self.probe_features(method, pc, fraction)
        else:
            if encoder is None:
                if method != "random-encoder":
                    raise ValueError(f"method {method!r} needs an encoder")
                encoder = self.random_encoder(run_seed, model_cfg)
            probes, embed = self.probe_encoder(encoder, pc, model_cfg, fraction)
        return self.score_probes(probes, embed, method, run_seed, fraction, experiment, variant)


# -- experiment drivers ------------------------------------------------------


def main_results(pipe: Pipeline, seeds=(0, 1, 2), encoders=None) -> list[EvalReport]:
    """All four methods per seed. Encoders pretrained here are added to ``encoders`` for reuse."""
    encoders = {} if encoders is None else encoders
    reports = []
    for s in seeds:
        if s not in encoders:
            encoders[s] = pipe.pretrain(s).encoder
        enc = encoders[s]
        reports += pipe.evaluate_method("simcurl", s, encoder=enc)
        for m in ("random-encoder", "bow", "cfiuf"):
            reports += pipe.evaluate_method(m, s)
    return reports


def fewshot_sweep(pipe: Pipeline, fractions=FEWSHOT_FRACTIONS, seeds=(0,), encoders=None) -> list[EvalReport]:
    """One probe per (fraction, method); the pretrained encoder is shared across fractions."""
    reports = []
    for s in seeds:
        enc = encoders[s] if encoders and s in encoders else pipe.pretrain(s).encoder
        rnd = pipe.random_encoder(s)
        for f in fractions:
            reports += pipe.evaluate_method("simcurl", s, f, encoder=enc, experiment="fewshot")
            reports += pipe.evaluate_method("random-encoder", s, f, encoder=rnd, experiment="fewshot")
            reports += pipe.evaluate_method("bow", s, f, experiment="fewshot")
            reports += pipe.evaluate_method("cfiuf", s, f, experiment="fewshot")
    return reports


ABLATION_ROWS = (
    "full",
    "no_dropout_no_ssl",
    "dropout_no_ssl",
    "no_user_branch",
    "no_session_branch",
)


def ablation_suite(pipe: Pipeline, seeds=(0,), full_encoders=None) -> tuple[list[EvalReport], dict[str, list[float] | None]]:
    """Rows mirror the ablation table; no-SSL rows never pretrain, so their loss curve is None."""
    reports, curves = [], {}
    for s in seeds:
        for row in ABLATION_ROWS:
            variant = {"row": row}
            if row == "full":
                if full_encoders and s in full_encoders:
                    enc, curve = full_encoders[s], None
                else:
                    res = pipe.pretrain(s)
                    enc, curve = res.encoder, res.epoch_losses
                reports += pipe.evaluate_method("simcurl", s, encoder=enc, experiment="ablation", variant=variant)
            elif row in ("no_dropout_no_ssl", "dropout_no_ssl"):
                curve = None
                overrides = {"dropout": 0.0} if row == "no_dropout_no_ssl" else None
                reports += pipe.evaluate_method("random-encoder", s, experiment="ablation", variant=variant,
                                                probe_overrides=overrides)
            else:
                mc = replace(pipe.model_cfg, **{"use_user_branch" if row == "no_user_branch" else "use_session_branch": False})
                res = pipe.pretrain(s, model_cfg=mc)
                curve = res.epoch_losses
                reports += pipe.evaluate_method("simcurl", s, encoder=res.encoder, experiment="ablation",
                                                variant=variant, model_cfg=mc)
            curves[f"{row}/{s}"] = curve
    return reports, curves


def grid_sweep(pipe: Pipeline, pretrain_rates=(0.1, 0.3, 0.5), probe_rates=(0.1, 0.3, 0.5),
               shapes=((2, 32), (2, 64), (2, 128), (3, 32)), seed: int = 0, epochs: int | None = None) -> list[EvalReport]:
    """Dropout rate (pretrain x probe) for each (depth, batch) pair; one pretraining per (rate, depth, batch)."""
    reports = []
    for depth, batch in shapes:
        mc = replace(pipe.model_cfg, depth=depth)
        for rho_pre in pretrain_rates:
            overrides = {"dropout": rho_pre, "batch_size": batch}
            if epochs is not None:
                overrides["epochs"] = epochs
            enc = pipe.pretrain(seed, model_cfg=mc, **overrides).encoder
            for rho_tr in probe_rates:
                variant = {"depth": depth, "batch_size": batch, "pretrain_dropout": rho_pre, "probe_dropout": rho_tr}
                reports += pipe.evaluate_method("simcurl", seed, encoder=enc, experiment="grid", variant=variant,
                                                probe_overrides={"dropout": rho_tr}, model_cfg=mc)
    return reports


# -- consolidated tables -----------------------------------------------------


def _mean_std(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def _overall(rows: list[EvalReport], key: str) -> float:
    return float(np.mean([getattr(r, key) for r in rows]))


def _write(rows, header, fingerprint=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(header) + (["fingerprint"] if fingerprint else []))
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r] + ([fingerprint] if fingerprint else []))
    return buf.getvalue()


def build_tables(reports: list[EvalReport], fingerprint: str | None = None) -> dict[str, str]:
    """The four summary tables: main results, few-shot curve, ablation, grid.

    With ``fingerprint`` set, every row carries it in a trailing column.
    """
    by = lambda exp: [r for r in reports if r.experiment == exp]  # noqa: E731

    main_rows = []
    main = by("main")
    for method in sorted({r.method for r in main}, key=lambda m: (METHODS.index(m) if m in METHODS else 99, m)):
        groups = sorted({r.group for r in main if r.method == method}) + ["overall"]
        for g in groups:
            if g == "overall":
                per_seed = {}
                for r in main:
                    if r.method == method:
                        per_seed.setdefault(r.seed, []).append(r)
                accs = [_overall(v, "accuracy") for v in per_seed.values()]
                f1s = [_overall(v, "weighted_f1") for v in per_seed.values()]
                merged = ("", "")
            else:
                rs = [r for r in main if r.method == method and r.group == g]
                per_seed = {}
                for r in rs:
                    per_seed.setdefault(r.seed, []).append(r)
                accs = [_overall(v, "accuracy") for v in per_seed.values()]
                f1s = [_overall(v, "weighted_f1") for v in per_seed.values()]
                ms = [r.merged for r in rs if r.merged]
                merged = (_mean_std([m["accuracy"] for m in ms])[0], _mean_std([m["weighted_f1"] for m in ms])[0]) if ms else ("", "")
            main_rows.append([method, g, len(accs), *_mean_std(accs), *_mean_std(f1s), *merged])
    tables = {"main_results.csv": _write(main_rows, ["method", "group", "n_seeds", "accuracy_mean", "accuracy_std",
                                                      "weighted_f1_mean", "weighted_f1_std", "merged_accuracy", "merged_weighted_f1"], fingerprint)}

    few = by("fewshot")
    # full-label main runs anchor the curve when no few-shot run covers that point
    covered = {(r.fraction, r.method) for r in few}
    few += [r for r in main if (r.fraction, r.method) not in covered]
    few_rows = []
    for f in sorted({r.fraction for r in few}, reverse=True):
        for method in sorted({r.method for r in few if r.fraction == f}):
            for g in sorted({r.group for r in few}):
                rs = [r for r in few if r.fraction == f and r.method == method and r.group == g]
                if rs:
                    few_rows.append([f, method, g, len({r.seed for r in rs}), _mean_std([r.accuracy for r in rs])[0],
                                     _mean_std([r.weighted_f1 for r in rs])[0]])
    tables["fewshot.csv"] = _write(few_rows, ["fraction", "method", "group", "n_seeds", "accuracy", "weighted_f1"], fingerprint)

    abl = by("ablation")
    abl_groups = sorted({r.group for r in abl})
    abl_rows = []
    for row in [x for x in ABLATION_ROWS if any(r.variant.get("row") == x for r in abl)]:
        rs = [r for r in abl if r.variant.get("row") == row]
        cols = []
        for g in abl_groups:
            grs = [r for r in rs if r.group == g]
            cols += [_overall(grs, "accuracy"), _overall(grs, "weighted_f1")] if grs else ["", ""]
        abl_rows.append([row, _overall(rs, "accuracy"), _overall(rs, "weighted_f1")] + cols)
    abl_header = ["row", "overall_accuracy", "overall_weighted_f1"]
    for g in abl_groups:
        abl_header += [f"{g}_accuracy", f"{g}_weighted_f1"]
    tables["ablation.csv"] = _write(abl_rows, abl_header, fingerprint)

    grid = by("grid")
    grid_rows = []
    keys = sorted({json.dumps(r.variant, sort_keys=True) for r in grid})
    for k in keys:
        v = json.loads(k)
        rs = [r for r in grid if json.dumps(r.variant, sort_keys=True) == k and r.group == "experience"] or \
             [r for r in grid if json.dumps(r.variant, sort_keys=True) == k]
        group = rs[0].group if len({r.group for r in rs}) == 1 else "overall"
        grid_rows.append([v.get("depth"), v.get("batch_size"), v.get("pretrain_dropout"), v.get("probe_dropout"), group,
                          _overall(rs, "accuracy"), _overall(rs, "weighted_f1"), _overall(rs, "val_weighted_f1")])
    if grid_rows:
        best = max(range(len(grid_rows)), key=lambda i: grid_rows[i][7])
        for i, r in enumerate(grid_rows):
            r.append("*" if i == best else "")
    tables["grid.csv"] = _write(grid_rows, ["depth", "batch_size", "pretrain_dropout", "probe_dropout", "group", "accuracy",
                                            "weighted_f1", "val_weighted_f1", "selected_by_val"], fingerprint)
    return tables
