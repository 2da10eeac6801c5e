import csv
import io

import numpy as np
import pytest

from simcurl.config import RunConfig
from simcurl.corpus import generate_synthetic
from simcurl.experiments import (
    ABLATION_ROWS,
    Pipeline,
    ablation_suite,
    build_tables,
    fewshot_sweep,
    grid_sweep,
    main_results,
    reports_from_json,
    reports_to_csv,
    reports_to_json,
    task_group,
)
from simcurl.training import fit_linear_probe, encode_users

SMALL = {"gen.n_users": 240, "gen.vocab_size": 40, "gen.archetype_count": 3, "model.dim": 16, "model.heads": 2,
         "model.depth": 1, "pretrain.epochs": 2, "pretrain.batch_size": 16, "probe.epochs": 4}


@pytest.fixture(scope="module")
def pipe():
    cfg = RunConfig().override(**SMALL)
    g = generate_synthetic(cfg.gen_config())
    return Pipeline(g.corpus, g.tasks, cfg)


@pytest.fixture(scope="module")
def encoder(pipe):
    return pipe.pretrain(0).encoder


def test_task_groups():
    assert task_group("expertise_3") == "expertise"
    assert task_group("experience") == "experience"


def test_reports_are_sane_and_deterministic(pipe, encoder):
    a = pipe.evaluate_method("simcurl", 0, encoder=encoder)
    b = pipe.evaluate_method("simcurl", 0, encoder=encoder)
    assert a == b
    assert {r.group for r in a} == {"experience", "expertise"}
    for r in a:
        assert 0 <= r.accuracy <= 1 and 0 <= r.weighted_f1 <= 1
        assert r.fingerprint == pipe.cfg.fingerprint
        assert sum(r.split_sizes.values()) == pipe.corpus.n_users
    (exp,) = [r for r in a if r.group == "experience"]
    assert exp.merged is not None and 0 <= exp.merged["weighted_f1"] <= 1
    (ex,) = [r for r in a if r.group == "expertise"]
    assert sorted(ex.subtasks) == ["expertise_0", "expertise_1", "expertise_2"]
    assert ex.weighted_f1 == pytest.approx(np.mean([s["weighted_f1"] for s in ex.subtasks.values()]))


def test_fraction_one_equals_direct_probe(pipe, encoder):
    pc = pipe.cfg.probe_config(0)
    probes, embed = pipe.probe_encoder(encoder, pc)
    task = pipe.tasks[0]
    ids = sorted(task.restrict(pipe.labeled.train).labels)
    views = lambda e: encode_users(encoder, pipe.model_cfg, pipe.features, ids, pc.dropout, pc.seed, "probe-view", e)  # noqa: E731
    direct = fit_linear_probe(views, [task.labels[u] for u in ids], task.n_classes, pc,
                              reference=encode_users(encoder, pipe.model_cfg, pipe.features, ids))
    for k, v in direct.arrays().items():
        assert np.allclose(probes[task.name].arrays()[k], v, rtol=0, atol=1e-12)


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_fewshot_subsets_nest(pipe):
    prev = None
    for f in (1.0, 0.5, 0.25, 0.125, 0.0625):
        cur = pipe._train_sets(f, seed=7)
        if prev is not None:
            for name in cur:
                assert set(cur[name]) <= set(prev[name])
        prev = cur


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_fewshot_rows(pipe, encoder):
    reports = fewshot_sweep(pipe, fractions=(1.0, 0.25), seeds=(0,), encoders={0: encoder})
    keys = [(r.fraction, r.method, r.group) for r in reports]
    assert len(keys) == len(set(keys)) == 2 * 4 * 2
    table = list(csv.DictReader(io.StringIO(build_tables(reports)["fewshot.csv"])))
    assert len(table) == 16


def test_ablation_rows(pipe, encoder):
    reports, curves = ablation_suite(pipe, seeds=(0,), full_encoders={0: encoder})
    rows = {r.variant["row"] for r in reports}
    assert rows == set(ABLATION_ROWS)
    assert curves["no_dropout_no_ssl/0"] is None and curves["dropout_no_ssl/0"] is None
    assert len(curves["no_user_branch/0"]) == pipe.cfg.pretrain.epochs
    table = build_tables(reports)["ablation.csv"]
    assert [line.split(",")[0] for line in table.splitlines()[1:]] == list(ABLATION_ROWS)


def test_grid_and_tables(pipe, encoder):
    reports = main_results(pipe, seeds=(0,), encoders={0: encoder})
    reports += grid_sweep(pipe, (0.3,), (0.1, 0.5), shapes=((1, 16),), epochs=1)
    tables = build_tables(reports, "fp")
    assert sorted(tables) == ["ablation.csv", "fewshot.csv", "grid.csv", "main_results.csv"]
    grid = list(csv.DictReader(io.StringIO(tables["grid.csv"])))
    assert len(grid) == 2 and sum(r["selected_by_val"] == "*" for r in grid) == 1
    main = list(csv.DictReader(io.StringIO(tables["main_results.csv"])))
    assert {r["method"] for r in main} == {"simcurl", "random-encoder", "bow", "cfiuf"}
    assert all(r["fingerprint"] == "fp" for r in main)


def test_report_serialization(pipe, encoder):
    reports = pipe.evaluate_method("bow", 0)
    fp, back = reports_from_json(reports_to_json(reports, pipe.cfg.fingerprint))
    assert fp == pipe.cfg.fingerprint and back == reports
    rows = list(csv.DictReader(io.StringIO(reports_to_csv(reports))))
    assert [r["method"] for r in rows] == ["bow", "bow"]


def test_unknown_baseline(pipe):
    with pytest.raises(ValueError):
        pipe.probe_features("tfidf", pipe.cfg.probe_config())


def test_repeated_seed_counts_once(pipe):
    reports = pipe.evaluate_method("bow", 0) * 2 + pipe.evaluate_method("bow", 1)
    main = list(csv.DictReader(io.StringIO(build_tables(reports)["main_results.csv"])))
    assert {r["n_seeds"] for r in main} == {"2"}
    few = list(csv.DictReader(io.StringIO(build_tables(reports)["fewshot.csv"])))
    assert [r["fraction"] for r in few] == ["1.0", "1.0"]
