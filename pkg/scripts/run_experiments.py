"""Run the main, few-shot, ablation and grid experiments on the synthetic corpus.

    python3 scripts/run_experiments.py --out runs/full --seeds 0 1 2

Writes main_results.csv, fewshot.csv, ablation.csv, grid.csv, reports.json and
loss curves into --out. ``--config`` takes the same key=value file as the CLI.
"""

import argparse
import json
import logging
import time
from pathlib import Path

from simcurl.config import RunConfig, load_config
from simcurl.corpus import generate_synthetic
from simcurl.experiments import (
    Pipeline,
    ablation_suite,
    build_tables,
    fewshot_sweep,
    grid_sweep,
    main_results,
    reports_to_json,
)

log = logging.getLogger("run_experiments")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="key=value config file")
    ap.add_argument("--out", default="runs/full")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--skip", nargs="*", default=[], choices=["fewshot", "ablation", "grid"])
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config) if args.config else RunConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    g = generate_synthetic(cfg.gen_config())
    pipe = Pipeline(g.corpus, g.tasks, cfg)
    log.info("corpus ready: %d users, %.1fs", g.corpus.n_users, time.perf_counter() - t0)

    encoders = {}
    reports = main_results(pipe, seeds=args.seeds, encoders=encoders)
    log.info("main results done, %.1fs", time.perf_counter() - t0)
    curves = {}
    if "fewshot" not in args.skip:
        reports += fewshot_sweep(pipe, seeds=args.seeds, encoders=encoders)
        log.info("few-shot done, %.1fs", time.perf_counter() - t0)
    if "ablation" not in args.skip:
        rows, curves = ablation_suite(pipe, seeds=args.seeds[:1], full_encoders=encoders)
        reports += rows
        log.info("ablation done, %.1fs", time.perf_counter() - t0)
    if "grid" not in args.skip:
        reports += grid_sweep(pipe)
        log.info("grid done, %.1fs", time.perf_counter() - t0)

    for name, text in build_tables(reports, cfg.fingerprint).items():
        (out / name).write_text(text)
    (out / "reports.json").write_text(reports_to_json(reports, cfg.fingerprint))
    (out / "loss_curves.json").write_text(json.dumps(curves, indent=1, sort_keys=True))
    (out / "config.txt").write_text(f"# fingerprint={cfg.fingerprint}\n" + cfg.to_text())
    print((out / "main_results.csv").read_text())
    log.info("total %.1fs", time.perf_counter() - t0)


if __name__ == "__main__":
    main()
