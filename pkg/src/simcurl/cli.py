"""``simcurl`` command line: gen | segment | pretrain | probe | eval | report.

Every command takes ``--config`` (flat key=value file), ``--seed`` (overrides
the config's root seed) and ``--out``. Each output directory gets a
``config.txt`` with the resolved settings and a ``run.json`` carrying the
config fingerprint and a digest of every file written, so files whose own
format has no room for metadata (corpus JSONL, labels) are still tied to a
fingerprint. Failures print one ``simcurl: error: <Kind>: <message>`` line to
stderr and exit with status 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .config import RunConfig, load_config
from .corpus import generate_synthetic, read_jsonl, read_labels, write_boundaries, write_jsonl, write_labels, write_vocab
from .experiments import (
    FEWSHOT_FRACTIONS,
    Pipeline,
    ablation_suite,
    build_tables,
    fewshot_sweep,
    grid_sweep,
    main_results,
    reports_from_json,
    reports_to_csv,
    reports_to_json,
)
from .model import CheckpointError, load_encoder, save_checkpoint, save_encoder
from .sessions import segment

log = logging.getLogger("simcurl")

CORPUS_FILE = "corpus.jsonl"
VOCAB_FILE = "vocab.json"
LABELS_FILE = "labels.jsonl"
TRUTH_FILE = "sessions_truth.jsonl"
SESSIONS_FILE = "sessions.jsonl"
ENCODER_FILE = "encoder.json"
LOSS_FILE = "loss.csv"
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
TABLE_FILES = ("main_results.csv", "fewshot.csv", "ablation.csv", "grid.csv")
SUITES = ("main", "fewshot", "ablation", "grid", "all")


class CliError(Exception):
    """A user-facing failure: bad inputs, mixed fingerprints and the like."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"{self.prog}: error: UsageError: {message}\n")
        sys.exit(2)


# -- helpers -----------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _start(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log.info("resolved config (fingerprint %s):\n%s", cfg.fingerprint, cfg.to_text().rstrip())
    return cfg, out


def _finish(out: Path, cfg: RunConfig, command: str, written: list[str], inputs: dict | None = None) -> None:
    (out / "config.txt").write_text(f"# fingerprint={cfg.fingerprint}\n" + cfg.to_text())
    meta = {
        "command": command,
        "fingerprint": cfg.fingerprint,
        "seed": cfg.seed,
        "version": __version__,
        "files": {name: _sha256(out / name) for name in sorted(written)},
        "inputs": inputs or {},
    }
    (out / "run.json").write_text(_dump(meta))


def _input_fingerprint(directory: Path) -> str | None:
    meta = directory / "run.json"
    if meta.exists():
        return json.loads(meta.read_text()).get("fingerprint")
    return None


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(f"missing {what}: {path}")
    return path


def _load_corpus(data: Path):
    _need(data, "data directory")
    return read_jsonl(_need(data / CORPUS_FILE, "corpus"), _need(data / VOCAB_FILE, "vocabulary"))


def _load_tasks(data: Path):
    return read_labels(_need(data / LABELS_FILE, "labels"))


def _check_inputs(cfg: RunConfig, data: Path) -> dict:
    # a different fingerprint is legitimate (another seed, another probe
    # setting); it is recorded in run.json and `report` is where mixing is refused
    fp = _input_fingerprint(data)
    if fp is not None and fp != cfg.fingerprint:
        log.warning("%s was produced under fingerprint %s, current config is %s", data, fp, cfg.fingerprint)
    return {"data": fp}


def _write_reports(out: Path, reports, cfg: RunConfig) -> list[str]:
    (out / REPORT_JSON).write_text(reports_to_json(reports, cfg.fingerprint))
    (out / REPORT_CSV).write_text(reports_to_csv(reports))
    return [REPORT_JSON, REPORT_CSV]


# -- commands ----------------------------------------------------------------


def cmd_gen(args) -> None:
    cfg, out = _start(args)
    gen_cfg = cfg.gen_config()
    generated = generate_synthetic(gen_cfg)
    write_jsonl(generated.corpus, out / CORPUS_FILE)
    write_vocab(generated.corpus.vocab, out / VOCAB_FILE, fingerprint=cfg.fingerprint)
    write_labels(generated.tasks, out / LABELS_FILE)
    write_boundaries(generated.boundaries, out / TRUTH_FILE)
    log.info("wrote %d users, vocabulary %d", generated.corpus.n_users, generated.corpus.vocab_size)
    _finish(out, cfg, "gen", [CORPUS_FILE, VOCAB_FILE, LABELS_FILE, TRUTH_FILE])


def _segment_config(cfg: RunConfig, corpus):
    stamps = [u.timestamps for u in corpus.users]
    span = float(max(s.max() for s in stamps) - min(s.min() for s in stamps)) if stamps else 0.0
    return cfg.seg.resolve(span)


def cmd_segment(args) -> None:
    cfg, out = _start(args)
    data = Path(args.data)
    corpus = _load_corpus(data)
    inputs = _check_inputs(cfg, data)
    seg_cfg = _segment_config(cfg, corpus)
    log.info("segmenting with %s", seg_cfg)
    with open(out / SESSIONS_FILE, "w") as fh:
        for user in corpus.users:
            sessions = [[int(i) for i in s.event_indices] for s in segment(user, seg_cfg)]
            fh.write(json.dumps({"user_id": int(user.user_id), "sessions": sessions}, separators=(",", ":")) + "\n")
    _finish(out, cfg, "segment", [SESSIONS_FILE], inputs)


def cmd_pretrain(args) -> None:
    cfg, out = _start(args)
    data = Path(args.data)
    corpus = _load_corpus(data)
    tasks = _load_tasks(data)
    inputs = _check_inputs(cfg, data)
    pipe = Pipeline(corpus, tasks, cfg)
    result = pipe.pretrain()
    save_encoder(out / ENCODER_FILE, result.encoder, pipe.model_cfg, fingerprint=cfg.fingerprint, seed=cfg.seed,
                 pretrain=asdict(cfg.pretrain_config()))
    lines = ["epoch,loss,fingerprint\n"] + [f"{e},{v!r},{cfg.fingerprint}\n" for e, v in enumerate(result.epoch_losses)]
    (out / LOSS_FILE).write_text("".join(lines))
    _finish(out, cfg, "pretrain", [ENCODER_FILE, "encoder.bin", LOSS_FILE], inputs)


def _load_encoder_for(pipe: Pipeline, path: Path):
    params, mc, manifest = load_encoder(_need(path, "checkpoint"))
    if mc.vocab_size != pipe.corpus.vocab_size:
        raise CheckpointError(f"{path}: encoder vocabulary {mc.vocab_size} does not match corpus {pipe.corpus.vocab_size}")
    if manifest.get("fingerprint") not in (None, pipe.cfg.fingerprint):
        log.warning("%s was trained under fingerprint %s, evaluating under %s", path, manifest["fingerprint"],
                    pipe.cfg.fingerprint)
    return params, mc, manifest


def cmd_probe(args) -> None:
    cfg, out = _start(args)
    data = Path(args.data)
    corpus = _load_corpus(data)
    tasks = _load_tasks(data)
    inputs = _check_inputs(cfg, data)
    pipe = Pipeline(corpus, tasks, cfg)
    params, mc, manifest = _load_encoder_for(pipe, Path(args.checkpoint))
    pc = replace(cfg.probe_config(), **({"dropout": args.probe_dropout} if args.probe_dropout is not None else {}))
    probes, embed = pipe.probe_encoder(params, pc, mc, args.fraction)
    written = []
    for name, probe in probes.items():
        stem = f"probe_{name}"
        task = next(t for t in tasks if t.name == name)
        save_checkpoint(out / f"{stem}.json", probe.arrays(), {"task": name, "n_classes": task.n_classes, "dim": mc.dim},
                        kind="probe", fingerprint=cfg.fingerprint, seed=cfg.seed)
        written += [f"{stem}.json", f"{stem}.bin"]
    reports = pipe.score_probes(probes, embed, "simcurl", cfg.seed, args.fraction, _experiment(args.fraction),
                                merge_classes=args.merge_classes)
    written += _write_reports(out, reports, cfg)
    inputs["checkpoint"] = manifest.get("fingerprint")
    _finish(out, cfg, "probe", written, inputs)


def _experiment(fraction: float) -> str:
    # reduced-label runs belong on the few-shot curve, not in the main table
    return "main" if fraction == 1.0 else "fewshot"


def _run_suite(pipe: Pipeline, suite: str, seeds, checkpoints) -> list:
    encoders = {}
    for params, _, manifest in checkpoints:
        encoders[int(manifest.get("seed", pipe.cfg.seed))] = params
    reports = []
    if suite in ("main", "all"):
        reports += main_results(pipe, seeds, encoders)
    if suite in ("fewshot", "all"):
        reports += fewshot_sweep(pipe, FEWSHOT_FRACTIONS, seeds, encoders)
    if suite in ("ablation", "all"):
        reports += ablation_suite(pipe, seeds, encoders)[0]
    if suite in ("grid", "all"):
        reports += grid_sweep(pipe, seed=seeds[0])
    return reports


def cmd_eval(args) -> None:
    data = Path(args.data)
    # fail fast on missing inputs before any expensive work
    _need(data / CORPUS_FILE, "corpus")
    _need(data / LABELS_FILE, "labels")
    for ck in args.checkpoint or []:
        _need(Path(ck), "checkpoint")
    if args.baseline and args.checkpoint:
        raise CliError("--baseline and --checkpoint are mutually exclusive")
    if not (args.baseline or args.checkpoint or args.suite):
        raise CliError("eval needs --checkpoint, --baseline or --suite")
    cfg, out = _start(args)
    corpus = _load_corpus(data)
    tasks = _load_tasks(data)
    inputs = _check_inputs(cfg, data)
    pipe = Pipeline(corpus, tasks, cfg)
    checkpoints = [_load_encoder_for(pipe, Path(ck)) for ck in args.checkpoint or []]
    reports = []
    if args.suite:
        seeds = tuple(args.seeds) if args.seeds else (cfg.seed,)
        reports = _run_suite(pipe, args.suite, seeds, checkpoints)
    elif args.baseline:
        m = args.baseline
        reports = pipe.score_probes(*_baseline_probes(pipe, m, cfg, args.fraction), m, cfg.seed, args.fraction,
                                    _experiment(args.fraction), merge_classes=args.merge_classes)
    else:
        for params, mc, manifest in checkpoints:
            seed = int(manifest.get("seed", cfg.seed))
            probes, embed = pipe.probe_encoder(params, cfg.probe_config(seed), mc, args.fraction)
            reports += pipe.score_probes(probes, embed, "simcurl", seed, args.fraction, _experiment(args.fraction),
                                         merge_classes=args.merge_classes)
        inputs["checkpoints"] = [m.get("fingerprint") for _, _, m in checkpoints]
    _finish(out, cfg, "eval", _write_reports(out, reports, cfg), inputs)


def _baseline_probes(pipe: Pipeline, method: str, cfg: RunConfig, fraction: float):
    pc = cfg.probe_config()
    if method == "random-encoder":
        return pipe.probe_encoder(pipe.random_encoder(), pc, fraction=fraction)
    return pipe.probe_features(method, pc, fraction)


def cmd_report(args) -> None:
    run = _need(Path(args.run), "run directory")
    paths = sorted(p for p in run.rglob(REPORT_JSON))
    if not paths:
        raise CliError(f"no {REPORT_JSON} files under {run}")
    reports, fingerprints = [], set()
    for p in paths:
        fp, rs = reports_from_json(p.read_text())
        fingerprints.add(fp)
        fingerprints.update(r.fingerprint for r in rs)
        reports += rs
    if len(fingerprints) > 1 and not args.force:
        raise CliError(f"reports mix config fingerprints {sorted(fingerprints)} (use --force to combine)")
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    tag = next(iter(fingerprints)) if len(fingerprints) == 1 else "+".join(sorted(fingerprints))
    for name, text in build_tables(reports, tag).items():
        (out / name).write_text(text)


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="simcurl", description="Contrastive user representations from command sequences.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        p.add_argument("--out", required=True, help="output directory")
        if data:
            p.add_argument("--data", required=True, help="directory written by `simcurl gen`")

    common(sub.add_parser("gen", help="write a synthetic corpus, labels and true session boundaries"), data=False)
    common(sub.add_parser("segment", help="density-peak session segmentation to JSONL"))
    common(sub.add_parser("pretrain", help="contrastive pretraining; writes encoder checkpoint and loss curve"))

    p = sub.add_parser("probe", help="linear probes on a frozen encoder checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fraction", type=float, default=1.0, help="share of training labels to use")
    p.add_argument("--probe-dropout", type=float, help="session dropout while fitting the probe")
    p.add_argument("--merge-classes", action="store_true", help="also score experience merged to 3 classes")

    p = sub.add_parser("eval", help="evaluate checkpoints, a baseline, or a whole experiment suite")
    common(p)
    p.add_argument("--checkpoint", action="append", help="encoder checkpoint (repeatable)")
    p.add_argument("--baseline", choices=("bow", "cfiuf", "random-encoder"))
    p.add_argument("--suite", choices=SUITES, help="run an experiment driver (pretrains when no checkpoint is given)")
    p.add_argument("--seeds", type=int, nargs="+", help="run seeds for --suite (default: the root seed)")
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--merge-classes", action="store_true")

    p = sub.add_parser("report", help="consolidate report.json files under a run directory into four tables")
    p.add_argument("--run", required=True, help="directory searched recursively for report.json")
    p.add_argument("--out", help="where to write the tables (default: the run directory)")
    p.add_argument("--force", action="store_true", help="combine reports with different fingerprints")
    return parser


COMMANDS = {"gen": cmd_gen, "segment": cmd_segment, "pretrain": cmd_pretrain, "probe": cmd_probe, "eval": cmd_eval,
            "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except (CliError, ValueError, OSError, KeyError, FloatingPointError) as exc:
        msg = " ".join(str(exc).split()) or repr(exc)
        sys.stderr.write(f"simcurl: error: {type(exc).__name__}: {msg}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
