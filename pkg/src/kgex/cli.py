"""Command-line entry point: ``kgex train|calibrate|explain|explain-batch|roar``.

Every command writes its outputs plus one ``manifest.json`` into an output
directory. Failures additionally write ``error.json`` and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import difflib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, calibration, graph, roar
from .explain import ExplainConfig, Explanation, IndexPair, explain, explain_batch, select_target
from .models import (PROFILES, EarlyStopping, ModelConfig, TrainingError, load_snapshot, save_snapshot,
                     train)
from .store import TripleStore, UnknownLabelError

log = logging.getLogger("kgex")

DATA_ENV = "KGEX_DATA_DIR"
MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
EXPLAIN_FIELDS = {f.name for f in dataclasses.fields(ExplainConfig)}


class CliError(Exception):
    """User-facing failure; the message is written to ``error.json``."""


# --------------------------------------------------------------------------- helpers

def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=False, allow_nan=True) + "\n", encoding="utf-8")


def _resolve_data(arg: str | None) -> Path:
    root = os.environ.get(DATA_ENV)
    if arg is None:
        if not root:
            raise CliError(f"no dataset given: pass --data or set {DATA_ENV}")
        return Path(root)
    p = Path(arg)
    if not p.exists() and root and not p.is_absolute():
        p = Path(root) / arg
    return p


def _load_store(arg: str | None) -> tuple[TripleStore, Path]:
    path = _resolve_data(arg)
    try:
        return TripleStore.from_directory(path), path
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from exc


def _load_model(path, store: TripleStore, need_calibrator: bool = True):
    try:
        model = load_snapshot(path)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read snapshot {path}: {exc}") from exc
    if model.num_entities != store.num_entities or model.num_relations != store.num_relations:
        raise CliError(f"snapshot has {model.num_entities} entities / {model.num_relations} relations, "
                       f"dataset has {store.num_entities} / {store.num_relations}")
    if need_calibrator and model.calibrator is None:
        raise CliError("snapshot is not calibrated; run `kgex calibrate` first")
    return model


def _lookup(dictionary, label: str, kind: str) -> int:
    idx = dictionary.get(label)
    if idx is None:
        close = difflib.get_close_matches(label, dictionary.labels, n=5, cutoff=0.5)
        hint = f"; did you mean: {', '.join(close)}" if close else ""
        raise CliError(f"unknown {kind} label {label!r}{hint}")
    return idx


def parse_target(text: str, store: TripleStore) -> tuple[int, int, int]:
    """``"s,p,o"`` (or tab-separated) labels to ids."""
    parts = text.split("\t") if "\t" in text else text.split(",")
    parts = [x.strip() for x in parts]
    if len(parts) != 3:
        raise CliError(f"target must have three fields 's,p,o', got {text!r}")
    s, p, o = parts
    return (_lookup(store.entities, s, "entity"), _lookup(store.relations, p, "relation"),
            _lookup(store.entities, o, "entity"))


def model_config(args) -> ModelConfig:
    """Profile defaults, overridden by ``--config`` file, overridden by flags."""
    cfg = PROFILES[args.profile].to_dict()
    file_cfg = _config_file(args)
    cfg.update({k: v for k, v in file_cfg.items() if k in MODEL_FIELDS})
    flags = {"model": args.model, "k": args.k, "eta": args.eta, "lr": args.lr, "l2": args.l2,
             "max_epochs": args.epochs, "batch_size": args.batch_size, "seed": args.seed}
    cfg.update({k: v for k, v in flags.items() if v is not None})
    if args.patience is not None or args.check_interval is not None:
        es = cfg.get("early_stopping") or {}
        es = dict(es) if isinstance(es, dict) else dataclasses.asdict(es)
        if args.patience is not None:
            es["patience"] = args.patience
        if args.check_interval is not None:
            es["check_interval"] = args.check_interval
        cfg["early_stopping"] = EarlyStopping(**es)
    try:
        return ModelConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid model config: {exc}") from exc


def explain_config(args) -> ExplainConfig:
    cfg = ExplainConfig().to_dict()
    cfg.update({k: v for k, v in _config_file(args).items() if k in EXPLAIN_FIELDS and k != "seed"})
    if args.m is not None:
        cfg["m"] = args.m
    if args.weights is not None:
        try:
            ws, wo = (float(x) for x in args.weights.split(","))
        except ValueError as exc:
            raise CliError(f"--weights expects 'ws,wo', got {args.weights!r}") from exc
        cfg["subject_weight"], cfg["object_weight"] = ws, wo
    for name in ("n", "strategy", "max_examples"):
        if getattr(args, name) is not None:
            cfg[name] = getattr(args, name)
    try:
        return ExplainConfig(**cfg)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid explain config: {exc}") from exc


def _config_file(args) -> dict:
    if getattr(args, "config", None) is None:
        return {}
    try:
        with open(args.config, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(data, dict):
        raise CliError("config file must hold a JSON object")
    return data


def _workers(args) -> int:
    if args.deterministic:
        return 1
    return max(1, args.threads or 1)


# --------------------------------------------------------------------------- commands

def cmd_train(args, out: Path, manifest: dict) -> None:
    store, data = _load_store(args.data)
    cfg = model_config(args)
    manifest["config"] = {"model": cfg.to_dict()}
    manifest["inputs"] = {"data": str(data)}
    history = []
    try:
        model = train(store, cfg, history=history)
    except TrainingError as exc:
        raise CliError(f"training failed: {exc}") from exc
    save_snapshot(model, out / "model.kgex")
    with open(out / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_mrr"])
        for r in history:
            w.writerow([r.epoch, repr(r.loss), "" if r.val_mrr is None else repr(r.val_mrr)])
    store.entities.to_tsv(out / "entities.tsv")
    store.relations.to_tsv(out / "relations.tsv")
    manifest["outputs"] = ["model.kgex", "train_log.csv", "entities.tsv", "relations.tsv"]
    print(f"trained {cfg.model} k={cfg.k} for {model.trained_epochs} epochs -> {out / 'model.kgex'}")


def _labelled_validation(store: TripleStore, seed: int):
    pos = store.valid
    neg = calibration.sample_corruptions(store, pos, 1, np.random.default_rng([seed, 99]))
    triples = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    return triples, labels


def cmd_calibrate(args, out: Path, manifest: dict) -> None:
    store, data = _load_store(args.data)
    if len(store.valid) == 0:
        raise CliError("validation split is empty; calibration needs validation triples")
    model = _load_model(args.snapshot, store, need_calibrator=False)
    if model.calibrator is not None and not args.refit:
        raise CliError("snapshot is already calibrated; pass --refit to fit again")
    seed = model.config.seed if args.seed is None else args.seed
    manifest["config"] = {"negatives": args.negatives, "bins": args.bins, "seed": seed, "refit": args.refit}
    manifest["inputs"] = {"data": str(data), "snapshot": str(args.snapshot)}
    manifest["seed"] = seed
    try:
        cal = calibration.fit(model, store, negatives_per_positive=args.negatives, seed=seed)
    except calibration.CalibrationError as exc:
        raise CliError(f"calibration failed: {exc}") from exc
    model.calibrator = cal
    triples, labels = _labelled_validation(store, seed)
    scores = model.score_triples(triples)
    before = calibration.reliability_table(calibration.minmax(scores), labels, args.bins)
    after = calibration.reliability_table(cal(scores), labels, args.bins)
    save_snapshot(model, out / "model.kgex")
    before.to_csv(out / "reliability_before.csv")
    after.to_csv(out / "reliability_after.csv")
    _dump({"calibrator": cal.to_dict(), "ece_before": before.ece, "ece_after": after.ece},
          out / "calibration.json")
    manifest["outputs"] = ["model.kgex", "reliability_before.csv", "reliability_after.csv", "calibration.json"]
    print(f"calibrated: slope={cal.slope:.6g} intercept={cal.intercept:.6g} "
          f"ECE {before.ece:.4f} -> {after.ece:.4f}")


def cmd_explain(args, out: Path, manifest: dict) -> None:
    store, data = _load_store(args.data)
    model = _load_model(args.snapshot, store)
    cfg = explain_config(args)
    if args.select_target:
        target = select_target(model, model.calibrator, store)
    elif args.target:
        target = parse_target(args.target, store)
    else:
        raise CliError("give --target 's,p,o' or --select-target")
    manifest["config"] = {"explain": cfg.to_dict(), "backend": args.backend, "format": args.format}
    manifest["inputs"] = {"data": str(data), "snapshot": str(args.snapshot),
                          "target": list(store.triple_labels(target))}
    indexes = IndexPair.build(model, args.backend, relations=not cfg.same_predicate_only)
    ex = explain(model, model.calibrator, store, indexes, target, cfg)
    _dump(ex.to_dict(store), out / "explanation.json")
    (out / "explanation.txt").write_text(ex.to_table(store), encoding="utf-8")
    g = graph.explanation_graph(store, ex, cfg.n, cfg.strategy)
    gname = f"graph.{args.format}"
    (out / gname).write_bytes(graph.export(g, args.format))
    manifest["outputs"] = ["explanation.json", "explanation.txt", gname]
    manifest["status"] = ex.status
    sys.stdout.write(ex.to_table(store))
    if ex.status == "none-found":
        print("none-found: no influential examples for this target")


def _read_targets(path) -> list[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [ln.rstrip("\n") for ln in fh if ln.strip()]
    except OSError as exc:
        raise CliError(f"cannot read targets file {path}: {exc}") from exc


def cmd_explain_batch(args, out: Path, manifest: dict) -> None:
    store, data = _load_store(args.data)
    model = _load_model(args.snapshot, store)
    cfg = explain_config(args)
    if args.all_test:
        lines = ["\t".join(store.triple_labels(t)) for t in store.test.tolist()]
    elif args.targets:
        lines = _read_targets(args.targets)
    else:
        raise CliError("give --targets FILE or --all-test")
    manifest["config"] = {"explain": cfg.to_dict(), "backend": args.backend, "workers": _workers(args)}
    manifest["inputs"] = {"data": str(data), "snapshot": str(args.snapshot),
                          "targets": "all-test" if args.all_test else str(args.targets)}
    t0 = time.perf_counter()
    parsed, errors = [], {}
    for i, line in enumerate(lines):
        try:
            parsed.append(parse_target(line, store))
        except CliError as exc:
            errors[i] = str(exc)
            parsed.append(None)
    valid = [t for t in parsed if t is not None]
    results = iter(explain_batch(model, model.calibrator, store, valid, cfg, backend=args.backend,
                                 workers=_workers(args)))
    counts = {"found": 0, "none-found": 0, "error": 0}
    with open(out / "explanations.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for i, line in enumerate(lines):
            if parsed[i] is None:
                doc = {"input": line, "status": "error", "error": errors[i]}
            else:
                res = next(results)
                if isinstance(res, Exception):
                    doc = {"input": line, "status": "error", "error": str(res)}
                else:
                    doc = res.to_dict(store)
            counts[doc["status"]] += 1
            fh.write(json.dumps(doc, sort_keys=False) + "\n")
    total = time.perf_counter() - t0
    n = len(lines)
    summary = {"targets": n, **counts}
    _dump(summary, out / "summary.json")
    # Timings vary run to run, so they live in the manifest only.
    manifest["timing"] = {"total_seconds": total, "seconds_per_triple": total / n if n else 0.0, "targets": n}
    manifest["outputs"] = ["explanations.jsonl", "summary.json"]
    print(f"explained {n} targets ({counts['found']} found, {counts['none-found']} none-found, "
          f"{counts['error']} errors) in {total:.3f} s, {total / max(n, 1):.4f} s/triple")


def _both(value: str, options: tuple) -> list:
    return list(options) if value == "both" else [value]


def cmd_roar(args, out: Path, manifest: dict) -> None:
    store, data = _load_store(args.data)
    cfg = model_config(args)
    ecfg = explain_config(args)
    checkpoints = tuple(int(x) for x in args.checkpoints.split(",")) if args.checkpoints \
        else roar.DEFAULT_CHECKPOINTS
    seed = cfg.seed
    manifest["config"] = {"model": cfg.to_dict(), "explain": ecfg.to_dict(), "scenario": args.scenario,
                          "subset": args.subset, "explainer": args.explainer,
                          "checkpoints": list(checkpoints)}
    manifest["inputs"] = {"data": str(data)}
    try:
        model = train(store, cfg)
        cal = calibration.fit(model, store, seed=seed)
    except (TrainingError, calibration.CalibrationError) as exc:
        raise CliError(f"original model: {exc}") from exc
    target = parse_target(args.target, store) if args.target else select_target(model, cal, store)
    manifest["inputs"]["target"] = list(store.triple_labels(target))
    ex = explain(model, cal, store, IndexPair.build(model), target, ecfg)
    if not ex.examples:
        raise CliError(f"no influential examples for target {store.triple_labels(target)}; "
                       "choose a different --target or a larger --m")
    _dump(ex.to_dict(store), out / "explanation.json")
    grid = [(k, s) for k in _both(args.scenario, ("rev-roar", "roar")) for s in _both(args.subset, ("1", "all"))]
    explainers = _both(args.explainer, ("example", "random"))
    rows, reports = roar.compare_explainers(store, cfg, target, ex, grid, checkpoints, seed, explainers)
    roar.write_csv(rows, out / "report.csv")
    table = roar.format_table(rows)
    (out / "report.txt").write_text(table, encoding="utf-8")
    plots = roar.write_plot_data(reports, out / "plot")
    manifest["outputs"] = ["explanation.json", "report.csv", "report.txt"] + [Path(p).name for p in plots]
    sys.stdout.write(table)


# --------------------------------------------------------------------------- parser

def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    g.add_argument("--config", help="JSON file of config values (flags take precedence)")
    g.add_argument("--model", choices=["transe", "distmult", "complex"])
    g.add_argument("--k", type=int)
    g.add_argument("--eta", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--l2", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--patience", type=int, help="early-stopping patience (enables early stopping)")
    g.add_argument("--check-interval", type=int, help="epochs between validation checks")


def _explain_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("explainer")
    g.add_argument("--m", type=int, help="neighbours per endpoint (default 25)")
    g.add_argument("--weights", help="subject,object score weights (default 0.5,0.5)")
    g.add_argument("--n", type=int, help="hop level of the explanation graph")
    g.add_argument("--strategy", choices=["strict", "permissive"])
    g.add_argument("--max-examples", type=int)
    if not any(a.dest == "config" for a in p._actions):
        g.add_argument("--config", help="JSON file of config values (flags take precedence)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgex", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"kgex {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", help=f"dataset directory (default: ${DATA_ENV})")
    common.add_argument("--out", help="output directory (default: runs/<command>-<timestamp>)")
    common.add_argument("--threads", type=int, default=1, help="cap on worker threads")
    common.add_argument("--deterministic", action="store_true", help="force sequential execution")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train an embedding model")
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", parents=[common], help="fit a probability calibrator")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--negatives", type=int, default=1, help="negatives per validation positive")
    p.add_argument("--seed", type=int)
    p.add_argument("--refit", action="store_true")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("explain", parents=[common], help="explain one prediction")
    p.add_argument("--snapshot", required=True)
    t = p.add_mutually_exclusive_group()
    t.add_argument("--target", help="'subject,predicate,object' labels")
    t.add_argument("--select-target", action="store_true")
    p.add_argument("--format", choices=["json", "dot"], default="json", help="explanation graph format")
    p.add_argument("--backend", choices=["auto", "brute-force", "partition-tree"], default="auto")
    _explain_flags(p)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("explain-batch", parents=[common], help="explain many predictions")
    p.add_argument("--snapshot", required=True)
    t = p.add_mutually_exclusive_group()
    t.add_argument("--targets", help="file with one 's,p,o' (or tab-separated) target per line")
    t.add_argument("--all-test", action="store_true")
    p.add_argument("--backend", choices=["auto", "brute-force", "partition-tree"], default="auto")
    _explain_flags(p)
    p.set_defaults(func=cmd_explain_batch)

    p = sub.add_parser("roar", parents=[common], help="remove-and-retrain evaluation")
    _model_flags(p)
    _explain_flags(p)
    p.add_argument("--target", help="'subject,predicate,object' labels (default: selected)")
    p.add_argument("--scenario", choices=["roar", "rev-roar", "both"], default="both")
    p.add_argument("--subset", choices=["1", "all", "both"], default="both")
    p.add_argument("--explainer", choices=["example", "random", "both"], default="example")
    p.add_argument("--checkpoints", help="comma-separated epochs (default 10,20,...,100)")
    p.set_defaults(func=cmd_roar)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = datetime.now(timezone.utc)
    out = Path(args.out) if args.out else Path("runs") / f"{args.command}-{started:%Y%m%dT%H%M%S}"
    out.mkdir(parents=True, exist_ok=True)
    for stale in ("error.json",):
        (out / stale).unlink(missing_ok=True)
    manifest = {"command": args.command, "argv": argv, "version": __version__,
                "started": started.isoformat(), "seed": getattr(args, "seed", None)}
    t0 = time.perf_counter()
    code = 0
    try:
        args.func(args, out, manifest)
    except (CliError, UnknownLabelError, roar.RoarError, ValueError) as exc:
        code = 1
        _dump({"command": args.command, "error": str(exc)}, out / "error.json")
        manifest["error"] = str(exc)
        print(f"kgex {args.command}: error: {exc}", file=sys.stderr)
    manifest["wall_time_seconds"] = time.perf_counter() - t0
    if manifest.get("seed") is None and isinstance(manifest.get("config", {}).get("model"), dict):
        manifest["seed"] = manifest["config"]["model"]["seed"]
    _dump(manifest, out / "manifest.json")
    return code


if __name__ == "__main__":
    raise SystemExit(main())
