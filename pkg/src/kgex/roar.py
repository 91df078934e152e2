"""Remove-and-retrain evaluation of explanations.

ROAR deletes the explanation from the training split; rev-ROAR deletes the
target predicate's whole class and adds back only the explanation. Both the
original and the mutated model are trained with the same config and seed,
recalibrated on the untouched validation split at every checkpoint, and
compared on the test split.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import calibration
from .explain import Explanation, explain_random_baseline
from .models import EmbeddingModel, ModelConfig, Trainer, TrainingError
from .store import TripleStore

log = logging.getLogger(__name__)

DEFAULT_CHECKPOINTS = tuple(range(10, 101, 10))
CSV_FIELDS = ("epoch", "scenario", "subset", "explainer", "mean_diff", "target_diff", "pearson_r", "slope")


class RoarError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    kind: str = "roar"  # "roar" | "rev-roar"
    subset: str = "1"  # "1" | "all"
    checkpoints: tuple[int, ...] = DEFAULT_CHECKPOINTS
    explainer: str = "example"  # "example" | "random"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("roar", "rev-roar"):
            raise ValueError(f"unknown scenario {self.kind!r}")
        if str(self.subset) not in ("1", "all"):
            raise ValueError(f"unknown subset {self.subset!r}")
        object.__setattr__(self, "subset", str(self.subset))
        cps = tuple(int(c) for c in self.checkpoints)
        if not cps or any(b <= a for a, b in zip(cps, cps[1:])) or cps[0] < 1:
            raise ValueError("checkpoints must be positive and strictly increasing")
        object.__setattr__(self, "checkpoints", cps)


@dataclass
class Mutation:
    remove: list
    add: list


@dataclass
class RoarRow:
    epoch: int
    mean_diff: float
    target_diff: float
    pearson_r: float
    slope: float
    target_original: float
    target_retrained: float


@dataclass
class RoarReport:
    scenario: Scenario
    rows: list[RoarRow]
    removed: int
    added: int
    # Per checkpoint: (original, retrained) test-set probabilities.
    test_probabilities: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list, repr=False)

    def csv_rows(self) -> list[dict]:
        return [{"epoch": r.epoch, "scenario": self.scenario.kind, "subset": self.scenario.subset,
                 "explainer": self.scenario.explainer, "mean_diff": r.mean_diff,
                 "target_diff": r.target_diff, "pearson_r": r.pearson_r, "slope": r.slope}
                for r in self.rows]


def _subset(explanation: Explanation, subset: str) -> list:
    triples = explanation.triples
    return triples[:1] if subset == "1" else triples


def build_mutation(store: TripleStore, target, explanation: Explanation, scenario: Scenario) -> Mutation:
    """Removal/addition sets for a scenario.

    ROAR removes the chosen explanation subset. rev-ROAR removes every train
    triple sharing the target's predicate and adds the subset back.
    """
    chosen = _subset(explanation, scenario.subset)
    if not chosen:
        raise RoarError("explanation is empty")
    missing = [t for t in chosen if not store.contains(t)]
    if missing:
        raise RoarError(f"explanation triples not in train: {missing}")
    if scenario.kind == "roar":
        return Mutation(list(chosen), [])
    return Mutation(store.predicate_class(int(target[1])), list(chosen))


def pearson_and_slope(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Pearson r and least-squares slope of ``y`` on ``x``; identical inputs give (1, 1)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.array_equal(x, y):
        return 1.0, 1.0
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy, sxy = float(dx @ dx), float(dy @ dy), float(dx @ dy)
    if sxx == 0 or syy == 0:
        return float("nan"), (float("nan") if sxx == 0 else sxy / sxx)
    r = sxy / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0)), sxy / sxx


@dataclass
class Trajectory:
    """Calibrated test probabilities of one training run at each checkpoint."""

    epochs: tuple[int, ...]
    test: list[np.ndarray]
    target: list[float]
    models: list[EmbeddingModel] = field(default_factory=list, repr=False)


def trajectory(store: TripleStore, config: ModelConfig, target, checkpoints: Sequence[int],
               calibration_store: TripleStore | None = None, calibration_seed: int = 0,
               keep_models: bool = False) -> Trajectory:
    """Train continuously and calibrate a snapshot at every checkpoint."""
    cal_store = calibration_store if calibration_store is not None else store
    trainer = Trainer(store, config)
    test = cal_store.test
    probs, tprobs, models = [], [], []
    for epoch in range(1, max(checkpoints) + 1):
        try:
            trainer.fit_epoch()
        except TrainingError as exc:
            raise TrainingError(f"{exc} (before checkpoint {min(c for c in checkpoints if c >= epoch)})") from exc
        if epoch in checkpoints:
            model = trainer.snapshot()
            try:
                cal = calibration.fit(model, cal_store, seed=calibration_seed)
            except calibration.CalibrationError as exc:
                raise RoarError(f"calibration failed at checkpoint epoch {epoch}: {exc}") from exc
            probs.append(calibration.calibrate(cal, model.score_triples(test)))
            tprobs.append(calibration.calibrate(cal, model.score(target)))
            if keep_models:
                models.append(model)
    return Trajectory(tuple(checkpoints), probs, tprobs, models)


def compare_trajectories(scenario: Scenario, original: Trajectory, retrained: Trajectory,
                         mutation: Mutation) -> RoarReport:
    rows, pairs = [], []
    for epoch, po, pr, to, tr in zip(scenario.checkpoints, original.test, retrained.test,
                                     original.target, retrained.target):
        r, slope = pearson_and_slope(po, pr)
        rows.append(RoarRow(epoch, float(np.mean(po - pr) * 100.0), (to - tr) * 100.0, r, slope, to, tr))
        pairs.append((po, pr))
    return RoarReport(scenario, rows, len(mutation.remove), len(mutation.add), pairs)


def run(store: TripleStore, config: ModelConfig, target, explanation: Explanation, scenario: Scenario,
        original: Trajectory | None = None, mutation: Mutation | None = None) -> RoarReport:
    """Train original and mutated models and compare them at each checkpoint.

    Parameters
    ----------
    original : Trajectory, optional
        Reuse a precomputed trajectory of the unmodified store (same config
        and checkpoints) instead of training it again.
    mutation : Mutation, optional
        Override the mutation derived from the explanation.
    """
    target = tuple(int(x) for x in target)
    if mutation is None:
        mutation = build_mutation(store, target, explanation, scenario)
    cps = scenario.checkpoints
    if original is None:
        original = trajectory(store, config, target, cps, calibration_seed=scenario.seed)
    elif tuple(original.epochs) != cps:
        raise RoarError("original trajectory has different checkpoints")
    mutated = store.mutate(mutation.remove, mutation.add)
    retrained = trajectory(mutated, config, target, cps, calibration_store=store, calibration_seed=scenario.seed)
    return compare_trajectories(scenario, original, retrained, mutation)


@dataclass
class ComparisonRow:
    epoch: int
    scenario: str
    subset: str
    explainer: str
    mean_diff: float | None
    target_diff: float | None
    pearson_r: float | None
    slope: float | None
    available: bool = True

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in CSV_FIELDS}


def compare_explainers(store: TripleStore, config: ModelConfig, target, explanation: Explanation,
                       grid: Sequence[tuple[str, str]] = (("rev-roar", "1"), ("rev-roar", "all"),
                                                          ("roar", "1"), ("roar", "all")),
                       checkpoints: Sequence[int] = DEFAULT_CHECKPOINTS, seed: int = 0,
                       explainers: Sequence[str] = ("example", "random"),
                       original: Trajectory | None = None) -> tuple[list[ComparisonRow], dict]:
    """Influential-example explainer against a size-matched random baseline over a scenario grid.

    Returns the comparison rows (keyed by epoch, scenario, subset, explainer)
    and the underlying reports keyed the same way minus the epoch.
    Configurations whose explanation is empty give rows marked unavailable.
    """
    if not explanation.examples:
        raise RoarError("example explanation is empty")
    cps = tuple(checkpoints)
    if original is None:
        original = trajectory(store, config, target, cps, calibration_seed=seed)
    explanations = {"example": explanation}
    if "random" in explainers:
        explanations["random"] = explain_random_baseline(store, target, len(explanation.examples), seed)
    rows, reports = [], {}
    for kind, subset in grid:
        for name in explainers:
            expl = explanations[name]
            sc = Scenario(kind, subset, cps, name, seed)
            if not expl.examples:
                rows.extend(ComparisonRow(e, kind, str(subset), name, None, None, None, None, False) for e in cps)
                continue
            rep = run(store, config, target, expl, sc, original=original)
            reports[(kind, str(subset), name)] = rep
            rows.extend(ComparisonRow(r.epoch, kind, str(subset), name, r.mean_diff, r.target_diff,
                                      r.pearson_r, r.slope) for r in rep.rows)
    rows.sort(key=lambda r: (r.epoch, r.scenario, r.subset, explainers.index(r.explainer)))
    return rows, reports


# --------------------------------------------------------------------------- output

def write_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            d = r.as_dict() if isinstance(r, ComparisonRow) else r
            w.writerow({k: ("-" if d[k] is None else d[k]) for k in CSV_FIELDS})


def format_table(rows: Sequence[ComparisonRow]) -> str:
    """Epoch x (explainer) rows with rev-ROAR/ROAR target differences in percent."""
    cols = [("rev-roar", "1"), ("rev-roar", "all"), ("roar", "1"), ("roar", "all")]
    by = {(r.epoch, r.explainer, r.scenario, r.subset): r for r in rows}
    epochs = sorted({r.epoch for r in rows})
    explainers = list(dict.fromkeys(r.explainer for r in rows))
    present = [c for c in cols if any((k[2], k[3]) == c for k in by)]
    head = ["epoch", "explainer", "average"] + [f"{k} {s}" for k, s in present]
    out = [head]
    for e in epochs:
        for name in explainers:
            cells = [str(e), "ours" if name == "example" else "rand." if name == "random" else name]
            avg = [by[(e, name, *c)].mean_diff for c in present
                   if (e, name, *c) in by and by[(e, name, *c)].available]
            cells.append(f"{np.mean(avg):.3f}" if avg else "-")
            for c in present:
                r = by.get((e, name, *c))
                cells.append("-" if r is None or not r.available else f"{r.target_diff:.3f}")
            out.append(cells)
    widths = [max(len(r[i]) for r in out) for i in range(len(head))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in out) + "\n"


def write_plot_data(reports: dict, path_prefix) -> list[str]:
    """Two long-format CSVs: target probability per epoch, and test-set probability pairs."""
    tp, sp = f"{path_prefix}_target_probability.csv", f"{path_prefix}_test_probabilities.csv"
    with open(tp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "scenario", "subset", "explainer", "original", "retrained", "difference"])
        for (kind, subset, name), rep in reports.items():
            for r in rep.rows:
                w.writerow([r.epoch, kind, subset, name, r.target_original, r.target_retrained, r.target_diff])
    with open(sp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "scenario", "subset", "explainer", "test_index", "original", "retrained"])
        for (kind, subset, name), rep in reports.items():
            for r, (po, pr) in zip(rep.rows, rep.test_probabilities):
                for i, (a, b) in enumerate(zip(po.tolist(), pr.tolist())):
                    w.writerow([r.epoch, kind, subset, name, i, a, b])
    return [tp, sp]
