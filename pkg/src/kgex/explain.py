"""Influential-example explanations for individual link predictions.

A target triple ``(s, p, o)`` is explained by training triples ``(s', p, o')``
whose subject is among the ``m`` latent-space neighbours of ``s`` and whose
object is among the ``m`` neighbours of ``o``. Each example is scored by the
weighted average of the two neighbour distances; lower means closer.
"""
from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import neighbors
from .calibration import Calibrator, calibrate
from .models import EmbeddingModel
from .store import TripleStore

log = logging.getLogger(__name__)

FOUND = "found"
NONE_FOUND = "none-found"


class ExplainError(ValueError):
    pass


@dataclass(frozen=True)
class ExplainConfig:
    m: int = 25
    subject_weight: float = 0.5
    object_weight: float = 0.5
    # Only used when same_predicate_only is False.
    predicate_weight: float = 0.0
    max_examples: int | None = None
    same_predicate_only: bool = True
    n: int = 1
    strategy: str = "permissive"

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        weights = (self.subject_weight, self.object_weight, self.predicate_weight)
        if min(weights) < 0 or abs(sum(weights) - 1.0) > 1e-12:
            raise ValueError(f"weights must be non-negative and sum to 1, got {weights}")
        if self.same_predicate_only and self.predicate_weight != 0:
            raise ValueError("predicate_weight needs same_predicate_only=False")
        if self.max_examples is not None and self.max_examples < 1:
            raise ValueError("max_examples must be >= 1 or None")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.strategy not in ("strict", "permissive"):
            raise ValueError(f"unknown strategy {self.strategy!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ExampleTriple:
    triple: tuple[int, int, int]
    score: float | None
    subject_distance: float | None
    object_distance: float | None
    predicate_distance: float | None = None


@dataclass
class Explanation:
    target: tuple[int, int, int]
    probability: float | None
    examples: list[ExampleTriple]
    explainer: str = "example"
    config: dict = field(default_factory=dict)

    @property
    def status(self) -> str:
        return FOUND if self.examples else NONE_FOUND

    @property
    def triples(self) -> list[tuple[int, int, int]]:
        return [e.triple for e in self.examples]

    def to_dict(self, store: TripleStore | None = None) -> dict:
        """JSON-ready form; with ``store`` triples are given by label only."""
        def enc(t):
            if store is None:
                return {"subject": t[0], "predicate": t[1], "object": t[2]}
            s, p, o = store.triple_labels(t)
            return {"subject": s, "predicate": p, "object": o}

        return {
            "target": enc(self.target),
            "probability": self.probability,
            "status": self.status,
            "explainer": self.explainer,
            "examples": [dict(enc(e.triple), score=e.score, subject_distance=e.subject_distance,
                              object_distance=e.object_distance, predicate_distance=e.predicate_distance)
                         for e in self.examples],
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict, store: TripleStore | None = None) -> "Explanation":
        def dec(x):
            if store is None:
                return (int(x["subject"]), int(x["predicate"]), int(x["object"]))
            return store.triple_ids((x["subject"], x["predicate"], x["object"]))

        ex = [ExampleTriple(dec(e), e["score"], e["subject_distance"], e["object_distance"],
                            e.get("predicate_distance")) for e in d["examples"]]
        return cls(dec(d["target"]), d["probability"], ex, d.get("explainer", "example"), d.get("config", {}))

    def to_table(self, store: TripleStore) -> str:
        """Plain-text S/P/O/Score table; the first row is the target."""
        rows = [("S", "P", "O", "Score"), (*store.triple_labels(self.target), "TT")]
        for e in self.examples:
            rows.append((*store.triple_labels(e.triple), "n/a" if e.score is None else f"{e.score:.5f}"))
        if not self.examples:
            rows.append(("None", "", "", ""))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "-+-".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


@dataclass
class IndexPair:
    """Entity index used for both subject and object sampling, plus an optional relation index."""

    entities: neighbors.NeighbourIndex
    relations: neighbors.NeighbourIndex | None = None

    @classmethod
    def build(cls, model: EmbeddingModel, backend: str = "auto", relations: bool = False) -> "IndexPair":
        return cls(neighbors.build(model, backend),
                   neighbors.build_relations(model) if relations else None)


QueryFn = Callable[[int], tuple[np.ndarray, np.ndarray]]


def _check(model: EmbeddingModel, calibrator: Calibrator | None, indexes: IndexPair, config: ExplainConfig):
    if indexes is None or indexes.entities is None:
        raise ExplainError("entity index not built")
    indexes.entities.check(model.fingerprint)
    if indexes.entities.size != model.num_entities:
        raise neighbors.StaleIndexError("index size does not match the model")
    if calibrator is not None and calibrator.model_fingerprint not in (None, model.fingerprint):
        raise ExplainError("calibrator was fitted on a different model")
    if not config.same_predicate_only:
        if indexes.relations is None:
            raise ExplainError("relation index required when same_predicate_only is False")
        indexes.relations.check(model.fingerprint)


def _entity_query(model: EmbeddingModel, index: neighbors.NeighbourIndex, m: int) -> QueryFn:
    def q(entity: int):
        return index.query_arrays(model.entity_emb[entity], m)
    return q


def _cached(fn: QueryFn) -> QueryFn:
    cache: dict = {}

    def q(entity: int):
        hit = cache.get(entity)
        if hit is None:
            hit = cache[entity] = fn(entity)
        return hit
    return q


def _explain(model, calibrator, store, indexes, target, config, query: QueryFn) -> Explanation:
    s, p, o = (int(x) for x in target)
    if not (0 <= s < model.num_entities and 0 <= o < model.num_entities and 0 <= p < model.num_relations):
        raise ExplainError(f"target ids out of range: {(s, p, o)}")
    s_ids, s_dist = query(s)
    o_ids, o_dist = query(o)
    sd = dict(zip(s_ids.tolist(), s_dist.tolist()))
    od = dict(zip(o_ids.tolist(), o_dist.tolist()))

    if config.same_predicate_only:
        preds = {p: 0.0}
    else:
        r_ids, r_dist = indexes.relations.query_arrays(model.relation_emb[p], config.m)
        preds = dict(zip(r_ids.tolist(), r_dist.tolist()))

    ws, wo, wp = config.subject_weight, config.object_weight, config.predicate_weight
    found = []
    for pp, dp in preds.items():
        cls = store.by_predicate(pp)
        if len(sd) * len(od) <= len(cls):
            cands = ((a, pp, b) for a, b in itertools.product(sd, od) if (a, pp, b) in cls)
        else:
            cands = (t for t in cls if t[0] in sd and t[2] in od)
        for t in cands:
            if t == (s, p, o):
                continue
            score = ws * sd[t[0]] + wo * od[t[2]]
            if not config.same_predicate_only:
                score += wp * dp
            found.append(ExampleTriple(t, score, sd[t[0]], od[t[2]],
                                       None if config.same_predicate_only else dp))
    found.sort(key=lambda e: (e.score, e.triple))
    if config.max_examples is not None:
        found = found[:config.max_examples]
    prob = calibrate(calibrator, model.score((s, p, o))) if calibrator is not None else None
    return Explanation((s, p, o), prob, found, "example", config.to_dict())


def explain(model: EmbeddingModel, calibrator: Calibrator | None, store: TripleStore,
            indexes: IndexPair, target, config: ExplainConfig = ExplainConfig()) -> Explanation:
    """Influential examples for ``target``, closest first.

    An empty example list (status ``none-found``) is a valid result.

    Raises
    ------
    ExplainError, neighbors.StaleIndexError
        If the index or calibrator does not belong to ``model``.
    """
    _check(model, calibrator, indexes, config)
    return _explain(model, calibrator, store, indexes, target, config,
                    _entity_query(model, indexes.entities, config.m))


def explain_batch(model: EmbeddingModel, calibrator: Calibrator | None, store: TripleStore,
                  targets: Sequence, config: ExplainConfig = ExplainConfig(),
                  indexes: IndexPair | None = None, backend: str = "auto", workers: int = 1) -> list:
    """Explain many targets with one index and one neighbour query per distinct entity.

    Output order follows ``targets``. A target that fails yields its
    exception object in place of an :class:`Explanation`.
    """
    if indexes is None:
        indexes = IndexPair.build(model, backend, relations=not config.same_predicate_only)
    _check(model, calibrator, indexes, config)
    base = _entity_query(model, indexes.entities, config.m)
    targets = [tuple(int(x) for x in t) for t in targets]
    # Warm the cache sequentially so worker threads only read it.
    entities = sorted({e for t in targets for e in (t[0], t[2]) if 0 <= e < model.num_entities})
    cache = {e: base(e) for e in entities}

    def query(e):
        hit = cache.get(e)
        return hit if hit is not None else base(e)

    def one(t):
        try:
            return _explain(model, calibrator, store, indexes, t, config, query)
        except Exception as exc:  # noqa: BLE001 - reported per element
            return exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, targets))
    return [one(t) for t in targets]


def explain_random_baseline(store: TripleStore, target, count: int, seed: int = 0) -> Explanation:
    """Uniform sample without replacement from the target's predicate class."""
    if count < 1:
        raise ValueError("count must be >= 1")
    target = tuple(int(x) for x in target)
    pool = [t for t in store.predicate_class(target[1]) if t != target]
    rng = np.random.default_rng(seed)
    pick = rng.permutation(len(pool))[:count]
    examples = [ExampleTriple(pool[i], None, None, None) for i in pick]
    return Explanation(target, None, examples, "random", {"count": count, "seed": seed})


def select_target(model: EmbeddingModel, calibrator: Calibrator | None, store: TripleStore):
    """Highest-probability non-circular test triple; ties keep dataset order."""
    test = store.test
    if len(test) == 0:
        raise ExplainError("test split is empty")
    scores = model.score_triples(test)
    probs = calibrate(calibrator, scores) if calibrator is not None else scores
    for i in np.argsort(-probs, kind="stable"):
        s, p, o = (int(x) for x in test[i])
        if s != o:
            return (s, p, o)
    raise ExplainError("every test triple is circular")
