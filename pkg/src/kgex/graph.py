"""Prototype aggregation and the two-plane explanation graph.

The target plane holds the target triple's n-hop neighbourhood weighted by
the prototype; the examples plane holds the scored example triples; meta
links join the target's subject/object to each example's subject/object.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .explain import ExampleTriple, Explanation
from .store import TripleStore

SCHEMA = "explanation-graph/1"

Triple = tuple[int, int, int]


def triple_neighbourhood(store: TripleStore, triple, n: int) -> list[set[Triple]]:
    """Per-level triples around both endpoints of ``triple``, the triple itself removed."""
    s, _, o = (int(x) for x in triple)
    sl = store.n_hop((s, o) if s != o else (s,), n)
    t = tuple(int(x) for x in triple)
    return [level - {t} for level in sl.hops]


def _predicates(levels: list[set[Triple]]) -> list[set[int]]:
    return [{p for _, p, _ in level} for level in levels]


@dataclass
class PrototypeGraph:
    """``levels[h - 1]`` maps predicate id to weight at hop level ``h``."""

    levels: list[dict[int, int]]
    strategy: str

    def weight(self, level: int, predicate: int) -> int:
        if level < 1 or level > len(self.levels):
            return 0
        return self.levels[level - 1].get(predicate, 0)

    @property
    def empty(self) -> bool:
        return not any(self.levels)


def aggregate_prototype(store: TripleStore, target, examples, n: int = 1,
                        strategy: str = "permissive") -> PrototypeGraph:
    """Combine example neighbourhood predicates level by level.

    ``strict`` keeps predicates present at a level for every example and for
    the target (weight 1). ``permissive`` counts, per level, the examples
    containing each predicate and keeps those also present for the target.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if strategy not in ("strict", "permissive"):
        raise ValueError(f"unknown strategy {strategy!r}")
    triples = [e.triple if isinstance(e, ExampleTriple) else tuple(e) for e in examples]
    if not triples:
        return PrototypeGraph([{} for _ in range(n)], strategy)
    tt = _predicates(triple_neighbourhood(store, target, n))
    per_example = [_predicates(triple_neighbourhood(store, t, n)) for t in triples]
    levels = []
    for h in range(n):
        if strategy == "strict":
            common = set.intersection(*(ex[h] for ex in per_example)) & tt[h]
            levels.append({p: 1 for p in sorted(common)})
        else:
            counts: dict[int, int] = {}
            for ex in per_example:
                for p in ex[h]:
                    counts[p] = counts.get(p, 0) + 1
            levels.append({p: counts[p] for p in sorted(counts) if p in tt[h]})
    return PrototypeGraph(levels, strategy)


@dataclass(frozen=True)
class WeightedTriple:
    triple: Triple
    level: int
    weight: int


@dataclass(frozen=True)
class MetaLink:
    kind: str  # "similar-subject" | "similar-object"
    target_entity: int
    example_entity: int
    example_index: int
    distance: float | None


@dataclass
class ExplanationGraph:
    target: Triple
    probability: float | None
    target_plane: list[WeightedTriple]
    examples: list[ExampleTriple]
    meta_links: list[MetaLink]
    prototype: PrototypeGraph
    n: int = 1
    labels: dict = field(default_factory=dict, compare=False)


def assemble(target, probability, examples, prototype: PrototypeGraph, store: TripleStore,
             n: int = 1) -> ExplanationGraph:
    target = tuple(int(x) for x in target)
    plane = []
    for h, level in enumerate(triple_neighbourhood(store, target, n), 1):
        for t in sorted(level):
            plane.append(WeightedTriple(t, h, prototype.weight(h, t[1])))
    examples = list(examples)
    links = []
    for i, ex in enumerate(examples):
        links.append(MetaLink("similar-subject", target[0], ex.triple[0], i, ex.subject_distance))
        links.append(MetaLink("similar-object", target[2], ex.triple[2], i, ex.object_distance))
    labels = {"entities": {}, "relations": {}}
    ents = {target[0], target[2]} | {e for wt in plane for e in (wt.triple[0], wt.triple[2])} \
        | {e for ex in examples for e in (ex.triple[0], ex.triple[2])}
    rels = {target[1]} | {wt.triple[1] for wt in plane} | {ex.triple[1] for ex in examples} \
        | {p for lvl in prototype.levels for p in lvl}
    labels["entities"] = {e: store.entities.label(e) for e in sorted(ents)}
    labels["relations"] = {p: store.relations.label(p) for p in sorted(rels)}
    return ExplanationGraph(target, probability, plane, examples, links, prototype, n, labels)


def explanation_graph(store: TripleStore, explanation: Explanation, n: int = 1,
                      strategy: str = "permissive") -> ExplanationGraph:
    proto = aggregate_prototype(store, explanation.target, explanation.examples, n, strategy)
    return assemble(explanation.target, explanation.probability, explanation.examples, proto, store, n)


# --------------------------------------------------------------------------- export

def _tdict(t, labels):
    ent, rel = labels.get("entities", {}), labels.get("relations", {})
    return {"subject": ent.get(t[0], str(t[0])), "predicate": rel.get(t[1], str(t[1])),
            "object": ent.get(t[2], str(t[2]))}


def to_dict(g: ExplanationGraph) -> dict:
    """JSON-ready form. Entities and relations appear by label only."""
    L = g.labels
    ent, rel = L.get("entities", {}), L.get("relations", {})
    return {
        "schema": SCHEMA,
        "n": g.n,
        "target_plane": {
            "target": _tdict(g.target, L),
            "probability": g.probability,
            "triples": [dict(_tdict(w.triple, L), level=w.level, weight=w.weight) for w in g.target_plane],
        },
        "examples_plane": [dict(_tdict(e.triple, L), score=e.score, subject_distance=e.subject_distance,
                                object_distance=e.object_distance, predicate_distance=e.predicate_distance)
                           for e in g.examples],
        "meta_links": [{"kind": m.kind, "target_entity": ent.get(m.target_entity, str(m.target_entity)),
                        "example_entity": ent.get(m.example_entity, str(m.example_entity)),
                        "example_index": m.example_index, "distance": m.distance} for m in g.meta_links],
        "prototype": {
            "strategy": g.prototype.strategy,
            "levels": [{"level": h, "predicates": [{"predicate": rel.get(p, str(p)), "weight": w}
                                                   for p, w in lvl.items()]}
                       for h, lvl in enumerate(g.prototype.levels, 1)],
        },
    }


def from_dict(d: dict, store: TripleStore) -> ExplanationGraph:
    """Inverse of :func:`to_dict`; labels are resolved through ``store``'s dictionaries."""
    if d.get("schema") != SCHEMA:
        raise ValueError(f"unsupported schema {d.get('schema')!r}")
    E, R = store.entities, store.relations

    def ids(x):
        return (E.id(x["subject"]), R.id(x["predicate"]), E.id(x["object"]))

    tp = d["target_plane"]
    plane = [WeightedTriple(ids(w), w["level"], w["weight"]) for w in tp["triples"]]
    examples = [ExampleTriple(ids(e), e["score"], e["subject_distance"], e["object_distance"],
                              e.get("predicate_distance")) for e in d["examples_plane"]]
    links = [MetaLink(m["kind"], E.id(m["target_entity"]), E.id(m["example_entity"]), m["example_index"],
                      m["distance"]) for m in d["meta_links"]]
    levels = [{R.id(p["predicate"]): p["weight"] for p in lvl["predicates"]} for lvl in d["prototype"]["levels"]]
    proto = PrototypeGraph(levels, d["prototype"]["strategy"])
    target = ids(tp["target"])
    g = assemble(target, tp["probability"], examples, proto, store, d.get("n", 1))
    g.target_plane, g.meta_links = plane, links
    return g


def _dot_id(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def to_dot(g: ExplanationGraph) -> str:
    """Graphviz rendering with one cluster per plane and dashed meta links.

    Each cluster holds a plaintext plane-title node; entity nodes are
    named by plane and position (``t0, t1, ...`` / ``x0, x1, ...``).
    """
    ent = g.labels.get("entities", {})
    rel = g.labels.get("relations", {})
    el = lambda e: ent.get(e, str(e))  # noqa: E731
    rl = lambda p: rel.get(p, str(p))  # noqa: E731

    lines = ["digraph explanation {", "  compound=true;", "  rankdir=LR;"]
    t_nodes = sorted({g.target[0], g.target[2]} | {e for w in g.target_plane for e in (w.triple[0], w.triple[2])})
    tn = {e: f"t{i}" for i, e in enumerate(t_nodes)}
    lines.append("  subgraph cluster_target {")
    lines.append('    label="Target Triple Neighbourhood Plane";')
    lines.append('    plane_target [shape=plaintext, label="target plane"];')
    for e in t_nodes:
        lines.append(f"    {tn[e]} [label={_dot_id(el(e))}];")
    s, p, o = g.target
    prob = "" if g.probability is None else f", probability={g.probability!r}"
    lines.append(f"    {tn[s]} -> {tn[o]} [label={_dot_id(rl(p))}, color=red, penwidth=2, target_triple=true{prob}];")
    for w in g.target_plane:
        a, b, c = w.triple
        lines.append(f"    {tn[a]} -> {tn[c]} [label={_dot_id(rl(b))}, weight={w.weight}, level={w.level}];")
    lines.append("  }")

    x_nodes = sorted({e for ex in g.examples for e in (ex.triple[0], ex.triple[2])})
    xn = {e: f"x{i}" for i, e in enumerate(x_nodes)}
    lines.append("  subgraph cluster_examples {")
    lines.append('    label="Examples Plane";')
    lines.append('    plane_examples [shape=plaintext, label="examples plane"];')
    for e in x_nodes:
        lines.append(f"    {xn[e]} [label={_dot_id(el(e))}];")
    for i, ex in enumerate(g.examples):
        a, b, c = ex.triple
        sc = "" if ex.score is None else f", score={ex.score!r}"
        lines.append(f"    {xn[a]} -> {xn[c]} [label={_dot_id(rl(b))}, rank_index={i}{sc}];")
    lines.append("  }")
    for m in g.meta_links:
        dist = "" if m.distance is None else f", distance={m.distance!r}"
        lines.append(f"  {tn[m.target_entity]} -> {xn[m.example_entity]} [style=dashed, dir=none, "
                     f"label={_dot_id(m.kind)}{dist}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def export(graph: ExplanationGraph, fmt: str = "json") -> bytes:
    if fmt == "json":
        return (json.dumps(to_dict(graph), indent=2, sort_keys=False) + "\n").encode("utf-8")
    if fmt == "dot":
        return to_dot(graph).encode("utf-8")
    raise ValueError(f"unknown export format {fmt!r}; expected 'json' or 'dot'")
