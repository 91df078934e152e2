"""Small random knowledge graphs for tests, demos and smoke runs."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .store import TripleStore


def random_triples(num_entities: int, num_relations: int, num_triples: int, rng: np.random.Generator,
                   allow_self_loops: bool = False) -> np.ndarray:
    """``num_triples`` distinct uniformly drawn triples."""
    capacity = num_entities * num_relations * num_entities
    if num_triples > capacity:
        raise ValueError("more triples requested than exist")
    seen: set = set()
    out = []
    while len(out) < num_triples:
        s, o = (int(x) for x in rng.integers(num_entities, size=2))
        p = int(rng.integers(num_relations))
        if (s == o and not allow_self_loops) or (s, p, o) in seen:
            continue
        seen.add((s, p, o))
        out.append((s, p, o))
    return np.array(out, dtype=np.int64).reshape(-1, 3)


def random_store(num_entities: int = 30, num_relations: int = 3, num_train: int = 200,
                 num_valid: int = 0, num_test: int = 0, seed: int = 0) -> TripleStore:
    """Random store whose valid/test triples are disjoint from train."""
    rng = np.random.default_rng(seed)
    t = random_triples(num_entities, num_relations, num_train + num_valid + num_test, rng)
    train, valid, test = np.split(t, [num_train, num_train + num_valid])
    return TripleStore(train, valid, test, num_entities=num_entities, num_relations=num_relations)


def clustered_store(num_clusters: int = 4, cluster_size: int = 10, num_relations: int = 3,
                    edges_per_relation: int = 60, num_valid: int = 20, num_test: int = 20,
                    seed: int = 0) -> TripleStore:
    """Graph where relation ``r`` links cluster ``c`` to cluster ``(c + r + 1) mod C``.

    Structured enough for a translational model to learn, so validation and
    test triples are predictable from train.
    """
    rng = np.random.default_rng(seed)
    n = num_clusters * cluster_size
    cluster = np.arange(n) // cluster_size
    pool = []
    for r in range(num_relations):
        for s in range(n):
            dst = (cluster[s] + r + 1) % num_clusters
            for o in range(dst * cluster_size, (dst + 1) * cluster_size):
                if o != s:
                    pool.append((s, r, o))
    pool = np.array(pool, dtype=np.int64)
    per_rel = []
    for r in range(num_relations):
        rows = pool[pool[:, 1] == r]
        per_rel.append(rows[rng.permutation(len(rows))[:edges_per_relation]])
    t = np.concatenate(per_rel)
    t = t[rng.permutation(len(t))]
    k = len(t) - num_valid - num_test
    return TripleStore(t[:k], t[k:k + num_valid], t[k + num_valid:], num_entities=n,
                       num_relations=num_relations)


def write_dataset(store: TripleStore, path, prefix_entities: str = "e", prefix_relations: str = "r") -> Path:
    """Write a store as ``train.txt``/``valid.txt``/``test.txt`` with readable labels."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for split in ("train", "valid", "test"):
        with open(path / f"{split}.txt", "w", encoding="utf-8", newline="\n") as fh:
            for s, p, o in getattr(store, split).tolist():
                fh.write(f"{prefix_entities}{s}\t{prefix_relations}{p}\t{prefix_entities}{o}\n")
    return path


# 30 entities; with shifts (1, 2, 3) this yields exactly 200 triples.
TOY_GROUP_SIZES = (2, 3, 3, 2, 3, 2, 3, 3, 3, 3, 3)


def chain_store(group_sizes=TOY_GROUP_SIZES, shifts=(1, 2, 3), num_valid: int = 0, num_test: int = 0,
                seed: int = 0) -> TripleStore:
    """Layered graph: relation ``r`` links every member of group ``g`` to every member of ``g + shifts[r]``.

    Groups sit on a line, so the relations are consistent translations.
    ``num_valid``/``num_test`` triples are held out of the full graph at random.
    """
    starts = np.concatenate([[0], np.cumsum(group_sizes)])
    members = [range(starts[g], starts[g + 1]) for g in range(len(group_sizes))]
    t = []
    for r, shift in enumerate(shifts):
        for g in range(len(group_sizes) - shift):
            t.extend((s, r, o) for s in members[g] for o in members[g + shift])
    t = np.array(t, dtype=np.int64)
    rng = np.random.default_rng(seed)
    held = rng.permutation(len(t))[:num_valid + num_test]
    keep = np.ones(len(t), dtype=bool)
    keep[held] = False
    return TripleStore(t[keep], t[held[:num_valid]], t[held[num_valid:]], num_entities=int(starts[-1]),
                       num_relations=len(shifts))


def ladder_store(num_groups: int = 13, group_size: int = 3, num_test: int = 3, num_valid_chain: int = 3,
                 num_valid_other: int = 12, seed: int = 0) -> TripleStore:
    """Layered graph with one sparse and two dense relations.

    Relation 0 is one-to-one, linking member ``i`` of group ``g`` to member
    ``i`` of group ``g + 1``. Relations 1 and 2 link every member of group
    ``g`` to every member of ``g + 1`` and ``g + 2``. Test triples come from
    relation 0 only. With the defaults, relation 0 keeps a 30-triple
    training class.
    """
    def members(g):
        return range(g * group_size, (g + 1) * group_size)

    t = [(g * group_size + i, 0, (g + 1) * group_size + i) for g in range(num_groups - 1) for i in range(group_size)]
    for r, shift in ((1, 1), (2, 2)):
        for g in range(num_groups - shift):
            t.extend((s, r, o) for s in members(g) for o in members(g + shift))
    t = np.array(t, dtype=np.int64)
    rng = np.random.default_rng(seed)
    chain = rng.permutation(np.flatnonzero(t[:, 1] == 0))
    rest = np.flatnonzero(t[:, 1] != 0)
    test = chain[:num_test]
    valid = np.concatenate([chain[num_test:num_test + num_valid_chain],
                            rng.choice(rest, num_valid_other, replace=False)])
    keep = np.ones(len(t), dtype=bool)
    keep[test] = False
    keep[valid] = False
    return TripleStore(t[keep], t[valid], t[test], num_entities=num_groups * group_size, num_relations=3)
