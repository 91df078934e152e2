"""Triple storage, indexing and neighbourhood extraction.

Triples are kept as ``(n, 3)`` int64 arrays of ``(subject, predicate, object)``
ids. Label dictionaries map between the raw TSV labels and dense ids.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
SPLIT_SUFFIXES = (".txt", ".tsv")


class ParseError(ValueError):
    """Malformed TSV line."""

    def __init__(self, path, lineno, line):
        super().__init__(f"{path}:{lineno}: expected 3 tab-separated fields, got {line!r}")
        self.path = path
        self.lineno = lineno


class UnknownLabelError(KeyError):
    """Label not present in a frozen dictionary."""

    def __init__(self, offenders: Sequence[str]):
        self.offenders = list(offenders)
        shown = ", ".join(self.offenders[:10])
        more = "" if len(self.offenders) <= 10 else f" (+{len(self.offenders) - 10} more)"
        super().__init__(f"unknown labels with frozen dictionaries: {shown}{more}")


class MutationError(ValueError):
    pass


class Dictionary:
    """Bidirectional label <-> dense id map."""

    def __init__(self, labels: Iterable[str] = ()):
        self._labels: list[str] = []
        self._ids: dict[str, int] = {}
        for label in labels:
            self.add(label)

    def add(self, label: str) -> int:
        idx = self._ids.get(label)
        if idx is None:
            idx = len(self._labels)
            self._ids[label] = idx
            self._labels.append(label)
        return idx

    def id(self, label: str) -> int:
        return self._ids[label]

    def label(self, idx: int) -> str:
        return self._labels[idx]

    def get(self, label: str, default=None):
        return self._ids.get(label, default)

    @property
    def labels(self) -> list[str]:
        return list(self._labels)

    def __contains__(self, label) -> bool:
        return label in self._ids

    def __len__(self) -> int:
        return len(self._labels)

    def __eq__(self, other) -> bool:
        return isinstance(other, Dictionary) and self._labels == other._labels

    def copy(self) -> "Dictionary":
        return Dictionary(self._labels)

    def to_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, label in enumerate(self._labels):
                fh.write(f"{i}\t{label}\n")

    @classmethod
    def from_tsv(cls, path) -> "Dictionary":
        d = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                idx, label = line.rstrip("\n").split("\t", 1)
                if int(idx) != len(d):
                    raise ParseError(path, lineno, line)
                d.add(label)
        return d


@dataclass
class LoadResult:
    triples: np.ndarray
    duplicates: int


def load_tsv(path, entities: Dictionary | None = None, relations: Dictionary | None = None,
             frozen: bool = False) -> LoadResult:
    """Read a ``subject<TAB>predicate<TAB>object`` file.

    Parameters
    ----------
    path : path-like
        UTF-8 file, no header.
    entities, relations : Dictionary, optional
        Existing dictionaries. New labels extend them unless ``frozen``.
    frozen : bool
        When true, any label missing from the dictionaries raises
        :class:`UnknownLabelError` listing every offender.

    Returns
    -------
    LoadResult
        Deduplicated triples in first-seen order and the number of
        collapsed duplicate lines.
    """
    entities = entities if entities is not None else Dictionary()
    relations = relations if relations is not None else Dictionary()
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(path, lineno, line)
            rows.append(parts)

    if frozen:
        offenders = []
        for s, p, o in rows:
            if s not in entities:
                offenders.append(s)
            if p not in relations:
                offenders.append(p)
            if o not in entities:
                offenders.append(o)
        if offenders:
            raise UnknownLabelError(sorted(set(offenders)))

    seen = set()
    out = []
    for s, p, o in rows:
        t = (entities.add(s), relations.add(p), entities.add(o))
        if t in seen:
            continue
        seen.add(t)
        out.append(t)
    duplicates = len(rows) - len(out)
    if duplicates:
        log.info("%s: collapsed %d duplicate lines", path, duplicates)
    return LoadResult(np.array(out, dtype=np.int64).reshape(-1, 3), duplicates)


def _as_array(triples) -> np.ndarray:
    return np.asarray(triples, dtype=np.int64).reshape(-1, 3)


def _dedup(triples: np.ndarray) -> np.ndarray:
    if len(triples) == 0:
        return triples
    _, first = np.unique(triples, axis=0, return_index=True)
    return triples[np.sort(first)]


@dataclass
class NeighbourhoodSlice:
    """Triples around a set of centre entities grouped by hop level.

    ``hops[h - 1]`` holds the triples first reached at hop level ``h``;
    ``predicate_counts[h - 1]`` maps predicate id to its multiplicity there.
    """

    center: int | tuple[int, ...]
    hops: list[set[tuple[int, int, int]]]
    predicate_counts: list[dict[int, int]]

    def predicates(self, level: int) -> set[int]:
        return set(self.predicate_counts[level - 1])

    def level_of(self) -> dict[tuple[int, int, int], int]:
        return {t: h for h, level in enumerate(self.hops, 1) for t in level}


@dataclass(eq=False)
class TripleStore:
    """Train/valid/test splits with membership, predicate and adjacency indexes.

    Construct with :meth:`from_directory` or directly from id arrays.
    Instances are treated as immutable; :meth:`mutate` returns a new store.
    """

    train: np.ndarray
    valid: np.ndarray = field(default_factory=lambda: np.empty((0, 3), np.int64))
    test: np.ndarray = field(default_factory=lambda: np.empty((0, 3), np.int64))
    entities: Dictionary = field(default_factory=Dictionary)
    relations: Dictionary = field(default_factory=Dictionary)
    num_entities: int | None = None
    num_relations: int | None = None

    def __post_init__(self):
        self.train = _dedup(_as_array(self.train))
        self.valid = _dedup(_as_array(self.valid))
        self.test = _dedup(_as_array(self.test))
        allt = np.concatenate([self.train, self.valid, self.test])
        if self.num_entities is None:
            self.num_entities = max(len(self.entities), int(allt[:, [0, 2]].max()) + 1 if len(allt) else 0)
        if self.num_relations is None:
            self.num_relations = max(len(self.relations), int(allt[:, 1].max()) + 1 if len(allt) else 0)
        if len(allt):
            if allt.min() < 0 or allt[:, [0, 2]].max() >= self.num_entities \
                    or allt[:, 1].max() >= self.num_relations:
                raise ValueError("triple ids out of dictionary range")
        # Dictionaries sized to the id space even when built from raw ids.
        while len(self.entities) < self.num_entities:
            self.entities.add(str(len(self.entities)))
        while len(self.relations) < self.num_relations:
            self.relations.add(str(len(self.relations)))
        self._build_indexes()

    def _build_indexes(self):
        self._members = set(map(tuple, self.train.tolist()))
        by_pred = defaultdict(list)
        adj = defaultdict(list)
        for t in map(tuple, self.train.tolist()):
            by_pred[t[1]].append(t)
            adj[t[0]].append(t)
            if t[2] != t[0]:
                adj[t[2]].append(t)
        self._by_predicate = {p: frozenset(ts) for p, ts in by_pred.items()}
        self._by_predicate_list = dict(by_pred)
        self._adjacency = {e: frozenset(ts) for e, ts in adj.items()}
        self._known = None

    # ------------------------------------------------------------------ loading

    @classmethod
    def from_directory(cls, path, frozen: bool = False) -> "TripleStore":
        """Load ``train``/``valid``/``test`` TSVs from a dataset directory.

        Dictionaries are built jointly in split order. With ``frozen`` the
        validation and test splits may only reference labels seen in train.
        """
        path = Path(path)
        files = {}
        missing = []
        for split in SPLITS:
            for suffix in SPLIT_SUFFIXES:
                if (path / f"{split}{suffix}").is_file():
                    files[split] = path / f"{split}{suffix}"
                    break
            else:
                missing.append(split)
        if missing:
            expected = ", ".join(f"{s}{{{','.join(SPLIT_SUFFIXES)}}}" for s in missing)
            raise FileNotFoundError(f"{path}: missing split files, expected {expected}")
        entities, relations = Dictionary(), Dictionary()
        train = load_tsv(files["train"], entities, relations)
        valid = load_tsv(files["valid"], entities, relations, frozen=frozen)
        test = load_tsv(files["test"], entities, relations, frozen=frozen)
        return cls(train.triples, valid.triples, test.triples, entities, relations)

    # ------------------------------------------------------------------ queries

    def contains(self, triple) -> bool:
        """True iff ``triple`` is in the train split."""
        return tuple(int(x) for x in triple) in self._members

    __contains__ = contains

    def by_predicate(self, predicate: int) -> frozenset:
        return self._by_predicate.get(int(predicate), frozenset())

    def predicate_class(self, predicate: int) -> list[tuple[int, int, int]]:
        """Train triples with ``predicate`` in dataset order."""
        return list(self._by_predicate_list.get(int(predicate), ()))

    def incident(self, entity: int) -> frozenset:
        return self._adjacency.get(int(entity), frozenset())

    @property
    def predicates(self) -> list[int]:
        return sorted(self._by_predicate)

    def known_triples(self) -> set[tuple[int, int, int]]:
        """Union of all three splits, used as the ranking filter."""
        if self._known is None:
            allt = np.concatenate([self.train, self.valid, self.test])
            self._known = set(map(tuple, allt.tolist()))
        return self._known

    def triple_labels(self, triple) -> tuple[str, str, str]:
        s, p, o = (int(x) for x in triple)
        return self.entities.label(s), self.relations.label(p), self.entities.label(o)

    def triple_ids(self, labels: Sequence[str]) -> tuple[int, int, int]:
        s, p, o = labels
        return self.entities.id(s), self.relations.id(p), self.entities.id(o)

    def n_hop(self, entity, n: int) -> NeighbourhoodSlice:
        """Breadth-first neighbourhood over undirected incidence.

        ``entity`` may be a single id or several ids expanded jointly. Each
        triple lands at the lowest hop level at which it is reachable.
        """
        if n < 1:
            raise ValueError("hop count must be >= 1")
        centers = (int(entity),) if np.isscalar(entity) else tuple(int(e) for e in entity)
        visited_entities = set(centers)
        frontier = set(centers)
        seen: set = set()
        hops = []
        for _ in range(n):
            level = set()
            for e in sorted(frontier):
                level.update(self.incident(e))
            level -= seen
            seen |= level
            hops.append(level)
            nxt = set()
            for s, _, o in level:
                nxt.add(s)
                nxt.add(o)
            frontier = nxt - visited_entities
            visited_entities |= nxt
        counts = []
        for level in hops:
            c: dict[int, int] = defaultdict(int)
            for _, p, _ in level:
                c[p] += 1
            counts.append(dict(c))
        center = centers[0] if len(centers) == 1 and np.isscalar(entity) else centers
        return NeighbourhoodSlice(center, hops, counts)

    # ------------------------------------------------------------------ mutation

    def mutate(self, remove=(), add=()) -> "TripleStore":
        """Return a new store with ``remove`` taken out of and ``add`` appended to train.

        Raises
        ------
        MutationError
            If a removal target is absent from train, or an addition is
            already present after removal.
        """
        remove = {tuple(int(x) for x in t) for t in remove}
        add_list = []
        for t in add:
            t = tuple(int(x) for x in t)
            if t not in add_list:
                add_list.append(t)
        missing = sorted(remove - self._members)
        if missing:
            raise MutationError(f"removal targets not in train: {missing}")
        clash = sorted((self._members - remove) & set(add_list))
        if clash:
            raise MutationError(f"additions already in train: {clash}")
        if remove:
            keep = np.fromiter((tuple(t) not in remove for t in self.train.tolist()),
                               dtype=bool, count=len(self.train))
            train = self.train[keep]
        else:
            train = self.train
        if add_list:
            train = np.concatenate([train, np.array(add_list, dtype=np.int64)])
        return TripleStore(train.copy(), self.valid.copy(), self.test.copy(),
                           self.entities.copy(), self.relations.copy(),
                           self.num_entities, self.num_relations)

    def __len__(self) -> int:
        return len(self.train)

    def summary(self) -> Mapping[str, int]:
        return {"train": len(self.train), "valid": len(self.valid), "test": len(self.test),
                "entities": self.num_entities, "relations": self.num_relations}


def n_hop(store: TripleStore, entity, n: int) -> NeighbourhoodSlice:
    return store.n_hop(entity, n)


def contains(store: TripleStore, triple) -> bool:
    return store.contains(triple)


def mutate(store: TripleStore, remove=(), add=()) -> TripleStore:
    return store.mutate(remove, add)
