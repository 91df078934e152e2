import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

import oracles
from kgex.calibration import Calibrator
from kgex.explain import (FOUND, NONE_FOUND, ExplainConfig, ExplainError, Explanation, IndexPair, explain,
                          explain_batch, explain_random_baseline, select_target)
from kgex.models import EmbeddingModel, ModelConfig, init_model
from kgex.neighbors import StaleIndexError
from kgex.store import TripleStore
from kgex.synthetic import random_store


def setup(seed=0, e=60, r=3, t=400, k=8):
    store = random_store(e, r, t, num_test=20, seed=seed)
    model = init_model(ModelConfig(k=k, seed=seed), e, r)
    return store, model, IndexPair.build(model)


def check_invariants(expl, store, cfg):
    prev = -np.inf
    for ex in expl.examples:
        assert store.contains(ex.triple)
        assert ex.triple != expl.target
        if cfg.same_predicate_only:
            assert ex.triple[1] == expl.target[1]
            assert ex.score == pytest.approx(cfg.subject_weight * ex.subject_distance
                                             + cfg.object_weight * ex.object_distance, abs=1e-12)
        assert ex.score >= prev
        prev = ex.score
    assert (expl.status == NONE_FOUND) == (not expl.examples)


@pytest.mark.parametrize("seed", range(3))
def test_matches_exhaustive_oracle(seed):
    store, model, idx = setup(seed, e=100)
    rng = np.random.default_rng(seed)
    for _ in range(30):
        target = tuple(store.train[rng.integers(len(store.train))].tolist())
        m = int(rng.integers(3, 40))
        ws = float(rng.uniform())
        cfg = ExplainConfig(m=m, subject_weight=ws, object_weight=1 - ws)
        got = explain(model, None, store, idx, target, cfg)
        ref = oracles.explain(model.entity_emb, store.train, target, m, ws, 1 - ws)
        assert got.triples == [t for t, _ in ref]
        assert np.allclose([e.score for e in got.examples], [s for _, s in ref], rtol=0, atol=1e-12)
        check_invariants(got, store, cfg)


def test_single_class_member_is_the_explanation():
    store = TripleStore(np.array([[0, 0, 1], [2, 1, 3], [1, 1, 2]]), num_entities=4)
    model = init_model(ModelConfig(k=4), 4, 2)
    got = explain(model, None, store, IndexPair.build(model), (2, 0, 3), ExplainConfig(m=4))
    assert got.triples == [(0, 0, 1)]


def test_target_in_train_is_excluded():
    store, model, idx = setup(1)
    target = tuple(store.train[0].tolist())
    got = explain(model, None, store, idx, target, ExplainConfig(m=60))
    assert target not in got.triples
    assert len(got.examples) == len(store.by_predicate(target[1])) - 1


def test_none_found_is_valid():
    store = TripleStore(np.array([[0, 0, 1]]), num_entities=4, num_relations=2)
    model = init_model(ModelConfig(k=4), 4, 2)
    got = explain(model, None, store, IndexPair.build(model), (2, 1, 3))
    assert got.status == NONE_FOUND and got.examples == []


def test_probability_recorded(toy_store, toy_model):
    idx = IndexPair.build(toy_model)
    t = tuple(toy_store.test[0].tolist())
    got = explain(toy_model, toy_model.calibrator, toy_store, idx, t)
    assert got.probability == toy_model.calibrator(toy_model.score(t))
    assert 0 < got.probability < 1


def test_stale_index_and_mismatched_calibrator(toy_store, toy_model):
    other = init_model(toy_model.config, toy_model.num_entities, toy_model.num_relations)
    t = tuple(toy_store.test[0].tolist())
    with pytest.raises(StaleIndexError):
        explain(toy_model, None, toy_store, IndexPair.build(other), t)
    with pytest.raises(ExplainError):
        explain(toy_model, Calibrator(1.0, 0.0, model_fingerprint="elsewhere"), toy_store,
                IndexPair.build(toy_model), t)
    with pytest.raises(ExplainError):
        explain(toy_model, None, toy_store, None, t)


def test_out_of_range_target(toy_store, toy_model):
    with pytest.raises(ExplainError):
        explain(toy_model, None, toy_store, IndexPair.build(toy_model), (0, 99, 1))


def test_config_validation():
    with pytest.raises(ValueError):
        ExplainConfig(m=0)
    with pytest.raises(ValueError):
        ExplainConfig(subject_weight=0.6, object_weight=0.6)
    with pytest.raises(ValueError):
        ExplainConfig(strategy="loose")
    with pytest.raises(ValueError):
        ExplainConfig(subject_weight=0.4, object_weight=0.4, predicate_weight=0.2)


def test_max_examples_truncates():
    store, model, idx = setup(2)
    t = tuple(store.train[3].tolist())
    full = explain(model, None, store, idx, t, ExplainConfig(m=40))
    cut = explain(model, None, store, idx, t, ExplainConfig(m=40, max_examples=2))
    assert cut.examples == full.examples[:2]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 5000), m=st.integers(1, 30))
def test_monotone_recall_in_m(seed, m):
    store, model, idx = setup(seed % 7)
    rng = np.random.default_rng(seed)
    t = tuple(store.train[rng.integers(len(store.train))].tolist())
    small = set(explain(model, None, store, idx, t, ExplainConfig(m=m)).triples)
    large = set(explain(model, None, store, idx, t, ExplainConfig(m=m + 1)).triples)
    assert small <= large


def test_full_case_stays_in_train():
    store, model, _ = setup(3)
    idx = IndexPair.build(model, relations=True)
    cfg = ExplainConfig(m=10, subject_weight=0.4, object_weight=0.4, predicate_weight=0.2,
                        same_predicate_only=False)
    got = explain(model, None, store, idx, tuple(store.test[0].tolist()), cfg)
    same = explain(model, None, store, idx, tuple(store.test[0].tolist()), ExplainConfig(m=10))
    assert all(store.contains(e.triple) for e in got.examples)
    assert {e.triple for e in same.examples} <= {e.triple for e in got.examples}
    for e in got.examples:
        assert e.score == pytest.approx(0.4 * e.subject_distance + 0.4 * e.object_distance
                                        + 0.2 * e.predicate_distance, abs=1e-12)
    with pytest.raises(ExplainError):
        explain(model, None, store, IndexPair.build(model), (0, 0, 1), cfg)


def test_batch_equals_sequential_with_duplicates_and_errors():
    store, model, idx = setup(4)
    targets = [tuple(t) for t in store.test.tolist()] + [tuple(store.test[0].tolist()), (0, 7, 1)]
    cfg = ExplainConfig(m=12)
    for workers in (1, 4):
        batch = explain_batch(model, None, store, targets, cfg, workers=workers)
        for t, got in zip(targets[:-1], batch):
            assert got == explain(model, None, store, idx, t, cfg)
        assert batch[-2] == batch[0]
        assert isinstance(batch[-1], ExplainError)
    assert explain_batch(model, None, store, targets[:1], cfg)[0] == explain(model, None, store, idx, targets[0], cfg)


def test_dict_round_trip_with_labels(toy_store, toy_model):
    t = tuple(toy_store.test[0].tolist())
    got = explain(toy_model, toy_model.calibrator, toy_store, IndexPair.build(toy_model), t, ExplainConfig(m=8))
    d = got.to_dict(toy_store)
    assert d["target"]["subject"] == toy_store.entities.label(t[0])
    assert Explanation.from_dict(d, toy_store) == got
    assert Explanation.from_dict(got.to_dict()) == got


def test_table_layout(toy_store, toy_model):
    t = tuple(toy_store.test[0].tolist())
    got = explain(toy_model, None, toy_store, IndexPair.build(toy_model), t, ExplainConfig(m=8))
    lines = got.to_table(toy_store).splitlines()
    assert lines[0].split() == ["S", "|", "P", "|", "O", "|", "Score"]
    assert lines[2].endswith("TT")
    assert len(lines) == 3 + len(got.examples)


# --------------------------------------------------------------------------- random baseline

def test_random_baseline_small_classes():
    store = TripleStore(np.array([[0, 0, 1], [2, 0, 3], [4, 1, 5]]), num_entities=6)
    assert explain_random_baseline(store, (4, 1, 5), 3).status == NONE_FOUND
    assert explain_random_baseline(store, (1, 1, 2), 3).triples == [(4, 1, 5)]
    got = explain_random_baseline(store, (0, 0, 1), 5, seed=1)
    assert got.triples == [(2, 0, 3)]
    assert all(e.score is None for e in got.examples)
    with pytest.raises(ValueError):
        explain_random_baseline(store, (0, 0, 1), 0)


def test_random_baseline_whole_class_and_determinism():
    store = TripleStore(np.array([[i, 0, i + 1] for i in range(8)]))
    a = explain_random_baseline(store, (20, 0, 21), 100, seed=3)
    assert sorted(a.triples) == sorted(store.predicate_class(0))
    assert a == explain_random_baseline(store, (20, 0, 21), 100, seed=3)


def test_random_baseline_uniformity():
    store = TripleStore(np.array([[i, 0, i + 1] for i in range(10)]), num_entities=40)
    counts = {}
    for seed in range(10_000):
        t = explain_random_baseline(store, (30, 0, 31), 1, seed=seed).triples[0]
        counts[t] = counts.get(t, 0) + 1
    assert len(counts) == 10
    assert stats.chisquare(list(counts.values())).pvalue > 0.01


# --------------------------------------------------------------------------- target selection

def test_select_single_and_skip_circular():
    ent = np.array([[0.0], [1.0], [2.0]])
    model = EmbeddingModel(ModelConfig(k=1), ent, np.array([[1.0]]))
    store = TripleStore(np.array([[0, 0, 1]]), test=np.array([[1, 0, 2]]), num_entities=3)
    assert select_target(model, None, store) == (1, 0, 2)
    store = TripleStore(np.array([[0, 0, 1]]), test=np.array([[1, 0, 1], [0, 0, 2]]), num_entities=3)
    # (1, 0, 1) scores -1, (0, 0, 2) scores -1 as well, circular one comes first and is skipped.
    assert select_target(model, Calibrator(1.0, 0.0), store) == (0, 0, 2)
    with pytest.raises(ExplainError):
        select_target(model, None, TripleStore(np.array([[0, 0, 1]]), test=np.array([[2, 0, 2]]), num_entities=3))


@pytest.mark.parametrize("seed", range(5))
def test_select_matches_full_sort(seed):
    store = random_store(30, 3, 100, num_test=40, seed=seed)
    store = TripleStore(store.train, test=np.vstack([store.test, [[5, 1, 5]]]), num_entities=30, num_relations=3)
    model = init_model(ModelConfig(k=4, seed=seed), 30, 3)
    cal = Calibrator(0.5, 0.1)
    probs = cal(model.score_triples(store.test))
    ranked = sorted(range(len(store.test)), key=lambda i: (-probs[i], i))
    expected = next(tuple(store.test[i].tolist()) for i in ranked if store.test[i][0] != store.test[i][2])
    assert select_target(model, cal, store) == expected
