import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tkgpath.evaluation import (
    EvalReport,
    SpecError,
    SyntheticSpec,
    corrupt_paths,
    count_rule_instances,
    evaluate_predictions,
    generate_synthetic_tkg,
    hits_at_k,
    planted_queries,
    rank_of_gold,
)
from tkgpath.graph import Quadruple as Q
from tkgpath.graph import TemporalQuery
from tkgpath.paths import ReasoningPath


def test_rank_examples():
    scores = {0: 5.0, 1: 7.0, 2: 3.0}
    assert rank_of_gold(scores, 0) == 2
    assert rank_of_gold(scores, 0, {1}) == 1
    assert rank_of_gold({0: 1.0, 1: 1.0, 2: 1.0}, 0) == 2  # mean of ranks 1..3
    assert rank_of_gold(scores, 9, n_entities=50) == 50


def _brute_rank(scores, gold, filt):
    """Mean of the optimistic and pessimistic positions after filtering, by pairwise comparison."""
    others = [e for e in scores if e != gold and e not in filt]
    best = 1 + sum(1 for e in others if scores[e] > scores[gold])
    worst = 1 + sum(1 for e in others if scores[e] >= scores[gold])
    return (best + worst) / 2


def test_rank_matches_bruteforce_on_random_tables():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 60))
        ents = rng.choice(1000, size=n, replace=False).tolist()
        scores = dict(zip(ents, (rng.integers(0, 6, size=n) / 3).tolist()))
        gold = ents[int(rng.integers(n))]
        filt = set(rng.choice(ents, size=int(rng.integers(0, n + 1)), replace=False).tolist()) - {gold}
        assert rank_of_gold(scores, gold, filt) == _brute_rank(scores, gold, filt)
        assert rank_of_gold(scores, gold, filt) <= rank_of_gold(scores, gold)


def test_hits_examples():
    assert hits_at_k([1, 2, 11], 10) == pytest.approx(2 / 3)
    assert all(hits_at_k([1, 1, 1], k) == 1.0 for k in (1, 3, 10))
    assert hits_at_k([], 1) == 0.0
    with pytest.raises(ValueError):
        hits_at_k([0.5], 1)


@given(st.lists(st.floats(1, 500, allow_nan=False), min_size=1, max_size=50))
def test_hits_monotone_in_k(ranks):
    vals = [hits_at_k(ranks, k) for k in (1, 3, 10)]
    assert 0 <= vals[0] <= vals[1] <= vals[2] <= 1


def test_evaluate_predictions_filters_other_true_answers():
    g = generate_synthetic_tkg(SyntheticSpec(n_entities=50, horizon=30, seed=1))
    qs = g.queries("test", "object")
    rng = np.random.default_rng(0)
    preds = [dict(enumerate(rng.normal(size=g.n_entities).tolist())) for _ in qs]
    rep = evaluate_predictions("x", preds, qs, g)
    assert rep.count == len(qs)
    assert all(f <= r for f, r in zip(rep.ranks_filtered, rep.ranks_raw))
    for mode in ("raw", "filtered"):
        h = rep.hits(mode)
        assert 0 <= h["hits@1"] <= h["hits@3"] <= h["hits@10"] <= 1
    q, p = qs[0], preds[0]
    others = g.answers(q.subject, q.relation, q.time) - {q.gold}
    assert rep.ranks_filtered[0] == _brute_rank(p, q.gold, others)


def test_report_json_is_sorted_and_deterministic():
    q = TemporalQuery(0, 1, 5, 2)
    sub = EvalReport("editor=off", [1.0], [1.0], [q])
    rep = EvalReport("main", [1.0, 4.0], [1.0, 2.0], [q, q], tokens={"prompt": 10},
                     ablations={"z": sub, "a": sub})
    text = rep.dumps()
    assert text == rep.dumps()
    data = json.loads(text)
    assert list(data["ablations"]) == ["a", "z"]
    assert data["filtered"]["hits@3"] == 1.0 and data["raw"]["hits@3"] == 0.5
    assert "raw" not in json.loads(rep.dumps("filtered"))
    lines = rep.table().splitlines()
    assert len(lines) == 4 and lines[0].startswith("run") and "filt@10" in lines[0]


# -- synthetic graphs -----------------------------------------------------------------


def test_synthetic_is_deterministic():
    a = generate_synthetic_tkg(SyntheticSpec(n_entities=50, seed=3))
    b = generate_synthetic_tkg(SyntheticSpec(n_entities=50, seed=3))
    c = generate_synthetic_tkg(SyntheticSpec(n_entities=50, seed=4))
    assert sorted(a.all_facts()) == sorted(b.all_facts())
    assert sorted(a.all_facts()) != sorted(c.all_facts())


def test_noise_free_test_queries_follow_the_rule():
    spec = SyntheticSpec(n_entities=50, noise_ratio=0.0, seed=2)
    g = generate_synthetic_tkg(spec)
    r3 = spec.rules[0][4]
    conclusions = [f for f in g.splits["test"] if f.relation == r3]
    planted = planted_queries(g, spec)
    assert conclusions and len(planted) == len(conclusions)
    assert {(q.subject, q.gold, q.time) for q in planted} == {(f.subject, f.object, f.time) for f in conclusions}


def test_split_is_chronological_80_10_10():
    g = generate_synthetic_tkg(SyntheticSpec(n_entities=60, seed=0))
    tr, va, te = (g.splits[k] for k in ("train", "valid", "test"))
    assert max(f.time for f in tr) < min(f.time for f in va)
    assert max(f.time for f in va) < min(f.time for f in te)
    times = sorted({f.time for f in tr + va + te})
    assert len({f.time for f in tr}) == math.floor(0.8 * len(times))


def test_rule_instance_count():
    spec = SyntheticSpec(n_entities=50, noise_ratio=0.0, horizon=40, seed=5)
    g = generate_synthetic_tkg(spec)
    r1, d1, r2, d2, r3 = spec.rules[0]
    facts = g.all_facts()
    # independent pairwise enumeration
    by_time = {}
    for f in facts:
        by_time.setdefault(f.time, []).append(f)
    brute = 0
    for a, r, c, t in facts:
        if r != r3:
            continue
        for x in by_time.get(t - d1 - d2, []):
            if x.subject == a and x.relation == r1:
                brute += any(y.subject == x.object and y.relation == r2 and y.object == c
                             for y in by_time.get(t - d2, []))
    assert count_rule_instances(g, spec.rules[0]) == brute
    expected = spec.instances_per_step * (spec.horizon - d1 - d2)
    assert abs(brute - expected) <= 0.03 * expected


def test_infeasible_specs():
    for bad in (SyntheticSpec(horizon=10), SyntheticSpec(noise_ratio=1.0), SyntheticSpec(n_entities=2),
                SyntheticSpec(rules=[(0, -1, 1, 1, 2)]), SyntheticSpec(rules=[(0, 1, 1, 1, 99)])):
        with pytest.raises(SpecError):
            generate_synthetic_tkg(bad)


def test_noise_ratio_is_respected():
    clean = generate_synthetic_tkg(SyntheticSpec(n_entities=80, noise_ratio=0.0, seed=6))
    noisy = generate_synthetic_tkg(SyntheticSpec(n_entities=80, noise_ratio=0.2, seed=6))
    extra = len(noisy.all_facts()) - len(clean.all_facts())
    assert 0.15 * len(clean.all_facts()) < extra <= 0.2 * len(clean.all_facts()) + 2


# -- corruption -------------------------------------------------------------------------


def test_corruption_rate_and_kinds():
    rng = np.random.default_rng(0)
    g = generate_synthetic_tkg(SyntheticSpec(n_entities=50, seed=1))
    q = TemporalQuery(0, 0, 90, None)
    paths = [ReasoningPath(q, 3, [Q(0, 1, 1, 10), Q(1, 1, 2, 20), Q(2, 1, 3, 30)], [0.5] * 3) for _ in range(2000)]
    bad, n_bad = corrupt_paths(paths, 0.15, rng, g)
    assert abs(n_bad / 6000 - 0.15) < 0.02
    loops = sum(1 for p in bad for s in p.steps if s.subject == s.object)
    shuffled = sum(1 for p in bad if any(a.time > b.time for a, b in zip(p.steps, p.steps[1:])))
    assert loops > 0.3 * n_bad and shuffled > 0
    assert paths[0].steps == [Q(0, 1, 1, 10), Q(1, 1, 2, 20), Q(2, 1, 3, 30)]  # originals untouched
    assert all(len(p.alphas) == len(p.steps) for p in bad)
