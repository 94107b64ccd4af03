"""Ranking metrics, evaluation reports, planted-rule synthetic graphs and path corruption."""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field

import numpy as np

from .graph import Quadruple, TemporalKnowledgeGraph, TemporalQuery, Vocab
from .paths import ReasoningPath

HITS_K = (1, 3, 10)


class SpecError(ValueError):
    pass


# -- metrics -------------------------------------------------------------------


def rank_of_gold(
    scores: dict[int, float],
    gold: int,
    filter_out: set[int] | frozenset = frozenset(),
    n_entities: int | None = None,
) -> float:
    """1-based rank of ``gold``; tied entities share the mean rank of their block.

    Entities in ``filter_out`` (other true answers) are ignored. A gold entity that was never
    scored ranks last, at ``n_entities``.
    """
    if gold not in scores:
        return float(n_entities if n_entities is not None else len(scores) + 1)
    g = scores[gold]
    ents = np.fromiter(scores.keys(), dtype=np.int64, count=len(scores))
    vals = np.fromiter(scores.values(), dtype=np.float64, count=len(scores))
    keep = ents != gold
    if filter_out:
        keep &= ~np.isin(ents, np.fromiter(filter_out, dtype=np.int64, count=len(filter_out)))
    vals = vals[keep]
    higher = int(np.sum(vals > g))
    tied = int(np.sum(vals == g))
    return 1.0 + higher + tied / 2.0


def hits_at_k(ranks, k: int) -> float:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        return 0.0
    if np.any(r < 1):
        raise ValueError("ranks must be >= 1")
    return float(np.mean(r <= k))


@dataclass
class EvalReport:
    name: str
    ranks_raw: list[float]
    ranks_filtered: list[float]
    queries: list[TemporalQuery] = field(default_factory=list)
    tokens: dict = field(default_factory=dict)
    ablations: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.ranks_raw)

    def hits(self, mode: str = "filtered") -> dict[str, float]:
        ranks = self.ranks_filtered if mode == "filtered" else self.ranks_raw
        return {f"hits@{k}": hits_at_k(ranks, k) for k in HITS_K}

    def to_json(self, metrics: str = "both") -> dict:
        out = {"name": self.name, "count": self.count, "tokens": self.tokens}
        modes = ("raw", "filtered") if metrics == "both" else (metrics,)
        for m in modes:
            out[m] = self.hits(m)
        out["per_query"] = [
            {"s": q.subject, "r": q.relation, "t": q.time, "gold": q.gold, "raw_rank": a, "filtered_rank": b}
            for q, a, b in zip(self.queries, self.ranks_raw, self.ranks_filtered)
        ]
        if self.ablations:
            out["ablations"] = {k: v.to_json(metrics) for k, v in sorted(self.ablations.items())}
        if self.extra:
            out["extra"] = self.extra
        return out

    def dumps(self, metrics: str = "both") -> str:
        return json.dumps(self.to_json(metrics), sort_keys=True, indent=1)

    def table(self, metrics: str = "both") -> str:
        rows = [(self.name, self)] + sorted(self.ablations.items())
        modes = ("raw", "filtered") if metrics == "both" else (metrics,)
        width = max(len(name) for name, _ in rows) + 2
        cols = [f"{m[:4]}@{k}" for m in modes for k in HITS_K]
        lines = [f"{'run':<{width}}" + "".join(f"{c:<10}" for c in cols) + "tokens"]
        for name, rep in rows:
            vals = "".join(f"{rep.hits(m)[f'hits@{k}']:<10.4f}" for m in modes for k in HITS_K)
            lines.append(f"{name:<{width}}{vals}{rep.tokens.get('prompt', 0)}")
        return "\n".join(lines)


def evaluate_predictions(
    name: str,
    predictions: list[dict[int, float]],
    queries: list[TemporalQuery],
    graph: TemporalKnowledgeGraph,
) -> EvalReport:
    raw, filt = [], []
    for scores, q in zip(predictions, queries):
        raw.append(rank_of_gold(scores, q.gold, n_entities=graph.n_entities))
        others = graph.answers(q.subject, q.relation, q.time) - {q.gold}
        filt.append(rank_of_gold(scores, q.gold, others, n_entities=graph.n_entities))
    return EvalReport(name, raw, filt, list(queries))


# -- synthetic planted-rule graphs -----------------------------------------------


@dataclass
class SyntheticSpec:
    n_entities: int = 200
    rules: list[tuple[int, int, int, int, int]] = field(default_factory=lambda: [(0, 1, 1, 1, 2)])
    n_relations: int = 8
    horizon: int = 100
    instances_per_step: int = 6
    background_per_step: int = 6
    noise_ratio: float = 0.05
    n_regions: int = 5
    seed: int = 0
    start_date: str = "2014-01-01"

    def validate(self) -> None:
        if self.n_entities < 3:
            raise SpecError("need at least 3 entities")
        if not 0 <= self.noise_ratio < 1:
            raise SpecError("noise ratio must be in [0, 1)")
        for r1, d1, r2, d2, r3 in self.rules:
            if d1 < 0 or d2 < 0:
                raise SpecError("rule offsets must be >= 0")
            if max(r1, r2, r3) >= self.n_relations:
                raise SpecError("rule relation id outside the relation range")
            if self.horizon <= d1 + d2 + 10:
                raise SpecError(f"horizon {self.horizon} too short for rule offsets {d1}+{d2}")


def generate_synthetic_tkg(spec: SyntheticSpec) -> TemporalKnowledgeGraph:
    """Rule instances (a r1 b @t, b r2 c @t+d1 => a r3 c @t+d1+d2) over random background and noise."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    ents = Vocab(f"Actor {i} (Region {i % spec.n_regions})" for i in range(spec.n_entities))
    rule_rels = {r for rule in spec.rules for r in (rule[0], rule[2], rule[4])}
    rels = Vocab(f"Relation {j}" for j in range(spec.n_relations))
    background = [j for j in range(spec.n_relations) if j not in rule_rels] or list(range(spec.n_relations))
    facts: set[Quadruple] = set()
    for t in range(spec.horizon):
        for r1, d1, r2, d2, r3 in spec.rules:
            if t + d1 + d2 >= spec.horizon:
                continue
            for _ in range(spec.instances_per_step):
                a, b, c = (int(x) for x in rng.choice(spec.n_entities, size=3, replace=False))
                facts.add(Quadruple(a, r1, b, t))
                facts.add(Quadruple(b, r2, c, t + d1))
                facts.add(Quadruple(a, r3, c, t + d1 + d2))
        for _ in range(spec.background_per_step):
            a, b = (int(x) for x in rng.choice(spec.n_entities, size=2, replace=False))
            facts.add(Quadruple(a, int(rng.choice(background)), b, t))
    n_noise = int(round(spec.noise_ratio * len(facts)))
    for _ in range(n_noise):
        a, b = (int(x) for x in rng.choice(spec.n_entities, size=2, replace=False))
        facts.add(Quadruple(a, int(rng.integers(spec.n_relations)), b, int(rng.integers(spec.horizon))))
    ordered = sorted(facts, key=lambda q: (q.time, q.subject, q.relation, q.object))
    times = np.array(sorted({q.time for q in ordered}))
    cut1 = times[int(np.floor(0.8 * len(times)))]
    cut2 = times[int(np.floor(0.9 * len(times)))]
    train = [q for q in ordered if q.time < cut1]
    valid = [q for q in ordered if cut1 <= q.time < cut2]
    test = [q for q in ordered if q.time >= cut2]
    return TemporalKnowledgeGraph(ents, rels, train, valid, test, dt.date.fromisoformat(spec.start_date), 1)


def planted_queries(graph: TemporalKnowledgeGraph, spec: SyntheticSpec, split: str = "test") -> list[TemporalQuery]:
    """Object queries for facts of ``split`` whose rule premises are present in the graph."""
    out = []
    for s, r, o, t in graph.splits[split]:
        for r1, d1, r2, d2, r3 in spec.rules:
            if r != r3:
                continue
            t1, t2 = t - d1 - d2, t - d2
            mids = {x for x in graph.answers(s, r1, t1)}
            if any(graph.has_fact(b, r2, o, t2) for b in mids):
                out.append(TemporalQuery(s, r, t, o))
                break
    return out


def count_rule_instances(graph: TemporalKnowledgeGraph, rule) -> int:
    """Direct enumeration of (a, b, c, t) premise+conclusion matches over all facts."""
    r1, d1, r2, d2, r3 = rule
    n = 0
    for a, r, c, t in graph.all_facts():
        if r != r3:
            continue
        for b in graph.answers(a, r1, t - d1 - d2):
            if graph.has_fact(b, r2, c, t - d2):
                n += 1
    return n


# -- corruption ------------------------------------------------------------------


def corrupt_paths(
    paths: list[ReasoningPath], ratio: float, rng: np.random.Generator, graph: TemporalKnowledgeGraph
) -> tuple[list[ReasoningPath], int]:
    """Corrupt about ``ratio`` of all steps, alternating injected self-loops and time shuffles.

    Returns the corrupted copies and the number of corrupted steps.
    """
    out, n_bad, flip = [], 0, 0
    for p in paths:
        steps = list(p.steps)
        alphas = list(p.alphas) + [0.0] * (len(steps) - len(p.alphas))
        hit = np.nonzero(rng.random(len(steps)) < ratio)[0]
        for i in sorted(hit.tolist(), reverse=True):
            n_bad += 1
            flip ^= 1
            s, r, o, t = steps[i]
            if flip or len(steps) == 1 and p.query.time <= 1:
                loop_rel = int(rng.integers(graph.n_relations))
                steps.insert(i + 1, Quadruple(o, loop_rel, o, t))
                alphas.insert(i + 1, alphas[i])
            elif len(steps) > 1:
                j = int(rng.choice([k for k in range(len(steps)) if k != i]))
                a, b = steps[i], steps[j]
                if a.time == b.time:
                    steps[i] = Quadruple(a.subject, a.relation, a.object, int(rng.integers(p.query.time)))
                else:
                    steps[i] = Quadruple(a.subject, a.relation, a.object, b.time)
                    steps[j] = Quadruple(b.subject, b.relation, b.object, a.time)
            else:
                steps[i] = Quadruple(s, r, o, int(rng.integers(p.query.time)))
        out.append(p.with_steps(steps, alphas, p.tag))
    return out, n_bad
