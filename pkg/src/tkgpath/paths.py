"""Top-K candidate selection, greedy max-attention backtracking and path (de)serialization."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .gnn import CandidateScores, LayeredSubgraph
from .graph import Quadruple, TemporalKnowledgeGraph, TemporalQuery

TAGS = ("gnn-extracted", "llm-refined", "rule-refined")
ISO_DATE = re.compile(r"\d{4}-\d{2}-\d{2}")


class BacktrackError(RuntimeError):
    pass


class PathParseError(ValueError):
    pass


@dataclass
class ReasoningPath:
    query: TemporalQuery
    candidate: int
    steps: list[Quadruple]
    alphas: list[float] = field(default_factory=list)
    tag: str = "gnn-extracted"

    def __len__(self) -> int:
        return len(self.steps)

    def with_steps(self, steps: list[Quadruple], alphas: list[float], tag: str) -> "ReasoningPath":
        return replace(self, steps=list(steps), alphas=list(alphas), tag=tag)

    def to_json(self) -> dict:
        q = self.query
        return {
            "query": {"s": q.subject, "r": q.relation, "t": q.time, "gold": q.gold},
            "candidate": self.candidate,
            "steps": [{"s": s, "r": r, "o": o, "t": t} for s, r, o, t in self.steps],
            "alphas": [float(a) for a in self.alphas],
            "tag": self.tag,
        }

    @classmethod
    def from_json(cls, row: dict) -> "ReasoningPath":
        q = row["query"]
        return cls(
            TemporalQuery(q["s"], q["r"], q["t"], q.get("gold")),
            int(row["candidate"]),
            [Quadruple(st["s"], st["r"], st["o"], st["t"]) for st in row["steps"]],
            list(row.get("alphas", [])),
            row.get("tag", "gnn-extracted"),
        )


@dataclass
class CandidateSet:
    entities: list[int]
    scores: list[float]

    def __len__(self) -> int:
        return len(self.entities)

    def __iter__(self):
        return iter(zip(self.entities, self.scores))


def top_k_candidates(scores: CandidateScores | dict[int, float], k: int) -> CandidateSet:
    """K highest scores; equal scores go to the lower entity id."""
    if k < 1:
        raise ValueError("K must be >= 1")
    if isinstance(scores, dict):
        ents = np.fromiter(scores.keys(), dtype=np.int64, count=len(scores))
        vals = np.fromiter(scores.values(), dtype=np.float64, count=len(scores))
    else:
        ents, vals = np.asarray(scores.entities, dtype=np.int64), np.asarray(scores.scores, dtype=np.float64)
    order = np.lexsort((ents, -vals))[:k]
    return CandidateSet(ents[order].tolist(), vals[order].tolist())


def backtrack_path(candidate: int, sub: LayeredSubgraph) -> ReasoningPath:
    """Follow the highest-attention admissible in-edge layer by layer back to the query entity.

    Stay edges carry a node unchanged to the previous layer and add no step. A real in-edge
    is admissible only if its time does not exceed the time of the step already chosen after
    it, which keeps the chain chronologically ordered.
    """
    q = sub.query
    cur = sub.node_index(candidate)
    if cur is None or cur == 0:
        raise BacktrackError(f"entity {candidate} is not a candidate node of the subgraph")
    steps: list[Quadruple] = []
    alphas: list[float] = []
    t_next = q.time
    for l in range(sub.depth, 0, -1):
        if cur == 0:
            break
        lay = sub.layers[l - 1]
        ok = (lay.dst == cur) & (lay.stay | (lay.time <= t_next))
        cand = np.nonzero(ok)[0]
        if len(cand) == 0:
            raise BacktrackError(f"broken chain at layer {l}: node {sub.nodes[cur]} has no admissible in-edge")
        gap = np.where(lay.stay[cand], 0, q.time - lay.time[cand])
        best = cand[np.lexsort((lay.edge_id[cand], gap, -lay.alpha[cand]))[0]]
        if lay.stay[best]:
            continue
        src = int(lay.src[best])
        steps.append(Quadruple(sub.nodes[src], int(lay.relation[best]), sub.nodes[cur], int(lay.time[best])))
        alphas.append(float(lay.alpha[best]))
        t_next = int(lay.time[best])
        cur = src
    if cur != 0:
        raise BacktrackError(f"chain for {candidate} ended at {sub.nodes[cur]}, not the query entity")
    steps.reverse()
    alphas.reverse()
    return ReasoningPath(q, candidate, steps, alphas)


def extract_paths(sub: LayeredSubgraph, scores: CandidateScores, k: int) -> tuple[CandidateSet, list[ReasoningPath]]:
    if sub.empty or len(scores) == 0:
        return CandidateSet([], []), []
    cands = top_k_candidates(scores, k)
    return cands, [backtrack_path(e, sub) for e in cands.entities]


def check_path(
    path: ReasoningPath,
    graph: TemporalKnowledgeGraph | None = None,
    max_len: int | None = None,
    monotone: bool = True,
    require_facts: bool = False,
) -> list[str]:
    """Independent invariant checker; returns human-readable violations (empty list = valid)."""
    errs = []
    q, steps = path.query, path.steps
    if not steps:
        return ["empty path"]
    if steps[0].subject != q.subject:
        errs.append(f"first subject {steps[0].subject} != query entity {q.subject}")
    if steps[-1].object != path.candidate:
        errs.append(f"last object {steps[-1].object} != candidate {path.candidate}")
    for i in range(len(steps) - 1):
        if steps[i].object != steps[i + 1].subject:
            errs.append(f"steps {i} and {i + 1} are not connected")
        if monotone and steps[i].time > steps[i + 1].time:
            errs.append(f"time decreases between steps {i} and {i + 1}")
    for i, st in enumerate(steps):
        if st.time >= q.time:
            errs.append(f"step {i} time {st.time} is not before query time {q.time}")
    if max_len is not None and len(steps) > max_len:
        errs.append(f"length {len(steps)} > {max_len}")
    if graph is not None:
        for i, st in enumerate(steps):
            if not (0 <= st.subject < graph.n_entities and 0 <= st.object < graph.n_entities):
                errs.append(f"step {i} entity outside vocabulary")
            if not 0 <= st.relation < graph.n_relations:
                errs.append(f"step {i} relation outside vocabulary")
            elif require_facts and not graph.has_fact(st.subject, st.relation, st.object, st.time):
                errs.append(f"step {i} is not a fact of the graph")
    return errs


# -- text form -----------------------------------------------------------------


def _time_text(t: int, graph: TemporalKnowledgeGraph, raw_times: bool) -> str:
    return graph.time_label(t) if raw_times else f"T{t}"


def serialize_step(step: Quadruple, graph: TemporalKnowledgeGraph, raw_times: bool = False) -> str:
    s, r, o, t = step
    return (
        f"({graph.entities.label(s)}, {graph.relations.label(r)}, {graph.entities.label(o)}, "
        f"{_time_text(t, graph, raw_times)})"
    )


def serialize_path(path: ReasoningPath, graph: TemporalKnowledgeGraph, raw_times: bool = False) -> str:
    if not path.steps:
        raise ValueError("cannot serialize an empty path")
    return " -> ".join(serialize_step(st, graph, raw_times) for st in path.steps)


def serialize_query(query: TemporalQuery, graph: TemporalKnowledgeGraph, raw_times: bool = False) -> str:
    return (
        f"({graph.entities.label(query.subject)}, {graph.relations.label(query.relation)}, ?, "
        f"{_time_text(query.time, graph, raw_times)})"
    )


_STEP_TIME = re.compile(r",\s*(T\d+|\d{4}-\d{2}-\d{2}|\d+)\)\s*$")


def parse_step(text: str, graph: TemporalKnowledgeGraph) -> Quadruple:
    """Inverse of :func:`serialize_step`; labels may themselves contain commas or parentheses."""
    text = text.strip()
    m = _STEP_TIME.search(text)
    if not text.startswith("(") or m is None:
        raise PathParseError(f"malformed step {text!r}")
    raw_t = m.group(1)
    if raw_t.startswith("T"):
        t = int(raw_t[1:])
    elif ISO_DATE.fullmatch(raw_t):
        t = graph.time_from_label(raw_t)
    else:
        t = int(raw_t)
    body = text[1 : m.start()]
    cuts = [i for i in range(len(body)) if body.startswith(", ", i)]
    found = []
    for a in range(len(cuts)):
        s_lbl = body[: cuts[a]]
        if s_lbl not in graph.entities:
            continue
        for b in range(a + 1, len(cuts)):
            r_lbl, o_lbl = body[cuts[a] + 2 : cuts[b]], body[cuts[b] + 2 :]
            if r_lbl in graph.relations and o_lbl in graph.entities:
                found.append((graph.entities.id(s_lbl), graph.relations.id(r_lbl), graph.entities.id(o_lbl)))
    if not found:
        raise PathParseError(f"step {text!r} does not resolve against the vocabulary")
    if len(set(found)) > 1:
        raise PathParseError(f"step {text!r} is ambiguous under the vocabulary")
    s, r, o = found[0]
    return Quadruple(s, r, o, t)


def parse_serialized_path(text: str, graph: TemporalKnowledgeGraph) -> list[Quadruple]:
    return [parse_step(part, graph) for part in text.strip().split(" -> ")]


def dump_paths(paths: list[ReasoningPath], fh) -> None:
    for p in paths:
        fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")


def load_paths(fh) -> list[ReasoningPath]:
    return [ReasoningPath.from_json(json.loads(line)) for line in fh if line.strip()]
