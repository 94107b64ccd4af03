"""Constrained Keep/Remove/Revise editing of reasoning paths.

An edit script is a JSON array of ``{"path", "step", "action", "replacement"?, "time"?, "reason"?}``
objects with 0-based path and step indices. A Revise may replace the relation of a step and/or
the entity the step reaches (which is also the subject of the following step), and may move the
step to another time at which the revised fact is recorded.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .graph import Quadruple, TemporalKnowledgeGraph, TemporalQuery
from .llm import Gateway, LlmRequest, estimate_tokens
from .paths import (
    ISO_DATE,
    PathParseError,
    ReasoningPath,
    parse_serialized_path,
    serialize_path,
    serialize_query,
)

logger = logging.getLogger(__name__)

ACTIONS = ("keep", "remove", "revise")


class EditParseError(ValueError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


@dataclass
class EditOperation:
    action: str
    step: int
    entity: str | int | None = None
    relation: str | int | None = None
    time: str | int | None = None
    reason: str = ""

    def to_json(self, path: int | None = None) -> dict:
        out: dict = {"action": self.action, "step": self.step}
        if path is not None:
            out["path"] = path
        repl = {k: v for k, v in (("entity", self.entity), ("relation", self.relation)) if v is not None}
        if repl:
            out["replacement"] = repl
        if self.time is not None:
            out["time"] = self.time
        if self.reason:
            out["reason"] = self.reason
        return out


@dataclass
class ConstraintSet:
    vocabulary: bool = True
    types: bool = True
    chronology: bool = True


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str | None = None

    def __str__(self) -> str:
        return "accepted" if self.accepted else f"rejected({self.reason})"


ACCEPT = Verdict(True)


@dataclass
class EditAudit:
    query: TemporalQuery
    mode: str
    original: list[ReasoningPath]
    refined: list[ReasoningPath | None]
    operations: list[dict] = field(default_factory=list)
    raw_text: str = ""
    prompt_tokens: int = 0
    completion_tokens: int = 0
    attempts: int = 0
    fallback: bool = False

    def to_json(self) -> dict:
        q = self.query
        return {
            "query": {"s": q.subject, "r": q.relation, "t": q.time, "gold": q.gold},
            "mode": self.mode,
            "operations": self.operations,
            "original": [p.to_json() for p in self.original],
            "refined": [p.to_json() if p is not None else None for p in self.refined],
            "raw_text": self.raw_text,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "attempts": self.attempts,
            "fallback": self.fallback,
        }


# -- prompt ---------------------------------------------------------------------

_PROMPT_HEAD = """You are checking candidate reasoning paths mined from a temporal knowledge graph of events.
Each step is written (subject, relation, object, time). {time_note}
Query: {query}

Candidate paths, one per line. The confidence next to each path is the probability the graph model gave its end entity.
{paths}
"""

_PROMPT_RULES = """For every step choose one operation:
- keep: leave the step as it is when it fits the rest of the chain.
- remove: drop a step that contradicts the chain, loops back onto its own subject, or brings in an unrelated entity.
- revise: correct a mismatched step by replacing its relation and/or the entity it reaches, optionally with another time at which the corrected fact is recorded.
A revise must obey all of these constraints:
1. Replacement entities and relations must already exist in the graph; copy their labels exactly.
2. A replacement entity must have the same type (the parenthesised part of its label) as the entity it replaces; the final entity of a path cannot be replaced.
3. Times must stay chronological along the chain, t(l-1) <= t(l) <= t(l+1), and precede the query time.
Be conservative: the higher a path's confidence, the less you should change it. Fix only clear defects.

Answer with a JSON array and nothing else. Steps you do not mention are kept. Paths and steps are numbered from 0:
[{{"path": 0, "step": 1, "action": "remove", "reason": "self-loop"}},
 {{"path": 2, "step": 0, "action": "revise", "replacement": {{"entity": "<label>", "relation": "<label>"}}, "time": "{time_example}", "reason": "<why>"}}]
"""

_PATH_LINE = re.compile(r"^Path (\d+) \(confidence [-+.\deE]+\): (.+)$", re.MULTILINE)
_QUERY_LINE = re.compile(r"^Query: \((.*), \?, (T\d+|\d{4}-\d{2}-\d{2}|\d+)\)\s*$", re.MULTILINE)


def build_edit_prompt(
    query: TemporalQuery,
    paths: list[ReasoningPath],
    graph: TemporalKnowledgeGraph,
    confidences: list[float] | None = None,
    raw_times: bool = False,
) -> str:
    if not paths:
        raise ValueError("edit prompt needs at least one path")
    conf = confidences if confidences is not None else [p.alphas[-1] if p.alphas else 0.0 for p in paths]
    lines = [
        f"Path {i} (confidence {c:.3f}): {serialize_path(p, graph, raw_times)}" for i, (p, c) in enumerate(zip(paths, conf))
    ]
    if raw_times:
        note, example = "Times are calendar dates.", graph.time_label(max(query.time - 1, 0))
    else:
        note, example = "Times are discrete time indices T<n>; a larger n is later.", f"T{max(query.time - 1, 0)}"
    head = _PROMPT_HEAD.format(time_note=note, query=serialize_query(query, graph, raw_times), paths="\n".join(lines))
    return head + "\n" + _PROMPT_RULES.format(time_example=example)


# -- reply parsing ----------------------------------------------------------------


def _first_json_array(text: str):
    dec = json.JSONDecoder()
    for m in re.finditer(r"\[", text):
        try:
            value, _ = dec.raw_decode(text, m.start())
        except json.JSONDecodeError:
            continue
        if isinstance(value, list):
            return value
    return None


def parse_edit_response(text: str) -> list[tuple[int, EditOperation]]:
    """Pull the first JSON array out of a reply (markdown fences tolerated)."""
    arr = _first_json_array(text or "")
    if arr is None:
        raise EditParseError("no JSON array in reply", text)
    out = []
    for k, el in enumerate(arr):
        try:
            out.append(_parse_element(el))
        except (TypeError, ValueError, KeyError) as exc:
            logger.warning("skipping edit element %d: %s", k, exc)
    return out


def _parse_element(el) -> tuple[int, EditOperation]:
    if not isinstance(el, dict):
        raise TypeError("element is not an object")
    path, step = el["path"], el["step"]
    if isinstance(path, bool) or isinstance(step, bool) or not isinstance(path, int) or not isinstance(step, int):
        raise TypeError("path and step must be integers")
    action = str(el["action"]).strip().lower()
    if action not in ACTIONS:
        raise ValueError(f"unknown action {el['action']!r}")
    entity = relation = None
    time = el.get("time")
    repl = el.get("replacement")
    if isinstance(repl, dict):
        entity, relation = repl.get("entity"), repl.get("relation")
        time = repl.get("time", time)
    elif isinstance(repl, (str, int)) and not isinstance(repl, bool):
        entity = repl
    elif repl is not None:
        raise TypeError("replacement must be an object or a label")
    if action == "revise":
        if all(v is None or v == "" for v in (entity, relation, time)):
            raise ValueError("revise without a replacement")
        entity = None if entity == "" else entity
        relation = None if relation == "" else relation
    else:
        entity = relation = time = None
    return path, EditOperation(action, step, entity, relation, time, str(el.get("reason", "") or ""))


# -- validation and application -----------------------------------------------------


def _resolve(value, vocab_size: int, vocab) -> int | None:
    if value is None:
        return None
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return int(value) if 0 <= value < vocab_size else -1
    label = str(value)
    return vocab.id(label) if label in vocab else -1


def resolve_time(value, graph: TemporalKnowledgeGraph) -> int | None:
    if value is None:
        return None
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return int(value)
    text = str(value).strip()
    if re.fullmatch(r"T\d+", text):
        return int(text[1:])
    if ISO_DATE.fullmatch(text) and graph.time_origin is not None:
        return graph.time_from_label(text)
    if re.fullmatch(r"\d+", text):
        return int(text)
    return -1


def _neighbor(removed, n: int, i: int, direction: int) -> int | None:
    j = i + direction
    while 0 <= j < n and j in removed:
        j += direction
    return j if 0 <= j < n else None


def _chronology_ok(i: int, steps: list[Quadruple], removed, query: TemporalQuery) -> bool:
    t = steps[i].time
    if t >= query.time:
        return False
    prev = _neighbor(removed, len(steps), i, -1)
    nxt = _neighbor(removed, len(steps), i, +1)
    return (prev is None or steps[prev].time <= t) and (nxt is None or t <= steps[nxt].time)


def _static_verdict(
    op: EditOperation, steps: list[Quadruple], query: TemporalQuery, graph: TemporalKnowledgeGraph, c: ConstraintSet,
    removed,
) -> Verdict:
    """Every check except the position of the step time relative to its neighbours."""
    n = len(steps)
    if not 0 <= op.step < n:
        return Verdict(False, "index")
    if op.action in ("keep", "remove"):
        return ACCEPT
    if op.step in removed:
        return Verdict(False, "removed")
    i = op.step
    s, r, o, t = steps[i]
    ent = _resolve(op.entity, graph.n_entities, graph.entities)
    rel = _resolve(op.relation, graph.n_relations, graph.relations)
    new_t = resolve_time(op.time, graph)
    if ent is not None and ent != o and i == n - 1:
        return Verdict(False, "endpoint")
    if ent == -1 or rel == -1:
        return Verdict(False, "vocabulary")
    if new_t == -1:
        return Verdict(False, "time-format")
    if c.types and ent is not None and graph.entity_types[ent] != graph.entity_types[o]:
        return Verdict(False, "type")
    new_o = o if ent is None else ent
    new_r = r if rel is None else rel
    if new_t is not None and new_t != t and new_t not in graph.fact_times(s, new_r, new_o):
        return Verdict(False, "unattested-time")
    if c.chronology and (t if new_t is None else new_t) >= query.time:
        return Verdict(False, "chronology")
    return ACCEPT


def validate_edit(
    op: EditOperation,
    steps: list[Quadruple],
    query: TemporalQuery,
    graph: TemporalKnowledgeGraph,
    constraints: ConstraintSet | None = None,
    removed: frozenset | set = frozenset(),
) -> Verdict:
    """Verdict for one operation applied on its own to ``steps`` (steps in ``removed`` are already gone)."""
    c = constraints or ConstraintSet()
    v = _static_verdict(op, steps, query, graph, c, removed)
    if not v.accepted or op.action != "revise" or not c.chronology:
        return v
    trial = list(steps)
    _apply_one(op, trial, set(), graph)
    return v if _chronology_ok(op.step, trial, removed, query) else Verdict(False, "chronology")


def _apply_one(op: EditOperation, steps: list[Quadruple], removed: set, graph: TemporalKnowledgeGraph) -> None:
    if op.action == "remove":
        removed.add(op.step)
        return
    if op.action != "revise":
        return
    i = op.step
    s, r, o, t = steps[i]
    ent = _resolve(op.entity, graph.n_entities, graph.entities)
    rel = _resolve(op.relation, graph.n_relations, graph.relations)
    new_t = resolve_time(op.time, graph)
    new_o = o if ent is None else ent
    steps[i] = Quadruple(s, r if rel is None else rel, new_o, t if new_t is None else new_t)
    if ent is not None and i + 1 < len(steps):
        s2, r2, o2, t2 = steps[i + 1]
        steps[i + 1] = Quadruple(new_o, r2, o2, t2)


def _compact(path: ReasoningPath, steps: list[Quadruple], removed: set, tag: str) -> ReasoningPath | None:
    keep = [i for i in range(len(steps)) if i not in removed]
    kept = [steps[i] for i in keep]
    alphas = [path.alphas[i] if i < len(path.alphas) else 0.0 for i in keep]
    for j in range(len(kept)):
        tail = kept[j:]
        if tail[0].subject != path.query.subject or tail[-1].object != path.candidate:
            continue
        if all(a.object == b.subject for a, b in zip(tail, tail[1:])):
            return path.with_steps(tail, alphas[j:], tag)
    return None


def apply_edits(
    path: ReasoningPath, ops: list[EditOperation], graph: TemporalKnowledgeGraph, tag: str = "llm-refined"
) -> ReasoningPath | None:
    """Apply already accepted operations in order; None when no connected chain survives."""
    steps = list(path.steps)
    removed: set[int] = set()
    for op in ops:
        _apply_one(op, steps, removed, graph)
    return _compact(path, steps, removed, tag)


def edit_path(
    path: ReasoningPath,
    ops: list[EditOperation],
    graph: TemporalKnowledgeGraph,
    constraints: ConstraintSet | None = None,
    tag: str = "llm-refined",
) -> tuple[ReasoningPath | None, list[Verdict]]:
    """Validate and apply a whole script; chronology is judged on the chain after every edit.

    Operations are checked in order against the chain edited so far. If the finished chain has
    a revised step out of time order, the latest such revise is rejected and the script replayed.
    """
    c = constraints or ConstraintSet()
    vetoed: set[int] = set()
    while True:
        steps = list(path.steps)
        removed: set[int] = set()
        verdicts = []
        for k, op in enumerate(ops):
            v = Verdict(False, "chronology") if k in vetoed else _static_verdict(op, steps, path.query, graph, c, removed)
            verdicts.append(v)
            if v.accepted:
                _apply_one(op, steps, removed, graph)
        if not c.chronology:
            break
        bad = [
            k for k, (op, v) in enumerate(zip(ops, verdicts))
            if v.accepted and op.action == "revise" and op.step not in removed
            and not _chronology_ok(op.step, steps, removed, path.query)
        ]
        if not bad:
            break
        vetoed.add(bad[-1])
    return _compact(path, steps, removed, tag), verdicts


# -- rule-based editor ---------------------------------------------------------------


def deterministic_editor(path: ReasoningPath, graph: TemporalKnowledgeGraph) -> list[EditOperation]:
    """Remove self-loops and repeated steps, then restore chronology at minimal cost.

    Chronology repair prefers moving a step to a time at which its fact is recorded over
    removing it; a step whose fact is recorded only at other times is moved too. Among
    repairs the cost order is (removals, revisions, total time shift).
    """
    steps = path.steps
    ops: dict[int, EditOperation] = {}
    prev = None
    for i, st in enumerate(steps):
        if st.subject == st.object:
            ops[i] = EditOperation("remove", i, reason="self-loop")
        elif prev is not None and st == prev:
            ops[i] = EditOperation("remove", i, reason="duplicate step")
        else:
            prev = st
    live = [i for i in range(len(steps)) if i not in ops]
    # DP over live steps; state = time of the last kept step
    states: dict[float, tuple[tuple, list]] = {-np.inf: ((0, 0, 0), [])}
    for i in live:
        s, r, o, t = steps[i]
        attested = [x for x in graph.fact_times(s, r, o) if x < path.query.time]
        options = attested if attested else [t]
        new: dict[float, tuple[tuple, list]] = {}
        for last, (cost, choice) in states.items():
            cand = [(last, (cost[0] + 1, cost[1], cost[2]), choice + [(i, None)])]
            for x in options:
                if x >= last:
                    moved = x != t
                    cand.append((x, (cost[0], cost[1] + moved, cost[2] + abs(x - t)), choice + [(i, x)]))
            for key, c2, ch in cand:
                if key not in new or c2 < new[key][0]:
                    new[key] = (c2, ch)
        states = new
    _, best = min(states.values(), key=lambda v: v[0]) if states else ((0, 0, 0), [])
    for i, x in best:
        if x is None:
            ops[i] = EditOperation("remove", i, reason="breaks chronology")
        elif x != steps[i].time:
            ops[i] = EditOperation("revise", i, time=int(x), reason="moved to a recorded time")
    return [ops.get(i, EditOperation("keep", i)) for i in range(len(steps))]


def rule_responder(graph: TemporalKnowledgeGraph):
    """Offline chat backend: reads the paths out of an edit prompt and answers with the rule script."""

    def reply(prompt: str) -> str:
        qm = _QUERY_LINE.search(prompt)
        if qm is None:
            return "[]"
        raw_t = qm.group(2)
        q_time = resolve_time(raw_t, graph)
        raw_times = not raw_t.startswith("T")
        script = []
        for m in _PATH_LINE.finditer(prompt):
            idx = int(m.group(1))
            try:
                steps = parse_serialized_path(m.group(2), graph)
            except (PathParseError, ValueError):
                continue
            query = TemporalQuery(steps[0].subject, -1, q_time)
            path = ReasoningPath(query, steps[-1].object, steps)
            for op in deterministic_editor(path, graph):
                if op.action == "keep":
                    continue
                if op.time is not None:
                    op.time = graph.time_label(op.time) if raw_times else f"T{op.time}"
                script.append(op.to_json(idx))
        return json.dumps(script)

    return reply


# -- orchestration -----------------------------------------------------------------


def softmax_confidences(scores: list[float]) -> list[float]:
    if not scores:
        return []
    x = np.asarray(scores, dtype=np.float64)
    e = np.exp(x - x.max())
    return (e / e.sum()).tolist()


class PathEditor:
    """Runs one editing mode (off | rules | llm) over the paths of a query."""

    def __init__(
        self,
        graph: TemporalKnowledgeGraph,
        mode: str = "rules",
        gateway: Gateway | None = None,
        constraints: ConstraintSet | None = None,
        raw_times: bool = False,
        strict_parse: bool = False,
        max_retries: int = 2,
    ):
        if mode not in ("off", "rules", "llm"):
            raise ValueError(f"unknown editor mode {mode!r}")
        if mode == "llm" and gateway is None:
            raise ValueError("llm editing needs a gateway")
        self.graph = graph
        self.mode = mode
        self.gateway = gateway
        self.constraints = constraints or ConstraintSet()
        self.raw_times = raw_times
        self.strict_parse = strict_parse
        self.max_retries = max_retries

    def _rules(self, paths, audit: EditAudit) -> list[ReasoningPath | None]:
        out = []
        for k, p in enumerate(paths):
            ops = deterministic_editor(p, self.graph)
            refined, verdicts = edit_path(p, ops, self.graph, self.constraints, tag="rule-refined")
            audit.operations += [
                {"path": k, "op": op.to_json(), "verdict": str(v)} for op, v in zip(ops, verdicts) if op.action != "keep"
            ]
            out.append(refined)
        return out

    def edit(
        self, query: TemporalQuery, paths: list[ReasoningPath], gnn_scores: list[float] | None = None
    ) -> tuple[list[ReasoningPath], EditAudit]:
        audit = EditAudit(query, self.mode, list(paths), [])
        if not paths or self.mode == "off":
            audit.refined = list(paths)
            return list(paths), audit
        if self.mode == "rules":
            audit.refined = self._rules(paths, audit)
            return [p for p in audit.refined if p is not None], audit

        conf = softmax_confidences(gnn_scores) if gnn_scores is not None else None
        prompt = build_edit_prompt(query, paths, self.graph, conf, self.raw_times)
        audit.prompt_tokens = estimate_tokens(prompt)
        parsed = None
        for attempt in range(self.max_retries + 1):
            text = prompt if attempt == 0 else (
                prompt + f"\nAttempt {attempt + 1}: the previous reply could not be parsed. Reply with the JSON array only.\n"
            )
            cfg = self.gateway.config
            resp = self.gateway.chat_edit_response(
                LlmRequest([{"role": "user", "content": text}], cfg.edit_model, 0.0, cfg.max_tokens)
            )
            audit.attempts += 1
            audit.raw_text = resp.text
            audit.completion_tokens += resp.completion_tokens
            if attempt:
                audit.prompt_tokens += resp.prompt_tokens
            try:
                parsed = parse_edit_response(resp.text)
                break
            except EditParseError:
                if self.strict_parse:
                    raise
                logger.warning("unparsable edit reply for %s (attempt %d)", query, attempt + 1)
        if parsed is None:
            audit.fallback = True
            audit.refined = self._rules(paths, audit)
            return [p for p in audit.refined if p is not None], audit
        by_path: dict[int, list[EditOperation]] = {}
        for k, op in parsed:
            if 0 <= k < len(paths):
                by_path.setdefault(k, []).append(op)
            else:
                audit.operations.append({"path": k, "op": op.to_json(), "verdict": "rejected(path-index)"})
        refined_all = []
        for k, p in enumerate(paths):
            ops = by_path.get(k, [])
            refined, verdicts = edit_path(p, ops, self.graph, self.constraints, tag="llm-refined")
            audit.operations += [{"path": k, "op": op.to_json(), "verdict": str(v)} for op, v in zip(ops, verdicts)]
            refined_all.append(refined)
        audit.refined = refined_all
        return [p for p in refined_all if p is not None], audit

    def edit_many(self, items: list[tuple[TemporalQuery, list[ReasoningPath], list[float] | None]]):
        if self.mode == "llm" and self.gateway.config.concurrency > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.gateway.config.concurrency) as pool:
                return list(pool.map(lambda it: self.edit(*it), items))
        return [self.edit(*it) for it in items]
