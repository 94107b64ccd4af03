"""Temporal knowledge graph store: ingestion, vocabularies, inverse edges, history index."""

from __future__ import annotations

import datetime as dt
import json
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

INVERSE_SUFFIX = " (inverse)"
_TYPE_SUFFIX = re.compile(r"\(([^()]+)\)\s*$")


class ParseError(ValueError):
    def __init__(self, message: str, line_no: int | None = None, source: str | None = None):
        self.line_no = line_no
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}:"
        if line_no is not None:
            where += f"{line_no}: "
        super().__init__(where + message)


class LoadError(ValueError):
    pass


class Quadruple(NamedTuple):
    subject: int
    relation: int
    object: int
    time: int


@dataclass(frozen=True)
class TemporalQuery:
    subject: int
    relation: int
    time: int
    gold: int | None = None


class Vocab:
    """Bidirectional label <-> contiguous id table."""

    def __init__(self, labels: Iterable[str] = ()):
        self.labels: list[str] = []
        self.index: dict[str, int] = {}
        for label in labels:
            self.intern(label)

    def intern(self, label: str) -> int:
        idx = self.index.get(label)
        if idx is None:
            idx = len(self.labels)
            self.labels.append(label)
            self.index[label] = idx
        return idx

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: str) -> bool:
        return label in self.index

    def id(self, label: str) -> int:
        return self.index[label]

    def label(self, idx: int) -> str:
        return self.labels[idx]

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, label in enumerate(self.labels):
                fh.write(f"{i}\t{label}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) < 2:
                    raise ParseError("expected 'id<TAB>label'", line_no, str(path))
                pairs.append((int(parts[0]), parts[1]))
        pairs.sort()
        if [p[0] for p in pairs] != list(range(len(pairs))):
            raise ParseError("vocabulary ids are not contiguous from 0", None, str(path))
        return cls(p[1] for p in pairs)


@dataclass
class VocabTables:
    entities: Vocab = field(default_factory=Vocab)
    relations: Vocab = field(default_factory=Vocab)
    time_format: str = "iso-date"
    time_origin: dt.date | None = None
    ids: bool = False


def _parse_time(raw: str, tables: VocabTables, line_no: int | None) -> int:
    raw = raw.strip()
    if tables.time_format == "index":
        try:
            value = int(raw)
        except ValueError:
            raise ParseError(f"unparsable time index {raw!r}", line_no) from None
        if value < 0:
            raise ParseError(f"negative time index {value}", line_no)
        return value
    try:
        day = dt.date.fromisoformat(raw[:10])
    except ValueError:
        raise ParseError(f"unparsable ISO date {raw!r}", line_no) from None
    if tables.time_origin is None:
        tables.time_origin = day
    offset = (day - tables.time_origin).days
    if offset < 0:
        raise ParseError(f"date {raw} precedes the time origin {tables.time_origin}", line_no)
    return offset


def parse_quadruple_line(line: str, vocab: VocabTables, line_no: int | None = None) -> Quadruple:
    """Parse one ``subject<TAB>relation<TAB>object<TAB>time`` line, interning unseen labels.

    A fifth column, if present, is ignored.
    """
    fields = line.rstrip("\r\n").split("\t")
    if len(fields) < 4:
        raise ParseError(f"field count {len(fields)} < 4", line_no)
    s_raw, r_raw, o_raw = (f.strip() for f in fields[:3])
    if not s_raw or not r_raw or not o_raw:
        raise ParseError("empty label", line_no)
    t = _parse_time(fields[3], vocab, line_no)
    if vocab.ids:
        try:
            s, r, o = int(s_raw), int(r_raw), int(o_raw)
        except ValueError:
            raise ParseError("non-integer id in id-input mode", line_no) from None
        for value, table in ((s, vocab.entities), (r, vocab.relations), (o, vocab.entities)):
            while len(table) <= value:
                table.intern(str(len(table)))
        return Quadruple(s, r, o, t)
    s = vocab.entities.intern(s_raw)
    r = vocab.relations.intern(r_raw)
    o = vocab.entities.intern(o_raw)
    return Quadruple(s, r, o, t)


def entity_type(label: str) -> str | None:
    """Coarse type from a parenthesised label suffix: ``"Police (India)" -> "India"``."""
    m = _TYPE_SUFFIX.search(label)
    if m is None or m.start() == 0:
        return None
    return m.group(1).strip()


class TemporalKnowledgeGraph:
    """Immutable fact store with inverse-augmented, time-sorted adjacency.

    Relation ids ``0..n_base-1`` are the base relations, ``n_base..2*n_base-1`` their inverses.
    """

    def __init__(
        self,
        entities: Vocab,
        relations: Vocab,
        train: list[Quadruple],
        valid: list[Quadruple],
        test: list[Quadruple],
        time_origin: dt.date | None = None,
        time_step: int = 1,
    ):
        self.entities = entities
        self.base_relations = relations
        self.n_base_relations = len(relations)
        self.relations = Vocab(relations.labels + [lbl + INVERSE_SUFFIX for lbl in relations.labels])
        self.splits = {"train": list(train), "valid": list(valid), "test": list(test)}
        self.time_origin = time_origin
        self.time_step = time_step
        self.entity_types = [entity_type(lbl) for lbl in entities.labels]
        self._check_ids()
        self._check_split_order()
        self._build_index()

    # -- construction -------------------------------------------------------

    def _check_ids(self) -> None:
        n_e, n_r = len(self.entities), self.n_base_relations
        for name, facts in self.splits.items():
            for q in facts:
                if not (0 <= q.subject < n_e and 0 <= q.object < n_e and 0 <= q.relation < n_r and q.time >= 0):
                    raise LoadError(f"invalid ids in {name} fact {q}")

    def _check_split_order(self) -> None:
        bounds = []
        for name in ("train", "valid", "test"):
            facts = self.splits[name]
            if facts:
                times = [q.time for q in facts]
                bounds.append((name, min(times), max(times)))
        for (n1, _, hi), (n2, lo, _) in zip(bounds, bounds[1:]):
            if not hi < lo:
                raise LoadError(
                    f"split order violated: max {n1} time {hi} is not < min {n2} time {lo}"
                )

    def _build_index(self) -> None:
        facts = self.all_facts()
        n_base = self.n_base_relations
        if facts:
            arr = np.asarray(facts, dtype=np.int64).reshape(-1, 4)
        else:
            arr = np.zeros((0, 4), dtype=np.int64)
        fwd_src, fwd_rel, fwd_dst, fwd_t = arr.T
        src = np.concatenate([fwd_src, fwd_dst])
        rel = np.concatenate([fwd_rel, fwd_rel + n_base])
        dst = np.concatenate([fwd_dst, fwd_src])
        time = np.concatenate([fwd_t, fwd_t])
        eid = np.arange(len(src), dtype=np.int64)
        order = np.lexsort((eid, time, src))
        self.edge_src = src[order]
        self.edge_rel = rel[order]
        self.edge_dst = dst[order]
        self.edge_time = time[order]
        self.edge_id = eid[order]
        counts = np.bincount(self.edge_src, minlength=len(self.entities))
        self.offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

        self._answers: dict[tuple[int, int, int], set[int]] = defaultdict(set)
        self._fact_times: dict[tuple[int, int, int], list[int]] = defaultdict(list)
        for s, r, o, t in zip(src.tolist(), rel.tolist(), dst.tolist(), time.tolist()):
            self._answers[(s, r, t)].add(o)
            self._fact_times[(s, r, o)].append(t)
        for times in self._fact_times.values():
            times.sort()

    # -- basic accessors ----------------------------------------------------

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def all_facts(self) -> list[Quadruple]:
        return self.splits["train"] + self.splits["valid"] + self.splits["test"]

    def inverse(self, relation: int) -> int:
        n = self.n_base_relations
        return relation + n if relation < n else relation - n

    def time_label(self, t: int) -> str:
        """Calendar label of a time index (ISO date when an origin is known)."""
        if self.time_origin is None:
            return str(t)
        return (self.time_origin + dt.timedelta(days=t * self.time_step)).isoformat()

    def time_from_label(self, label: str) -> int:
        day = dt.date.fromisoformat(label)
        if self.time_origin is None:
            raise ValueError("graph has no calendar origin")
        return (day - self.time_origin).days // self.time_step

    def queries(self, split: str, directions: str = "both") -> list[TemporalQuery]:
        """Object queries (and inverse-rewritten subject queries) for every fact of a split."""
        out = []
        for s, r, o, t in self.splits[split]:
            out.append(TemporalQuery(s, r, t, o))
            if directions == "both":
                out.append(TemporalQuery(o, self.inverse(r), t, s))
        return out

    # -- temporal index -----------------------------------------------------

    def history(
        self, entity: int, t: int, window: int | None = None, limit: int | None = None
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Edges of ``entity`` with time < t as (relation, object, time, edge_id) arrays, newest first."""
        lo, hi = self.offsets[entity], self.offsets[entity + 1]
        times = self.edge_time[lo:hi]
        end = lo + int(np.searchsorted(times, t, side="left"))
        start = lo
        if window is not None:
            start = lo + int(np.searchsorted(times, t - window, side="left"))
        sl = slice(start, end)
        rel, dst, tm, eid = self.edge_rel[sl], self.edge_dst[sl], self.edge_time[sl], self.edge_id[sl]
        # newest first; ascending edge id inside a timestamp
        order = np.lexsort((eid, -tm))
        if limit is not None:
            order = order[:limit]
        return rel[order], dst[order], tm[order], eid[order]

    def neighbors_before(self, entity: int, t: int, window: int | None = None) -> list[tuple[int, int, int]]:
        rel, dst, tm, _ = self.history(entity, t, window)
        return list(zip(rel.tolist(), dst.tolist(), tm.tolist()))

    def answers(self, subject: int, relation: int, t: int) -> set[int]:
        """All objects o with (subject, relation, o, t) in any split."""
        return self._answers.get((subject, relation, t), set())

    def fact_times(self, subject: int, relation: int, obj: int) -> list[int]:
        return self._fact_times.get((subject, relation, obj), [])

    def has_fact(self, subject: int, relation: int, obj: int, t: int) -> bool:
        return obj in self._answers.get((subject, relation, t), ())

    # -- serialization ------------------------------------------------------

    def write_tsv(self, directory: str | Path, time_format: str = "index", ids: bool = False) -> None:
        """Write the splits plus ``entity2id.txt``/``relation2id.txt``; ``ids`` writes integer columns."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        ent = str if ids else self.entities.label
        rel = str if ids else self.base_relations.label
        for name, facts in self.splits.items():
            with open(directory / f"{name}.txt", "w", encoding="utf-8") as fh:
                for s, r, o, t in facts:
                    tl = self.time_label(t) if time_format == "iso-date" else str(t)
                    fh.write(f"{ent(s)}\t{rel(r)}\t{ent(o)}\t{tl}\n")
        self.entities.dump(directory / "entity2id.txt")
        self.base_relations.dump(directory / "relation2id.txt")

    def stats(self) -> dict:
        return {
            "entities": self.n_entities,
            "base_relations": self.n_base_relations,
            "relations": self.n_relations,
            "train": len(self.splits["train"]),
            "valid": len(self.splits["valid"]),
            "test": len(self.splits["test"]),
        }


@dataclass
class LoadOptions:
    time_format: str = "iso-date"
    ids: bool = False
    allow_empty_split: bool = False
    time_step: int | None = None  # None: gcd of distinct raw times (index format only)


def _read_lines(path: Path) -> list[tuple[int, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if line.strip():
                out.append((line_no, line))
    return out


def load_graph(
    train: str | Path,
    valid: str | Path,
    test: str | Path,
    options: LoadOptions | None = None,
) -> TemporalKnowledgeGraph:
    opts = options or LoadOptions()
    paths = {"train": Path(train), "valid": Path(valid), "test": Path(test)}
    tables = VocabTables(time_format=opts.time_format, ids=opts.ids)
    if opts.ids:
        for attr, fname in (("entities", "entity2id.txt"), ("relations", "relation2id.txt")):
            vocab_path = paths["train"].parent / fname
            if vocab_path.exists():
                setattr(tables, attr, Vocab.load(vocab_path))

    raw = {name: _read_lines(p) for name, p in paths.items()}
    if opts.time_format == "iso-date":
        # origin = earliest date over all splits so day indices start at 0
        dates = []
        for name, lines in raw.items():
            for line_no, line in lines:
                fields = line.rstrip("\r\n").split("\t")
                if len(fields) < 4:
                    raise ParseError(f"field count {len(fields)} < 4", line_no, str(paths[name]))
                try:
                    dates.append(dt.date.fromisoformat(fields[3].strip()[:10]))
                except ValueError:
                    raise ParseError(f"unparsable ISO date {fields[3]!r}", line_no, str(paths[name])) from None
        tables.time_origin = min(dates) if dates else None

    splits: dict[str, list[Quadruple]] = {}
    for name, lines in raw.items():
        facts = []
        for line_no, line in lines:
            try:
                facts.append(parse_quadruple_line(line, tables, line_no))
            except ParseError as exc:
                raise ParseError(str(exc).split(": ", 1)[-1], line_no, str(paths[name])) from None
        if not facts and not opts.allow_empty_split:
            raise LoadError(f"{name} split is empty ({paths[name]}); pass allow_empty_split to accept")
        splits[name] = facts

    step = 1
    if opts.time_format == "index":
        step = opts.time_step or 0
        if not step:
            distinct = sorted({q.time for facts in splits.values() for q in facts})
            step = 0
            for t in distinct:
                step = math.gcd(step, t)
            step = step or 1
        if step != 1:
            splits = {
                n: [Quadruple(q.subject, q.relation, q.object, q.time // step) for q in facts]
                for n, facts in splits.items()
            }
    graph = TemporalKnowledgeGraph(
        tables.entities,
        tables.relations,
        splits["train"],
        splits["valid"],
        splits["test"],
        time_origin=tables.time_origin,
        time_step=step,
    )
    logger.info("loaded graph %s", graph.stats())
    return graph


def load_graph_dir(directory: str | Path, options: LoadOptions | None = None) -> TemporalKnowledgeGraph:
    d = Path(directory)
    return load_graph(d / "train.txt", d / "valid.txt", d / "test.txt", options)


def save_graph_json(graph: TemporalKnowledgeGraph, path: str | Path) -> None:
    """Exact snapshot (labels, integer facts, calendar origin) for reuse by later stages."""
    body = {
        "entities": graph.entities.labels,
        "relations": graph.base_relations.labels,
        "time_origin": graph.time_origin.isoformat() if graph.time_origin else None,
        "time_step": graph.time_step,
        "splits": {k: [list(q) for q in v] for k, v in graph.splits.items()},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(body, sort_keys=True), encoding="utf-8")
    tmp.replace(path)


def load_graph_json(path: str | Path) -> TemporalKnowledgeGraph:
    body = json.loads(Path(path).read_text(encoding="utf-8"))
    splits = {k: [Quadruple(*q) for q in v] for k, v in body["splits"].items()}
    origin = dt.date.fromisoformat(body["time_origin"]) if body["time_origin"] else None
    return TemporalKnowledgeGraph(
        Vocab(body["entities"]),
        Vocab(body["relations"]),
        splits["train"],
        splits["valid"],
        splits["test"],
        time_origin=origin,
        time_step=body["time_step"],
    )
