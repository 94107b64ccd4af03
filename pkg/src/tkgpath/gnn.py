"""Stage I: query-conditioned layered subgraph expansion with attention-guided edge sampling.

Each layer keeps every previously reached node (through a learned "stay" edge) and adds
the attention-selected historical edges leaving the nodes discovered one layer earlier.
Expansion is time-monotone: a node reached at time tau only expands edges with time >= tau,
so every backtracked chain is chronologically ordered.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Adam, Tensor
from .graph import TemporalKnowledgeGraph, TemporalQuery
from .semantic import SemanticEmbeddings
from .time_encoding import RelationTimeFusion, TimeEncoder

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class GnnConfig:
    dim: int = 128
    attn_dim: int | None = None
    layers: int = 3
    budget: int = 32
    window: int | None = None
    max_fanout: int | None = 64
    max_frontier: int | None = 64
    init_mode: str = "query"  # query | self
    aggregate: str = "mean"  # mean | sum
    relative_time: bool = True
    strict_loss: bool = False

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layer count must be >= 1")
        if self.budget < 1:
            raise ValueError("neighbor budget must be >= 1")
        if self.init_mode not in ("query", "self"):
            raise ValueError(f"unknown init mode {self.init_mode!r}")
        if self.aggregate not in ("mean", "sum"):
            raise ValueError(f"unknown aggregate {self.aggregate!r}")


@dataclass
class LayerEdges:
    """Selected in-edges of one layer; stay edges have ``stay=True``, relation -1, time -1."""

    src: np.ndarray
    dst: np.ndarray
    relation: np.ndarray
    time: np.ndarray
    edge_id: np.ndarray
    stay: np.ndarray
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.src)


@dataclass
class LayeredSubgraph:
    query: TemporalQuery
    nodes: list[int]
    node_layer: list[int]
    arrival: list[float]
    n_nodes: list[int]
    layers: list[LayerEdges]
    hidden: list[np.ndarray]
    empty: bool = False

    @property
    def depth(self) -> int:
        return len(self.layers)

    def frontier(self, layer: int) -> list[int]:
        return [i for i, lay in enumerate(self.node_layer) if lay == layer]

    def layer_entities(self, layer: int) -> list[int]:
        """Entities first reached at ``layer`` (BFS frontier)."""
        return [self.nodes[i] for i in self.frontier(layer)]

    def node_index(self, entity: int) -> int | None:
        try:
            return self.nodes.index(entity)
        except ValueError:
            return None

    def to_json(self, graph: TemporalKnowledgeGraph | None = None) -> dict:
        out = {
            "query": {"subject": self.query.subject, "relation": self.query.relation, "time": self.query.time},
            "nodes": self.nodes,
            "node_layer": self.node_layer,
            "empty": self.empty,
            "layers": [],
        }
        for lay in self.layers:
            edges = []
            for k in range(len(lay)):
                edges.append(
                    {
                        "src": self.nodes[int(lay.src[k])],
                        "dst": self.nodes[int(lay.dst[k])],
                        "relation": int(lay.relation[k]),
                        "time": int(lay.time[k]),
                        "stay": bool(lay.stay[k]),
                        "alpha": float(lay.alpha[k]),
                    }
                )
            out["layers"].append(edges)
        return out


@dataclass
class CandidateScores:
    entities: np.ndarray
    scores: np.ndarray

    def as_dict(self) -> dict[int, float]:
        return {int(e): float(s) for e, s in zip(self.entities, self.scores)}

    def __len__(self) -> int:
        return len(self.entities)


def _xavier(rng, shape):
    bound = math.sqrt(6.0 / (shape[0] + shape[-1]))
    return rng.uniform(-bound, bound, size=shape)


class GnnParams:
    def __init__(self, dim: int, attn_dim: int, layers: int, rng: np.random.Generator):
        self.dim, self.attn_dim, self.n_layers = dim, attn_dim, layers
        self.w_h = [ag.parameter(_xavier(rng, (dim, dim)), name=f"gnn.w_h.{l}") for l in range(layers)]
        self.w_att = [ag.parameter(_xavier(rng, (attn_dim, 3 * dim)), name=f"gnn.w_att.{l}") for l in range(layers)]
        self.v_att = [
            ag.parameter(rng.normal(0, 1.0 / math.sqrt(attn_dim), size=attn_dim), name=f"gnn.v_att.{l}")
            for l in range(layers)
        ]
        self.w_a = ag.parameter(rng.normal(0, 1.0 / math.sqrt(dim), size=dim), name="gnn.w_a")
        self.stay = ag.parameter(rng.normal(0, 1.0 / math.sqrt(dim), size=dim), name="gnn.stay")

    def parameters(self) -> list[Tensor]:
        return self.w_h + self.w_att + self.v_att + [self.w_a, self.stay]

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}


def attention_score(h_s, h_rt, h_query, w_att, v_att) -> Tensor:
    """alpha = sigmoid(v^T relu(W [h_s ; h_rt ; h_query])) for one edge or a row batch."""
    h_s, h_rt, h_query = ag.as_tensor(h_s), ag.as_tensor(h_rt), ag.as_tensor(h_query)
    if h_s.ndim == 1:
        z = ag.concat([h_s, h_rt, h_query], axis=0)
        return ag.sigmoid(ag.matmul(v_att, ag.relu(ag.matmul(w_att, z))))
    n = h_s.shape[0]
    q = ag.take(ag.reshape(h_query, (1, -1)), np.zeros(n, dtype=np.int64)) if h_query.ndim == 1 else h_query
    z = ag.concat([h_s, h_rt, q], axis=1)
    return ag.sigmoid(ag.matmul(ag.relu(ag.matmul(z, ag.transpose(w_att))), v_att))


def aggregate_messages(h_src, h_rt, alpha, dst, n_targets: int, mode: str = "mean") -> Tensor:
    """Attention-weighted mean (or sum) of (h_s + h_rt) per target row."""
    msg = ag.mul(ag.add(h_src, h_rt), ag.reshape(alpha, (-1, 1)))
    num = ag.segment_sum(msg, dst, n_targets)
    if mode == "sum":
        return num
    den = ag.segment_sum(ag.reshape(alpha, (-1, 1)), dst, n_targets)
    return ag.div(num, den)


class TemporalGNN:
    def __init__(
        self,
        config: GnnConfig,
        embeddings: SemanticEmbeddings,
        time_encoder: TimeEncoder,
        fusion: RelationTimeFusion,
        rng: np.random.Generator | None = None,
    ):
        rng = rng or np.random.default_rng(0)
        if embeddings.dim != config.dim:
            raise ag.DimensionError(f"embedding dim {embeddings.dim} != gnn dim {config.dim}")
        self.config = config
        self.embeddings = embeddings
        self.time_encoder = time_encoder
        self.fusion = fusion
        self.params = GnnParams(config.dim, config.attn_dim or config.dim, config.layers, rng)

    def parameters(self) -> list[Tensor]:
        return (
            self.params.parameters()
            + self.embeddings.parameters()
            + self.time_encoder.parameters()
            + self.fusion.parameters()
        )

    def named_parameters(self) -> dict[str, Tensor]:
        return {
            **self.params.named_parameters(),
            **self.embeddings.named_parameters(),
            **self.time_encoder.named_parameters(),
            **self.fusion.named_parameters(),
        }

    # -- differentiable pieces --------------------------------------------------

    def _time_arg(self, query: TemporalQuery, times: np.ndarray) -> np.ndarray:
        if self.config.relative_time:
            return np.where(times < 0, 0, query.time - times).astype(np.float64)
        return np.where(times < 0, query.time, times).astype(np.float64)

    def query_embedding(self, query: TemporalQuery) -> Tensor:
        h_rq = self.embeddings.relations([query.relation])
        t = 0.0 if self.config.relative_time else float(query.time)
        return ag.reshape(self.fusion(h_rq, self.time_encoder(np.array([t]))), (-1,))

    def _relation_time(self, query: TemporalQuery, relation: np.ndarray, times: np.ndarray, stay: np.ndarray) -> Tensor:
        real = relation[~stay]
        uniq, inv = np.unique(real, return_inverse=True)
        pieces = []
        if len(uniq):
            pieces.append(self.embeddings.relations(uniq))
        pieces.append(ag.reshape(self.params.stay, (1, -1)))
        table = ag.concat(pieces, axis=0) if len(pieces) > 1 else pieces[0]
        idx = np.full(len(relation), len(uniq), dtype=np.int64)
        idx[~stay] = inv
        h_r = ag.take(table, idx)
        phi = self.time_encoder(self._time_arg(query, times))
        return self.fusion(h_r, phi)

    def _layer(self, l: int, query: TemporalQuery, h_prev: Tensor, edges: LayerEdges, n_targets: int,
               q_emb: Tensor, nodes: list[int]) -> tuple[Tensor, Tensor]:
        h_src = ag.take(h_prev, edges.src)
        if self.config.init_mode == "self" and l >= 1:
            h_src = ag.add(h_src, self.embeddings.entities(np.asarray(nodes)[edges.src]))
        h_rt = self._relation_time(query, edges.relation, edges.time, edges.stay)
        alpha = attention_score(h_src, h_rt, q_emb, self.params.w_att[l], self.params.v_att[l])
        agg = aggregate_messages(h_src, h_rt, alpha, edges.dst, n_targets, self.config.aggregate)
        h = ag.relu(ag.matmul(agg, ag.transpose(self.params.w_h[l])))
        return h, alpha

    def propagate(self, sub: LayeredSubgraph) -> list[Tensor]:
        """Recompute node embeddings over a fixed subgraph (gradients flow through values only)."""
        q_emb = self.query_embedding(sub.query)
        h = self.embeddings.entities([sub.query.subject])
        out = [h]
        for l, edges in enumerate(sub.layers):
            h, _ = self._layer(l, sub.query, h, edges, sub.n_nodes[l + 1], q_emb, sub.nodes)
            out.append(h)
        return out

    def propagate_layer(self, sub: LayeredSubgraph, layer: int, h_prev: Tensor) -> Tensor:
        """Embeddings of layer ``layer`` (1-based) from those of the previous layer."""
        q_emb = self.query_embedding(sub.query)
        h, _ = self._layer(layer - 1, sub.query, h_prev, sub.layers[layer - 1], sub.n_nodes[layer], q_emb, sub.nodes)
        return h

    def candidate_rows(self, sub: LayeredSubgraph) -> np.ndarray:
        return np.arange(1, sub.n_nodes[-1], dtype=np.int64)

    def score_tensor(self, sub: LayeredSubgraph, h_last: Tensor) -> Tensor:
        rows = self.candidate_rows(sub)
        return ag.matmul(ag.take(h_last, rows), self.params.w_a)

    # -- expansion ----------------------------------------------------------------

    def expand_subgraph(self, query: TemporalQuery, graph: TemporalKnowledgeGraph) -> LayeredSubgraph:
        cfg = self.config
        nodes = [query.subject]
        node_layer = [0]
        arrival = [-math.inf]
        index = {query.subject: 0}
        n_nodes = [1]
        layers: list[LayerEdges] = []
        with ag.no_grad():
            q_emb = self.query_embedding(query)
            h = self.embeddings.entities([query.subject])
            hidden = [h.data]
            for l in range(cfg.layers):
                frontier = [i for i in range(len(nodes)) if node_layer[i] == l]
                cand = self._candidate_edges(query, graph, frontier, nodes, arrival)
                real = self._select(l, query, h, cand, q_emb, nodes, index)
                # register new targets
                new_entities = sorted({int(e) for e in real["dst_entity"] if int(e) not in index})
                for e in new_entities:
                    index[e] = len(nodes)
                    nodes.append(e)
                    node_layer.append(l + 1)
                    arrival.append(math.inf)
                dst = np.array([index[int(e)] for e in real["dst_entity"]], dtype=np.int64)
                for k in range(len(dst)):
                    if node_layer[dst[k]] == l + 1:
                        arrival[dst[k]] = min(arrival[dst[k]], float(real["time"][k]))
                n_prev = n_nodes[-1]
                stay_idx = np.arange(n_prev, dtype=np.int64)
                edges = LayerEdges(
                    src=np.concatenate([stay_idx, real["src"]]).astype(np.int64),
                    dst=np.concatenate([stay_idx, dst]).astype(np.int64),
                    relation=np.concatenate([np.full(n_prev, -1), real["relation"]]).astype(np.int64),
                    time=np.concatenate([np.full(n_prev, -1), real["time"]]).astype(np.int64),
                    edge_id=np.concatenate([np.full(n_prev, -1), real["edge_id"]]).astype(np.int64),
                    stay=np.concatenate([np.ones(n_prev, bool), np.zeros(len(dst), bool)]),
                )
                n_nodes.append(len(nodes))
                h, alpha = self._layer(l, query, h, edges, n_nodes[-1], q_emb, nodes)
                edges.alpha = alpha.data.copy()
                layers.append(edges)
                hidden.append(h.data)
        empty = n_nodes[-1] <= 1
        return LayeredSubgraph(query, nodes, node_layer, arrival, n_nodes, layers, hidden, empty)

    def _candidate_edges(self, query, graph, frontier, nodes, arrival) -> dict:
        cfg = self.config
        parts = {k: [] for k in ("src", "relation", "dst_entity", "time", "edge_id")}
        for i in frontier:
            rel, dst, tm, eid = graph.history(nodes[i], query.time, cfg.window)
            if arrival[i] > -math.inf:
                keep = tm >= arrival[i]
                rel, dst, tm, eid = rel[keep], dst[keep], tm[keep], eid[keep]
            if cfg.max_fanout is not None:
                rel, dst, tm, eid = rel[: cfg.max_fanout], dst[: cfg.max_fanout], tm[: cfg.max_fanout], eid[: cfg.max_fanout]
            parts["src"].append(np.full(len(rel), i, dtype=np.int64))
            parts["relation"].append(rel)
            parts["dst_entity"].append(dst)
            parts["time"].append(tm)
            parts["edge_id"].append(eid)
        return {
            k: (np.concatenate(v).astype(np.int64) if v else np.zeros(0, dtype=np.int64)) for k, v in parts.items()
        }

    def _select(self, l, query, h_prev: Tensor, cand: dict, q_emb: Tensor, nodes, index) -> dict:
        cfg = self.config
        n = len(cand["src"])
        if n == 0:
            return cand
        stay = np.zeros(n, dtype=bool)
        h_src = ag.take(h_prev, cand["src"])
        if cfg.init_mode == "self" and l >= 1:
            h_src = ag.add(h_src, self.embeddings.entities(np.asarray(nodes)[cand["src"]]))
        h_rt = self._relation_time(query, cand["relation"], cand["time"], stay)
        alpha = attention_score(h_src, h_rt, q_emb, self.params.w_att[l], self.params.v_att[l]).data
        keep = stratified_top_budget(
            cand["dst_entity"], cand["relation"], alpha, query.time - cand["time"], cand["edge_id"], cfg.budget
        )
        if cfg.max_frontier is not None:
            keep = _cap_frontier(keep, cand, alpha, index, cfg.max_frontier, query.time)
        keep = np.sort(keep)
        return {k: v[keep] for k, v in cand.items()}

    # -- scoring and training -----------------------------------------------------

    def score_candidates(self, sub: LayeredSubgraph) -> CandidateScores:
        rows = self.candidate_rows(sub)
        scores = sub.hidden[-1][rows] @ self.params.w_a.data if len(rows) else np.zeros(0)
        return CandidateScores(np.asarray(sub.nodes, dtype=np.int64)[rows], np.asarray(scores, dtype=np.float64))

    def forward(self, query: TemporalQuery, graph: TemporalKnowledgeGraph) -> tuple[LayeredSubgraph, CandidateScores]:
        sub = self.expand_subgraph(query, graph)
        return sub, self.score_candidates(sub)

    def query_loss(self, query: TemporalQuery, graph: TemporalKnowledgeGraph,
                   sub: LayeredSubgraph | None = None) -> Tensor | None:
        """Cross-entropy of the gold entity over reached candidates plus gold; None if no gradient path."""
        if query.gold is None:
            raise TrainingError("training query without gold object")
        sub = sub or self.expand_subgraph(query, graph)
        if sub.empty:
            if self.config.strict_loss:
                raise TrainingError(f"empty subgraph for {query}")
            return None
        hs = self.propagate(sub)
        scores = self.score_tensor(sub, hs[-1])
        cand_entities = np.asarray(sub.nodes, dtype=np.int64)[self.candidate_rows(sub)]
        hit = np.nonzero(cand_entities == query.gold)[0]
        if len(hit):
            gold_pos = int(hit[0])
        else:
            if self.config.strict_loss:
                raise TrainingError(f"gold {query.gold} unreachable for {query}")
            scores = ag.concat([scores, Tensor(np.zeros(1))], axis=0)
            gold_pos = len(cand_entities)
        logp = ag.log_softmax(scores)
        return ag.scale(ag.take(logp, [gold_pos]), -1.0)

    def training_step(self, queries: list[TemporalQuery], graph: TemporalKnowledgeGraph, optimizer: Adam) -> float:
        optimizer.zero_grad()
        losses = [loss for q in queries if (loss := self.query_loss(q, graph)) is not None]
        if not losses:
            return 0.0
        total = ag.sum(ag.concat(losses, axis=0))
        value = float(total.data)
        if total.requires_grad:
            ag.backward(total)
            optimizer.step()
        return value

    def fit(self, queries: list[TemporalQuery], graph: TemporalKnowledgeGraph, epochs: int, batch_size: int = 64,
            lr: float = 1e-3, rng: np.random.Generator | None = None, optimizer: Adam | None = None) -> list[float]:
        """Train for ``epochs``; returns mean per-query loss of each epoch."""
        rng = rng or np.random.default_rng(0)
        optimizer = optimizer or Adam(self.parameters(), lr=lr)
        history = []
        for epoch in range(epochs):
            order = rng.permutation(len(queries))
            total = 0.0
            for start in range(0, len(order), batch_size):
                batch = [queries[i] for i in order[start : start + batch_size]]
                total += self.training_step(batch, graph, optimizer)
            history.append(total / max(len(queries), 1))
            logger.info("gnn epoch %d loss %.5f", epoch + 1, history[-1])
        return history


def stratified_top_budget(target, relation, alpha, time_gap, edge_id, budget: int) -> np.ndarray:
    """Indices kept per target: up to ceil(budget / #relations) per relation first, then backfill by alpha.

    Ties on alpha go to the smaller time gap, then the smaller edge id.
    """
    n = len(target)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    target = np.asarray(target)
    relation = np.asarray(relation)
    alpha = np.asarray(alpha, dtype=np.float64)
    order = np.lexsort((edge_id, time_gap, -alpha, relation, target))
    t_sorted, r_sorted = target[order], relation[order]
    new_group = np.ones(n, dtype=bool)
    new_group[1:] = (t_sorted[1:] != t_sorted[:-1]) | (r_sorted[1:] != r_sorted[:-1])
    group_start = np.maximum.accumulate(np.where(new_group, np.arange(n), 0))
    rank_in_rel = np.empty(n, dtype=np.int64)
    rank_in_rel[order] = np.arange(n) - group_start
    # distinct relations per target
    pair_first = order[new_group]
    uniq_t, n_rel = np.unique(target[pair_first], return_counts=True)
    quota_by_t = dict(zip(uniq_t.tolist(), np.ceil(budget / n_rel).astype(np.int64).tolist()))
    quota = np.array([quota_by_t[t] for t in target.tolist()], dtype=np.int64)
    tier = (rank_in_rel >= quota).astype(np.int64)
    order2 = np.lexsort((edge_id, time_gap, -alpha, tier, target))
    t2 = target[order2]
    start2 = np.ones(n, dtype=bool)
    start2[1:] = t2[1:] != t2[:-1]
    gs2 = np.maximum.accumulate(np.where(start2, np.arange(n), 0))
    rank2 = np.arange(n) - gs2
    return np.sort(order2[rank2 < budget])


def _cap_frontier(keep: np.ndarray, cand: dict, alpha: np.ndarray, index: dict, cap: int, t_q: int) -> np.ndarray:
    dst = cand["dst_entity"][keep]
    fresh = np.array([int(e) not in index for e in dst], dtype=bool)
    if not fresh.any():
        return keep
    best: dict[int, tuple] = {}
    for k, e in zip(keep[fresh].tolist(), dst[fresh].tolist()):
        key = (-alpha[k], t_q - int(cand["time"][k]), int(cand["edge_id"][k]))
        if e not in best or key < best[e]:
            best[e] = key
    if len(best) <= cap:
        return keep
    chosen = {e for e, _ in sorted(best.items(), key=lambda kv: (kv[1], kv[0]))[:cap]}
    mask = np.array([(not f) or (int(e) in chosen) for e, f in zip(dst.tolist(), fresh.tolist())], dtype=bool)
    return keep[mask]


def dump_subgraphs(subgraphs: list[LayeredSubgraph], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sub in subgraphs:
            fh.write(json.dumps(sub.to_json()) + "\n")
