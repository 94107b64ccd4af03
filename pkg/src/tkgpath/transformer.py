"""Stage III: relational self-attention over refined paths and per-candidate validity scores.

All paths of one query are packed into a single token matrix; a block mask keeps attention
inside each path. Every path is preceded by a query token (query entity + query relation at
time gap 0) so the encoding is conditioned on what is asked.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Adam, Tensor
from .graph import TemporalQuery
from .paths import CandidateSet, ReasoningPath
from .semantic import SemanticEmbeddings
from .time_encoding import TimeEncoder

logger = logging.getLogger(__name__)

_NEG = -1e30


class PredictionError(RuntimeError):
    pass


def _xavier(rng, shape):
    bound = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape)


class TransformerParams:
    def __init__(self, dim: int, heads: int = 1, layers: int = 1, rng: np.random.Generator | None = None):
        if dim % heads:
            raise ag.DimensionError(f"dim {dim} not divisible by {heads} heads")
        rng = rng or np.random.default_rng(0)
        self.dim, self.heads, self.n_layers = dim, heads, layers
        self.d_k = dim // heads
        self.layers = []
        for l in range(layers):
            self.layers.append(
                {
                    "w_q": ag.parameter(_xavier(rng, (dim, dim)), name=f"tr.{l}.w_q"),
                    "w_k": ag.parameter(_xavier(rng, (dim, dim)), name=f"tr.{l}.w_k"),
                    "w_kr": ag.parameter(_xavier(rng, (dim, dim)), name=f"tr.{l}.w_kr"),
                    "w_v": ag.parameter(_xavier(rng, (dim, dim)), name=f"tr.{l}.w_v"),
                    "ln_g": ag.parameter(np.ones(dim), name=f"tr.{l}.ln_g"),
                    "ln_b": ag.parameter(np.zeros(dim), name=f"tr.{l}.ln_b"),
                }
            )
        self.w_o = ag.parameter(_xavier(rng, (dim, dim + 1)) * 0.5, name="tr.w_o")

    def parameters(self) -> list[Tensor]:
        return [p for lay in self.layers for p in lay.values()] + [self.w_o]

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}


@dataclass
class PathSequence:
    """Token matrix of one path (one row per step) plus the query token that precedes it."""

    tokens: Tensor
    query_token: Tensor
    relations: Tensor
    indicator: np.ndarray
    candidate: int
    tag: str = "gnn-extracted"

    def __len__(self) -> int:
        return self.tokens.shape[0]


@dataclass
class FinalPrediction:
    query: TemporalQuery
    entities: list[int]
    scores: list[float]
    provenance: list[str]

    @property
    def predicted(self) -> int:
        return self.ranked()[0][0]

    def ranked(self) -> list[tuple[int, float, str]]:
        order = np.lexsort((np.asarray(self.entities), -np.asarray(self.scores)))
        return [(self.entities[i], self.scores[i], self.provenance[i]) for i in order]

    def score_map(self) -> dict[int, float]:
        return dict(zip(self.entities, self.scores))

    def to_json(self) -> dict:
        q = self.query
        return {
            "query": {"s": q.subject, "r": q.relation, "t": q.time, "gold": q.gold},
            "ranked": [{"entity": e, "score": s, "provenance": p} for e, s, p in self.ranked()],
        }


def pad_time(phi: Tensor, dim: int) -> Tensor:
    extra = dim - phi.shape[-1]
    if extra < 0:
        raise ag.DimensionError(f"time features ({phi.shape[-1]}) wider than model dim {dim}")
    if extra == 0:
        return phi
    return ag.concat([phi, Tensor(np.zeros(phi.shape[:-1] + (extra,)))], axis=-1)


def relational_attention(x, rel_keys, mask_sub, block, layer: dict, heads: int = 1):
    """One relational self-attention layer over packed tokens.

    ``rel_keys`` row u holds the embedding of the relation linking token u to token u+1;
    ``mask_sub`` marks those (u+1, u) pairs and ``block`` is the additive mask (0 inside a path,
    -inf elsewhere). Returns (attention matrix, layer output).
    """
    x = ag.as_tensor(x)
    d = x.shape[1]
    d_k = d // heads
    q_all = ag.matmul(x, layer["w_q"])
    k_all = ag.matmul(x, layer["w_k"])
    kr_all = ag.matmul(ag.as_tensor(rel_keys), layer["w_kr"])
    v_all = ag.matmul(x, layer["w_v"])
    outs, attn = [], None
    for h in range(heads):
        cols = np.arange(h * d_k, (h + 1) * d_k)
        q, k, kr, v = (ag.take(m, cols, axis=1) if heads > 1 else m for m in (q_all, k_all, kr_all, v_all))
        s = ag.add(ag.matmul(q, ag.transpose(k)), ag.mul(ag.matmul(q, ag.transpose(kr)), mask_sub))
        s = ag.add(ag.scale(s, 1.0 / math.sqrt(d_k)), block)
        a = ag.softmax(s, axis=1)
        attn = a if attn is None else attn
        outs.append(ag.matmul(a, v))
    ctx = outs[0] if heads == 1 else ag.concat(outs, axis=1)
    out = ag.layer_norm(ag.add(x, ctx), layer["ln_g"], layer["ln_b"])
    return attn, out


class PathTransformer:
    def __init__(
        self,
        embeddings: SemanticEmbeddings,
        time_encoder: TimeEncoder,
        heads: int = 1,
        layers: int = 1,
        rng: np.random.Generator | None = None,
        finetune_embeddings: bool = False,
        train_time_encoder: bool = False,
        fallback_weight: float = 1.0,
        relative_time: bool = True,
    ):
        self.embeddings = embeddings
        self.time_encoder = time_encoder
        self.dim = embeddings.dim
        self.params = TransformerParams(self.dim, heads, layers, rng)
        self.finetune_embeddings = finetune_embeddings
        self.train_time_encoder = train_time_encoder
        self.fallback_weight = fallback_weight
        self.relative_time = relative_time
        self._frozen: tuple[np.ndarray, np.ndarray] | None = None

    def parameters(self) -> list[Tensor]:
        ps = self.params.parameters()
        if self.finetune_embeddings:
            ps = ps + self.embeddings.parameters()
        if self.train_time_encoder:
            ps = ps + self.time_encoder.parameters()
        return ps

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.params.named_parameters())
        if self.finetune_embeddings:
            out.update(self.embeddings.named_parameters())
        if self.train_time_encoder:
            out.update(self.time_encoder.named_parameters("tr.time"))
        return out

    def refresh(self) -> None:
        """Drop the cached frozen embedding tables (call after Stage I parameters change)."""
        self._frozen = None

    def _tables(self):
        if self.finetune_embeddings:
            return self.embeddings.entity_matrix(), self.embeddings.relation_matrix()
        if self._frozen is None:
            with ag.no_grad():
                self._frozen = (self.embeddings.entity_matrix().data, self.embeddings.relation_matrix().data)
        return Tensor(self._frozen[0]), Tensor(self._frozen[1])

    def _phi(self, gaps: np.ndarray) -> Tensor:
        if self.train_time_encoder:
            return self.time_encoder(gaps)
        with ag.no_grad():
            return Tensor(self.time_encoder(gaps).data)

    def _time_arg(self, query: TemporalQuery, times: np.ndarray) -> np.ndarray:
        times = np.asarray(times, dtype=np.float64)
        return query.time - times if self.relative_time else times

    # -- sequences --------------------------------------------------------------

    def build_input_sequence(self, path: ReasoningPath, tables=None) -> PathSequence:
        if not path.steps:
            raise ValueError("empty path")
        ent, rel = tables or self._tables()
        q = path.query
        objs = np.array([st.object for st in path.steps], dtype=np.int64)
        rels = np.array([st.relation for st in path.steps], dtype=np.int64)
        times = np.array([st.time for st in path.steps], dtype=np.float64)
        h_r = ag.take(rel, rels)
        phi = pad_time(self._phi(self._time_arg(q, times)), self.dim)
        tokens = ag.add(ag.add(ag.take(ent, objs), h_r), phi)
        q_phi = pad_time(self._phi(self._time_arg(q, np.array([q.time], dtype=np.float64))), self.dim)
        q_tok = ag.add(ag.add(ag.take(ent, [q.subject]), ag.take(rel, [q.relation])), q_phi)
        n = len(objs)
        ind = np.zeros((n, n))
        if n > 1:
            ind[np.arange(1, n), np.arange(n - 1)] = 1.0
        return PathSequence(tokens, q_tok, h_r, ind, path.candidate, path.tag)

    def _pack(self, seqs: list[PathSequence]):
        """Concatenate [query token; path tokens] blocks with block mask and relation-link mask."""
        rows, rel_rows, sizes = [], [], []
        zero = Tensor(np.zeros((1, self.dim)))
        for s in seqs:
            rows += [s.query_token, s.tokens]
            rel_rows += [s.relations, zero]  # relation linking token u -> u+1; none after the last
            sizes.append(len(s) + 1)
        x = ag.concat(rows, axis=0)
        rk = ag.concat(rel_rows, axis=0)
        total = sum(sizes)
        block = np.full((total, total), _NEG)
        sub = np.zeros((total, total))
        seg = np.empty(total, dtype=np.int64)
        start = 0
        for j, n in enumerate(sizes):
            block[start : start + n, start : start + n] = 0.0
            idx = np.arange(start, start + n - 1)
            sub[idx + 1, idx] = 1.0
            seg[start : start + n] = j
            start += n
        return x, rk, sub, block, seg, sizes

    def encode_paths(self, seqs: list[PathSequence]) -> Tensor:
        """Mean-pooled final representations of the path tokens, one row per sequence."""
        x, rk, sub, block, seg, sizes = self._pack(seqs)
        for lay in self.params.layers:
            _, x = relational_attention(x, rk, sub, block, lay, self.params.heads)
        is_path = np.ones(len(seg), dtype=bool)
        is_path[np.cumsum([0] + sizes[:-1])] = False
        rows = np.nonzero(is_path)[0]
        pooled = ag.segment_sum(ag.take(x, rows), seg[rows], len(seqs))
        counts = np.array([n - 1 for n in sizes], dtype=np.float64).reshape(-1, 1)
        return ag.div(pooled, Tensor(counts))

    def encode_path(self, seq: PathSequence) -> Tensor:
        return ag.reshape(self.encode_paths([seq]), (-1,))

    def path_scores(self, paths: list[ReasoningPath]) -> Tensor:
        """Validity score h^T W_o [h_candidate; 1] for every path."""
        tables = self._tables()
        seqs = [self.build_input_sequence(p, tables) for p in paths]
        h = self.encode_paths(seqs)
        cand = ag.take(tables[0], [p.candidate for p in paths])
        cand = ag.concat([cand, Tensor(np.ones((len(paths), 1)))], axis=1)
        return ag.sum(ag.mul(ag.matmul(h, self.params.w_o), cand), axis=1)

    # -- prediction ---------------------------------------------------------------

    def _candidate_scores(self, paths: list[ReasoningPath], order: list[int]):
        """Per-candidate max over its path scores: (tensor of maxima, best path index per candidate)."""
        scores = self.path_scores(paths)
        vals = scores.data
        owner = np.array([p.candidate for p in paths])
        best = []
        for e in order:
            idx = np.nonzero(owner == e)[0]
            best.append(int(idx[np.argmax(vals[idx])]))
        return ag.take(scores, best), best

    def predict(
        self, query: TemporalQuery, candidates: CandidateSet, paths: list[ReasoningPath]
    ) -> FinalPrediction:
        if len(candidates) == 0:
            raise PredictionError(f"no candidates for {query}")
        ents = list(candidates.entities)
        gnn = np.asarray(candidates.scores, dtype=np.float64)
        p = np.exp(gnn - gnn.max())
        p /= p.sum()
        with_paths = sorted({pp.candidate for pp in paths} & set(ents))
        scores = np.zeros(len(ents))
        prov = ["gnn-fallback"] * len(ents)
        lam = self.fallback_weight
        if with_paths:
            with ag.no_grad():
                t, best = self._candidate_scores(paths, with_paths)
            tv = t.data
            floor = float(tv.min()) - 1.0 - lam
            pos = {e: i for i, e in enumerate(ents)}
            scores[:] = floor + lam * p
            for e, v, b in zip(with_paths, tv, best):
                scores[pos[e]] = float(v)
                prov[pos[e]] = f"path:{b}"
        else:
            scores[:] = lam * p
        return FinalPrediction(query, ents, scores.tolist(), prov)

    def query_loss(self, query: TemporalQuery, paths: list[ReasoningPath]) -> Tensor | None:
        """Cross-entropy of the gold over path-bearing candidates; None if gold has no path."""
        cands = sorted({p.candidate for p in paths})
        if query.gold is None or query.gold not in cands:
            return None
        t, _ = self._candidate_scores(paths, cands)
        logp = ag.log_softmax(t)
        return ag.scale(ag.take(logp, [cands.index(query.gold)]), -1.0)

    def train_aggregator(
        self,
        batch: list[tuple[TemporalQuery, list[ReasoningPath]]],
        optimizer: Adam,
    ) -> tuple[float, int]:
        """One Adam step over a batch; returns (summed loss, skipped query count)."""
        optimizer.zero_grad()
        losses, skipped = [], 0
        for q, paths in batch:
            loss = self.query_loss(q, paths) if paths else None
            if loss is None:
                skipped += 1
            else:
                losses.append(loss)
        if not losses:
            return 0.0, skipped
        total = ag.sum(ag.concat(losses, axis=0))
        ag.backward(total)
        optimizer.step()
        if self.finetune_embeddings:
            self.refresh()
        return float(total.data), skipped

    def fit(
        self,
        data: list[tuple[TemporalQuery, list[ReasoningPath]]],
        epochs: int,
        batch_size: int = 64,
        lr: float = 1e-3,
        rng: np.random.Generator | None = None,
    ) -> list[float]:
        rng = rng or np.random.default_rng(0)
        opt = Adam(self.parameters(), lr=lr)
        usable = [d for d in data if d[1] and d[0].gold in {p.candidate for p in d[1]}]
        logger.info("aggregator: %d of %d training queries have a gold path", len(usable), len(data))
        history = []
        for epoch in range(epochs):
            order = rng.permutation(len(usable))
            total = 0.0
            for start in range(0, len(order), batch_size):
                loss, _ = self.train_aggregator([usable[i] for i in order[start : start + batch_size]], opt)
                total += loss
            history.append(total / max(len(usable), 1))
            logger.info("aggregator epoch %d loss %.5f", epoch + 1, history[-1])
        return history
