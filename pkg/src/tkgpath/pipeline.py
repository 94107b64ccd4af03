"""In-memory wiring of the three stages; the CLI persists each stage's output on top of this."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .config import PipelineConfig
from .editor import EditAudit, PathEditor
from .evaluation import EvalReport, corrupt_paths, evaluate_predictions
from .gnn import GnnConfig, TemporalGNN
from .graph import TemporalKnowledgeGraph, TemporalQuery
from .llm import BackendConfig, Gateway
from .paths import CandidateSet, ReasoningPath, extract_paths
from .semantic import SemanticEmbeddings, initialize_embeddings
from .time_encoding import RelationTimeFusion, TimeEncoder
from .transformer import FinalPrediction, PathTransformer

logger = logging.getLogger(__name__)


@dataclass
class QueryPaths:
    query: TemporalQuery
    candidates: CandidateSet
    paths: list[ReasoningPath]
    empty: bool = False
    audit: EditAudit | None = None
    edited: list[ReasoningPath] = field(default_factory=list)


def _seeds(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def sample_queries(queries: list[TemporalQuery], limit: int | None, rng: np.random.Generator) -> list[TemporalQuery]:
    if limit is None or len(queries) <= limit:
        return list(queries)
    idx = np.sort(rng.choice(len(queries), size=limit, replace=False))
    return [queries[i] for i in idx]


class Pipeline:
    def __init__(self, config: PipelineConfig, graph: TemporalKnowledgeGraph, gateway: Gateway | None = None):
        self.config = config
        self.graph = graph
        self.gateway = gateway
        (self.rng_embed, self.rng_time, self.rng_gnn, self.rng_tr, self.rng_train, self.rng_sample,
         self.rng_corrupt) = _seeds(config.seed, 7)
        self.embeddings: SemanticEmbeddings | None = None
        self.gnn: TemporalGNN | None = None
        self.transformer: PathTransformer | None = None

    # -- construction -----------------------------------------------------------

    def make_gateway(self) -> Gateway:
        if self.gateway is None:
            self.gateway = Gateway(self.config.gateway)
        return self.gateway

    def init_embeddings(self, allow_fallback: bool = False):
        gw = self.make_gateway()
        self.embeddings, table = initialize_embeddings(
            self.graph, gw, self.config.model.dim, self.rng_embed, allow_fallback
        )
        return table

    def set_embeddings(self, raw_entities: np.ndarray, raw_relations: np.ndarray) -> None:
        self.embeddings = SemanticEmbeddings(raw_entities, raw_relations, self.config.model.dim, self.rng_embed)

    def build_models(self) -> None:
        if self.embeddings is None:
            raise RuntimeError("embeddings must be initialised before the models")
        m = self.config.model
        self.time_encoder = TimeEncoder(m.time_dim, self.rng_time)
        self.fusion = RelationTimeFusion(m.dim, m.time_dim, self.rng_time)
        gcfg = GnnConfig(
            dim=m.dim,
            layers=m.layers,
            budget=m.budget,
            window=m.window,
            max_fanout=m.max_fanout,
            max_frontier=m.max_frontier,
            init_mode=m.init_mode,
            aggregate=m.aggregate,
            strict_loss=m.strict_loss,
        )
        self.gnn = TemporalGNN(gcfg, self.embeddings, self.time_encoder, self.fusion, self.rng_gnn)
        tr_time = self.time_encoder.copy() if m.separate_time_encoders else self.time_encoder
        self.transformer = PathTransformer(
            self.embeddings,
            tr_time,
            heads=m.heads,
            layers=m.transformer_layers,
            rng=self.rng_tr,
            finetune_embeddings=m.finetune_embeddings,
            train_time_encoder=m.separate_time_encoders,
            fallback_weight=m.fallback_weight,
        )

    def stage1_parameters(self) -> dict[str, ag.Tensor]:
        return self.gnn.named_parameters()

    def stage3_parameters(self) -> dict[str, ag.Tensor]:
        return self.transformer.named_parameters()

    def load_parameters(self, values: dict[str, np.ndarray], params: dict[str, ag.Tensor]) -> None:
        for name, p in params.items():
            if name not in values:
                raise KeyError(f"checkpoint lacks parameter {name}")
            if values[name].shape != p.data.shape:
                raise ag.DimensionError(f"{name}: checkpoint shape {values[name].shape} != {p.data.shape}")
            p.data = values[name].astype(np.float64).copy()
        if self.transformer is not None:
            self.transformer.refresh()

    # -- stages -------------------------------------------------------------------

    def train_queries(self) -> list[TemporalQuery]:
        qs = self.graph.queries("train", self.config.train.directions)
        return sample_queries(qs, self.config.train.max_train_queries, self.rng_sample)

    def train_gnn(self, queries: list[TemporalQuery] | None = None, epochs: int | None = None) -> list[float]:
        t = self.config.train
        queries = self.train_queries() if queries is None else queries
        losses = self.gnn.fit(queries, self.graph, t.gnn_epochs if epochs is None else epochs, t.batch_size, t.lr,
                              self.rng_train)
        self.transformer.refresh()
        return losses

    def extract(self, queries: list[TemporalQuery]) -> list[QueryPaths]:
        out = []
        k = self.config.model.top_k
        for q in queries:
            sub, scores = self.gnn.forward(q, self.graph)
            cands, paths = extract_paths(sub, scores, k)
            out.append(QueryPaths(q, cands, paths, sub.empty))
        return out

    def editor(self, mode: str | None = None, raw_times: bool | None = None) -> PathEditor:
        e = self.config.editor
        mode = e.mode if mode is None else mode
        gw = self.make_gateway() if mode == "llm" else None
        return PathEditor(
            self.graph,
            mode,
            gw,
            raw_times=e.raw_times if raw_times is None else raw_times,
            strict_parse=e.strict_parse,
            max_retries=e.max_retries,
        )

    def edit(self, extracted: list[QueryPaths], mode: str | None = None, raw_times: bool | None = None) -> list[QueryPaths]:
        ed = self.editor(mode, raw_times)
        results = ed.edit_many([(qp.query, qp.paths, qp.candidates.scores) for qp in extracted])
        out = []
        for qp, (refined, audit) in zip(extracted, results):
            out.append(QueryPaths(qp.query, qp.candidates, qp.paths, qp.empty, audit, refined))
        return out

    def corrupt(self, extracted: list[QueryPaths], ratio: float) -> tuple[list[QueryPaths], int]:
        out, total = [], 0
        for qp in extracted:
            bad, n = corrupt_paths(qp.paths, ratio, self.rng_corrupt, self.graph)
            total += n
            out.append(QueryPaths(qp.query, qp.candidates, bad, qp.empty))
        return out, total

    def train_aggregator(self, edited: list[QueryPaths], epochs: int | None = None) -> list[float]:
        t = self.config.train
        data = [(qp.query, qp.edited) for qp in edited]
        return self.transformer.fit(
            data, t.aggregator_epochs if epochs is None else epochs, t.batch_size, t.aggregator_lr or t.lr,
            self.rng_train,
        )

    def predict(self, edited: list[QueryPaths]) -> list[FinalPrediction | None]:
        out = []
        for qp in edited:
            if len(qp.candidates) == 0:
                out.append(None)
            else:
                out.append(self.transformer.predict(qp.query, qp.candidates, qp.edited))
        return out

    def evaluate(self, name: str, edited: list[QueryPaths], predictions: list[FinalPrediction | None]) -> EvalReport:
        score_maps = [p.score_map() if p is not None else {} for p in predictions]
        report = evaluate_predictions(name, score_maps, [qp.query for qp in edited], self.graph)
        audits = [qp.audit for qp in edited if qp.audit is not None]
        report.tokens = {
            "prompt": int(sum(a.prompt_tokens for a in audits)),
            "completion": int(sum(a.completion_tokens for a in audits)),
        }
        report.extra = {
            "empty_subgraphs": int(sum(qp.empty for qp in edited)),
            "fallbacks": int(sum(a.fallback for a in audits)),
        }
        return report


def offline_gateway(cache_dir: str | None = None, graph: TemporalKnowledgeGraph | None = None,
                    **kwargs) -> Gateway:
    from .editor import rule_responder

    cfg = BackendConfig(backend="offline", cache_dir=cache_dir, **kwargs)
    return Gateway(cfg, edit_rules=rule_responder(graph) if graph is not None else None)
