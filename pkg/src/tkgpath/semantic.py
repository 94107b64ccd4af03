"""Stage I embedding initialisation from generated entity/relation descriptions."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .graph import TemporalKnowledgeGraph
from .llm import BackendConfig, BackendError, ConsistencyError, Gateway, TransportError

logger = logging.getLogger(__name__)

KINDS = ("entity", "relation", "inverse-relation")

_INSTRUCTIONS = {
    "entity": "Describe the entity below in one concise sentence: who or what it is and the role it plays in political events.",
    "relation": "Describe the relation below in one concise sentence: what kind of event it denotes between a subject and an object.",
    "inverse-relation": (
        "Rewrite the relation below in its passive form and describe it in one concise sentence, "
        "so that the object of the original event becomes the subject."
    ),
}


def build_description_prompt(label: str, kind: str) -> str:
    if not label:
        raise ValueError("label must be non-empty")
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    return (
        "You are annotating a temporal knowledge graph of political events.\n"
        f"{_INSTRUCTIONS[kind]}\n"
        "Answer with the description only.\n"
        f"Kind: {kind}\n"
        f'Label: "{label}"\n'
    )


@dataclass
class DescriptionTable:
    entities: list[str]
    relations: list[str]

    def to_jsonl(self, path: str | Path, graph: TemporalKnowledgeGraph) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, text in enumerate(self.entities):
                fh.write(json.dumps({"id": i, "label": graph.entities.label(i), "kind": "entity", "text": text}) + "\n")
            for i, text in enumerate(self.relations):
                kind = "relation" if i < graph.n_base_relations else "inverse-relation"
                fh.write(json.dumps({"id": i, "label": graph.relations.label(i), "kind": kind, "text": text}) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "DescriptionTable":
        ents: dict[int, str] = {}
        rels: dict[int, str] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                row = json.loads(line)
                (ents if row["kind"] == "entity" else rels)[row["id"]] = row["text"]
        return cls([ents[i] for i in range(len(ents))], [rels[i] for i in range(len(rels))])


class MLP:
    """One hidden relu layer: x -> W2 relu(W1 x + b1) + b2."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, name: str = "mlp"):
        b1 = np.sqrt(6.0 / (d_in + d_hidden))
        b2 = np.sqrt(6.0 / (d_hidden + d_out))
        self.name = name
        self.w1 = ag.parameter(rng.uniform(-b1, b1, size=(d_hidden, d_in)), name=f"{name}.w1")
        self.b1 = ag.parameter(np.zeros(d_hidden), name=f"{name}.b1")
        self.w2 = ag.parameter(rng.uniform(-b2, b2, size=(d_out, d_hidden)), name=f"{name}.w2")
        self.b2 = ag.parameter(np.zeros(d_out), name=f"{name}.b2")

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def __call__(self, x) -> Tensor:
        hidden = ag.relu(ag.add(ag.matmul(x, ag.transpose(self.w1)), self.b1))
        return ag.add(ag.matmul(hidden, ag.transpose(self.w2)), self.b2)


class SemanticEmbeddings:
    """Frozen encoder output plus trainable projections to the model dimension."""

    def __init__(self, raw_entities: np.ndarray, raw_relations: np.ndarray, dim: int, rng: np.random.Generator):
        self.raw_entities = np.asarray(raw_entities, dtype=np.float64)
        self.raw_relations = np.asarray(raw_relations, dtype=np.float64)
        self.dim = dim
        d_w = self.raw_entities.shape[1]
        self.mlp_e = MLP(d_w, dim, dim, rng, name="mlp_e")
        self.mlp_r = MLP(d_w, dim, dim, rng, name="mlp_r")

    @property
    def d_w(self) -> int:
        return self.raw_entities.shape[1]

    def parameters(self) -> list[Tensor]:
        return self.mlp_e.parameters() + self.mlp_r.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        return {**self.mlp_e.named_parameters(), **self.mlp_r.named_parameters()}

    def entities(self, ids) -> Tensor:
        return self.mlp_e(Tensor(self.raw_entities[np.asarray(ids, dtype=np.int64)]))

    def relations(self, ids) -> Tensor:
        return self.mlp_r(Tensor(self.raw_relations[np.asarray(ids, dtype=np.int64)]))

    def entity_matrix(self) -> Tensor:
        return self.mlp_e(Tensor(self.raw_entities))

    def relation_matrix(self) -> Tensor:
        return self.mlp_r(Tensor(self.raw_relations))


def generate_descriptions(graph: TemporalKnowledgeGraph, gateway: Gateway) -> DescriptionTable:
    prompts = [build_description_prompt(lbl, "entity") for lbl in graph.entities.labels]
    for lbl in graph.base_relations.labels:
        prompts.append(build_description_prompt(lbl, "relation"))
    for lbl in graph.base_relations.labels:
        prompts.append(build_description_prompt(lbl, "inverse-relation"))
    with ThreadPoolExecutor(max_workers=gateway.config.concurrency) as pool:
        texts = list(pool.map(gateway.generate, prompts))
    n_e = graph.n_entities
    return DescriptionTable(texts[:n_e], texts[n_e:])


def initialize_embeddings(
    graph: TemporalKnowledgeGraph,
    gateway: Gateway,
    dim: int,
    rng: np.random.Generator | None = None,
    allow_fallback: bool = False,
) -> tuple[SemanticEmbeddings, DescriptionTable]:
    rng = rng or np.random.default_rng(0)
    try:
        table = generate_descriptions(graph, gateway)
        raw_e = gateway.embed(table.entities)
        raw_r = gateway.embed(table.relations)
    except (TransportError, BackendError, ConsistencyError) as exc:
        if not allow_fallback:
            raise
        logger.warning("gateway failed (%s); falling back to the offline backend", exc)
        offline = Gateway(BackendConfig(backend="offline", cache_dir=gateway.config.cache_dir))
        table = generate_descriptions(graph, offline)
        raw_e = offline.embed(table.entities)
        raw_r = offline.embed(table.relations)
    return SemanticEmbeddings(raw_e, raw_r, dim, rng), table
