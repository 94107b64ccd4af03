from pathlib import Path

import httpx
import numpy as np
import pytest

from tkgpath import autograd as ag
from tkgpath.autograd import Tensor, grad_check
from tkgpath.graph import Quadruple, TemporalKnowledgeGraph, Vocab
from tkgpath.llm import BackendConfig, Gateway, TransportError
from tkgpath.semantic import DescriptionTable, SemanticEmbeddings, build_description_prompt, initialize_embeddings

GOLDEN = Path(__file__).parent / "data" / "description_prompts.txt"


def tiny_graph(labels=("Russia", "Police (India)", "Citizen (India)")):
    ents = Vocab(labels)
    rels = Vocab(["Make statement", "Arrest"])
    return TemporalKnowledgeGraph(ents, rels, [Quadruple(0, 0, 1, 0)], [Quadruple(1, 1, 2, 1)], [Quadruple(2, 0, 0, 2)])


def test_prompt_templates():
    inv = build_description_prompt("Make statement", "inverse-relation")
    assert "passive form" in inv
    assert build_description_prompt("Russia", "entity").count("Russia") == 1
    with pytest.raises(ValueError):
        build_description_prompt("", "entity")


def test_golden_prompts():
    labels = [("Barack Obama", "entity"), ("Police (India)", "entity"), ("Make statement", "relation"),
              ("Make statement", "inverse-relation"), ("Arrest, detain, or charge with legal action", "relation")]
    text = "".join(build_description_prompt(lbl, kind) + "---\n" for lbl, kind in labels)
    assert text == GOLDEN.read_text(encoding="utf-8")


def test_shapes_include_inverse_relations():
    g = tiny_graph()
    emb, table = initialize_embeddings(g, Gateway(), 16, np.random.default_rng(0))
    assert emb.entity_matrix().shape == (3, 16)
    assert emb.relation_matrix().shape == (4, 16)
    assert len(table.entities) == 3 and len(table.relations) == 4
    assert "passive form" in table.relations[2]


def test_identical_descriptions_identical_rows():
    gw = Gateway()
    text = build_description_prompt("Russia", "entity")
    raw = gw.embed([gw.generate(text), gw.generate(text), "other"])
    emb = SemanticEmbeddings(raw, raw[:1], 8, np.random.default_rng(1))
    m = emb.entity_matrix().data
    assert np.array_equal(m[0], m[1]) and not np.array_equal(m[0], m[2])


def test_identity_mlp_returns_raw():
    rng = np.random.default_rng(0)
    raw = np.abs(rng.normal(size=(4, 6)))  # positive so relu is the identity
    emb = SemanticEmbeddings(raw, raw[:2], 6, rng)
    for mlp in (emb.mlp_e, emb.mlp_r):
        mlp.w1.data = np.eye(6)
        mlp.w2.data = np.eye(6)
        mlp.b1.data[:] = 0
        mlp.b2.data[:] = 0
    np.testing.assert_array_equal(emb.entity_matrix().data, raw)


def test_warm_cache_rerun_is_bitwise(tmp_path):
    g = tiny_graph()
    gw = Gateway(BackendConfig(cache_dir=str(tmp_path)))
    a, _ = initialize_embeddings(g, gw, 8, np.random.default_rng(3))
    gw2 = Gateway(BackendConfig(cache_dir=str(tmp_path)))
    b, _ = initialize_embeddings(g, gw2, 8, np.random.default_rng(3))
    assert gw2.usage.cache_hits > 0
    assert np.array_equal(a.entity_matrix().data, b.entity_matrix().data)
    assert np.array_equal(a.relation_matrix().data, b.relation_matrix().data)


def _failing_gateway():
    def handler(request):
        raise httpx.ConnectError("down", request=request)

    cfg = BackendConfig(backend="remote", endpoint="http://down.test", max_attempts=1)
    return Gateway(cfg, transport=httpx.MockTransport(handler), sleep=lambda s: None)


def test_fallback_only_when_allowed():
    g = tiny_graph()
    with pytest.raises(TransportError):
        initialize_embeddings(g, _failing_gateway(), 8)
    emb, table = initialize_embeddings(g, _failing_gateway(), 8, allow_fallback=True)
    assert emb.entity_matrix().shape == (3, 8)
    assert table.entities[0].startswith("Entity Russia")


def test_description_jsonl_roundtrip(tmp_path):
    g = tiny_graph()
    _, table = initialize_embeddings(g, Gateway(), 8)
    table.to_jsonl(tmp_path / "d.jsonl", g)
    back = DescriptionTable.from_jsonl(tmp_path / "d.jsonl")
    assert back == table


def test_gradients_through_projection():
    rng = np.random.default_rng(4)
    emb = SemanticEmbeddings(rng.normal(size=(5, 4)), rng.normal(size=(3, 4)), 6, rng)
    w = rng.normal(size=(5, 6))
    v = rng.normal(size=(3, 6))
    res = grad_check(
        lambda: ag.add(ag.sum(ag.mul(emb.entity_matrix(), w)), ag.sum(ag.mul(emb.relation_matrix(), v))),
        emb.parameters(),
    )
    assert res.max_rel_error < 1e-4 and res.checked > 50


def test_row_lookup_matches_matrix():
    rng = np.random.default_rng(5)
    emb = SemanticEmbeddings(rng.normal(size=(5, 4)), rng.normal(size=(3, 4)), 6, rng)
    np.testing.assert_array_equal(emb.entities([3, 1]).data, emb.entity_matrix().data[[3, 1]])
    assert isinstance(emb.relations([0]), Tensor)
