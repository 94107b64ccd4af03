"""Finite-difference checks for every differentiable op and for the two composite stages."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor, grad_check
from .gnn import GnnConfig, TemporalGNN, attention_score
from .graph import Quadruple, TemporalKnowledgeGraph, TemporalQuery, Vocab
from .paths import ReasoningPath
from .semantic import MLP, SemanticEmbeddings
from .time_encoding import RelationTimeFusion, TimeEncoder
from .transformer import PathTransformer

TOLERANCE = 1e-4


@dataclass
class CaseResult:
    name: str
    max_rel_error: float
    checked: int
    skipped: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE and self.checked > 0


def _p(rng, *shape, scale=1.0, positive=False):
    x = rng.normal(0, scale, size=shape)
    return ag.parameter(np.abs(x) + 0.5 if positive else x)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    """Scalar probe sum(w * out) so every output coordinate contributes an O(1) gradient."""
    return ag.sum(ag.mul(out, w))


def _unary(op) -> Callable:
    def case(rng):
        a = _p(rng, 3, 4)
        w = rng.normal(size=(3, 4))
        return (lambda: _weighted(op(a), w)), [a]

    return case


def _binary(op, positive_b=False) -> Callable:
    def case(rng):
        a = _p(rng, 3, 4)
        b = _p(rng, 4, positive=positive_b)  # broadcast over rows
        w = rng.normal(size=(3, 4))
        return (lambda: _weighted(op(a, b), w)), [a, b]

    return case


def _matmul_case(rng):
    a, b, v = _p(rng, 3, 4), _p(rng, 4, 2), _p(rng, 4)
    w1, w2 = rng.normal(size=(3, 2)), rng.normal(size=3)
    return (lambda: ag.add(_weighted(ag.matmul(a, b), w1), _weighted(ag.matmul(a, v), w2))), [a, b, v]


def _shape_case(rng):
    a, b = _p(rng, 2, 3), _p(rng, 4, 3)
    w = rng.normal(size=(3, 6))
    idx = np.array([0, 2, 2, 5, 1])

    def fn():
        c = ag.concat([a, b], axis=0)  # 6 x 3
        t = ag.transpose(c)  # 3 x 6
        r = ag.reshape(ag.reshape(t, (18,)), (3, 6))
        g = ag.take(ag.reshape(c, (18,)), idx)
        return ag.add(_weighted(r, w), ag.sum(ag.mul(g, np.arange(1.0, 6.0))))

    return fn, [a, b]


def _reduce_case(rng):
    a = _p(rng, 4, 3)
    w = rng.normal(size=3)
    seg = np.array([0, 1, 0, 2])

    def fn():
        s = ag.add(_weighted(ag.sum(a, axis=0), w), _weighted(ag.mean(a, axis=1), rng_w))
        return ag.add(s, _weighted(ag.segment_sum(a, seg, 3), seg_w))

    rng_w, seg_w = rng.normal(size=4), rng.normal(size=(3, 3))
    return fn, [a]


def _layer_norm_case(rng):
    a, g, b = _p(rng, 3, 5), _p(rng, 5), _p(rng, 5)
    w = rng.normal(size=(3, 5))
    return (lambda: _weighted(ag.layer_norm(a, g, b), w)), [a, g, b]


def _softmax_case(rng):
    a = _p(rng, 3, 4)
    w = rng.normal(size=(3, 4))
    return (lambda: ag.add(_weighted(ag.softmax(a, axis=1), w), _weighted(ag.log_softmax(a, axis=1), w))), [a]


def _time_case(rng):
    enc = TimeEncoder(6, rng)
    fusion = RelationTimeFusion(4, 6, rng)
    h_r = _p(rng, 3, 4)
    times = np.array([0.0, 3.0, 17.0])
    w = rng.normal(size=(3, 4))
    return (lambda: _weighted(fusion(h_r, enc(times)), w)), [h_r, enc.omega, enc.phase, fusion.weight]


def _mlp_case(rng):
    mlp = MLP(5, 6, 4, rng)
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(3, 4))
    return (lambda: _weighted(mlp(Tensor(x)), w)), mlp.parameters()


def _attention_case(rng):
    d, da = 4, 5
    w_att, v_att = _p(rng, da, 3 * d), _p(rng, da)
    hs, hrt, hq = _p(rng, 3, d), _p(rng, 3, d), _p(rng, d)
    w = rng.normal(size=3)
    return (lambda: _weighted(attention_score(hs, hrt, hq, w_att, v_att), w)), [w_att, v_att, hs, hrt, hq]


def toy_graph() -> TemporalKnowledgeGraph:
    ents = Vocab(["Police (India)", "Citizen (India)", "Government (India)", "Court (India)", "Media (Iran)"])
    rels = Vocab(["Criticize", "Consult", "Arrest"])
    train = [
        Quadruple(0, 0, 1, 1), Quadruple(0, 1, 2, 1), Quadruple(1, 2, 3, 2), Quadruple(2, 1, 4, 3),
        Quadruple(1, 1, 4, 3), Quadruple(3, 0, 4, 4), Quadruple(4, 2, 0, 4),
    ]
    valid = [Quadruple(0, 0, 3, 6)]
    test = [Quadruple(0, 0, 4, 7)]
    return TemporalKnowledgeGraph(ents, rels, train, valid, test, dt.date(2014, 1, 1))


def _toy_models(rng, dim=6, time_dim=3, init_mode="query"):
    g = toy_graph()
    emb = SemanticEmbeddings(rng.normal(size=(g.n_entities, 5)), rng.normal(size=(g.n_relations, 5)), dim, rng)
    enc = TimeEncoder(time_dim, rng)
    fusion = RelationTimeFusion(dim, time_dim, rng)
    gnn = TemporalGNN(GnnConfig(dim=dim, layers=3, budget=4, init_mode=init_mode), emb, enc, fusion, rng)
    return g, gnn


def gnn_chain_case(init_mode: str = "query"):
    def case(rng):
        g, gnn = _toy_models(rng, init_mode=init_mode)
        q = TemporalQuery(0, 0, 6, 3)
        sub = gnn.expand_subgraph(q, g)  # sampling decisions frozen here
        params = gnn.parameters()

        def fn():
            loss = gnn.query_loss(q, g, sub)
            return loss

        return fn, params

    return case


def transformer_chain_case(rng):
    g, gnn = _toy_models(rng)
    tr = PathTransformer(gnn.embeddings, gnn.time_encoder, heads=2, layers=2, rng=rng,
                         finetune_embeddings=True, train_time_encoder=True)
    q = TemporalQuery(0, 0, 6, 4)
    paths = [
        ReasoningPath(q, 4, [Quadruple(0, 1, 2, 1), Quadruple(2, 1, 4, 3)]),
        ReasoningPath(q, 4, [Quadruple(0, 0, 1, 1), Quadruple(1, 1, 4, 3)]),
        ReasoningPath(q, 3, [Quadruple(0, 0, 1, 1), Quadruple(1, 2, 3, 2)]),
        ReasoningPath(q, 1, [Quadruple(0, 0, 1, 1)]),
    ]
    return (lambda: tr.query_loss(q, paths)), tr.parameters()


CASES: dict[str, Callable] = {
    "add": _binary(ag.add),
    "sub": _binary(ag.sub),
    "mul": _binary(ag.mul),
    "div": _binary(ag.div, positive_b=True),
    "scale": _unary(lambda a: ag.scale(a, -1.7)),
    "relu": _unary(ag.relu),
    "sigmoid": _unary(ag.sigmoid),
    "tanh": _unary(ag.tanh),
    "softmax/log_softmax": _softmax_case,
    "sum/mean/segment_sum": _reduce_case,
    "matmul": _matmul_case,
    "concat/transpose/reshape/take": _shape_case,
    "layer_norm": _layer_norm_case,
    "time encoding + fusion": _time_case,
    "mlp": _mlp_case,
    "attention_score": _attention_case,
    "gnn chain": gnn_chain_case("query"),
    "gnn chain (self init)": gnn_chain_case("self"),
    "transformer chain": transformer_chain_case,
}


# composite stages have thousands of coordinates; each seed checks a different random subset
SAMPLED = {"gnn chain": 120, "gnn chain (self init)": 120, "transformer chain": 150}


def run_gradchecks(seeds=range(10), names=None, step: float = 1e-3) -> list[CaseResult]:
    out = []
    for name, case in CASES.items():
        if names and name not in names:
            continue
        worst, checked, skipped = 0.0, 0, 0
        for seed in seeds:
            fn, params = case(np.random.default_rng(seed))
            res = grad_check(fn, params, step=step, seeds=(seed,), max_coords=SAMPLED.get(name))
            worst = max(worst, res.max_rel_error)
            checked += res.checked
            skipped += res.skipped_kinks + res.skipped_zero
        out.append(CaseResult(name, worst, checked, skipped))
    return out
