import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tkgpath import autograd as ag
from tkgpath.autograd import Tensor, grad_check
from tkgpath.time_encoding import RelationTimeFusion, TimeEncoder, relation_time_embedding, time_features

GOLDEN = json.loads((Path(__file__).parent / "data" / "time_golden.json").read_text())


def test_zero_frequency_and_phase():
    enc = TimeEncoder(4)
    enc.omega.data[:] = 0.0
    enc.phase.data[:] = 0.0
    np.testing.assert_array_equal(time_features(7, enc).data, [0.5] * 4)


def test_golden_vectors():
    enc = TimeEncoder(GOLDEN["dim"], np.random.default_rng(GOLDEN["seed"]))
    np.testing.assert_array_equal(enc.omega.data, GOLDEN["omega"])
    np.testing.assert_allclose(enc(np.arange(10)).data, GOLDEN["features"], rtol=0, atol=1e-15)


@given(st.floats(0, 1e6), st.integers(1, 40), st.integers(0, 2**16))
def test_bounded_and_pure(t, dim, seed):
    enc = TimeEncoder(dim, np.random.default_rng(seed))
    a, b = enc(t).data, enc(t).data
    assert np.array_equal(a, b)
    assert np.all(np.abs(a) <= math.sqrt(1.0 / dim) + 1e-15)
    assert np.linalg.norm(a) <= 1.0 + 1e-12


def test_negative_time_rejected():
    with pytest.raises(ValueError):
        TimeEncoder(3)(-1)


def test_fusion_identity_block():
    rng = np.random.default_rng(0)
    d_r, d_t = 5, 3
    fusion = RelationTimeFusion(d_r, d_t, rng)
    fusion.weight.data = np.hstack([np.eye(d_r), np.zeros((d_r, d_t))])
    h = rng.normal(size=d_r)
    np.testing.assert_allclose(relation_time_embedding(Tensor(h), 4, fusion, TimeEncoder(d_t, rng)).data, h)


def test_fusion_time_block():
    rng = np.random.default_rng(1)
    d_r, d_t = 5, 3
    enc = TimeEncoder(d_t, rng)
    fusion = RelationTimeFusion(d_r, d_t, rng)
    w = np.zeros((d_r, d_r + d_t))
    w[:d_t, d_r:] = np.eye(d_t)
    fusion.weight.data = w
    out = relation_time_embedding(Tensor(np.zeros(d_r)), 9, fusion, enc).data
    np.testing.assert_allclose(out[:d_t], enc(9).data)
    np.testing.assert_array_equal(out[d_t:], 0.0)


def test_fusion_matches_triple_loop():
    rng = np.random.default_rng(2)
    d_r, d_t = 4, 3
    enc, fusion = TimeEncoder(d_t, rng), RelationTimeFusion(d_r, d_t, rng)
    h = rng.normal(size=(3, d_r))
    times = np.array([0.0, 5.0, 11.0])
    got = fusion(Tensor(h), enc(times)).data
    w = fusion.weight.data
    for n in range(3):
        z = list(h[n]) + [math.sqrt(1 / d_t) * math.cos(enc.omega.data[i] * times[n] + enc.phase.data[i]) for i in range(d_t)]
        for i in range(d_r):
            assert abs(got[n, i] - sum(w[i, k] * z[k] for k in range(d_r + d_t))) < 1e-12
    single = fusion(Tensor(h[1]), enc(times[1])).data
    np.testing.assert_allclose(single, got[1], atol=1e-14)


def test_fusion_dimension_error():
    fusion = RelationTimeFusion(4, 2)
    with pytest.raises(ag.DimensionError):
        fusion(Tensor(np.zeros(3)), Tensor(np.zeros(2)))


@pytest.mark.parametrize("seed", range(3))
def test_fusion_gradients(seed):
    rng = np.random.default_rng(seed)
    enc, fusion = TimeEncoder(3, rng), RelationTimeFusion(4, 3, rng)
    h = ag.parameter(rng.normal(size=(2, 4)))
    w = rng.normal(size=(2, 4))
    res = grad_check(lambda: ag.sum(ag.mul(fusion(h, enc(np.array([1.0, 8.0]))), w)),
                     [h, fusion.weight, enc.omega, enc.phase])
    assert res.max_rel_error < 1e-4


def test_copy_is_independent():
    enc = TimeEncoder(3)
    other = enc.copy()
    other.omega.data += 1
    assert not np.array_equal(enc.omega.data, other.omega.data)
