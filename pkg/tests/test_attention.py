#!/usr/bin/env python3
"""
Tests for the attention module: softmax and SLA forwards, the naive SLA
reference, grid handling and the rank diagnostic.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add the project root to the Python path
sys.path.insert(0, str(Path(__file__).parent.parent))

import attention
from tensor_core import Tensor, ShapeMismatch, no_grad
from attention import (
    AttentionParams, GridMismatch, TokenGrid, attention_map_rank, sla_attention, sla_naive_oracle, sla_similarity,
    softmax_attention, softmax_attention_map,
)


def _params(c=8, heads=2, dtype=np.float64, seed=0):
    return AttentionParams.init(c, heads, 3, np.random.default_rng(seed), dtype)


def test_token_grid():
    assert TokenGrid.for_tokens(12) == TokenGrid(3, 4), "12 tokens lay out as 3x4"
    assert TokenGrid.for_tokens(7) == TokenGrid(1, 7), "a prime count is a single row"
    with pytest.raises(GridMismatch):
        TokenGrid(0, 3)
    with pytest.raises(GridMismatch):
        TokenGrid(2, 2).check(5)


def test_sla_matches_naive_reference():
    """The linear-order computation equals the quadratic float64 reference."""
    rng = np.random.default_rng(1)
    for heads in (1, 2, 4):
        p = _params(c=8, heads=heads, seed=heads)
        grid = TokenGrid(3, 5)
        x = Tensor(rng.uniform(-1, 1, (2, grid.tokens, 8)))
        fast = sla_attention(x, p, grid).data
        slow = sla_naive_oracle(x, p, grid).data
        assert np.max(np.abs(fast - slow)) <= 1e-10, f"{heads} heads: SLA deviates from the reference"


def test_sla_single_token_and_unbatched_input():
    p = _params()
    x = Tensor(np.random.default_rng(2).normal(size=(1, 8)))
    out = sla_attention(x, p, TokenGrid(1, 1))
    assert out.shape == (1, 8), "unbatched (N, C) input keeps its shape"
    assert np.allclose(out.data, sla_naive_oracle(x, p, TokenGrid(1, 1)).data), "N = 1 matches the reference"


def test_sla_zero_similarity_rows_are_finite():
    """All-negative queries give zero similarity; the attention term is then 0 and finite."""
    p = _params(c=4, heads=1)
    p.w_q = Tensor(-np.eye(4))
    p.b_q = Tensor(np.zeros(4))
    x = Tensor(np.abs(np.random.default_rng(3).normal(size=(4, 4))) + 0.1)
    out = sla_attention(x, p, TokenGrid(2, 2)).data
    assert np.all(np.isfinite(out)), "zero similarity must not produce NaN"
    assert np.allclose(out, sla_naive_oracle(x, p, TokenGrid(2, 2)).data)


def test_sla_worked_example_one_channel():
    """Q = [1, -1], K = [2, -3], V = [10, 20] with a zero kernel gives [10, 0]."""
    p = AttentionParams(
        w_q=Tensor(np.array([[1.0]])), w_k=Tensor(np.array([[2.5]])), w_v=Tensor(np.array([[-5.0]])),
        w_o=Tensor(np.array([[1.0]])),
        b_q=Tensor(np.array([0.0])), b_k=Tensor(np.array([-0.5])), b_v=Tensor(np.array([15.0])),
        b_o=Tensor(np.array([0.0])),
        dwc_kernel=Tensor(np.zeros((1, 3, 3))), heads=1,
    )
    p.validate()
    x = Tensor(np.array([[1.0], [-1.0]]))
    assert np.allclose((x @ p.w_k + p.b_k).data.ravel(), [2.0, -3.0]), "keys of the worked example"
    assert np.allclose((x @ p.w_v + p.b_v).data.ravel(), [10.0, 20.0]), "values of the worked example"

    out = sla_attention(x, p, TokenGrid(1, 2)).data.ravel()
    assert out[0] == pytest.approx(10.0, rel=1e-5), "the only positive query sees the only positive key"
    assert out[1] == 0.0, "a zero-similarity query gets exactly 0 from the attention branch"


def test_sla_grid_mismatch():
    with pytest.raises(GridMismatch):
        sla_attention(Tensor(np.ones((6, 8))), _params(), TokenGrid(2, 2))


def test_softmax_attention_uniform_for_identical_tokens():
    """Identical tokens attend uniformly, so the output equals the projected value."""
    p = _params()
    x = Tensor(np.tile(np.random.default_rng(4).normal(size=(1, 8)), (5, 1)))
    out = softmax_attention(x, p).data
    v = x.data[0] @ p.w_v.data + p.b_v.data
    assert np.allclose(out, v @ p.w_o.data + p.b_o.data), "uniform attention returns V"


def test_softmax_attention_chunking_is_exact(monkeypatch):
    """Query chunks without gradient recording give the same result as the full score matrix."""
    p = _params(c=8, heads=2)
    x = Tensor(np.random.default_rng(5).normal(size=(1, 10, 8)))
    full = softmax_attention(x, p).data
    monkeypatch.setattr(attention, "QUERY_CHUNK", 3)
    with no_grad():
        chunked = softmax_attention(x, p).data
    assert np.allclose(full, chunked, atol=1e-12), "chunked evaluation should be exact"


def test_attention_shape_errors():
    with pytest.raises(ShapeMismatch):
        softmax_attention(Tensor(np.ones((2, 3, 5))), _params())
    with pytest.raises(ShapeMismatch):
        AttentionParams.init(6, 4)


def test_rank_bounds():
    """SLA similarity maps have rank <= d; softmax maps exceed it."""
    rng = np.random.default_rng(6)
    p = _params(c=8, heads=2)
    x = rng.normal(size=(20, 8))
    d = p.head_dim
    assert max(attention_map_rank(m) for m in sla_similarity(x, p)) <= d, "SLA rank is bounded by the head dim"
    assert max(attention_map_rank(m) for m in softmax_attention_map(x, p)) > d, "softmax maps reach higher rank"


def test_attention_map_rank_edge_cases():
    assert attention_map_rank(np.zeros((4, 4))) == 0, "the zero map has rank 0"
    assert attention_map_rank(np.eye(5)) == 5
    assert attention_map_rank(np.ones((4, 4))) == 1
    with pytest.raises(ShapeMismatch):
        attention_map_rank(np.ones(4))


def test_softmax_maps_are_row_stochastic():
    maps = softmax_attention_map(np.random.default_rng(7).normal(size=(6, 8)), _params())
    assert maps.shape == (2, 6, 6)
    assert np.allclose(maps.sum(axis=-1), 1.0), "rows should sum to 1"
    assert maps.min() > 0, "softmax weights are positive"
