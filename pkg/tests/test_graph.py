import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from mgrnet import NonFiniteError
from mgrnet.graph import build_graph, distance_matrix, local_adjacency, recon_adjacency, token_adjacency

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_distance_matrix_known_values():
    X = np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 1.0]])
    np.testing.assert_allclose(distance_matrix(X), [[0, 5, 1], [5, 0, math.sqrt(18)], [1, math.sqrt(18), 0]])


def test_distance_matrix_matches_loop_oracle(rng):
    X = rng.normal(size=(4, 3))
    np.testing.assert_allclose(distance_matrix(X), oracles.pdist(X), rtol=0, atol=1e-12)


def test_distance_matrix_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        distance_matrix(np.array([[0.0, np.nan], [1.0, 2.0]]))
    with pytest.raises(ValueError):
        distance_matrix(np.zeros(3))


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=6), elements=finite))
def test_distance_matrix_symmetric_zero_diagonal(X):
    d = distance_matrix(X)
    assert np.array_equal(d, d.T)
    assert np.all(np.diag(d) == 0)
    assert np.all(d >= 0)


def test_local_adjacency_values():
    assert local_adjacency(np.array(5.0)) == pytest.approx(1 - oracles.sigmoid(5), abs=1e-12)
    assert local_adjacency(np.array(5.0)) == pytest.approx(0.00669, abs=1e-5)
    assert recon_adjacency(np.array(1.0), 2.0) == pytest.approx(0.1192, abs=1e-4)
    assert local_adjacency(np.array(0.0)) == 0.5


def test_recon_adjacency_at_unit_t_is_token_adjacency(rng):
    d = distance_matrix(rng.normal(size=(5, 3)))
    np.testing.assert_array_equal(recon_adjacency(d, 1.0), token_adjacency(d))


@given(
    X=hnp.arrays(np.float64, (5, 3), elements=finite),
    alpha=st.floats(-3, 3),
    beta=st.floats(0.01, 3),
)
def test_local_adjacency_range_and_symmetry(X, alpha, beta):
    g = build_graph(X, alpha, beta)
    assert np.all((g.adj > 0) & (g.adj < 1))
    assert np.array_equal(g.adj, g.adj.T)


@given(d1=st.floats(0, 30), d2=st.floats(0, 30), alpha=st.floats(-3, 3), beta=st.floats(0.01, 3))
def test_local_adjacency_monotone_in_distance(d1, d2, alpha, beta):
    lo, hi = sorted((d1, d2))
    assert local_adjacency(np.array(lo), alpha, beta) >= local_adjacency(np.array(hi), alpha, beta)


@given(X=hnp.arrays(np.float64, (4, 2), elements=finite))
def test_row_normalized_rows_sum_to_one(X):
    g = build_graph(X, row_normalize_adjacency=True)
    np.testing.assert_allclose(g.adj.sum(axis=1), 1.0, rtol=1e-12)


def test_large_distance_stays_positive():
    assert local_adjacency(np.array(700.0)) > 0


@given(hnp.arrays(np.float64, (3, 4), elements=finite))
def test_distance_matrix_triangle_inequality(X):
    d = distance_matrix(X)
    for i in range(3):
        for j in range(3):
            for k in range(3):
                assert d[i, j] <= d[i, k] + d[k, j] + 1e-9


def test_degenerate_adjacency_parameters(rng):
    d = distance_matrix(rng.normal(size=(4, 2)))
    np.testing.assert_allclose(local_adjacency(d, 0.7, 0.0), 1 - oracles.sigmoid(0.0) + 0 * d)
    np.testing.assert_allclose(recon_adjacency(d, 0.0), np.full((4, 4), 0.5))
    np.testing.assert_array_equal(token_adjacency(d), local_adjacency(d, 0.0, 1.0))
