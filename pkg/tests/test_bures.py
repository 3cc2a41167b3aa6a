import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from constrained_eb import bures
from constrained_eb.errors import FromNotPositiveDefinite, IndefiniteBeyondTolerance, NonSymmetric


def random_psd(rng, m, rank=None):
    rank = m if rank is None else rank
    X = rng.standard_normal((m, rank))
    return X @ X.T


def random_pd(rng, m):
    return random_psd(rng, m) + 0.1 * np.eye(m)


finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@st.composite
def pd_matrices(draw, m=None):
    m = draw(st.integers(1, 4)) if m is None else m
    X = draw(arrays(float, (m, m), elements=finite))
    return X @ X.T + 0.5 * np.eye(m)


def test_psd_sqrt_identity():
    np.testing.assert_allclose(bures.psd_sqrt(np.eye(2)), np.eye(2), atol=1e-14)


def test_psd_sqrt_diagonal():
    np.testing.assert_allclose(bures.psd_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)


def test_psd_sqrt_two_by_two():
    S = np.array([[2.0, 1.0], [1.0, 2.0]])
    # eigenpairs (1, (1,-1)/√2) and (3, (1,1)/√2) give the root in closed form
    u = np.array([1.0, 1.0]) / np.sqrt(2)
    v = np.array([1.0, -1.0]) / np.sqrt(2)
    expected = np.sqrt(3) * np.outer(u, u) + np.outer(v, v)
    R = bures.psd_sqrt(S)
    np.testing.assert_allclose(R, expected, atol=1e-12)
    assert np.linalg.norm(R @ R - S) <= 1e-10 * (1 + np.linalg.norm(S))


def test_psd_sqrt_rejects_asymmetric():
    with pytest.raises(NonSymmetric):
        bures.psd_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_psd_sqrt_rejects_indefinite():
    with pytest.raises(IndefiniteBeyondTolerance):
        bures.psd_sqrt(np.diag([1.0, -0.1]))


def test_psd_sqrt_clamps_tiny_negative():
    R = bures.psd_sqrt(np.diag([1.0, -1e-9]))
    np.testing.assert_allclose(R, np.diag([1.0, 0.0]), atol=1e-14)


def test_psd_truncate_examples():
    np.testing.assert_allclose(bures.psd_truncate(np.diag([1.0, -0.5])), np.diag([1.0, 0.0]), atol=1e-14)
    np.testing.assert_allclose(
        bures.psd_truncate(np.array([[0.0, 1.0], [1.0, 0.0]])), np.full((2, 2), 0.5), atol=1e-14
    )


def test_psd_truncate_fixed_point():
    S = random_psd(np.random.default_rng(0), 3, rank=2)
    np.testing.assert_allclose(bures.psd_truncate(S), S, atol=1e-12)


@given(arrays(float, (3, 3), elements=finite))
def test_psd_truncate_idempotent_and_psd(X):
    S = X + X.T
    P = bures.psd_truncate(S)
    assert np.linalg.eigvalsh(P).min() >= -1e-10 * max(1.0, np.abs(S).max())
    np.testing.assert_allclose(bures.psd_truncate(P), P, atol=1e-10 * max(1.0, np.abs(S).max()))


def test_transport_map_self():
    S = random_pd(np.random.default_rng(1), 3)
    np.testing.assert_allclose(bures.transport_map(S, S), np.eye(3), atol=1e-10)


def test_transport_map_commuting_case():
    T = bures.transport_map(np.diag([0.5, 0.5]), np.eye(2))
    np.testing.assert_allclose(T, np.sqrt(2) * np.eye(2), atol=1e-14)


def test_transport_map_defining_identity_example():
    A = np.array([[2.0, 1.0], [1.0, 2.0]])
    B = np.array([[3.0, 0.0], [0.0, 1.0]])
    T = bures.transport_map(A, B)
    np.testing.assert_allclose(T, T.T, atol=1e-15)
    assert np.linalg.norm(T @ A @ T - B) <= 1e-8 * np.linalg.norm(B)


def test_transport_map_refuses_singular_source():
    with pytest.raises(FromNotPositiveDefinite):
        bures.transport_map(np.diag([1.0, 0.0]), np.eye(2))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4).flatmap(lambda m: st.tuples(pd_matrices(m), pd_matrices(m))))
def test_transport_map_identity_property(pair):
    A, B = pair
    T = bures.transport_map(A, B)
    assert np.linalg.norm(T @ A @ T - B) <= 1e-8 * (1 + np.linalg.norm(B))
    # the map is symmetric positive semi-definite (gradient of a convex function)
    assert np.linalg.eigvalsh(T).min() >= -1e-10


def test_transport_map_pushforward_monte_carlo():
    rng = np.random.default_rng(2)
    A = np.array([[2.0, 1.0], [1.0, 2.0]])
    B = np.array([[3.0, 0.0], [0.0, 1.0]])
    X = rng.multivariate_normal(np.zeros(2), A, size=100_000)
    Y = X @ bures.transport_map(A, B).T
    C = np.cov(Y, rowvar=False)
    assert np.linalg.norm(C - B) <= 0.05 * np.linalg.norm(B)


def test_bures_distance_examples():
    S = random_pd(np.random.default_rng(3), 2)
    assert bures.bures_distance_sq(S, S) == pytest.approx(0.0, abs=1e-12)
    assert bures.bures_distance_sq(np.diag([1.0, 4.0]), np.diag([4.0, 1.0])) == pytest.approx(2.0, abs=1e-12)
    assert bures.bures_distance_sq(np.eye(2), 4 * np.eye(2)) == pytest.approx(2.0, abs=1e-12)


def test_bures_distance_matches_gaussian_w2_via_transport():
    # W2² between centred Gaussians = E‖X - T X‖² with the optimal map T
    rng = np.random.default_rng(4)
    A, B = random_pd(rng, 3), random_pd(rng, 3)
    T = bures.transport_map(A, B)
    I = np.eye(3)
    expected = np.trace((I - T) @ A @ (I - T).T)
    assert bures.bures_distance_sq(A, B) == pytest.approx(expected, rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3).flatmap(lambda m: st.tuples(pd_matrices(m), pd_matrices(m), pd_matrices(m))))
def test_bures_metric_axioms(triple):
    A, B, C = triple
    dab = bures.bures_distance_sq(A, B)
    assert dab == pytest.approx(bures.bures_distance_sq(B, A), abs=1e-10 * (1 + dab))
    ab, bc, ac = (np.sqrt(bures.bures_distance_sq(*p)) for p in ((A, B), (B, C), (A, C)))
    assert ac <= ab + bc + 1e-7


@settings(max_examples=40, deadline=None)
@given(pd_matrices())
def test_sqrt_of_sqrt_of_fourth_power(S):
    S = S / np.abs(S).max()
    R = bures.psd_sqrt(bures.psd_sqrt(S @ S @ S @ S))
    np.testing.assert_allclose(R, S, atol=1e-8)
