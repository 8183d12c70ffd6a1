import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unigraph.graph import (ConvergenceError, Graph, GraphError, apply_spectral_fn, complete_graph, conv_filter,
                            cycle_graph, eigendecompose, gaussian_features, inverse_permutation, laplacian,
                            make_rng, normalized_adjacency, path_graph, permute, random_graph,
                            spectral_features_from, spectral_node_features, SpectralDecomposition)

from conftest import random_graphs, two_triangles


def check_decomposition(m, dec, tol=1e-6):
    u = dec.eigenvectors
    assert np.max(np.abs(u.T @ u - np.eye(len(m)))) <= 1e-8
    assert np.max(np.abs(dec.reconstruct() - m)) <= tol
    assert np.all(np.diff(dec.eigenvalues) >= 0)


# Graph container

def test_graph_normalizes_edges():
    g = Graph(3, ((2, 0), (1, 0)))
    assert g.edges == ((0, 1), (0, 2))


@pytest.mark.parametrize("edges", [((0, 0),), ((0, 1), (1, 0)), ((0, 3),), ((-1, 1),)])
def test_graph_rejects_bad_edges(edges):
    with pytest.raises(GraphError):
        Graph(3, edges)


def test_graph_rejects_feature_row_mismatch():
    with pytest.raises(GraphError):
        Graph(3, ((0, 1),), features=np.zeros((2, 4)))


def test_graph_rejects_label_length():
    with pytest.raises(GraphError):
        Graph(3, (), node_labels=[0, 1])


# Laplacian and filters

def test_laplacian_k2():
    np.testing.assert_array_equal(laplacian(complete_graph(2)), [[1, -1], [-1, 1]])


def test_laplacian_empty_graph():
    np.testing.assert_array_equal(laplacian(Graph(3)), np.zeros((3, 3)))
    assert laplacian(Graph(0)).shape == (0, 0)


def test_laplacian_k3_spectrum():
    np.testing.assert_allclose(np.linalg.eigvalsh(laplacian(complete_graph(3))), [0, 3, 3], atol=1e-12)


def test_laplacian_rows_sum_to_zero(rng):
    for g in random_graphs(10, rng):
        l = laplacian(g)
        np.testing.assert_allclose(l.sum(axis=1), 0.0)
        np.testing.assert_array_equal(l, l.T)


def test_conv_filter_examples():
    np.testing.assert_allclose(conv_filter(complete_graph(2)), [[1, 1], [1, 1]])
    np.testing.assert_allclose(conv_filter(Graph(1)), [[1.0]])
    k3 = conv_filter(complete_graph(3))
    np.testing.assert_allclose(k3, 0.5 * np.ones((3, 3)) + 0.5 * np.eye(3))


def test_conv_filter_isolated_node_row_is_identity():
    g = Graph(3, ((0, 1),))
    f = conv_filter(g)
    np.testing.assert_array_equal(f[2], [0, 0, 1])
    np.testing.assert_array_equal(f[:, 2], [0, 0, 1])


def test_normalized_adjacency_spectral_radius(rng):
    for _ in range(100):
        g = random_graph(int(rng.integers(1, 15)), float(rng.random()), rng)
        radius = np.max(np.abs(np.linalg.eigvalsh(normalized_adjacency(g)))) if g.n else 0.0
        assert radius <= 1 + 1e-8


# eigensolver

def test_eigendecompose_k2():
    dec = eigendecompose([[1, -1], [-1, 1]])
    np.testing.assert_allclose(dec.eigenvalues, [0, 2], atol=1e-12)
    check_decomposition(np.array([[1.0, -1], [-1, 1]]), dec)


def test_eigendecompose_identity():
    dec = eigendecompose(np.eye(4))
    np.testing.assert_allclose(dec.eigenvalues, 1.0)
    check_decomposition(np.eye(4), dec)


def test_eigendecompose_two_triangles():
    l = laplacian(two_triangles())
    dec = eigendecompose(l)
    np.testing.assert_allclose(dec.eigenvalues, [0, 0, 3, 3, 3, 3], atol=1e-10)
    check_decomposition(l, dec)


def test_eigendecompose_matches_lapack(rng):
    for n in (1, 2, 5, 13, 30):
        a = rng.normal(size=(n, n))
        m = a + a.T
        dec = eigendecompose(m)
        np.testing.assert_allclose(dec.eigenvalues, np.linalg.eigvalsh(m), atol=1e-9)
        check_decomposition(m, dec)


def test_eigendecompose_laplacian_has_zero(rng):
    for g in random_graphs(10, rng, (1, 10)):
        dec = eigendecompose(laplacian(g))
        assert abs(dec.eigenvalues[0]) < 1e-9


def test_eigendecompose_deterministic(rng):
    a = rng.normal(size=(8, 8))
    d1, d2 = eigendecompose(a + a.T), eigendecompose(a + a.T)
    np.testing.assert_array_equal(d1.eigenvalues, d2.eigenvalues)
    np.testing.assert_array_equal(d1.eigenvectors, d2.eigenvectors)


def test_eigendecompose_rejects_asymmetric():
    with pytest.raises(ValueError, match="symmetric"):
        eigendecompose([[1.0, 2.0], [0.0, 1.0]])


def test_eigendecompose_reports_residual_on_budget_exhaustion(rng):
    a = rng.normal(size=(10, 10))
    with pytest.raises(ConvergenceError, match="residual"):
        eigendecompose(a + a.T, max_sweeps=1)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_spectral_identity_roundtrip(n, seed):
    a = make_rng(seed).normal(size=(n, n))
    m = a + a.T
    np.testing.assert_allclose(apply_spectral_fn(eigendecompose(m), lambda x: x), m, atol=1e-6)


# spectral functions

def test_apply_spectral_fn_examples():
    l = laplacian(complete_graph(2))
    dec = eigendecompose(l)
    np.testing.assert_allclose(apply_spectral_fn(dec, lambda x: 1.0), np.eye(2), atol=1e-12)
    np.testing.assert_allclose(apply_spectral_fn(dec, lambda x: x * x), [[2, -2], [-2, 2]], atol=1e-12)
    np.testing.assert_allclose(apply_spectral_fn(dec, lambda x: x * x), l @ l, atol=1e-12)


def test_apply_spectral_fn_names_bad_eigenvalue():
    dec = eigendecompose(laplacian(complete_graph(2)))
    with pytest.raises(ValueError, match="eigenvalue"):
        apply_spectral_fn(dec, lambda x: 1.0 / x if x > 1e-12 else float("inf"))


# Gaussian features

def test_gaussian_features_deterministic():
    np.testing.assert_array_equal(gaussian_features(5, 3, 0.7, 11), gaussian_features(5, 3, 0.7, 11))
    assert not np.array_equal(gaussian_features(5, 3, 0.7, 11), gaussian_features(5, 3, 0.7, 12))


def test_gaussian_features_moments():
    sigma = 0.5
    x = gaussian_features(1000, 1000, sigma, 5)
    assert abs(x.mean()) < 5 * sigma / 1e3
    assert abs(x.var() / sigma**2 - 1) < 0.02


def test_gaussian_features_rejects_zero_dim():
    with pytest.raises(ValueError):
        gaussian_features(3, 0, 1.0, 0)


def test_theorem1_monte_carlo():
    # the average of f(L) X X^T f(L)^T over draws approaches d sigma^2 f(L)^2
    g = Graph(6, ((0, 1), (1, 2), (2, 3), (3, 4), (1, 4), (4, 5)))
    f = apply_spectral_fn(eigendecompose(laplacian(g)), lambda x: np.exp(-x))
    sigma, d, m = 0.8, 4, 20000
    x = make_rng(3).normal(0.0, sigma, size=(m, g.n, d))
    fx = f @ x
    est = np.einsum("mid,mjd->ij", fx, fx) / (m * d)
    target = sigma**2 * f @ f
    assert np.linalg.norm(est - target) / np.linalg.norm(target) < 0.05


# spectral node features

def test_spectral_features_k2():
    x = spectral_node_features(complete_graph(2), 1)
    np.testing.assert_allclose(x[:, 0], 2 * np.array([1, -1]) / np.sqrt(2), atol=1e-12)


@pytest.mark.parametrize("g,k", [(cycle_graph(6), 2), (complete_graph(4), 3), (cycle_graph(5), 4)])
def test_spectral_features_vertex_transitive_row_norms(g, k):
    # whole eigenspaces included, so row norms are basis independent
    norms = np.linalg.norm(spectral_node_features(g, k), axis=1)
    np.testing.assert_allclose(norms, norms[0], atol=1e-6)


def test_spectral_features_distinguish_appendix_pair():
    a = spectral_node_features(two_triangles(), 3)
    b = spectral_node_features(cycle_graph(6), 3)
    # eigenvalues 1..3 are 0,3,3 vs 1,1,3: total squared row norm 18 vs 11
    ea, eb = np.sum(a**2), np.sum(b**2)
    np.testing.assert_allclose([ea, eb], [18.0, 11.0], atol=1e-8)
    assert not np.allclose(np.sort(np.linalg.norm(a, axis=1)), np.sort(np.linalg.norm(b, axis=1)))


def test_spectral_features_sign_flip_invariant(rng):
    g = path_graph(6)
    dec = eigendecompose(laplacian(g))
    flips = np.where(rng.random(6) < 0.5, -1.0, 1.0)
    flipped = SpectralDecomposition(dec.eigenvalues, dec.eigenvectors * flips)
    np.testing.assert_array_equal(spectral_features_from(dec, 3), spectral_features_from(flipped, 3))


def test_spectral_features_rejects_large_k():
    with pytest.raises(ValueError):
        spectral_node_features(complete_graph(3), 3)


# permutations

def test_permute_identity_and_inverse(rng):
    g = random_graph(7, 0.4, rng).with_features(rng.normal(size=(7, 2)))
    assert permute(g, range(7)) == g
    perm = rng.permutation(7)
    assert permute(permute(g, perm), inverse_permutation(perm)) == g


def test_permute_matches_matrix_form(rng):
    g = random_graph(6, 0.5, rng).with_features(rng.normal(size=(6, 3)))
    perm = rng.permutation(6)
    p = np.zeros((6, 6))
    p[perm, np.arange(6)] = 1
    h = permute(g, perm)
    np.testing.assert_array_equal(h.adjacency(), p @ g.adjacency() @ p.T)
    np.testing.assert_array_equal(h.features, p @ g.features)


def test_permute_complete_graph_unchanged(rng):
    assert permute(complete_graph(3), rng.permutation(3)).edges == complete_graph(3).edges


def test_permute_rejects_non_bijection():
    with pytest.raises(GraphError):
        permute(complete_graph(3), [0, 0, 1])
