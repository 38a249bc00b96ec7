import itertools
import logging

import numpy as np
import pytest
from scipy import linalg

from models.config import TransferConfig
from workers.adapt import (
    AffineMap,
    TransferError,
    build_H,
    build_J,
    build_knn_graph,
    build_laplacian,
    build_pairwise_S,
    build_S,
    fit_transfer,
    multi_domain_distance,
    pairwise_dist,
    solve_pencil,
    solve_transfer,
    tca_baseline,
    transform,
)
from workers.dataset import Dataset, build_joint_stack


def _embedded_pairwise_sum(sizes):
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = np.zeros((offsets[-1], offsets[-1]))
    for k, l in itertools.combinations(range(len(sizes)), 2):
        idx = np.concatenate([np.arange(offsets[k], offsets[k + 1]), np.arange(offsets[l], offsets[l + 1])])
        total[np.ix_(idx, idx)] += build_pairwise_S(sizes[k], sizes[l])
    return total


def test_S_hand_values():
    np.testing.assert_allclose(build_S([1, 1]), [[1, -1], [-1, 1]])
    np.testing.assert_allclose(build_S([1, 1, 1]), [[2, -1, -1], [-1, 2, -1], [-1, -1, 2]])


def test_S_equals_sum_of_pairwise_matrices():
    rng = np.random.default_rng(0)
    for _ in range(50):
        sizes = rng.integers(1, 7, size=rng.integers(2, 6)).tolist()
        S = build_S(sizes)
        np.testing.assert_allclose(S, _embedded_pairwise_sum(sizes), atol=1e-10)
        np.testing.assert_allclose(S.sum(axis=1), 0.0, atol=1e-10)
        np.testing.assert_allclose(S, S.T, atol=1e-14)
        assert linalg.eigvalsh(S).min() >= -1e-10


def test_S_needs_two_nonempty_domains():
    with pytest.raises(TransferError):
        build_S([4])
    with pytest.raises(TransferError):
        build_S([3, 0])


def test_pairwise_dist_hand_values():
    assert pairwise_dist(np.array([[1.0]]), np.array([[1.0]])) == 0.0
    assert pairwise_dist(np.array([[0.0]]), np.array([[2.0]])) == pytest.approx(4.0)


def test_multi_domain_distance_is_sum_of_pairwise(rng):
    sizes = [3, 4, 2]
    D = rng.standard_normal((3, sum(sizes)))
    B = rng.standard_normal((3, 2))
    blocks = np.split(D, np.cumsum(sizes)[:-1], axis=1)
    direct = sum(pairwise_dist(blocks[k], blocks[l], B) for k, l in itertools.combinations(range(3), 2))
    assert multi_domain_distance(D, sizes, B) == pytest.approx(direct, abs=1e-10)


def test_knn_graph_on_collinear_points():
    D = np.array([[0.0, 1.0, 3.0]])
    W = build_knn_graph(D, 1)
    np.testing.assert_array_equal(W, [[0, 1, 0], [1, 0, 1], [0, 1, 0]])


def test_knn_graph_saturates_to_complete_graph(rng):
    D = rng.standard_normal((2, 6))
    W = build_knn_graph(D, 5)
    np.testing.assert_array_equal(W, np.ones((6, 6)) - np.eye(6))


def test_knn_graph_is_symmetric_with_empty_diagonal(rng):
    W = build_knn_graph(rng.standard_normal((3, 20)), 3)
    np.testing.assert_array_equal(W, W.T)
    assert np.all(np.diag(W) == 0)


def test_knn_graph_rejects_large_k(rng):
    with pytest.raises(TransferError):
        build_knn_graph(rng.standard_normal((2, 4)), 4)
    with pytest.raises(TransferError):
        build_knn_graph(rng.standard_normal((2, 1)), 1)


def test_laplacian_single_edge():
    np.testing.assert_allclose(build_laplacian(np.array([[0.0, 1.0], [1.0, 0.0]])), [[1, -1], [-1, 1]])


def test_laplacian_isolated_vertex_keeps_unit_diagonal():
    W = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    L = build_laplacian(W)
    assert L[2, 2] == 1.0
    np.testing.assert_array_equal(L[2, :2], 0.0)


def test_laplacian_quadratic_form_matches_direct_sum():
    rng = np.random.default_rng(3)
    for _ in range(10):
        D = rng.standard_normal((3, 12))
        W = build_knn_graph(D, 3)
        L = build_laplacian(W)
        b = rng.standard_normal(3)
        f = D.T @ b
        degree = W.sum(axis=1)
        scaled = f / np.sqrt(degree)
        direct = 0.5 * np.sum(W * (scaled[:, None] - scaled[None, :]) ** 2)
        assert b @ D @ L @ D.T @ b == pytest.approx(direct, abs=1e-10)
        values = linalg.eigvalsh(L)
        assert values.min() >= -1e-10 and values.max() <= 2 + 1e-10


def test_centering_matrix():
    np.testing.assert_allclose(build_H(2), [[0.5, -0.5], [-0.5, 0.5]])
    H = build_H(7)
    np.testing.assert_allclose(H @ np.ones(7), 0.0, atol=1e-12)
    np.testing.assert_allclose(H @ H, H, atol=1e-12)
    np.testing.assert_allclose(H, H.T)


def test_response_regularizer():
    np.testing.assert_array_equal(build_J(2, 1.0), np.eye(3))
    np.testing.assert_array_equal(build_J(1, 3.0), np.diag([1.0, 3.0]))
    with pytest.raises(TransferError):
        build_J(2, -1.0)


def test_diagonal_pencil():
    B, eigvals, _ = solve_pencil(np.diag([2.0, 1.0]), np.eye(2), 1, jitter=0.0)
    np.testing.assert_allclose(eigvals, [1.0])
    np.testing.assert_allclose(B[:, 0], [0.0, 1.0], atol=1e-12)


def test_identical_pencil_has_unit_spectrum(rng):
    M = rng.standard_normal((4, 4))
    A = M @ M.T + np.eye(4)
    B, eigvals, _ = solve_pencil(A, A, 4, jitter=0.0)
    np.testing.assert_allclose(eigvals, 1.0, atol=1e-10)
    np.testing.assert_allclose(B.T @ A @ B, np.eye(4), atol=1e-10)


def test_pencil_matches_dense_oracle():
    rng = np.random.default_rng(7)
    for _ in range(100):
        k = int(rng.integers(2, 9))
        q = int(rng.integers(1, k + 1))
        M, N = rng.standard_normal((k, k)), rng.standard_normal((k, k))
        A = M @ M.T + 0.1 * np.eye(k)
        C = N @ N.T + np.eye(k)
        B, eigvals, used = solve_pencil(A, C, q, jitter=0.0)
        assert used == 0.0
        oracle = linalg.eigh(A, C, eigvals_only=True)[:q]
        np.testing.assert_allclose(eigvals, oracle, rtol=1e-8, atol=1e-8)
        np.testing.assert_allclose(B.T @ C @ B, np.eye(q), atol=1e-8)
        assert np.trace(B.T @ A @ B) == pytest.approx(eigvals.sum(), rel=1e-8)


def test_pencil_sign_convention(rng):
    M = rng.standard_normal((5, 5))
    B, _, _ = solve_pencil(M @ M.T + np.eye(5), np.eye(5), 3, jitter=0.0)
    pivots = np.argmax(np.abs(B), axis=0)
    assert np.all(B[pivots, np.arange(3)] > 0)


def test_pencil_escalates_jitter_for_singular_variance():
    C = np.diag([1.0, 1.0, 0.0])
    B, _, used = solve_pencil(np.eye(3), C, 2, jitter=0.0)
    assert used > 0
    np.testing.assert_allclose(B.T @ (C + used * np.eye(3)) @ B, np.eye(2), atol=1e-8)


def test_transform_identity_and_selection(rng):
    D = rng.standard_normal((3, 5))
    identity = AffineMap(B=np.eye(3), input_semantics=["a", "b", "response"])
    np.testing.assert_array_equal(transform(identity, D), D)
    first = AffineMap(B=np.array([[1.0], [0.0], [0.0]]), input_semantics=["a", "b", "response"])
    np.testing.assert_array_equal(transform(first, D), D[:1])
    with pytest.raises(TransferError):
        transform(first, D[:2])


def _shifted_stack(seed, n=30, alpha=0.5):
    rng = np.random.default_rng(seed)
    x_a = rng.standard_normal((n, 2))
    x_b = rng.standard_normal((n, 2)) + np.array([2.0, -1.0])
    x_t = rng.standard_normal((n, 2)) + np.array([1.0, 1.0])
    y = np.concatenate([x_a @ [1.0, 2.0], x_b @ [-1.0, 0.5]]) + 0.1 * rng.standard_normal(2 * n)
    train = Dataset(features=np.vstack([x_a, x_b]), names=["u", "v"], response=y)
    test = Dataset(features=x_t, names=["u", "v"], role="test")
    partition = np.repeat([1, 2], n)
    return build_joint_stack(train, test, partition, alpha=alpha)


def test_fit_transfer_constraint_and_diagnostics():
    stack = _shifted_stack(0)
    affine, eigvals, report = fit_transfer(stack, TransferConfig(q=2, knn=5), diagnostics=True)
    assert affine.B.shape == (3, 2)
    assert affine.input_semantics == ["u", "v", "response"]
    N = stack.D.shape[1]
    C = stack.D @ build_H(N) @ stack.D.T
    np.testing.assert_allclose(affine.B.T @ (C + affine.jitter * np.eye(3)) @ affine.B, np.eye(2), atol=1e-8)
    assert np.all(np.diff(eigvals) >= 0)
    assert {"S_min", "S_max", "L_min", "L_max", "distance_before", "distance_after"} <= set(report)
    assert report["S_min"] >= -1e-10


def test_transfer_reduces_distance_against_random_maps():
    """Learned map beats C-orthonormal random maps on the MMD term (median over seeds)"""
    wins = []
    for seed in range(20):
        stack = _shifted_stack(seed)
        cfg = TransferConfig(q=2, tau=0.0, mu=1e-3)
        affine, _, _ = fit_transfer(stack, cfg)
        N = stack.D.shape[1]
        C = stack.D @ build_H(N) @ stack.D.T + affine.jitter * np.eye(3)
        rng = np.random.default_rng(seed)
        Q, _ = np.linalg.qr(rng.standard_normal((3, 2)))
        random_B = linalg.solve_triangular(linalg.cholesky(C, lower=True).T, Q, lower=False)
        learned = multi_domain_distance(stack.D, stack.domain_sizes, affine.B)
        baseline = multi_domain_distance(stack.D, stack.domain_sizes, random_B)
        wins.append(learned - baseline)
    assert np.median(wins) <= 0


def test_solve_transfer_rejects_q_above_dimension(rng):
    D = rng.standard_normal((3, 6))
    N = 6
    with pytest.raises(TransferError):
        solve_transfer(D, build_S([3, 3]), np.zeros((N, N)), build_H(N), build_J(2, 1.0), TransferConfig(q=4))


def test_tca_baseline_shape(rng):
    affine = tca_baseline(rng.standard_normal((10, 3)), rng.standard_normal((5, 3)), TransferConfig(q=2))
    assert affine.B.shape == (3, 2)


def test_zero_alpha_matches_feature_only_solve_with_latent_domains():
    stack = _shifted_stack(3, alpha=0.0)
    assert stack.n_latent == 2
    cfg = TransferConfig(q=2, knn=5, tau=0.5)
    affine, eigvals, _ = fit_transfer(stack, cfg)

    x_rows = stack.D[:-1]
    N = stack.D.shape[1]
    L = build_laplacian(build_knn_graph(x_rows, cfg.knn))
    feature_only, x_eigvals = solve_transfer(
        x_rows, build_S(stack.domain_sizes), L, build_H(N), np.eye(2), cfg, jitter=affine.jitter
    )
    np.testing.assert_allclose(affine.B[:-1], feature_only.B, atol=1e-10)
    np.testing.assert_allclose(affine.B[-1], 0.0, atol=1e-10)
    np.testing.assert_allclose(eigvals, x_eigvals, rtol=1e-8)


def test_full_rank_map_with_response_row_warns(caplog):
    stack = _shifted_stack(1)
    with caplog.at_level(logging.WARNING):
        fit_transfer(stack, TransferConfig(q=3, tau=0.0))
    assert "keeps the response coordinate" in caplog.text
