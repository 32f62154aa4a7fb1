import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wsvd.linalg import (
    ConvergenceError, SkewParam, cayley, cayley_grad, fwht, hadamard, orthogonality_error, skew, svd, truncate,
)


def _check_svd(m, s):
    k = min(m.shape)
    assert s.u.shape == (m.shape[0], k) and s.vt.shape == (k, m.shape[1])
    assert np.all(np.diff(s.sigma) <= 0) and np.all(s.sigma >= 0)
    assert np.allclose(s.u.T @ s.u, np.eye(k), atol=1e-10)
    assert np.allclose(s.vt @ s.vt.T, np.eye(k), atol=1e-10)
    assert np.linalg.norm(s.reconstruct() - m) <= 1e-9 * max(np.linalg.norm(m), 1.0)


def test_svd_diagonal():
    s = svd(np.diag([3.0, 1.0]))
    assert np.array_equal(s.sigma, [3.0, 1.0])
    assert np.allclose(np.abs(s.u), np.eye(2)) and np.allclose(np.abs(s.vt), np.eye(2))


def test_svd_zero_matrix():
    m = np.zeros((4, 3))
    s = svd(m)
    assert np.array_equal(s.sigma, np.zeros(3))
    _check_svd(m, s)


def test_svd_seeded_reconstruction(rng):
    m = rng.normal(size=(8, 5))
    s = svd(m)
    _check_svd(m, s)
    assert np.allclose(s.sigma, np.linalg.svd(m, compute_uv=False), atol=1e-12)


def test_svd_wide_and_rank_deficient(rng):
    wide = rng.normal(size=(3, 7))
    _check_svd(wide, svd(wide))
    low = rng.normal(size=(9, 2)) @ rng.normal(size=(2, 6))
    s = svd(low)
    _check_svd(low, s)
    assert np.all(s.sigma[2:] < 1e-12)


def test_svd_sign_convention(rng):
    s = svd(rng.normal(size=(10, 4)))
    pivot = np.argmax(np.abs(s.u), axis=0)
    assert np.all(s.u[pivot, np.arange(4)] >= 0)


def test_svd_is_bitwise_deterministic(rng):
    m = rng.normal(size=(12, 9))
    a, b = svd(m), svd(m.copy())
    assert np.array_equal(a.u, b.u) and np.array_equal(a.sigma, b.sigma) and np.array_equal(a.vt, b.vt)


def test_svd_rejects_bad_input():
    with pytest.raises(ValueError):
        svd(np.array([[1.0, np.nan]]))
    with pytest.raises(ValueError):
        svd(np.zeros((0, 3)))


def test_svd_nonconvergence_names_dimensions(rng):
    with pytest.raises(ConvergenceError, match="6x4"):
        svd(rng.normal(size=(6, 4)), max_sweeps=1)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_svd_invariants_property(rows, cols, seed):
    m = np.random.default_rng(seed).normal(size=(rows, cols))
    _check_svd(m, svd(m))


def test_truncate_full_rank_and_diag():
    a, b = truncate(svd(np.diag([3.0, 1.0])), 1)
    assert np.allclose(a @ b, np.diag([3.0, 0.0]), atol=1e-12)
    m = np.random.default_rng(5).normal(size=(6, 4))
    a, b = truncate(svd(m), 4)
    assert np.linalg.norm(a @ b - m) < 1e-9


def test_truncate_eckart_young(rng):
    m = rng.normal(size=(8, 8))
    s = svd(m)
    for r in range(1, 9):
        a, b = truncate(s, r)
        err = np.sum((m - a @ b) ** 2)
        assert err == pytest.approx(np.sum(s.sigma[r:] ** 2), abs=1e-9)
        # no truncated product has a larger leading singular value
        assert np.linalg.svd(a @ b, compute_uv=False)[0] <= s.sigma[0] * (1 + 1e-12)


def test_truncate_beats_random_rank_r(rng):
    m = rng.normal(size=(7, 5))
    a, b = truncate(svd(m), 2)
    best = np.linalg.norm(m - a @ b)
    for _ in range(50):
        x, y = rng.normal(size=(7, 2)), rng.normal(size=(2, 5))
        # least-squares optimal B for a random A is still no better than truncation
        y = np.linalg.lstsq(x, m, rcond=None)[0]
        assert np.linalg.norm(m - x @ y) >= best - 1e-12


def test_truncate_rank_out_of_range():
    s = svd(np.eye(3))
    for r in (0, 4):
        with pytest.raises(ValueError, match="available ranks 1..3"):
            truncate(s, r)


def test_hadamard_small_cases():
    assert np.array_equal(hadamard(1), [[1.0]])
    assert np.allclose(hadamard(2), np.array([[1, 1], [1, -1]]) / np.sqrt(2))


@pytest.mark.parametrize("d", [1, 2, 4, 8, 16, 32, 64, 128, 256])
def test_hadamard_orthogonal(d):
    h = hadamard(d)
    assert np.max(np.abs(h.T @ h - np.eye(d))) < 1e-12
    assert np.max(np.abs(h @ h.T - np.eye(d))) < 1e-12
    assert np.allclose(np.abs(h), 1 / np.sqrt(d))


def test_hadamard_rejects_non_power_of_two():
    with pytest.raises(ValueError, match="64 and 128"):
        hadamard(96)
    with pytest.raises(ValueError):
        hadamard(0)


def test_fwht_matches_matrix(rng):
    x = rng.normal(size=(5, 32))
    assert np.allclose(fwht(x), x @ hadamard(32), atol=1e-12)
    assert np.allclose(fwht(fwht(x)), x, atol=1e-12)


def test_cayley_zero_is_identity():
    assert np.array_equal(cayley(SkewParam.zeros(5)), np.eye(5))


def test_cayley_planar_rotation():
    t = 0.7
    q = cayley(SkewParam(np.array([[0.0, t], [-t, 0.0]])))
    assert np.max(np.abs(q.T @ q - np.eye(2))) < 1e-12
    assert q[0, 0] == pytest.approx(q[1, 1]) and q[0, 1] == pytest.approx(-q[1, 0])


def test_cayley_seeded_orthogonal(rng):
    q = cayley(SkewParam.random(16, rng))
    assert np.max(np.abs(q.T @ q - np.eye(16))) < 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.floats(1e-3, 50.0), st.integers(0, 2**31 - 1))
def test_cayley_orthogonal_property(dim, scale, seed):
    q = cayley(SkewParam.random(dim, np.random.default_rng(seed), scale))
    assert orthogonality_error(q) < 1e-10


def test_skew_param_stays_exact(rng):
    p = SkewParam.random(6, rng)
    for _ in range(10):
        p.step(rng.normal(size=(6, 6)))
        assert np.array_equal(p.theta + p.theta.T, np.zeros((6, 6)))
    with pytest.raises(ValueError):
        SkewParam(np.ones((2, 2)))


def test_cayley_grad_matches_finite_differences(rng):
    theta = skew(rng.normal(size=(5, 5)))
    g = rng.normal(size=(5, 5))
    q = cayley(theta)
    analytic = cayley_grad(theta, q, g)
    eps = 1e-6
    for i in range(5):
        for j in range(i + 1, 5):
            d = np.zeros((5, 5))
            d[i, j], d[j, i] = eps, -eps
            fd = (np.sum(g * cayley(theta + d)) - np.sum(g * cayley(theta - d))) / (2 * eps)
            assert analytic[i, j] == pytest.approx(fd, rel=1e-6, abs=1e-8)
