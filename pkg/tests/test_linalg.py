import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from geoshare.errors import DataError, ParameterError
from geoshare.linalg import (
    SymmetricOperator,
    canonical_signs,
    l2_clip,
    lanczos_top_eigs,
    operator_asymmetry,
    subspace_angles,
    svd_truncated,
    sym_eig_dense,
)

from reference import jacobi_eigh, projector_distance, random_symmetric, singular_values_via_gram

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


# -- svd_truncated ---------------------------------------------------------------


def test_svd_identity():
    u, s, v = svd_truncated(np.eye(3), 3)
    assert np.allclose(s, 1.0)
    assert np.allclose(u @ np.diag(s) @ v.T, np.eye(3), atol=1e-14)


def test_svd_rank_one_exact():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal(5), rng.standard_normal(4)
    a /= np.linalg.norm(a)
    b /= np.linalg.norm(b)
    u, s, v = svd_truncated(np.outer(a, b), 1)
    assert s[0] == pytest.approx(1.0, abs=1e-14)
    assert np.allclose(u @ np.diag(s) @ v.T, np.outer(a, b), atol=1e-14)


def test_svd_truncation_error_matches_gram_oracle():
    a = np.random.default_rng(2).standard_normal((8, 6))
    u, s, v = svd_truncated(a, 3)
    sigma = singular_values_via_gram(a)
    expected = np.sqrt(np.sum(sigma[3:] ** 2))
    assert np.linalg.norm(a - u @ np.diag(s) @ v.T) == pytest.approx(expected, abs=1e-10)
    assert np.allclose(s, sigma[:3], atol=1e-10)


def test_svd_zero_matrix_gives_canonical_axes():
    u, s, v = svd_truncated(np.zeros((4, 3)), 2)
    assert np.array_equal(s, np.zeros(2))
    assert np.array_equal(u, np.eye(4)[:, :2])
    assert np.array_equal(v, np.eye(3)[:, :2])


@pytest.mark.parametrize("r", [0, 4, 2.0])
def test_svd_rank_out_of_range(r):
    with pytest.raises(ParameterError):
        svd_truncated(np.ones((3, 4)), r)


def test_svd_rejects_non_finite():
    a = np.ones((2, 2))
    a[0, 1] = np.nan
    with pytest.raises(DataError):
        svd_truncated(a, 1)


def test_svd_sign_convention_is_deterministic():
    a = np.random.default_rng(3).standard_normal((5, 5))
    u1, _, v1 = svd_truncated(a, 3)
    u2, _, v2 = svd_truncated(a.copy(), 3)
    assert np.array_equal(u1, u2) and np.array_equal(v1, v2)
    for j in range(3):
        col = u1[:, j]
        first = np.flatnonzero(np.abs(col) > 1e-10 * np.max(np.abs(col)))[0]
        assert col[first] > 0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
def test_svd_error_non_increasing_in_rank(a):
    k = min(a.shape)
    errs = []
    for r in range(1, k + 1):
        u, s, v = svd_truncated(a, r)
        assert np.allclose(u.T @ u, np.eye(r), atol=1e-10)
        assert np.allclose(v.T @ v, np.eye(r), atol=1e-10)
        assert np.all(np.diff(s) <= 1e-12) and np.all(s >= 0)
        errs.append(np.linalg.norm(a - u @ np.diag(s) @ v.T))
    assert all(e2 <= e1 + 1e-10 for e1, e2 in zip(errs, errs[1:]))
    assert errs[-1] <= 1e-8 * max(np.linalg.norm(a), 1.0)


# -- dense eigensolver -----------------------------------------------------------


def test_sym_eig_diagonal():
    eig = sym_eig_dense(np.diag([3.0, 1.0, 2.0]))
    assert np.array_equal(eig.values, [3.0, 2.0, 1.0])
    assert np.allclose(np.abs(eig.vectors), np.eye(3)[:, [0, 2, 1]])


def test_sym_eig_identity():
    assert np.allclose(sym_eig_dense(np.eye(4)).values, 1.0)


def test_sym_eig_matches_jacobi_oracle():
    h = random_symmetric(np.random.default_rng(4), 10)
    eig = sym_eig_dense(h)
    ref_vals, _ = jacobi_eigh(h)
    assert np.allclose(eig.values, ref_vals, atol=1e-10)
    recon = eig.vectors @ np.diag(eig.values) @ eig.vectors.T
    assert np.linalg.norm(recon - h) < 1e-10 * np.linalg.norm(h)


def test_sym_eig_rejects_asymmetric():
    with pytest.raises(DataError):
        sym_eig_dense(np.array([[1.0, 2.0], [0.0, 1.0]]))


# -- Lanczos ----------------------------------------------------------------------


def test_lanczos_known_spectrum():
    op = SymmetricOperator(5, lambda v: np.array([5.0, 4, 3, 2, 1]) * v)
    eig = lanczos_top_eigs(op, 2)
    assert np.allclose(eig.values, [5.0, 4.0], atol=1e-10)
    assert eig.all_converged


def test_lanczos_matches_dense_oracle():
    h = random_symmetric(np.random.default_rng(5), 50)
    eig = lanczos_top_eigs(SymmetricOperator.from_matrix(h), 5)
    vals, vecs = jacobi_eigh(h)
    assert np.max(np.abs(eig.values - vals[:5])) < 1e-8 * abs(vals[0])
    assert np.max(subspace_angles(eig.vectors, vecs[:, :5])) < 1e-6


def test_lanczos_repeated_top_eigenvalue():
    rng = np.random.default_rng(6)
    q, _ = np.linalg.qr(rng.standard_normal((30, 30)))
    spectrum = np.concatenate([[7.0, 7.0], np.linspace(-3, 3, 28)])
    h = q @ np.diag(spectrum) @ q.T
    eig = lanczos_top_eigs(SymmetricOperator.from_matrix(h), 2)
    assert np.allclose(eig.values, 7.0, atol=1e-9)
    assert projector_distance(eig.vectors, q[:, :2]) < 1e-6


def test_lanczos_magnitude_selection():
    op = SymmetricOperator(4, lambda v: np.array([1.0, -9.0, 2.0, 0.5]) * v)
    assert np.allclose(lanczos_top_eigs(op, 1, which="magnitude").values, [-9.0])
    assert np.allclose(lanczos_top_eigs(op, 1).values, [2.0])


def test_lanczos_flags_unconverged_instead_of_raising():
    h = random_symmetric(np.random.default_rng(7), 80)
    eig = lanczos_top_eigs(SymmetricOperator.from_matrix(h), 5, max_iters=5, max_restarts=0)
    assert len(eig) == 5
    assert not eig.all_converged


@pytest.mark.parametrize("t", [0, 6])
def test_lanczos_t_out_of_range(t):
    with pytest.raises(ParameterError):
        lanczos_top_eigs(SymmetricOperator.from_matrix(np.eye(5)), t)


def test_lanczos_rejects_budget_below_t():
    with pytest.raises(ParameterError):
        lanczos_top_eigs(SymmetricOperator.from_matrix(np.eye(5)), 3, max_iters=2)


def test_lanczos_is_deterministic_under_seed():
    op = SymmetricOperator.from_matrix(random_symmetric(np.random.default_rng(8), 40))
    a = lanczos_top_eigs(op, 4, seed=3)
    b = lanczos_top_eigs(op, 4, seed=3)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.vectors, b.vectors)


@settings(max_examples=25, deadline=None)
@given(st.integers(5, 40), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_lanczos_no_overshoot_and_orthonormal(n, t, seed):
    h = random_symmetric(np.random.default_rng(seed), n)
    t = min(t, n)
    eig = lanczos_top_eigs(SymmetricOperator.from_matrix(h), t, seed=seed)
    lam_max = np.linalg.eigvalsh(h)[-1]
    assert np.all(eig.values <= lam_max + 1e-9)
    assert np.allclose(eig.vectors.T @ eig.vectors, np.eye(t), atol=1e-8)
    assert np.all(np.diff(eig.values) <= 1e-12)
    assert np.all(eig.residuals >= 0)


# -- operator plumbing -------------------------------------------------------------


def test_operator_checks_length():
    with pytest.raises(ParameterError):
        SymmetricOperator.from_matrix(np.eye(3))(np.ones(4))


def test_operator_asymmetry_detects_non_symmetric():
    sym = SymmetricOperator.from_matrix(random_symmetric(np.random.default_rng(9), 12))
    assert operator_asymmetry(sym) <= 1e-12
    skew = np.triu(np.ones((12, 12)))
    assert operator_asymmetry(SymmetricOperator(12, lambda v: skew @ v)) > 1e-3


def test_canonical_signs_applies_flips_to_partners():
    vecs = np.array([[-1.0, 0.0], [0.0, 1.0]])
    partner = np.array([[2.0, 3.0]])
    out, p = canonical_signs(vecs, partner)
    assert np.array_equal(out, [[1.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(p, [[-2.0, 3.0]])


def test_subspace_angles_known_case():
    a = np.eye(3)[:, :1]
    b = np.array([[1.0], [1.0], [0.0]]) / np.sqrt(2)
    assert subspace_angles(a, b)[0] == pytest.approx(np.pi / 4, abs=1e-14)
    assert subspace_angles(a, 3 * a)[0] == 0.0


# -- clipping ----------------------------------------------------------------------


@pytest.mark.parametrize(
    "tau, expected",
    [(10.0, [3.0, 4.0]), (5.0, [3.0, 4.0]), (1.0, [0.6, 0.8])],
)
def test_l2_clip_examples(tau, expected):
    assert np.allclose(l2_clip(np.array([3.0, 4.0]), tau), expected, rtol=0, atol=1e-15)


@pytest.mark.parametrize("tau", [-1.0, float("nan")])
def test_l2_clip_rejects_bad_tau(tau):
    with pytest.raises(ParameterError):
        l2_clip(np.ones(2), tau)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=finite), st.floats(0, 50))
def test_l2_clip_properties(x, tau):
    y = l2_clip(x, tau)
    assert np.linalg.norm(y) <= tau * (1 + 1e-15) + 1e-300
    z = l2_clip(y, tau)
    assert np.allclose(z, y, rtol=4e-16, atol=0)
    if np.linalg.norm(x) > 0 and np.linalg.norm(y) > 0:
        cos = x @ y / (np.linalg.norm(x) * np.linalg.norm(y))
        assert cos == pytest.approx(1.0, abs=1e-12)
