import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curvflow import matfun as mf
from curvflow import symfun as sf
from curvflow.errors import DegenerateSpectrum, DomainError


def rand_orth(n, rng):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


# --- eigen-decomposition ---------------------------------------------------


def test_diagonal_input_gives_permutation():
    es = mf.eigh(np.diag([3.0, 1.0, 2.0]))
    assert np.array_equal(es.eigenvalues, [1.0, 2.0, 3.0])
    assert np.array_equal(np.abs(es.eigenvectors), np.eye(3)[:, [1, 2, 0]])


def test_two_by_two():
    es = mf.eigh(np.array([[2.0, 1.0], [1.0, 2.0]]))
    assert np.allclose(es.eigenvalues, [1.0, 3.0], atol=1e-15)
    v = es.eigenvectors
    assert abs(abs(v[:, 0] @ np.array([1, -1])) / np.sqrt(2) - 1) < 1e-14
    assert abs(abs(v[:, 1] @ np.array([1, 1])) / np.sqrt(2) - 1) < 1e-14


@pytest.mark.parametrize("n", [2, 3, 5, 8])
def test_jacobi_against_numpy(n):
    rng = np.random.default_rng(n)
    a = mf.symmetrize(rng.standard_normal((200, n, n)))
    lam, q = mf.jacobi_eigh(a)
    ref = np.linalg.eigvalsh(a)
    norms = np.linalg.norm(a, axis=(1, 2))
    assert np.all(np.abs(lam - ref).max(axis=1) <= 1e-13 * norms)
    rec = np.einsum("mik,mk,mjk->mij", q, lam, q)
    assert np.all(np.linalg.norm(rec - a, axis=(1, 2)) <= 1e-12 * norms)
    assert np.allclose(np.einsum("mki,mkj->mij", q, q), np.eye(n), atol=1e-12)
    assert np.all(np.diff(lam, axis=1) >= 0)


def test_inverse_and_trace():
    a = mf.random_spd(4, np.random.default_rng(0))
    es = mf.eigh(a)
    assert np.allclose(es.inverse() @ a, np.eye(4), atol=1e-12)
    assert es.trace == pytest.approx(np.trace(a), rel=1e-13)


# --- F, dF and d2F ---------------------------------------------------------


def test_evalF_examples():
    assert mf.evalF(sf.PowerMean(0, 2), np.diag([1.0, 4.0])) == pytest.approx(2.0, abs=1e-14)
    assert mf.evalF(sf.PowerMean(1, 2), np.array([[2.0, 1.0], [1.0, 2.0]])) == pytest.approx(2.0, abs=1e-14)
    assert mf.evalF(sf.SymQuotient(2, 1, 3), np.eye(3)) == pytest.approx(1.0, abs=1e-14)


def test_dF_examples():
    a = mf.random_spd(3, np.random.default_rng(1))
    assert np.allclose(mf.dF(sf.PowerMean(1, 3), a), np.eye(3) / 3, atol=1e-14)
    assert np.allclose(mf.dF(sf.PowerMean(0, 2), np.diag([1.0, 4.0])), np.diag([1.0, 0.25]), atol=1e-14)


def test_d2F_examples():
    off = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert mf.d2F_quadform(sf.PowerMean(0, 2), np.diag([1.0, 4.0]), off) == pytest.approx(-0.5, abs=1e-14)
    a = mf.random_spd(3, np.random.default_rng(2))
    b = mf.symmetrize(np.random.default_rng(3).standard_normal((3, 3)))
    assert abs(mf.d2F_quadform(sf.PowerMean(1, 3), a, b)) < 1e-13


def test_d2F_second_difference_oracle():
    f = sf.PowerMean(0, 2)
    a, off, h = np.diag([1.0, 4.0]), np.array([[0.0, 1.0], [1.0, 0.0]]), 1e-4
    fd = (mf.evalF(f, a + h * off) - 2 * mf.evalF(f, a) + mf.evalF(f, a - h * off)) / h**2
    assert fd == pytest.approx(-0.5, abs=1e-5)


def test_near_degenerate_is_continuous():
    f = sf.PowerMean(0, 2)
    off = np.array([[0.0, 1.0], [1.0, 0.0]])
    near = mf.d2F_quadform(f, np.diag([1.0, 1.0 + 1e-13]), off)
    exact = mf.d2F_quadform(f, np.eye(2), off)
    assert exact == pytest.approx(-1.0, abs=1e-14)
    assert abs(near - exact) < 1e-6


@pytest.mark.parametrize("n", [2, 3, 4])
def test_calculus_check_catalog(n):
    for name, f in sf.standard_catalog(n):
        rep = mf.calculus_check(f, trials=60, seed=n)
        assert rep.ok, (name, rep.max_dF_residual, rep.max_d2F_residual)


def test_calculus_check_with_degenerate_pair():
    rep = mf.calculus_check(sf.SymQuotient(3, 1, 4), trials=100, seed=3, gap=1e-12)
    assert rep.ok


def test_domain_error_for_indefinite():
    with pytest.raises(DomainError):
        mf.evalF(sf.PowerMean(0, 2), np.diag([1.0, -1.0]))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), idx=st.integers(0, 30))
def test_orthogonal_invariance(seed, idx):
    cat = sf.standard_catalog(3)
    f = cat[idx % len(cat)][1]
    rng = np.random.default_rng(seed)
    a = mf.random_spd(3, rng)
    b = mf.symmetrize(rng.standard_normal((3, 3)))
    q = rand_orth(3, rng)
    qa, qb = q @ a @ q.T, q @ b @ q.T
    assert mf.evalF(f, qa) == pytest.approx(mf.evalF(f, a), rel=1e-12)
    assert np.allclose(mf.dF(f, qa), q @ mf.dF(f, a) @ q.T, rtol=1e-10, atol=1e-12)
    assert mf.d2F_quadform(f, qa, qb) == pytest.approx(mf.d2F_quadform(f, a, b), rel=1e-8, abs=1e-10)


def test_dualconc_example_and_zero():
    f = sf.PowerMean(1, 2)
    x = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert mf.dualconc_quadform(f, np.eye(2), x) == pytest.approx(2.0, abs=1e-14)
    assert mf.dualconc_quadform(f, np.eye(2), np.zeros((2, 2))) == 0.0


def test_dualconc_matches_second_derivative_of_Fstar():
    # F*(B) = -F(B^-1); along Y its second derivative is minus the form at A = B^-1, X = A Y A
    rng = np.random.default_rng(5)
    f = sf.SymQuotient(2, 1, 3)
    b = mf.random_spd(3, rng)
    y = mf.symmetrize(rng.standard_normal((3, 3)))
    binv = np.linalg.inv(b)
    h = 1e-4

    def fstar(m):
        return -mf.evalF(f, np.linalg.inv(m))

    fd = (fstar(b + h * y) - 2 * fstar(b) + fstar(b - h * y)) / h**2
    x = binv @ y @ binv
    assert -mf.dualconc_quadform(f, binv, x) == pytest.approx(fd, rel=1e-4, abs=1e-6)


# --- concavity checks ------------------------------------------------------


def test_F_concavity_examples():
    rng = np.random.default_rng(7)
    for _ in range(5):
        a = mf.random_spd(3, rng)
        assert mf.check_F_concavity(sf.PowerMean(0, 3), a).ok
        lin = mf.check_F_concavity(sf.PowerMean(1, 3), a)
        assert lin.ok and abs(lin.worst_value) < 1e-12
    bad = mf.check_F_concavity(sf.PowerMean(2, 3), mf.random_spd(3, rng))
    assert not bad.ok and bad.worst_value > 0


def test_Fstar_concavity_examples():
    rng = np.random.default_rng(8)
    for _ in range(5):
        a = mf.random_spd(3, rng)
        assert mf.check_Fstar_concavity(sf.PowerMean(0, 3), a).ok
        assert mf.check_Fstar_concavity(sf.SymQuotient(2, 1, 3), a).ok
    found = any(not mf.check_Fstar_concavity(sf.PowerMean(-2, 3), mf.random_spd(3, rng, 0.01, 100)).ok for _ in range(50))
    assert found


def test_dualconc_finds_negative_for_h_minus_two():
    rng = np.random.default_rng(9)
    f = sf.PowerMean(-2, 3)
    vals = []
    for _ in range(200):
        a = mf.random_spd(3, rng, 0.01, 100)
        x = mf.symmetrize(rng.standard_normal((3, 3)))
        vals.append(mf.dualconc_quadform(f, a, x))
    assert min(vals) < 0


@pytest.mark.parametrize("n", [2, 3, 4])
def test_matrix_checks_agree_with_vector_class(n):
    rng = np.random.default_rng(20 + n)
    for name, f in sf.standard_catalog(n):
        for _ in range(3):
            a = mf.random_spd(n, rng, 0.05, 20)
            assert mf.check_F_concavity(f, a, n_dirs=30).ok, name
            assert mf.check_Fstar_concavity(f, a).ok, name


def test_degenerate_spectrum_rejected():
    with pytest.raises(DegenerateSpectrum):
        mf.check_F_concavity(sf.PowerMean(0, 2), np.eye(2))


def test_sym_json_round_trip():
    a = mf.random_spd(4, np.random.default_rng(11))
    assert np.array_equal(mf.sym_from_json(mf.sym_to_json(a)), a)
