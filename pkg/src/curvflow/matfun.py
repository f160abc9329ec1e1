"""Spectral functions F(A) = f(lambda(A)) of symmetric matrices and their derivatives.

All routines accept a single ``(n, n)`` matrix or a stack ``(m, n, n)``.
Eigen-decompositions come from a cyclic Jacobi solver, vectorised across
the stack; it is meant for the small dimensions used here (n <= 8).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConvergenceFailure, DegenerateSpectrum, DomainError
from .symfun import SpeedFunction

JACOBI_TOL = 1e-14
JACOBI_MAX_SWEEPS = 100
DEGENERACY_RTOL = 1e-7


def _stack(a):
    arr = np.asarray(a, dtype=float)
    single = arr.ndim == 2
    arr = arr[None] if single else arr
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise ValueError(f"expected square matrices, got shape {np.shape(a)}")
    return arr, single


def symmetrize(a):
    a = np.asarray(a, dtype=float)
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def jacobi_eigh(a, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Eigen-decompose a stack of symmetric matrices by cyclic Jacobi sweeps.

    Returns ascending eigenvalues ``(m, n)`` and orthonormal eigenvector
    columns ``(m, n, n)``.  Each matrix stops rotating once its off-diagonal
    Frobenius mass drops below ``tol * ||A||_F``, so results do not depend on
    what else is in the stack.
    """
    a = symmetrize(a).copy()
    m, n, _ = a.shape
    v = np.broadcast_to(np.eye(n), (m, n, n)).copy()
    scale = np.linalg.norm(a, axis=(1, 2))
    offmask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(a[:, offmask] ** 2, axis=1))
        active = off > tol * scale
        if not active.any():
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[:, p, q]
                rot = active & (apq != 0.0)
                if not rot.any():
                    continue
                safe = np.where(rot, apq, 1.0)
                theta = (a[:, q, q] - a[:, p, p]) / (2.0 * safe)
                t = np.where(theta >= 0.0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
                t = np.where(rot, t, 0.0)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                cc, ss = c[:, None], s[:, None]
                ap, aq = a[:, :, p].copy(), a[:, :, q].copy()
                a[:, :, p] = cc * ap - ss * aq
                a[:, :, q] = ss * ap + cc * aq
                ap, aq = a[:, p, :].copy(), a[:, q, :].copy()
                a[:, p, :] = cc * ap - ss * aq
                a[:, q, :] = ss * ap + cc * aq
                a[rot, p, q] = 0.0
                a[rot, q, p] = 0.0
                vp, vq = v[:, :, p].copy(), v[:, :, q].copy()
                v[:, :, p] = cc * vp - ss * vq
                v[:, :, q] = ss * vp + cc * vq
    else:
        raise ConvergenceFailure(f"Jacobi iteration did not converge in {max_sweeps} sweeps")
    lam = np.diagonal(a, axis1=1, axis2=2).copy()
    order = np.argsort(lam, axis=1, kind="stable")
    lam = np.take_along_axis(lam, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    return lam, v


@dataclass(frozen=True)
class EigenSystem:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    source: np.ndarray

    @property
    def inverse_eigenvalues(self):
        return 1.0 / self.eigenvalues

    @property
    def trace(self) -> float:
        return float(self.eigenvalues.sum())

    def inverse(self):
        q = self.eigenvectors
        return (q * self.inverse_eigenvalues) @ q.T

    def reconstruct(self):
        q = self.eigenvectors
        return (q * self.eigenvalues) @ q.T


def eigh(a) -> EigenSystem:
    arr, single = _stack(a)
    if not single:
        raise ValueError("eigh takes one matrix; use jacobi_eigh for stacks")
    lam, q = jacobi_eigh(arr)
    return EigenSystem(lam[0], q[0], symmetrize(arr[0]))


def _spectral(f: SpeedFunction, a, order):
    arr, single = _stack(a)
    if arr.shape[1] != f.n:
        raise ValueError(f"matrix dimension {arr.shape[1]} does not match speed arity {f.n}")
    lam, q = jacobi_eigh(arr)
    if not np.all(lam[:, 0] > 0):
        raise DomainError("F is only defined for positive definite matrices")
    fv, fg, fh = f.derivatives(lam, order)
    return single, lam, q, fv, fg, fh


def spectral_first_order(f: SpeedFunction, a):
    """Eigenvalues, F and the eigenvalue-gradient f'(lambda) for a stack of matrices."""
    _, lam, _, fv, fg, _ = _spectral(f, a, 1)
    return lam, fv, fg


def divided_differences(fg, fh, lam, rtol=DEGENERACY_RTOL):
    """Matrix of (f'_k - f'_l)/(lam_k - lam_l), with the coincident-eigenvalue limit.

    Where the gap is below ``rtol * max(1, |lam_k|, |lam_l|)`` the quotient is
    replaced by ``f''_kk - f''_kl``.  The diagonal holds that limit too.
    """
    dl = lam[:, :, None] - lam[:, None, :]
    df = fg[:, :, None] - fg[:, None, :]
    thresh = rtol * np.maximum(1.0, np.maximum(np.abs(lam)[:, :, None], np.abs(lam)[:, None, :]))
    close = np.abs(dl) < thresh
    limit = np.diagonal(fh, axis1=1, axis2=2)[:, :, None] - fh
    return np.where(close, limit, df / np.where(close, 1.0, dl))


def has_degenerate_gap(lam, rtol=DEGENERACY_RTOL) -> bool:
    lam = np.atleast_2d(lam)
    gaps = np.diff(lam, axis=1)
    thresh = rtol * np.maximum(1.0, np.maximum(np.abs(lam[:, 1:]), np.abs(lam[:, :-1])))
    return bool(np.any(gaps < thresh))


def evalF(f: SpeedFunction, a):
    single, _, _, fv, _, _ = _spectral(f, a, 0)
    return float(fv[0]) if single else fv


def dF(f: SpeedFunction, a):
    """Gradient of F: Q diag(f'(lambda)) Q^T."""
    single, _, q, _, fg, _ = _spectral(f, a, 1)
    out = np.einsum("mik,mk,mjk->mij", q, fg, q)
    return out[0] if single else out


def _rotate_in(q, b):
    return np.einsum("mki,mkl,mlj->mij", q, b, q)


def _quadform_eigenbasis(lam, fg, fh, bt):
    diag = np.diagonal(bt, axis1=1, axis2=2)
    dd = divided_differences(fg, fh, lam)
    n = lam.shape[1]
    off = ~np.eye(n, dtype=bool)
    term1 = np.einsum("mk,mkl,ml->m", diag, fh, diag)
    term2 = np.sum(np.where(off, dd * bt**2, 0.0), axis=(1, 2))
    return term1 + term2


def d2F_quadform(f: SpeedFunction, a, b):
    """Second derivative of F at A in direction B.

    In A's eigenbasis: sum f''_kl B_kk B_ll + 2 sum_{k<l} DD_kl B_kl**2, with
    DD the divided differences of f' (limit form for coincident eigenvalues).
    """
    single, lam, q, _, fg, fh = _spectral(f, a, 2)
    barr, _ = _stack(b)
    bt = _rotate_in(q, symmetrize(barr))
    out = _quadform_eigenbasis(lam, fg, fh, bt)
    return float(out[0]) if single else out


def dualconc_quadform(f: SpeedFunction, a, x):
    """F''(X, X) + 2 Fdot^{kp} (A^-1)^{lq} X_kl X_pq, evaluated in A's eigenbasis."""
    single, lam, q, _, fg, fh = _spectral(f, a, 2)
    xarr, _ = _stack(x)
    xt = _rotate_in(q, symmetrize(xarr))
    second = 2.0 * np.einsum("mk,mkl,ml->m", fg, xt**2, 1.0 / lam)
    out = _quadform_eigenbasis(lam, fg, fh, xt) + second
    return float(out[0]) if single else out


class ConcavityCheck(NamedTuple):
    ok: bool
    worst_direction: np.ndarray
    worst_value: float


def check_F_concavity(f: SpeedFunction, a, n_dirs: int = 100, tol: float = 1e-9, seed: int = 0) -> ConcavityCheck:
    """Test concavity of F at A via the eigenvalue criterion, cross-checked by sampling.

    The criterion: f'' <= 0 at lambda(A) and every divided difference <= 0.
    ``worst_value`` is the largest sampled ``F''(B, B) / ||B||^2`` and
    ``worst_direction`` the B attaining it.  Tolerances are relative to
    ``F(A) / ||A||^2``.
    """
    a = symmetrize(a)
    _, lam, q, fv, fg, fh = _spectral(f, a, 2)
    lam, q, fv, fg, fh = lam[0], q[0], fv[0], fg[0], fh[0]
    if has_degenerate_gap(lam):
        raise DegenerateSpectrum("eigenvalues of A are too close; perturb A")
    n = f.n
    scale = abs(fv) / np.sum(lam**2)
    w, vecs = np.linalg.eigh(fh)
    hess_ok = w[-1] <= tol * (np.linalg.norm(fh) + 1e-300)
    dd = divided_differences(fg[None], fh[None], lam[None])[0]
    off = ~np.eye(n, dtype=bool)
    dd_ok = bool(np.all(dd[off] <= tol * scale))

    candidates = [q @ np.diag(vecs[:, -1]) @ q.T]
    for k in range(n):
        for l in range(k + 1, n):
            e = np.zeros((n, n))
            e[k, l] = e[l, k] = 1.0 / np.sqrt(2.0)
            candidates.append(q @ e @ q.T)
    rng = np.random.default_rng(seed)
    for _ in range(n_dirs):
        g = rng.standard_normal((n, n))
        candidates.append(symmetrize(g))
    bs = np.stack(candidates)
    vals = d2F_quadform(f, np.broadcast_to(a, bs.shape), bs) / np.sum(bs**2, axis=(1, 2))
    i = int(np.argmax(vals))
    sampled_ok = bool(np.all(vals <= tol * scale))
    return ConcavityCheck(bool(hess_ok and dd_ok and sampled_ok), bs[i], float(vals[i]))


class FstarCheck(NamedTuple):
    ok: bool
    worst_value: float
    witness: np.ndarray


def check_Fstar_concavity(f: SpeedFunction, a, tol: float = 1e-9) -> FstarCheck:
    """Eigenvalue criterion for concavity of F*(A) = -F(A^-1) at A.

    Requires ``f'' + 2 diag(f'/lambda) >= 0`` and, for k != l,
    ``DD_kl + f'_k/lambda_l + f'_l/lambda_k >= 0``.  Returns the most
    violated normalised quantity and a matrix X along which the dual
    concavity form is smallest.
    """
    a = symmetrize(a)
    _, lam, q, fv, fg, fh = _spectral(f, a, 2)
    lam, q, fv, fg, fh = lam[0], q[0], fv[0], fg[0], fh[0]
    if has_degenerate_gap(lam):
        raise DegenerateSpectrum("eigenvalues of A are too close; perturb A")
    n = f.n
    m1 = fh + 2.0 * np.diag(fg / lam)
    w, vecs = np.linalg.eigh(m1)
    best = w[0] / (np.linalg.norm(m1) + 1e-300)
    witness = q @ np.diag(vecs[:, 0]) @ q.T
    scale = abs(fv) / np.sum(lam**2)
    dd = divided_differences(fg[None], fh[None], lam[None])[0]
    for k in range(n):
        for l in range(k + 1, n):
            pair = (dd[k, l] + fg[k] / lam[l] + fg[l] / lam[k]) / scale
            if pair < best:
                best = pair
                e = np.zeros((n, n))
                e[k, l] = e[l, k] = 1.0
                witness = q @ e @ q.T
    return FstarCheck(bool(best >= -tol), float(best), witness)


def sym_to_json(a) -> dict:
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    iu = np.triu_indices(n)
    return {"n": n, "upper": [float(v) for v in a[iu]]}


def sym_from_json(doc) -> np.ndarray:
    n = int(doc["n"])
    upper = np.asarray(doc["upper"], dtype=float)
    if upper.size != n * (n + 1) // 2:
        raise ValueError(f"expected {n * (n + 1) // 2} upper-triangle entries, got {upper.size}")
    a = np.zeros((n, n))
    a[np.triu_indices(n)] = upper
    return a + np.triu(a, 1).T


def random_spd(n, rng, lo=0.5, hi=3.0, min_gap=1e-3):
    """Random SPD matrix with log-uniform spectrum in [lo, hi] and gaps >= min_gap."""
    while True:
        lam = np.sort(np.exp(rng.uniform(np.log(lo), np.log(hi), n)))
        if n == 1 or np.min(np.diff(lam)) >= min_gap:
            break
    qm, r = np.linalg.qr(rng.standard_normal((n, n)))
    qm = qm * np.sign(np.diag(r))
    return symmetrize((qm * lam) @ qm.T)


@dataclass
class CalculusReport:
    trials: int
    max_dF_residual: float
    max_d2F_residual: float
    dF_tol: float
    d2F_tol: float
    worst_dF: dict
    worst_d2F: dict

    @property
    def ok(self) -> bool:
        return self.max_dF_residual <= self.dF_tol and self.max_d2F_residual <= self.d2F_tol

    def to_dict(self):
        return {
            "trials": self.trials,
            "max_dF_residual": self.max_dF_residual,
            "max_d2F_residual": self.max_d2F_residual,
            "dF_tol": self.dF_tol,
            "d2F_tol": self.d2F_tol,
            "worst_dF": self.worst_dF,
            "worst_d2F": self.worst_d2F,
            "ok": self.ok,
        }


def random_pairs(n, trials, seed, gap=None):
    """Seeded (A, B) pairs. With ``gap`` set, A's two smallest eigenvalues are lam, lam*(1+gap)."""
    rng = np.random.default_rng(seed)
    a = np.empty((trials, n, n))
    for i in range(trials):
        a[i] = random_spd(n, rng)
        if gap is not None and n >= 2:
            lam, q = np.linalg.eigh(a[i])
            lam[1] = lam[0] * (1.0 + gap)
            a[i] = symmetrize((q * lam) @ q.T)
    b = symmetrize(rng.standard_normal((trials, n, n)))
    return a, b


def calculus_check(f: SpeedFunction, trials: int = 500, seed: int = 0, gap=None,
                   h1: float = 1e-5, h2: float = 1e-4, dF_tol: float = 1e-6, d2F_tol: float = 1e-4) -> CalculusReport:
    """Compare dF and d2F_quadform with central differences of evalF.

    Residuals are relative, with a floor of |F| * ||B||^2 / ||A||^2 on the
    denominator so that exactly linear F (zero second derivative) does not
    divide by zero.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    a, b = random_pairs(f.n, trials, seed, gap)
    fa = evalF(f, a)
    fp, fm = evalF(f, a + h1 * b), evalF(f, a - h1 * b)
    fd1 = (fp - fm) / (2 * h1)
    an1 = np.einsum("mij,mij->m", dF(f, a), b)
    fp2, fm2 = evalF(f, a + h2 * b), evalF(f, a - h2 * b)
    fd2 = (fp2 - 2 * fa + fm2) / h2**2
    an2 = d2F_quadform(f, a, b)
    bn = np.sum(b**2, axis=(1, 2))
    anorm = np.sum(a**2, axis=(1, 2))
    floor1 = np.abs(fa) * np.sqrt(bn / anorm)
    floor2 = np.abs(fa) * bn / anorm
    r1 = np.abs(fd1 - an1) / np.maximum(np.abs(an1), floor1)
    r2 = np.abs(fd2 - an2) / np.maximum(np.abs(an2), floor2)
    i1, i2 = int(np.argmax(r1)), int(np.argmax(r2))
    return CalculusReport(
        trials=trials,
        max_dF_residual=float(r1[i1]),
        max_d2F_residual=float(r2[i2]),
        dF_tol=dF_tol,
        d2F_tol=d2F_tol,
        worst_dF={"A": sym_to_json(a[i1]), "B": sym_to_json(b[i1]), "analytic": float(an1[i1]), "fd": float(fd1[i1])},
        worst_d2F={"A": sym_to_json(a[i2]), "B": sym_to_json(b[i2]), "analytic": float(an2[i2]), "fd": float(fd2[i2])},
    )
