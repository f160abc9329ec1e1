"""The pinching quadratic form Q and its block decomposition.

An instance is a strictly increasing positive spectrum ``lam`` (the matrix
A in its eigenbasis, null direction ``e_0``), ``eps = lam[0] / sum(lam)``,
and a totally symmetric 3-tensor ``T`` whose entries ``T[k, 0, 0]`` are
tied to the rest by ``T[k,0,0] = eps/(1-eps) * sum_{j>0} T[k,j,j]``.

Indices are 0-based: the 1-based ``T_{1kl}`` of the usual notation is ``T[0, k-1, l-1]``.
Heavy lifting is vectorised over a leading batch axis so that Monte-Carlo
verification can push 10^5 instances through in seconds.
"""

from __future__ import annotations

import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpectrum, ShapeMismatch
from .symfun import SpeedFunction

GAP_MIN = 1e-4


def free_indices(n: int) -> list[tuple[int, int, int]]:
    """Sorted multi-indices of the unconstrained tensor entries, canonical order."""
    return [t for t in itertools.combinations_with_replacement(range(n), 3) if not (t[0] == 0 and t[1] == 0)]


def _perms(t):
    return set(itertools.permutations(t))


class Sym3Tensor:
    """Totally symmetric 3-index array, addressed by sorted multi-index."""

    def __init__(self, n: int, array=None):
        self.n = n
        if array is None:
            array = np.zeros((n, n, n))
        a = np.asarray(array, dtype=float)
        if a.shape != (n, n, n):
            raise ShapeMismatch(f"expected shape {(n, n, n)}, got {a.shape}")
        sym = sum(np.transpose(a, p) for p in itertools.permutations(range(3))) / 6.0
        self.array = sym

    @classmethod
    def from_components(cls, n, components: dict):
        a = np.zeros((n, n, n))
        for idx, v in components.items():
            for p in _perms(tuple(idx)):
                a[p] = v
        return cls(n, a)

    def __getitem__(self, idx):
        return self.array[tuple(sorted(idx))]

    def components(self) -> dict:
        return {t: float(self.array[t]) for t in itertools.combinations_with_replacement(range(self.n), 3)}

    def norm2(self) -> float:
        return float(np.sum(self.array**2))


def _check_spectrum(lam, gap_min):
    lam = np.asarray(lam, dtype=float)
    if lam.ndim != 1 or lam.size < 2:
        raise InvalidSpectrum("need at least two eigenvalues")
    if not np.all(np.isfinite(lam)) or lam[0] <= 0:
        raise InvalidSpectrum("eigenvalues must be positive")
    rel = np.diff(lam) / lam[1:]
    if np.any(rel < gap_min):
        raise InvalidSpectrum(f"eigenvalues must increase with relative gaps >= {gap_min}")
    return lam


def build_tensors(lam: np.ndarray, free: np.ndarray) -> np.ndarray:
    """Assemble a batch of constrained tensors ``(m, n, n, n)`` from free entries."""
    m, n = lam.shape
    idx = free_indices(n)
    t = np.zeros((m, n, n, n))
    for col, tri in enumerate(idx):
        for p in _perms(tri):
            t[(slice(None),) + p] = free[:, col]
    eps = lam[:, 0] / lam.sum(axis=1)
    c = eps / (1.0 - eps)
    ar = np.arange(1, n)
    for k in range(n):
        val = c * t[:, k, ar, ar].sum(axis=1)
        for p in _perms((k, 0, 0)):
            t[(slice(None),) + p] = val
    return t


@dataclass
class PinchInstance:
    lam: np.ndarray
    free: np.ndarray
    T: Sym3Tensor = field(repr=False)

    @property
    def n(self) -> int:
        return self.lam.size

    @property
    def epsilon(self) -> float:
        return float(self.lam[0] / self.lam.sum())

    def constraint_residual(self) -> float:
        c = self.epsilon / (1.0 - self.epsilon)
        a = self.T.array
        ar = np.arange(1, self.n)
        return float(max(abs(a[k, 0, 0] - c * a[k, ar, ar].sum()) for k in range(self.n)))

    def to_dict(self):
        return {"lambda": [float(v) for v in self.lam], "T_free": [float(v) for v in self.free]}

    @classmethod
    def from_dict(cls, doc, gap_min=GAP_MIN):
        return make_instance(doc["lambda"], doc["T_free"], gap_min=gap_min)


def make_instance(lam, free=None, seed: int = 0, gap_min: float = GAP_MIN) -> PinchInstance:
    """Build a valid instance.

    ``free`` may be a full sequence of free entries (canonical order of
    ``free_indices``), a mapping from 0-based index triples to values, or
    None.  Entries not given are drawn from a standard normal stream seeded
    by ``seed``.  Constrained entries are then computed, never taken from
    the caller.
    """
    lam = _check_spectrum(lam, gap_min)
    n = lam.size
    idx = free_indices(n)
    vals = np.random.default_rng(seed).standard_normal(len(idx))
    if isinstance(free, dict):
        pos = {t: i for i, t in enumerate(idx)}
        for key, v in free.items():
            key = tuple(sorted(key))
            if key not in pos:
                raise ShapeMismatch(f"{key} is a constrained entry, not a free one")
            vals[pos[key]] = v
    elif free is not None:
        arr = np.asarray(free, dtype=float)
        if arr.shape != (len(idx),):
            raise ShapeMismatch(f"expected {len(idx)} free entries, got shape {arr.shape}")
        vals = arr.copy()
    t = build_tensors(lam[None], vals[None])[0]
    inst = PinchInstance(lam, vals, Sym3Tensor.__new__(Sym3Tensor))
    inst.T.n, inst.T.array = n, t
    return inst


def optimal_gamma(inst: PinchInstance) -> np.ndarray:
    """Maximiser of the Gamma-term: G[k, p-1] = T[k, p, 0] / (lam_p - lam_0), p >= 1."""
    lam, t = inst.lam, inst.T.array
    return t[:, 1:, 0] / (lam[1:] - lam[0])[None, :]


def gamma_term(f: SpeedFunction, inst: PinchInstance, gamma) -> float:
    """2 Fdot^{kl} (2 G_k^p (T_{lpi} v^i - eps tr(T_l) v_p) - G_k^p G_l^q (A - eps trA I)_{pq}).

    Evaluated in the eigenbasis, v = e_0.  ``gamma`` has shape (n, n-1):
    its column p-1 holds G_k^p; the p = 0 column is fixed at zero.
    """
    n, lam, t = inst.n, inst.lam, inst.T.array
    g = np.asarray(gamma, dtype=float)
    if g.shape != (n, n - 1):
        raise ShapeMismatch(f"gamma must have shape {(n, n - 1)}, got {g.shape}")
    full = np.zeros((n, n))
    full[:, 1:] = g
    eps = inst.epsilon
    fdot = np.diag(f.gradient(lam))
    lin = t[:, :, 0].copy()
    lin[:, 0] -= eps * np.trace(t, axis1=1, axis2=2)
    s = np.diag(lam) - eps * lam.sum() * np.eye(n)
    val = 2.0 * np.einsum("kl,kp,lp->", fdot, full, lin) - np.einsum("kl,kp,lq,pq->", fdot, full, full, s)
    return float(2.0 * val)


def _divdiff(lam, fg):
    dl = lam[:, :, None] - lam[:, None, :]
    n = lam.shape[1]
    eye = np.eye(n, dtype=bool)
    return np.where(eye, 0.0, (fg[:, :, None] - fg[:, None, :]) / np.where(eye, 1.0, dl))


def q_direct_batch(lam, t, fg, fh):
    """The five-term form Q for a batch, with the optimal Gamma already substituted."""
    eps = lam[:, 0] / lam.sum(axis=1)
    dd = _divdiff(lam, fg)
    tdiag = np.diagonal(t, axis1=2, axis2=3)  # [:, j, k] = T_jkk
    term1 = np.einsum("mk,mkl,ml->m", tdiag[:, 0], fh, tdiag[:, 0])
    term2 = -eps * np.einsum("mjk,mkl,mjl->m", tdiag, fh, tdiag)
    gaps = lam[:, 1:] - lam[:, :1]
    term3 = 2.0 * np.einsum("mk,mkl,ml->m", fg, t[:, 0, :, 1:] ** 2, 1.0 / gaps)
    term4 = np.sum(dd * t[:, 0] ** 2, axis=(1, 2))
    term5 = -eps * np.einsum("mkl,mjkl->m", dd, t**2)
    return term1 + term2 + term3 + term4 + term5


def q_blocks_batch(lam, t, fg, fh):
    """Block decomposition of Q; returns (q1, qk, q1kl, qjkl) batch arrays."""
    m, n = lam.shape
    eps = lam[:, 0] / lam.sum(axis=1)
    c = eps / (1.0 - eps)
    dd = _divdiff(lam, fg)
    gaps = lam[:, 1:] - lam[:, :1]
    cc = c[:, None, None]
    shifted = (fh[:, 1:, 1:] + cc * (fh[:, 1:, :1] + fh[:, :1, 1:]) + cc**2 * fh[:, :1, :1])
    coef = ((1.0 - eps)[:, None] * fg[:, 1:] + eps[:, None] * fg[:, :1]) / gaps

    a = np.diagonal(t[:, 0], axis1=1, axis2=2)[:, 1:]
    q1 = (1.0 - eps) * np.einsum("mk,mkl,ml->m", a, shifted, a) + 2.0 * np.sum(coef * a**2, axis=1)

    qk = np.empty((m, n - 1))
    for k in range(1, n):
        b = np.diagonal(t[:, k], axis1=1, axis2=2)[:, 1:]
        quad = -eps * np.einsum("mi,mij,mj->m", b, shifted, b)
        tied = 2.0 * coef[:, k - 1] * (c * b.sum(axis=1)) ** 2
        others = [j for j in range(1, n) if j != k]
        cross = -2.0 * eps * sum((dd[:, k, j] * t[:, k, j, j] ** 2 for j in others), np.zeros(m))
        qk[:, k - 1] = quad + tied + cross

    pairs = list(itertools.combinations(range(1, n), 2))
    q1kl = np.empty((m, len(pairs)))
    for col, (k, l) in enumerate(pairs):
        gk, gl = gaps[:, k - 1], gaps[:, l - 1]
        bracket = ((1.0 - eps) * dd[:, k, l] + fg[:, l] / gk + fg[:, k] / gl
                   - eps * (fg[:, k] - fg[:, 0]) / gk - eps * (fg[:, l] - fg[:, 0]) / gl)
        q1kl[:, col] = 2.0 * bracket * t[:, 0, k, l] ** 2

    triples = list(itertools.combinations(range(1, n), 3))
    qjkl = np.empty((m, len(triples)))
    for col, (j, k, l) in enumerate(triples):
        qjkl[:, col] = -2.0 * eps * (dd[:, k, l] + dd[:, k, j] + dd[:, l, j]) * t[:, j, k, l] ** 2
    return q1, qk, q1kl, qjkl


@dataclass
class QBreakdown:
    q1: float
    qk: list
    q1kl: list
    qjkl: list
    total_blocks: float
    total_direct: float

    def blocks(self) -> list:
        return [self.q1, *self.qk, *self.q1kl, *self.qjkl]

    def to_dict(self):
        return {"q1": self.q1, "qk": self.qk, "q1kl": self.q1kl, "qjkl": self.qjkl,
                "total_blocks": self.total_blocks, "total_direct": self.total_direct}


def _derivs(f, lam2d):
    if f.n != lam2d.shape[1]:
        raise ShapeMismatch(f"speed arity {f.n} does not match dimension {lam2d.shape[1]}")
    return f.derivatives(lam2d, 2)


def q_direct(f: SpeedFunction, inst: PinchInstance) -> float:
    lam = inst.lam[None]
    _, fg, fh = _derivs(f, lam)
    return float(q_direct_batch(lam, inst.T.array[None], fg, fh)[0])


def q_blocks(f: SpeedFunction, inst: PinchInstance) -> QBreakdown:
    lam = inst.lam[None]
    t = inst.T.array[None]
    _, fg, fh = _derivs(f, lam)
    q1, qk, q1kl, qjkl = q_blocks_batch(lam, t, fg, fh)
    parts = [float(q1[0])] + [float(v) for v in qk[0]] + [float(v) for v in q1kl[0]] + [float(v) for v in qjkl[0]]
    return QBreakdown(
        q1=parts[0],
        qk=[float(v) for v in qk[0]],
        q1kl=[float(v) for v in q1kl[0]],
        qjkl=[float(v) for v in qjkl[0]],
        total_blocks=math.fsum(parts),
        total_direct=float(q_direct_batch(lam, t, fg, fh)[0]),
    )


# ---------------------------------------------------------------------------
# the auxiliary function phi and its dual


def phi_star_residuals(f: SpeedFunction, lam, n_samples: int = 1000, seed: int = 0) -> dict:
    """Residuals of the concavity argument for phi*(x) = f*(psi(x), x).

    phi(x_2..x_n) = f(eps/(1-eps) * sum x, x_2..x_n) and psi is
    (1-eps)/eps times a harmonic-type mean.  Every returned array should
    be >= 0 up to rounding (``identity`` should be ~0); each is normalised
    by the magnitude of the values involved.
    """
    lam = np.asarray(lam, dtype=float)
    n = lam.size
    eps = lam[0] / lam.sum()
    c = eps / (1.0 - eps)
    rng = np.random.default_rng(seed)
    d = n - 1
    x = 10.0 ** rng.uniform(-2, 2, (n_samples, d))
    y = 10.0 ** rng.uniform(-2, 2, (n_samples, d))
    alpha = rng.uniform(0.0, 1.0, (n_samples, 1))

    def phi(z):
        return f.derivatives(np.hstack([c * z.sum(axis=1, keepdims=True), z]), 0)[0]

    def phi_star(z):
        return -phi(1.0 / z)

    def psi(z):
        return ((1.0 - eps) / eps) / np.sum(1.0 / z, axis=1)

    def f_star(z0, z):
        return -f.derivatives(1.0 / np.hstack([z0[:, None], z]), 0)[0]

    z = alpha * x + (1 - alpha) * y
    px, py, pz = phi_star(x), phi_star(y), phi_star(z)
    scale = np.abs(px) + np.abs(py) + 1e-300
    mid = phi_star(0.5 * (x + y))
    mixed_psi = alpha[:, 0] * psi(x) + (1 - alpha[:, 0]) * psi(y)
    chain_lo = alpha[:, 0] * px + (1 - alpha[:, 0]) * py
    chain_mid = f_star(mixed_psi, z)
    chain_hi = f_star(psi(z), z)

    # Hessian of phi* via the dual-derivative rule applied to phi
    xx = 1.0 / x
    full = np.hstack([c * xx.sum(axis=1, keepdims=True), xx])
    _, fg, fh = f.derivatives(full, 2)
    pg = fg[:, 1:] + c * fg[:, :1]
    ph = fh[:, 1:, 1:] + c * (fh[:, 1:, :1] + fh[:, :1, 1:]) + c**2 * fh[:, :1, :1]
    hs = -ph * (xx**2)[:, :, None] * (xx**2)[:, None, :]
    hs[:, np.arange(d), np.arange(d)] -= 2.0 * pg * xx**3
    top = np.linalg.eigvalsh(hs)[:, -1] / (np.linalg.norm(hs, axis=(1, 2)) + 1e-300)

    return {
        "midpoint": (mid - 0.5 * (px + py)) / scale,
        "chain_first": (chain_mid - chain_lo) / scale,
        "chain_second": (chain_hi - chain_mid) / scale,
        "psi_concave": (psi(z) - mixed_psi) / (np.abs(mixed_psi) + 1e-300),
        "identity": -np.abs(pz - chain_hi) / (np.abs(pz) + 1e-300),
        "hessian": -top,
    }


def check_phi_star(f: SpeedFunction, lam, n_samples: int = 1000, seed: int = 0, tol: float = 1e-9) -> bool:
    """Sampled concavity test of phi* and of the inequality chain that proves it."""
    res = phi_star_residuals(f, lam, n_samples, seed)
    return all(bool(np.all(v >= -tol)) for v in res.values())


# ---------------------------------------------------------------------------
# Monte-Carlo verification


@dataclass
class VerifyReport:
    speed: dict
    n: int
    trials: int
    seed: int
    tol: float
    min_q_normalized: float
    argmin: dict
    min_block_normalized: float
    block_violations: int
    n_violations: int
    violations: list
    max_identity_residual: float

    @property
    def ok(self) -> bool:
        return self.n_violations == 0

    def to_dict(self):
        return {
            "f": self.speed,
            "n": self.n,
            "trials": self.trials,
            "seed": self.seed,
            "tol": self.tol,
            "min_q_normalized": self.min_q_normalized,
            "argmin": self.argmin,
            "min_block_normalized": self.min_block_normalized,
            "block_violations": self.block_violations,
            "n_violations": self.n_violations,
            "max_identity_residual": self.max_identity_residual,
            "violations": self.violations,
        }


def random_spectra(rng, m, n, gap_min=GAP_MIN, lo=1e-2, hi=1e2):
    """Sorted log-uniform spectra; rows with a relative gap below gap_min are redrawn."""
    llo, lhi = math.log10(lo), math.log10(hi)
    lam = np.sort(10.0 ** rng.uniform(llo, lhi, (m, n)), axis=1)
    while True:
        bad = np.any(np.diff(lam, axis=1) / lam[:, 1:] < gap_min, axis=1)
        if not bad.any():
            return lam
        lam[bad] = np.sort(10.0 ** rng.uniform(llo, lhi, (int(bad.sum()), n)), axis=1)


def _run_chunk(f, n, size, seed, index, gap_min):
    rng = np.random.default_rng([seed, index])
    lam = random_spectra(rng, size, n, gap_min)
    free = rng.standard_normal((size, len(free_indices(n))))
    t = build_tensors(lam, free)
    _, fg, fh = f.derivatives(lam, 2)
    q1, qk, q1kl, qjkl = q_blocks_batch(lam, t, fg, fh)
    blocks = np.hstack([q1[:, None], qk, q1kl, qjkl])
    total_blocks = blocks.sum(axis=1)
    direct = q_direct_batch(lam, t, fg, fh)
    norm2 = np.sum(t**2, axis=(1, 2, 3))
    safe = np.where(norm2 > 0, norm2, 1.0)
    qn = np.where(norm2 > 0, direct / safe, 0.0)
    bn = np.where(norm2[:, None] > 0, blocks / safe[:, None], 0.0)
    resid = np.abs(total_blocks - direct) / (1.0 + np.abs(direct))
    return lam, free, blocks, direct, qn, bn, resid, (q1, qk, q1kl, qjkl)


def _threads():
    try:
        return max(1, int(os.environ.get("CURVFLOW_THREADS", "1")))
    except ValueError:
        return 1


def verify(f: SpeedFunction, n: int, n_trials: int, seed: int = 0, tol: float = 1e-9,
           gap_min: float = GAP_MIN, chunk: int = 4096, max_violations: int = 50) -> VerifyReport:
    """Monte-Carlo search for instances with Q < -tol * ||T||^2.

    Spectra are log-uniform on [1e-2, 1e2], free tensor entries standard
    normal.  Each chunk of ``chunk`` trials draws from its own stream keyed
    by (seed, chunk index), so results do not depend on thread scheduling.
    Only the first ``max_violations`` offending instances are serialised;
    ``n_violations`` counts all of them.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if f.n != n:
        raise ShapeMismatch(f"speed arity {f.n} does not match n={n}")
    sizes = [min(chunk, n_trials - s) for s in range(0, n_trials, chunk)]
    jobs = list(enumerate(sizes))
    workers = _threads()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda j: _run_chunk(f, n, j[1], seed, j[0], gap_min), jobs))
    else:
        results = [_run_chunk(f, n, size, seed, i, gap_min) for i, size in jobs]

    best = (math.inf, None)
    min_block = math.inf
    block_viol = 0
    n_viol = 0
    viols = []
    resid_max = 0.0
    for lam, free, blocks, direct, qn, bn, resid, parts in results:
        i = int(np.argmin(qn))
        if qn[i] < best[0]:
            best = (float(qn[i]), {"lambda": lam[i].tolist(), "T_free": free[i].tolist()})
        min_block = min(min_block, float(bn.min()))
        block_viol += int(np.sum(np.any(bn < -tol, axis=1)))
        resid_max = max(resid_max, float(resid.max()))
        bad = np.flatnonzero(qn < -tol)
        n_viol += bad.size
        q1, qk, q1kl, qjkl = parts
        for j in bad[: max(0, max_violations - len(viols))]:
            viols.append({
                "lambda": lam[j].tolist(),
                "T_free": free[j].tolist(),
                "q_normalized": float(qn[j]),
                "q_blocks": {
                    "q1": float(q1[j]), "qk": qk[j].tolist(), "q1kl": q1kl[j].tolist(),
                    "qjkl": qjkl[j].tolist(), "total_blocks": float(blocks[j].sum()),
                    "total_direct": float(direct[j]),
                },
            })
    return VerifyReport(
        speed=f.to_dict(), n=n, trials=n_trials, seed=seed, tol=tol,
        min_q_normalized=best[0], argmin=best[1], min_block_normalized=min_block,
        block_violations=block_viol, n_violations=n_viol, violations=viols,
        max_identity_residual=resid_max,
    )
