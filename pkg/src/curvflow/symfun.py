"""Symmetric, degree-one speed functions on the positive cone.

A speed function is an immutable expression tree.  Leaves are power means,
elementary-symmetric quotients and their weighted geometric means; nodes
compose functions or apply the power transform ``f_r(x) = f(x**r)**(1/r)``.

Everything is vectorised over a leading batch axis: a point array of shape
``(m, n)`` yields values ``(m,)``, gradients ``(m, n)`` and Hessians
``(m, n, n)``.  Derivatives are analytic throughout; finite differences
only appear in the test-suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ArityMismatch, DomainError, InvalidSpec

__all__ = [
    "SpeedFunction",
    "PowerMean",
    "ElemSym",
    "SymQuotient",
    "WeightedGeoMean",
    "LinearCombination",
    "Compose",
    "PowerTransform",
    "Dual",
    "ClassReport",
    "Witness",
    "make_speed",
    "evaluate",
    "grad",
    "hess",
    "dual",
    "power_transform",
    "compose",
    "check_class",
    "witness_violation",
    "sample_cone_points",
    "standard_catalog",
]


def _batch(x, n):
    a = np.asarray(x, dtype=float)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    if a.ndim != 2 or a.shape[1] != n:
        raise ArityMismatch(f"expected points with {n} coordinates, got shape {np.shape(x)}")
    if not np.all(np.isfinite(a)) or np.any(a <= 0.0):
        raise DomainError("speed functions are defined on the open positive cone only")
    return a, single


class SpeedFunction:
    """Common interface of every node in a speed-function tree.

    Subclasses implement ``derivatives(x, order)`` on an already validated
    batch and ``to_dict()``.
    """

    n: int

    def derivatives(self, x: np.ndarray, order: int = 2):
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def value(self, x):
        a, single = _batch(x, self.n)
        v = self.derivatives(a, 0)[0]
        return float(v[0]) if single else v

    def gradient(self, x):
        a, single = _batch(x, self.n)
        g = self.derivatives(a, 1)[1]
        return g[0] if single else g

    def hessian(self, x):
        a, single = _batch(x, self.n)
        h = self.derivatives(a, 2)[2]
        return h[0] if single else h

    def all_derivatives(self, x):
        """Value, gradient and Hessian in one pass (batched input only)."""
        a, _ = _batch(x, self.n)
        return self.derivatives(a, 2)

    __call__ = value

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


# ---------------------------------------------------------------------------
# leaves


@dataclass(frozen=True)
class PowerMean(SpeedFunction):
    """``((1/n) sum x_i**r)**(1/r)``; ``r = 0`` is the geometric mean."""

    r: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise InvalidSpec("power mean needs n >= 1")
        if not math.isfinite(self.r):
            raise InvalidSpec("power mean exponent must be finite")

    def derivatives(self, x, order=2):
        r, n = float(self.r), self.n
        logx = np.log(x)
        if r == 0.0:
            logh = logx.mean(axis=1)
        else:
            # log-sum-exp keeps wide dynamic ranges finite
            z = r * logx
            zmax = z.max(axis=1, keepdims=True)
            logh = (zmax[:, 0] + np.log(np.exp(z - zmax).mean(axis=1))) / r
        h = np.exp(logh)
        if order == 0:
            return h, None, None
        g = np.exp((r - 1.0) * (logx - logh[:, None])) / n
        if order == 1:
            return h, g, None
        hess = (1.0 - r) * (
            g[:, :, None] * g[:, None, :] / h[:, None, None]
            - _diag(g / x)
        )
        return h, g, hess

    def to_dict(self):
        return {"kind": "power_mean", "r": self.r, "n": self.n}


def _esym(x):
    """Unnormalised elementary symmetric polynomials e_0..e_n of each row."""
    m, n = x.shape
    e = np.zeros((m, n + 1))
    e[:, 0] = 1.0
    for i in range(n):
        e[:, 1 : i + 2] = e[:, 1 : i + 2] + x[:, i : i + 1] * e[:, : i + 1]
    return e


def _esym_derivatives(x, order):
    """e_k and its first and second partial derivatives.

    Returns ``e`` of shape (m, n+1), ``d1[:, k, i] = e_{k-1}(x without i)``
    and ``d2[:, k, i, j] = e_{k-2}(x without i, j)`` (zero on the diagonal).
    All entries are sums of positive products, so there is no cancellation.
    """
    m, n = x.shape
    e = _esym(x)
    d1 = d2 = None
    if order >= 1:
        d1 = np.zeros((m, n + 1, n))
        for i in range(n):
            d1[:, 1:, i] = _esym(np.delete(x, i, axis=1))
    if order >= 2:
        d2 = np.zeros((m, n + 1, n, n))
        for i in range(n):
            for j in range(i + 1, n):
                sub = _esym(np.delete(x, (i, j), axis=1))
                d2[:, 2:, i, j] = sub
                d2[:, 2:, j, i] = sub
    return e, d1, d2


class _SymProduct(SpeedFunction):
    """prod_k S_k**w_k with normalised S_k and sum_k k*w_k = 1."""

    def weights(self) -> np.ndarray:
        raise NotImplementedError

    def derivatives(self, x, order=2):
        n = self.n
        w = self.weights()
        ks = [k for k in range(1, n + 1) if w[k] != 0.0]
        e, d1, d2 = _esym_derivatives(x, order)
        logf = np.zeros(x.shape[0])
        for k in ks:
            logf += w[k] * (np.log(e[:, k]) - math.log(math.comb(n, k)))
        f = np.exp(logf)
        if order == 0:
            return f, None, None
        lg = np.zeros_like(x)
        lh = np.zeros((x.shape[0], n, n)) if order >= 2 else None
        for k in ks:
            u = d1[:, k, :] / e[:, k, None]
            lg += w[k] * u
            if order >= 2:
                lh += w[k] * (d2[:, k] / e[:, k, None, None] - u[:, :, None] * u[:, None, :])
        g = f[:, None] * lg
        if order == 1:
            return f, g, None
        return f, g, f[:, None, None] * (lh + lg[:, :, None] * lg[:, None, :])


@dataclass(frozen=True)
class SymQuotient(_SymProduct):
    """``(S_k / S_l)**(1/(k-l))`` for ``n >= k > l >= 0``."""

    k: int
    l: int
    n: int

    def __post_init__(self):
        if not (self.n >= self.k > self.l >= 0):
            raise InvalidSpec(f"sym_quotient needs n >= k > l >= 0, got k={self.k} l={self.l} n={self.n}")

    def weights(self):
        w = np.zeros(self.n + 1)
        w[self.k] = 1.0 / (self.k - self.l)
        if self.l > 0:
            w[self.l] = -1.0 / (self.k - self.l)
        return w

    def to_dict(self):
        return {"kind": "sym_quotient", "k": self.k, "l": self.l, "n": self.n}


@dataclass(frozen=True)
class ElemSym(_SymProduct):
    """``S_k**(1/k)``, the degree-one normalisation of S_k."""

    k: int
    n: int

    def __post_init__(self):
        if not (1 <= self.k <= self.n):
            raise InvalidSpec(f"elem_sym needs 1 <= k <= n, got k={self.k} n={self.n}")

    def weights(self):
        w = np.zeros(self.n + 1)
        w[self.k] = 1.0 / self.k
        return w

    def to_dict(self):
        return {"kind": "elem_sym", "k": self.k, "n": self.n}


@dataclass(frozen=True)
class WeightedGeoMean(_SymProduct):
    """Weighted geometric mean of the ratios S_{j+1}/S_j, j = 0..n-1.

    ``alpha[j]`` weights ``S_{j+1}/S_j``; equivalently the function is
    ``S_n**a_n * S_{n-1}**(a_{n-1}-a_n) * ... * S_1**(a_1-a_2)``.
    """

    alpha: tuple
    n: int = field(init=False)

    def __post_init__(self):
        a = tuple(float(v) for v in self.alpha)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "n", len(a))
        if len(a) < 1:
            raise InvalidSpec("weighted_geo_mean needs at least one weight")
        if any(v < 0 or not math.isfinite(v) for v in a):
            raise InvalidSpec("weighted_geo_mean weights must be non-negative")
        if abs(sum(a) - 1.0) > 1e-12:
            raise InvalidSpec(f"weighted_geo_mean weights must sum to 1, got {sum(a)!r}")

    def weights(self):
        a = np.append(np.asarray(self.alpha), 0.0)
        w = np.zeros(self.n + 1)
        w[1:] = a[:-1] - a[1:]
        return w

    def to_dict(self):
        return {"kind": "weighted_geo_mean", "alpha": list(self.alpha)}


@dataclass(frozen=True)
class LinearCombination(SpeedFunction):
    """``sum c_i y_i`` with positive coefficients; mostly used as an outer function."""

    coeffs: tuple
    n: int = field(init=False)

    def __post_init__(self):
        c = tuple(float(v) for v in self.coeffs)
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "n", len(c))
        if not c or any(not (v > 0) or not math.isfinite(v) for v in c):
            raise InvalidSpec("linear_combination coefficients must be strictly positive")

    def derivatives(self, x, order=2):
        c = np.asarray(self.coeffs)
        v = x @ c
        g = np.broadcast_to(c, x.shape).copy() if order >= 1 else None
        h = np.zeros((x.shape[0], self.n, self.n)) if order >= 2 else None
        return v, g, h

    def to_dict(self):
        return {"kind": "linear_combination", "coeffs": list(self.coeffs)}


# ---------------------------------------------------------------------------
# nodes


@dataclass(frozen=True)
class Compose(SpeedFunction):
    outer: SpeedFunction
    inners: tuple
    n: int = field(init=False)

    def __post_init__(self):
        inners = tuple(self.inners)
        object.__setattr__(self, "inners", inners)
        if not inners:
            raise ArityMismatch("compose needs at least one inner function")
        if self.outer.n != len(inners):
            raise ArityMismatch(f"outer arity {self.outer.n} != {len(inners)} inner functions")
        arities = {f.n for f in inners}
        if len(arities) != 1:
            raise ArityMismatch(f"inner functions have differing arities {sorted(arities)}")
        object.__setattr__(self, "n", arities.pop())

    def derivatives(self, x, order=2):
        parts = [f.derivatives(x, order) for f in self.inners]
        y = np.stack([p[0] for p in parts], axis=1)
        if not np.all(y > 0):
            raise DomainError("inner function left the positive cone")
        phi, dphi, ddphi = self.outer.derivatives(y, order)
        if order == 0:
            return phi, None, None
        jac = np.stack([p[1] for p in parts], axis=1)  # (m, k, n)
        g = np.einsum("mp,mpi->mi", dphi, jac)
        if order == 1:
            return phi, g, None
        hs = np.stack([p[2] for p in parts], axis=1)  # (m, k, n, n)
        h = np.einsum("mpq,mpi,mqj->mij", ddphi, jac, jac) + np.einsum("mp,mpij->mij", dphi, hs)
        return phi, g, h

    def to_dict(self):
        return {"kind": "compose", "outer": self.outer.to_dict(), "inners": [f.to_dict() for f in self.inners]}


@dataclass(frozen=True)
class PowerTransform(SpeedFunction):
    base: SpeedFunction
    r: float
    n: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "n", self.base.n)
        if self.r == 0 or not (abs(self.r) <= 1):
            raise InvalidSpec(f"power transform exponent must lie in [-1, 1] minus 0, got {self.r!r}")

    def derivatives(self, x, order=2):
        r = float(self.r)
        xr = x**r
        fv, fg, fh = self.base.derivatives(xr, order)
        if not np.all(fv > 0):
            raise DomainError("power transform needs a positive base function")
        val = fv ** (1.0 / r)
        if order == 0:
            return val, None, None
        a = x ** (r - 1.0)
        g = (fv ** (1.0 / r - 1.0))[:, None] * fg * a
        if order == 1:
            return val, g, None
        s = (r - 1.0) / r
        bracket = fh - s * fg[:, :, None] * fg[:, None, :] / fv[:, None, None] + s * _diag(fg / xr)
        coef = r * fv ** (1.0 / r - 1.0)
        h = coef[:, None, None] * a[:, :, None] * a[:, None, :] * bracket
        return val, g, h

    def to_dict(self):
        return {"kind": "power_transform", "base": self.base.to_dict(), "r": self.r}


@dataclass(frozen=True)
class Dual(SpeedFunction):
    """``x -> -f(1/x)``; negative on the positive cone."""

    base: SpeedFunction
    n: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "n", self.base.n)

    def derivatives(self, x, order=2):
        y = 1.0 / x
        fv, fg, fh = self.base.derivatives(y, order)
        if order == 0:
            return -fv, None, None
        g = fg * y**2
        if order == 1:
            return -fv, g, None
        h = -fh * (y**2)[:, :, None] * (y**2)[:, None, :] - 2.0 * _diag(fg * y**3)
        return -fv, g, h

    def to_dict(self):
        return {"kind": "dual", "base": self.base.to_dict()}


def _diag(v):
    out = np.zeros(v.shape + (v.shape[-1],))
    idx = np.arange(v.shape[-1])
    out[..., idx, idx] = v
    return out


# ---------------------------------------------------------------------------
# operations


def make_speed(desc) -> SpeedFunction:
    """Build a speed function from a descriptor dict, JSON text, or pass one through."""
    if isinstance(desc, SpeedFunction):
        return desc
    if isinstance(desc, str):
        try:
            desc = json.loads(desc)
        except json.JSONDecodeError as exc:
            raise InvalidSpec(f"not a JSON descriptor: {exc}") from None
    if not isinstance(desc, dict) or "kind" not in desc:
        raise InvalidSpec("descriptor must be an object with a 'kind' field")
    kind = desc["kind"]
    try:
        if kind == "power_mean":
            return PowerMean(float(desc["r"]), int(desc["n"]))
        if kind == "elem_sym":
            return ElemSym(int(desc["k"]), int(desc["n"]))
        if kind == "sym_quotient":
            return SymQuotient(int(desc["k"]), int(desc["l"]), int(desc["n"]))
        if kind == "weighted_geo_mean":
            return WeightedGeoMean(tuple(desc["alpha"]))
        if kind == "linear_combination":
            return LinearCombination(tuple(desc["coeffs"]))
        if kind == "compose":
            return Compose(make_speed(desc["outer"]), tuple(make_speed(s) for s in desc["inners"]))
        if kind == "power_transform":
            return PowerTransform(make_speed(desc["base"]), float(desc["r"]))
        if kind == "dual":
            return Dual(make_speed(desc["base"]))
    except KeyError as exc:
        raise InvalidSpec(f"descriptor of kind {kind!r} is missing field {exc}") from None
    except TypeError as exc:
        raise InvalidSpec(str(exc)) from None
    raise InvalidSpec(f"unknown speed kind {kind!r}")


def evaluate(f: SpeedFunction, x):
    return f.value(x)


def grad(f: SpeedFunction, x):
    return f.gradient(x)


def hess(f: SpeedFunction, x):
    return f.hessian(x)


def dual(f: SpeedFunction) -> SpeedFunction:
    return Dual(f)


def power_transform(f: SpeedFunction, r: float) -> SpeedFunction:
    return PowerTransform(f, r)


def compose(outer: SpeedFunction, inners: Sequence[SpeedFunction]) -> SpeedFunction:
    return Compose(outer, tuple(inners))


# ---------------------------------------------------------------------------
# class certification

CONDITIONS = ("homogeneous", "symmetric", "monotone", "concave", "inverse_concave")


@dataclass
class Witness:
    point: list
    condition: str
    magnitude: float
    detail: dict = field(default_factory=dict)

    def to_dict(self):
        return {"point": list(self.point), "condition": self.condition,
                "magnitude": self.magnitude, "detail": self.detail}


@dataclass
class ClassReport:
    """Outcome of sampling the membership conditions.

    A clean report is numerical evidence at the sampled points, not a proof.
    """

    homogeneous: bool
    symmetric: bool
    monotone: bool
    concave: bool
    inverse_concave: bool
    witnesses: list
    samples_used: int
    tol: float
    seed: int
    min_grad: float
    descriptor: dict | None = None
    note: str = "conditions checked at sampled points only; a clean report is evidence, not proof"

    @property
    def passed(self) -> bool:
        return all(getattr(self, c) for c in CONDITIONS)

    def to_dict(self):
        return {
            "speed": self.descriptor,
            "homogeneous": self.homogeneous,
            "symmetric": self.symmetric,
            "monotone": self.monotone,
            "concave": self.concave,
            "inverse_concave": self.inverse_concave,
            "passed": self.passed,
            "samples_used": self.samples_used,
            "tol": self.tol,
            "seed": self.seed,
            "min_grad": self.min_grad,
            "witnesses": [w.to_dict() for w in self.witnesses],
            "note": self.note,
        }


def sample_cone_points(n: int, n_samples: int, seed: int, lo: float = 1e-2, hi: float = 1e2):
    """Log-uniform points in [lo, hi]^n, one RNG stream per sample index.

    Also returns a scale in [0.1, 10] and a permutation per sample, used by
    the homogeneity and symmetry probes.
    """
    pts = np.empty((n_samples, n))
    scales = np.empty(n_samples)
    perms = np.empty((n_samples, n), dtype=int)
    llo, lhi = math.log10(lo), math.log10(hi)
    for i in range(n_samples):
        rng = np.random.default_rng([seed, i])
        pts[i] = 10.0 ** rng.uniform(llo, lhi, n)
        scales[i] = 10.0 ** rng.uniform(-1.0, 1.0)
        perms[i] = rng.permutation(n)
    return pts, scales, perms


def _violations(f, pts, scales, perms):
    """Normalised violation magnitude per sample and condition.

    A condition is violated where the magnitude exceeds the tolerance
    (monotonicity: where it is >= 0, i.e. some partial derivative <= 0).
    """
    val, g, h = f.derivatives(pts, 2)
    out = {}
    scaled = f.derivatives(pts * scales[:, None], 0)[0]
    out["homogeneous"] = np.abs(scaled - scales * val) / (scales * np.abs(val) + 1e-300)
    permuted = f.derivatives(np.take_along_axis(pts, perms, axis=1), 0)[0]
    out["symmetric"] = np.abs(permuted - val) / (np.abs(val) + 1e-300)
    gnorm = np.linalg.norm(g, axis=1) + 1e-300
    out["monotone"] = -g.min(axis=1) / gnorm
    hs = 0.5 * (h + np.swapaxes(h, 1, 2))
    out["concave"] = np.linalg.eigvalsh(hs)[:, -1] / (np.linalg.norm(hs, axis=(1, 2)) + 1e-300)
    m3 = hs + 2.0 * _diag(g / pts)
    out["inverse_concave"] = -np.linalg.eigvalsh(m3)[:, 0] / (np.linalg.norm(m3, axis=(1, 2)) + 1e-300)
    return out, g / gnorm[:, None]


def _is_violation(condition, magnitude, tol):
    if condition == "monotone":
        return magnitude >= 0.0
    return magnitude > tol


def witness_violation(f: SpeedFunction, w: Witness) -> float:
    """Recompute the violation magnitude recorded in a witness."""
    pts = np.asarray([w.point], dtype=float)
    scale = np.asarray([w.detail.get("scale", 1.0)])
    perm = np.asarray([w.detail.get("perm", list(range(f.n)))])
    mags, _ = _violations(f, pts, scale, perm)
    return float(mags[w.condition][0])


def check_class(f: SpeedFunction, n_samples: int = 1000, tol: float = 1e-9, seed: int = 0,
                max_witnesses: int = 5) -> ClassReport:
    """Sample the membership conditions for the concave/inverse-concave class.

    Checks homogeneity, symmetry, positivity of the gradient, non-positivity
    of the Hessian and non-negativity of ``hess + 2 diag(grad / x)`` at
    ``n_samples`` seeded log-uniform points.  Matrix signs are decided by the
    extreme eigenvalue against ``tol`` times the Frobenius norm.  Up to
    ``max_witnesses`` worst points per failed condition are reported.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    pts, scales, perms = sample_cone_points(f.n, n_samples, seed)
    mags, gnormed = _violations(f, pts, scales, perms)
    flags = {}
    witnesses = []
    for cond in CONDITIONS:
        bad = np.flatnonzero(_is_violation(cond, mags[cond], tol))
        flags[cond] = bad.size == 0
        worst = bad[np.argsort(-mags[cond][bad], kind="stable")][:max_witnesses]
        for i in worst:
            detail = {}
            if cond == "homogeneous":
                detail = {"scale": float(scales[i])}
            elif cond == "symmetric":
                detail = {"perm": [int(p) for p in perms[i]]}
            witnesses.append(Witness([float(v) for v in pts[i]], cond, float(mags[cond][i]), detail))
    return ClassReport(
        witnesses=witnesses,
        samples_used=n_samples,
        tol=tol,
        seed=seed,
        min_grad=float(gnormed.min()),
        descriptor=f.to_dict(),
        **flags,
    )


# ---------------------------------------------------------------------------
# catalogue of the standard examples


def standard_catalog(n: int, seed: int = 0) -> list[tuple[str, SpeedFunction]]:
    """Named examples known to belong to the class, for dimension ``n``.

    Power means with |r| <= 1, ``S_k**(1/k)``, ``(S_k/S_l)**(1/(k-l))``,
    three random weighted geometric means of the ratios ``S_{j+1}/S_j`` and
    two random positive linear combinations of earlier members.
    """
    items: list[tuple[str, SpeedFunction]] = []
    for r in (-1.0, -0.5, 0.0, 0.5, 1.0):
        items.append((f"H_{r:g}", PowerMean(r, n)))
    for k in range(1, n + 1):
        items.append((f"S_{k}^(1/{k})", ElemSym(k, n)))
    for k in range(1, n + 1):
        for l in range(k):
            items.append((f"(S_{k}/S_{l})^(1/{k - l})", SymQuotient(k, l, n)))
    rng = np.random.default_rng([seed, n, 1])
    for i in range(3):
        alpha = rng.dirichlet(np.ones(n))
        alpha = alpha / alpha.sum()
        items.append((f"geo_mix_{i}", WeightedGeoMean(tuple(_renormalise(alpha)))))
    base = list(items)
    for i in range(2):
        picks = rng.choice(len(base), size=min(3, len(base)), replace=False)
        coeffs = rng.uniform(0.1, 2.0, size=len(picks))
        inner = tuple(base[int(p)][1] for p in picks)
        items.append((f"lin_comb_{i}", Compose(LinearCombination(tuple(coeffs)), inner)))
    return items


def _renormalise(alpha):
    # keep sum(alpha) == 1 exactly in floating point
    a = [float(v) for v in alpha]
    a[-1] = 1.0 - math.fsum(a[:-1])
    if a[-1] < 0:
        a[-1] = 0.0
        a[0] = 1.0 - math.fsum(a[1:])
    return a
