"""Curvature-flow engines.

Two solvers live here.

* An axisymmetric contraction of convex hypersurfaces in R^{n+1} with
  normal speed f(kappa).  The body is described by its support function
  u(theta) on a uniform polar grid, so the flow is the scalar PDE
  u_t = -f(kappa_1, kappa_2, ..., kappa_2) with meridian radius
  r1 = u'' + u and rotational radius r2 = u' cot(theta) + u.
* A planar fully nonlinear parabolic solver for u_t = F(D^2 u) on a square,
  used to watch the smallest Hessian eigenvalue.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConvexityLost, DomainError, InvalidSpec, NonConvexShape, StabilityFailure
from .matfun import spectral_first_order
from .symfun import SpeedFunction

CSV_HEADER = ("t", "inradius", "circumradius", "pinch_ratio", "roundness", "rescaled_err")


# ---------------------------------------------------------------------------
# initial shapes


@dataclass(frozen=True)
class Sphere:
    R: float

    def support(self, theta):
        return np.full_like(theta, float(self.R))

    def to_dict(self):
        return {"kind": "sphere", "R": self.R}


@dataclass(frozen=True)
class Ellipsoid:
    """Ellipsoid of revolution: semi-axis ``a`` along the symmetry axis, ``b`` equatorial."""

    a: float
    b: float

    def support(self, theta):
        return np.sqrt((self.a * np.cos(theta)) ** 2 + (self.b * np.sin(theta)) ** 2)

    def to_dict(self):
        return {"kind": "ellipsoid", "a": self.a, "b": self.b}


@dataclass(frozen=True)
class Perturbed:
    """Sphere with a zonal ripple: u = R + amplitude * cos(mode * theta)."""

    R: float
    amplitude: float
    mode: int

    def support(self, theta):
        return self.R + self.amplitude * np.cos(self.mode * theta)

    def to_dict(self):
        return {"kind": "perturbed", "R": self.R, "amplitude": self.amplitude, "mode": self.mode}


def parse_shape(text: str):
    """Parse ``sphere:R``, ``ellipsoid:a,b`` or ``perturbed:R,amp,mode``."""
    kind, _, rest = str(text).partition(":")
    try:
        vals = [float(v) for v in rest.split(",")] if rest else []
    except ValueError as exc:
        raise InvalidSpec(f"bad shape parameters in {text!r}") from exc
    kind = kind.strip().lower()
    if kind == "sphere" and len(vals) == 1:
        shape = Sphere(vals[0])
    elif kind == "ellipsoid" and len(vals) == 2:
        shape = Ellipsoid(*vals)
    elif kind == "perturbed" and len(vals) == 3 and vals[2] == int(vals[2]):
        shape = Perturbed(vals[0], vals[1], int(vals[2]))
    else:
        raise InvalidSpec(f"unrecognised shape {text!r}")
    if any(v <= 0 for v in vals[:2] if kind != "perturbed") or (kind == "perturbed" and (vals[0] <= 0 or vals[2] < 1)):
        raise InvalidSpec(f"shape parameters out of range in {text!r}")
    return shape


# ---------------------------------------------------------------------------
# axisymmetric state and discrete geometry


@dataclass(frozen=True)
class FlowState:
    n: int
    theta: np.ndarray = field(repr=False)
    u: np.ndarray = field(repr=False)
    time: float = 0.0

    @property
    def N(self) -> int:
        return self.theta.size

    @property
    def dtheta(self) -> float:
        return math.pi / (self.N - 1)

    def replace(self, u, time):
        return FlowState(self.n, self.theta, u, time)


def make_grid(N: int) -> np.ndarray:
    return np.linspace(0.0, math.pi, N)


def radii(state: FlowState):
    """Principal radii (r1, r2) with pole reflection u_{-1} = u_1."""
    u, h = state.u, state.dtheta
    ext = np.concatenate([u[1:2], u, u[-2:-1]])
    uθθ = (ext[2:] - 2.0 * u + ext[:-2]) / h**2
    uθ = (ext[2:] - ext[:-2]) / (2.0 * h)
    r1 = uθθ + u
    r2 = np.empty_like(u)
    r2[1:-1] = uθ[1:-1] / np.tan(state.theta[1:-1]) + u[1:-1]
    r2[0], r2[-1] = r1[0], r1[-1]
    return r1, r2


def curvatures(state: FlowState):
    """Per-node (kappa1, kappa2); kappa2 has multiplicity n - 1."""
    r1, r2 = radii(state)
    if not (np.all(r1 > 0) and np.all(r2 > 0)):
        bad = int(np.flatnonzero((r1 <= 0) | (r2 <= 0))[0])
        raise ConvexityLost(f"nonpositive curvature radius at node {bad} (theta={state.theta[bad]:.6g}, t={state.time:.6g})")
    return 1.0 / r1, 1.0 / r2


def init_axisymmetric(shape, n: int, N: int) -> FlowState:
    if n < 2:
        raise InvalidSpec("hypersurface dimension n must be >= 2")
    if N < 32:
        raise InvalidSpec("grid needs at least 32 nodes")
    theta = make_grid(N)
    u = np.asarray(shape.support(theta), dtype=float)
    state = FlowState(n, theta, u, 0.0)
    if not np.all(u > 0):
        raise NonConvexShape("support function must be positive")
    r1, r2 = radii(state)
    if not (np.all(r1 > 0) and np.all(r2 > 0)):
        raise NonConvexShape(f"{shape} is not strictly convex on this grid")
    return state


def _curvature_points(k1, k2, n):
    return np.hstack([k1[:, None], np.repeat(k2[:, None], n - 1, axis=1)])


def _speed(f, state, order=0):
    k1, k2 = curvatures(state)
    x = _curvature_points(k1, k2, state.n)
    val, g, _ = f.derivatives(x, order)
    return val, g, k1, k2


def _check_arity(f, n):
    if f.n != n:
        raise InvalidSpec(f"speed arity {f.n} does not match hypersurface dimension {n}")


def step(f: SpeedFunction, state: FlowState, dt: float, method: str = "euler") -> FlowState:
    """Advance by dt.  ``euler`` is u <- u - dt f(kappa); ``midpoint`` is the two-stage variant."""
    _check_arity(f, state.n)
    if dt == 0:
        return state
    v, *_ = _speed(f, state)
    if method == "euler":
        return state.replace(state.u - dt * v, state.time + dt)
    if method == "midpoint":
        half = state.replace(state.u - 0.5 * dt * v, state.time + 0.5 * dt)
        v2, *_ = _speed(f, half)
        return state.replace(state.u - dt * v2, state.time + dt)
    raise ValueError(f"unknown method {method!r}")


def stable_dt(f: SpeedFunction, state: FlowState, cfl: float = 0.2) -> float:
    """cfl * dtheta^2 / max(D), with D = f_1 kappa_1^2 + (sum of the other partials) kappa_2^2."""
    _, g, k1, k2 = _speed(f, state, 1)
    d = g[:, 0] * k1**2 + g[:, 1:].sum(axis=1) * k2**2
    return cfl * state.dtheta**2 / float(np.max(d))


def pinch_ratio(state: FlowState) -> float:
    k1, k2 = curvatures(state)
    return float(np.min(np.minimum(k1, k2) / (k1 + (state.n - 1) * k2)))


def roundness(state: FlowState) -> float:
    k1, k2 = curvatures(state)
    return float(np.max(np.maximum(k1, k2) / np.minimum(k1, k2)))


def _sphere_weights(state):
    w = np.sin(state.theta) ** (state.n - 1)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def mean_support(state: FlowState) -> float:
    """Area-weighted mean of u over S^n (the mean width over two)."""
    w = _sphere_weights(state)
    return float(np.dot(w, state.u) / w.sum())


def steiner_point(state: FlowState) -> float:
    """Axis coordinate of the Steiner point, a translation-equivariant centre."""
    w = _sphere_weights(state)
    return float((state.n + 1) * np.dot(w, state.u * np.cos(state.theta)) / w.sum())


def centred_support(state: FlowState) -> np.ndarray:
    return state.u - steiner_point(state) * np.cos(state.theta)


# ---------------------------------------------------------------------------
# flow driver


@dataclass
class FlowTrace:
    config: dict
    times: list
    inradius: list
    circumradius: list
    pinch: list
    roundness: list
    mean_u: list
    rescaled_err: list
    extinction_estimate: float
    status: str
    steps: int
    message: str = ""
    snapshots: list = field(default_factory=list)

    def rows(self):
        return list(zip(self.times, self.inradius, self.circumradius, self.pinch, self.roundness, self.rescaled_err))

    def pinch_monotone(self, tol: float = 1e-6) -> bool:
        p = np.asarray(self.pinch)
        return bool(np.all(np.diff(p) >= -tol))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in self.rows():
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    def snapshots_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("t", "theta", "u", "kappa1", "kappa2"))
        for snap in self.snapshots:
            for row in zip(snap["theta"], snap["u"], snap["kappa1"], snap["kappa2"]):
                w.writerow([repr(float(snap["t"]))] + [repr(float(v)) for v in row])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "config": self.config,
            "status": self.status,
            "message": self.message,
            "steps": self.steps,
            "samples": len(self.times),
            "extinction_estimate": self.extinction_estimate,
            "final": dict(zip(CSV_HEADER, self.rows()[-1])) if self.times else None,
            "pinch_monotone": self.pinch_monotone(),
        }

    def to_json(self) -> str:
        doc = self.summary()
        doc["samples"] = [dict(zip(CSV_HEADER, r)) for r in self.rows()]
        doc["mean_u"] = self.mean_u
        return json.dumps(doc, indent=2)


@dataclass
class FlowConfig:
    shape: object
    n: int = 2
    N: int = 128
    cfl: float = 0.2
    stop_inradius: float | None = None
    stop_fraction: float = 0.02
    max_steps: int = 1_000_000
    sample_ratio: float = 0.98
    fit_fraction: float = 0.2
    snapshot_every: int = 0

    def to_dict(self):
        d = asdict(self)
        d["shape"] = self.shape.to_dict()
        return d


def _monitors(state):
    k1, k2 = curvatures(state)
    uc = centred_support(state)
    return {
        "inradius": float(uc.min()),
        "circumradius": float(uc.max()),
        "pinch": float(np.min(np.minimum(k1, k2) / (k1 + (state.n - 1) * k2))),
        "roundness": float(np.max(np.maximum(k1, k2) / np.minimum(k1, k2))),
        "k1": k1,
        "k2": k2,
    }


def fit_extinction(times, mean_u, fraction=0.2) -> float:
    """Least-squares fit of (mean u)^2 = a - b t over the final window; returns a / b."""
    t = np.asarray(times, dtype=float)
    y = np.asarray(mean_u, dtype=float) ** 2
    if t.size < 2:
        return float("nan")
    k = max(3, int(math.ceil(fraction * t.size)))
    t, y = t[-k:], y[-k:]
    tc = t.mean()
    slope = np.dot(t - tc, y - y.mean()) / np.dot(t - tc, t - tc)
    # y = y_mean + slope (t - tc) vanishes at t = tc - y_mean / slope
    return float(tc - y.mean() / slope)


def run_flow(f: SpeedFunction, config: FlowConfig) -> FlowTrace:
    """Contract the initial body until its inradius drops below the stop threshold.

    Monitors are recorded whenever the mean support value has fallen by
    ``sample_ratio`` since the previous sample; the recorded state is
    interpolated between the two bracketing steps so that the sample sits
    exactly on its level.  ConvexityLost ends the run early with a partial
    trace instead of raising.
    """
    _check_arity(f, config.n)
    state = init_axisymmetric(config.shape, config.n, config.N)
    f1 = float(f.value(np.ones(config.n)))
    mon = _monitors(state)
    stop = config.stop_inradius if config.stop_inradius is not None else config.stop_fraction * mon["inradius"]

    rec = {k: [] for k in ("times", "inradius", "circumradius", "pinch", "roundness", "mean_u")}
    snaps = []

    def record(s, m, mu):
        rec["times"].append(s.time)
        rec["mean_u"].append(mu)
        for key in ("inradius", "circumradius", "pinch", "roundness"):
            rec[key].append(m[key])
        if config.snapshot_every and (len(rec["times"]) - 1) % config.snapshot_every == 0:
            snaps.append({"t": s.time, "theta": s.theta.tolist(), "u": s.u.tolist(),
                          "kappa1": m["k1"].tolist(), "kappa2": m["k2"].tolist()})

    mu = mean_support(state)
    record(state, mon, mu)
    level = mu * config.sample_ratio
    status, message, steps = "StepLimit", "", 0
    fit_count = 1
    try:
        while steps < config.max_steps:
            v, g, k1, k2 = _speed(f, state, 1)
            d = g[:, 0] * k1**2 + g[:, 1:].sum(axis=1) * k2**2
            dt = config.cfl * state.dtheta**2 / float(np.max(d))
            half = state.replace(state.u - 0.5 * dt * v, state.time + 0.5 * dt)
            v2, *_ = _speed(f, half)
            new = state.replace(state.u - dt * v2, state.time + dt)
            steps += 1
            new_mu = mean_support(new)
            while new_mu <= level:
                frac = (mu - level) / (mu - new_mu)
                s = state.replace(state.u + frac * (new.u - state.u), state.time + frac * dt)
                record(s, _monitors(s), level)
                fit_count = len(rec["times"])
                level *= config.sample_ratio
            state, mu = new, new_mu
            if centred_support(state).min() < stop:
                if rec["times"][-1] < state.time:
                    record(state, _monitors(state), mu)
                status = "Converged"
                break
    except ConvexityLost as exc:
        status, message = "ConvexityLost", str(exc)
    except DomainError as exc:
        status, message = "ConvexityLost", str(exc)

    fit_t, fit_u = rec["times"][:fit_count], rec["mean_u"][:fit_count]
    T = fit_extinction(fit_t, fit_u, config.fit_fraction)
    errs = []
    for t, r_in, r_out in zip(rec["times"], rec["inradius"], rec["circumradius"]):
        rho2 = 2.0 * f1 * (T - t)
        if not math.isfinite(T) or rho2 <= 0:
            errs.append(float("nan"))
        else:
            rho = math.sqrt(rho2)
            errs.append(max(abs(r_in / rho - 1.0), abs(r_out / rho - 1.0)))
    return FlowTrace(
        config=config.to_dict(), times=rec["times"], inradius=rec["inradius"], circumradius=rec["circumradius"],
        pinch=rec["pinch"], roundness=rec["roundness"], mean_u=rec["mean_u"], rescaled_err=errs,
        extinction_estimate=T, status=status, steps=steps, message=message, snapshots=snaps,
    )


# ---------------------------------------------------------------------------
# planar fully nonlinear solver


@dataclass(frozen=True)
class PdeState:
    x: np.ndarray = field(repr=False)
    u: np.ndarray = field(repr=False)
    time: float = 0.0

    @property
    def h(self) -> float:
        return float(self.x[1] - self.x[0])


def quadratic_part(x):
    xx, yy = np.meshgrid(x, x, indexing="ij")
    return 0.5 * (xx**2 + yy**2)


def init_pde(M: int = 65, bump: float = 0.1) -> PdeState:
    """u0 = |x|^2 / 2 + bump * cos^2(pi x / 2) cos^2(pi y / 2) on [-1, 1]^2."""
    if M < 5:
        raise InvalidSpec("PDE grid needs at least 5 nodes per side")
    x = np.linspace(-1.0, 1.0, M)
    xx, yy = np.meshgrid(x, x, indexing="ij")
    u = quadratic_part(x) + bump * np.cos(0.5 * math.pi * xx) ** 2 * np.cos(0.5 * math.pi * yy) ** 2
    return PdeState(x, u, 0.0)


def discrete_hessian(u, h):
    """Centred second differences at interior nodes, shape (M-2, M-2, 2, 2)."""
    uxx = (u[2:, 1:-1] - 2 * u[1:-1, 1:-1] + u[:-2, 1:-1]) / h**2
    uyy = (u[1:-1, 2:] - 2 * u[1:-1, 1:-1] + u[1:-1, :-2]) / h**2
    uxy = (u[2:, 2:] - u[2:, :-2] - u[:-2, 2:] + u[:-2, :-2]) / (4 * h**2)
    return np.stack([np.stack([uxx, uxy], -1), np.stack([uxy, uyy], -1)], -2)


def min_hessian_eigenvalue(u, h) -> float:
    hs = discrete_hessian(u, h)
    a, b, c = hs[..., 0, 0], hs[..., 0, 1], hs[..., 1, 1]
    return float(np.min(0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b**2)))


@dataclass
class PdeTrace:
    config: dict
    times: list
    min_eig: list
    max_deviation: list
    epsilon0: float
    status: str
    steps: int

    @property
    def min_eigenvalue(self) -> float:
        return float(min(self.min_eig))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("t", "min_hessian_eigenvalue", "max_deviation_from_quadratic"))
        for row in zip(self.times, self.min_eig, self.max_deviation):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "config": self.config,
            "status": self.status,
            "steps": self.steps,
            "epsilon0": self.epsilon0,
            "initial_min_eigenvalue": self.min_eig[0],
            "min_eigenvalue": self.min_eigenvalue,
            "final_max_deviation": self.max_deviation[-1],
        }

    def to_json(self) -> str:
        doc = self.summary()
        doc["times"] = self.times
        doc["min_hessian_eigenvalue"] = self.min_eig
        doc["max_deviation_from_quadratic"] = self.max_deviation
        return json.dumps(doc, indent=2)


@dataclass
class PdeConfig:
    M: int = 65
    boundary_mode: str = "exact"
    epsilon0: float | None = None
    dt_factor: float = 1.0
    t_end: float = 0.1
    bump: float = 0.1
    tol_drift: float = 1e-6
    blowup: float = 1e6
    max_steps: int = 1_000_000

    def to_dict(self):
        return asdict(self)


def run_pde(f: SpeedFunction, config: PdeConfig) -> PdeTrace:
    """Explicit time stepping of u_t = F(D^2 u) with Dirichlet data.

    ``exact`` boundary values follow |x|^2/2 + f(1,1) t, the solution for
    the unperturbed quadratic; ``frozen`` keeps the initial values.  The
    step is dt_factor * h^2 / (4 max tr dF), trimmed to land on t_end.
    """
    if f.n != 2:
        raise InvalidSpec("the planar solver needs a speed function of arity 2")
    if config.boundary_mode not in ("exact", "frozen"):
        raise InvalidSpec(f"unknown boundary mode {config.boundary_mode!r}")
    if config.t_end < 0 or config.dt_factor <= 0:
        raise InvalidSpec("t_end must be >= 0 and dt_factor > 0")
    state = init_pde(config.M, config.bump)
    h = state.h
    f11 = float(f.value(np.ones(2)))
    quad = quadratic_part(state.x)
    u = state.u.copy()
    t = 0.0
    eig0 = min_hessian_eigenvalue(u, h)
    if eig0 <= 0:
        raise InvalidSpec("initial data is not uniformly convex on the grid")
    eps0 = eig0 if config.epsilon0 is None else config.epsilon0
    times, mins, devs = [0.0], [eig0], [float(np.max(np.abs(u - quad)))]
    steps = 0
    while t < config.t_end and steps < config.max_steps:
        hs = discrete_hessian(u, h)
        flat = hs.reshape(-1, 2, 2)
        try:
            _, fv, fg = spectral_first_order(f, flat)
        except DomainError as exc:
            raise StabilityFailure(f"discrete Hessian lost positive definiteness at t={t:.6g}") from exc
        dt = config.dt_factor * h**2 / (4.0 * float(np.max(fg.sum(axis=1))))
        if t + dt >= config.t_end:
            dt = config.t_end - t
        u[1:-1, 1:-1] += dt * fv.reshape(hs.shape[:2])
        t = t + dt if t + dt < config.t_end else config.t_end
        if config.boundary_mode == "exact":
            edge = quad + f11 * t
            u[0, :], u[-1, :], u[:, 0], u[:, -1] = edge[0, :], edge[-1, :], edge[:, 0], edge[:, -1]
        steps += 1
        if not np.all(np.isfinite(u)) or np.max(np.abs(u)) > config.blowup:
            raise StabilityFailure(f"solution blew up at t={t:.6g}")
        times.append(t)
        mins.append(min_hessian_eigenvalue(u, h))
        devs.append(float(np.max(np.abs(u - quad - f11 * t))))
    status = "Violated" if min(mins) < eps0 - config.tol_drift else "Preserved"
    return PdeTrace(config.to_dict(), times, mins, devs, eps0, status, steps)


__all__ = [
    "CSV_HEADER", "Sphere", "Ellipsoid", "Perturbed", "parse_shape", "FlowState", "init_axisymmetric",
    "curvatures", "radii", "step", "stable_dt", "pinch_ratio", "roundness", "mean_support", "steiner_point",
    "FlowTrace", "FlowConfig", "run_flow", "fit_extinction", "PdeState", "init_pde", "discrete_hessian",
    "min_hessian_eigenvalue", "PdeTrace", "PdeConfig", "run_pde",
]
