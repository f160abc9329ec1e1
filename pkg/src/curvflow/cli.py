"""Command-line entry point: ``curvflow <command> [options]``.

Exit codes: 0 success, 1 usage error (nothing written), 2 check failed,
3 flow hit its step limit.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

from . import evolve, matfun, pinch, symfun
from .errors import CurvflowError, InvalidSpec, NonConvexShape, StabilityFailure

EXIT_OK, EXIT_USAGE, EXIT_FAIL, EXIT_STEPLIMIT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# speed descriptors


def _ints(text, count, name):
    parts = [p for p in text.split(",") if p]
    if len(parts) != count:
        raise UsageError(f"{name} expects {count} integer parameter(s)")
    try:
        return [int(p) for p in parts]
    except ValueError as exc:
        raise UsageError(f"{name} parameters must be integers") from exc


def parse_speed(text: str, n: int | None):
    """Build a speed function from shorthand, inline JSON or a JSON file path."""
    text = text.strip()
    if text.startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"invalid speed JSON: {exc}") from exc
        return _from_doc(doc, n)
    if os.path.isfile(text):
        with open(text) as fh:
            return _from_doc(json.load(fh), n)
    kind, _, rest = text.partition(":")
    if kind == "geo-mix":
        try:
            alpha = [float(v) for v in rest.split(",") if v]
        except ValueError as exc:
            raise UsageError("geo-mix weights must be numbers") from exc
        if n is not None and n != len(alpha):
            raise UsageError(f"geo-mix has {len(alpha)} weights but --n is {n}")
        return symfun.WeightedGeoMean(tuple(alpha))
    n = 2 if n is None else n
    if kind == "power-mean":
        try:
            r = float(rest)
        except ValueError as exc:
            raise UsageError("power-mean expects one number, e.g. power-mean:-1") from exc
        return symfun.PowerMean(r, n)
    if kind == "elem-sym":
        (k,) = _ints(rest, 1, kind)
        return symfun.ElemSym(k, n)
    if kind == "sym-quotient":
        k, l = _ints(rest, 2, kind)
        return symfun.SymQuotient(k, l, n)
    raise UsageError(f"unrecognised speed {text!r}")


def _from_doc(doc, n):
    if isinstance(doc, dict) and n is not None and "n" not in doc and doc.get("kind") in ("power_mean", "elem_sym", "sym_quotient"):
        doc = {**doc, "n": n}
    f = symfun.make_speed(doc)
    if n is not None and f.n != n:
        raise UsageError(f"speed has arity {f.n} but --n is {n}")
    return f


# ---------------------------------------------------------------------------
# output


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item"):
        return _clean(obj.item())
    return obj


def dumps(doc) -> str:
    # repr of a float is its shortest exact round-trip form
    return json.dumps(_clean(doc), indent=2, sort_keys=False) + "\n"


def _emit(args, doc, extra_files=()):
    text = dumps(doc)
    for path, content in extra_files:
        if path:
            with open(path, "w") as fh:
                fh.write(content)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# commands


def _speed_arg(args, required=True, default=None):
    text = args.speed_json or args.speed or default
    if text is None:
        if required:
            raise UsageError("--speed is required")
        return None
    return parse_speed(text, args.n)


def cmd_check_class(args):
    f = _speed_arg(args)
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    report = symfun.check_class(f, n_samples=args.samples, tol=args.tol, seed=args.seed, max_witnesses=args.max_witnesses)
    return (EXIT_OK if report.passed else EXIT_FAIL), report.to_dict(), []


def cmd_verify_pinch(args):
    f = _speed_arg(args)
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    rep = pinch.verify(f, f.n, args.trials, seed=args.seed, tol=args.tol, gap_min=args.gap_min,
                       chunk=args.chunk, max_violations=args.max_violations)
    return (EXIT_OK if rep.ok else EXIT_FAIL), rep.to_dict(), []


def cmd_flow(args):
    f = _speed_arg(args)
    if args.grid < 32:
        raise UsageError("--grid must be >= 32")
    shape = evolve.parse_shape(args.shape)
    cfg = evolve.FlowConfig(shape=shape, n=f.n, N=args.grid, cfl=args.cfl, stop_inradius=args.stop_inradius,
                            stop_fraction=args.stop_fraction, max_steps=args.max_steps,
                            snapshot_every=args.snapshot_every)
    try:
        trace = evolve.run_flow(f, cfg)
    except NonConvexShape as exc:
        return EXIT_FAIL, {"status": "NonConvexShape", "message": str(exc), "config": cfg.to_dict()}, []
    doc = trace.summary()
    doc["f"] = f.to_dict()
    final_err = trace.rescaled_err[-1] if trace.rescaled_err else float("nan")
    doc["rescaled_threshold"] = args.rescaled_threshold
    files = [(args.csv, trace.to_csv()), (args.snapshots, trace.snapshots_csv() if args.snapshots else "")]
    if trace.status == "StepLimit":
        return EXIT_STEPLIMIT, doc, files
    ok = (trace.status == "Converged" and trace.pinch_monotone(args.mono_tol)
          and math.isfinite(final_err) and final_err < args.rescaled_threshold)
    return (EXIT_OK if ok else EXIT_FAIL), doc, files


def cmd_pde(args):
    f = _speed_arg(args, default="power-mean:0")
    cfg = evolve.PdeConfig(M=args.grid, boundary_mode=args.boundary, epsilon0=args.epsilon0, dt_factor=args.dt_factor,
                           t_end=args.t_end, bump=args.bump, tol_drift=args.tol_drift)
    try:
        trace = evolve.run_pde(f, cfg)
    except StabilityFailure as exc:
        return EXIT_FAIL, {"status": "StabilityFailure", "message": str(exc), "config": cfg.to_dict()}, []
    doc = trace.summary()
    doc["f"] = f.to_dict()
    return (EXIT_OK if trace.status == "Preserved" else EXIT_FAIL), doc, [(args.csv, trace.to_csv())]


def cmd_calculus(args):
    f = _speed_arg(args)
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    rep = matfun.calculus_check(f, trials=args.trials, seed=args.seed, gap=args.gap,
                                dF_tol=args.df_tol, d2F_tol=args.d2f_tol)
    doc = {"f": f.to_dict(), "seed": args.seed, "gap": args.gap, **rep.to_dict()}
    return (EXIT_OK if rep.ok else EXIT_FAIL), doc, []


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = _Parser(prog="curvflow", description="Speed functions, pinching estimates and curvature-flow experiments.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--speed", help="shorthand (power-mean:r, elem-sym:k, sym-quotient:k,l, geo-mix:a1,...), JSON or a JSON file")
        sp.add_argument("--speed-json", help="speed descriptor as JSON text or a path to a JSON file")
        sp.add_argument("--n", type=int, help="number of variables (default 2 for shorthand)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", help="JSON file whose keys override command-line flags")
        sp.add_argument("--out", help="write the JSON report here instead of stdout")

    sp = sub.add_parser("check-class", help="sample the class conditions of a speed function")
    common(sp)
    sp.add_argument("--samples", type=int, default=1000)
    sp.add_argument("--tol", type=float, default=1e-9)
    sp.add_argument("--max-witnesses", type=int, default=5)
    sp.set_defaults(func=cmd_check_class)

    sp = sub.add_parser("verify-pinch", help="Monte-Carlo search for negative values of the pinching form")
    common(sp)
    sp.add_argument("--trials", type=int, default=10000)
    sp.add_argument("--tol", type=float, default=1e-9)
    sp.add_argument("--gap-min", type=float, default=pinch.GAP_MIN)
    sp.add_argument("--chunk", type=int, default=4096)
    sp.add_argument("--max-violations", type=int, default=50)
    sp.set_defaults(func=cmd_verify_pinch)

    sp = sub.add_parser("flow", help="contract an axisymmetric convex body")
    common(sp)
    sp.add_argument("--shape", default="ellipsoid:1,1.5", help="sphere:R, ellipsoid:a,b or perturbed:R,amp,mode")
    sp.add_argument("--grid", type=int, default=128)
    sp.add_argument("--cfl", type=float, default=0.2)
    sp.add_argument("--stop-inradius", type=float, default=None, help="absolute stop threshold")
    sp.add_argument("--stop-fraction", type=float, default=1e-4, help="stop threshold relative to the initial inradius")
    sp.add_argument("--max-steps", type=int, default=1_000_000)
    sp.add_argument("--rescaled-threshold", type=float, default=0.01)
    sp.add_argument("--mono-tol", type=float, default=1e-6)
    sp.add_argument("--csv", help="trace CSV path")
    sp.add_argument("--snapshots", help="profile snapshot CSV path")
    sp.add_argument("--snapshot-every", type=int, default=0, help="snapshot every k-th sample (0 = off)")
    sp.set_defaults(func=cmd_flow)

    sp = sub.add_parser("pde", help="evolve u_t = F(D^2 u) on a square and track convexity")
    common(sp)
    sp.add_argument("--grid", type=int, default=65)
    sp.add_argument("--bump", type=float, default=0.1)
    sp.add_argument("--t-end", type=float, default=0.1)
    sp.add_argument("--dt-factor", type=float, default=1.0)
    sp.add_argument("--boundary", choices=("exact", "frozen"), default="exact")
    sp.add_argument("--epsilon0", type=float, default=None)
    sp.add_argument("--tol-drift", type=float, default=1e-6)
    sp.add_argument("--csv", help="trace CSV path")
    sp.set_defaults(func=cmd_pde)

    sp = sub.add_parser("calculus", help="finite-difference validation of dF and d2F")
    common(sp)
    sp.add_argument("--trials", type=int, default=500)
    sp.add_argument("--gap", type=float, default=None, help="force a near-degenerate eigenvalue pair with this relative gap")
    sp.add_argument("--df-tol", type=float, default=1e-6)
    sp.add_argument("--d2f-tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_calculus)
    return p


def _apply_config(parser, args):
    if not args.config:
        return args
    try:
        with open(args.config) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config!r}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if dest in ("func", "command", "config") or not hasattr(args, dest):
            raise UsageError(f"unknown config key {key!r}")
        if dest in ("speed", "speed_json") and not isinstance(value, str):
            value = json.dumps(value)
        setattr(args, dest, value)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        args = _apply_config(parser, args)
        code, doc, files = args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"curvflow: usage error: {exc}\n")
        return EXIT_USAGE
    except (InvalidSpec, ValueError) as exc:
        sys.stderr.write(f"curvflow: usage error: {exc}\n")
        return EXIT_USAGE
    except CurvflowError as exc:
        sys.stderr.write(f"curvflow: {type(exc).__name__}: {exc}\n")
        return EXIT_FAIL
    _emit(args, doc, files)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
