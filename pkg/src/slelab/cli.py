"""Batch front-end: one subcommand per experiment.

Every subcommand prints a one-line JSON verdict.  Tabular data goes to
``--out`` when given; otherwise it is written to stdout and the verdict
moves to stderr.  Exit codes: 0 pass, 2 quantitative failure, 1 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import kac, loewner, montecarlo, multi, virasoro


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _jsonable(v):
    if isinstance(v, Fraction):
        return str(v)
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    return v


def _dumps(v) -> str:
    return json.dumps(_jsonable(v))


def _rational(s: str) -> Fraction:
    try:
        return Fraction(s)
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"not a rational number: {s!r}") from exc


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _point(s: str) -> complex:
    """'x,y' or a Python complex literal such as '2j' or '0.5+1j'."""
    try:
        if "," in s:
            x, y = s.split(",")
            return complex(float(x), float(y))
        return complex(s.replace("i", "j"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a point: {s!r}") from exc


class _Output:
    """Route data to --out or stdout; the verdict goes wherever data does not."""

    def __init__(self, out: str | None):
        self.path = Path(out) if out else None

    def data(self, text: str) -> None:
        if self.path is None:
            sys.stdout.write(text)
        else:
            self.path.write_text(text)

    def verdict(self, payload: dict) -> None:
        stream = sys.stdout if self.path is not None else sys.stderr
        print(_dumps(payload), file=stream)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _verdict_only(payload: dict) -> None:
    print(_dumps(payload))


def _random_kappa(rng) -> Fraction:
    q = int(rng.integers(1, 40))
    return Fraction(int(rng.integers(1, 8 * q)), q)


def _random_rational(rng, lo=-20, hi=20, qmax=30) -> Fraction:
    q = int(rng.integers(1, qmax))
    return Fraction(int(rng.integers(lo * q, hi * q + 1)), q)


# -- subcommands --------------------------------------------------------------

def cmd_kac_table(args) -> int:
    rows = kac.kac_table(args.kappa, args.rmax, args.smax)
    out = _Output(args.out)
    if args.format == "json":
        out.data(_dumps(rows) + "\n")
    else:
        out.data(_csv_text(["r", "s", "kappa", "h", "c"], [[str(v) for v in r.values()] for r in rows]))
    out.verdict({"check": "kac-table", "kappa": args.kappa, "rows": len(rows), "pass": True})
    return 0


def _nullvec_check(k: Fraction) -> list[dict]:
    c = kac.central_charge(k)
    out = []
    for label, branch in (((1, 2), kac.FusionBranch.ONE_TWO), ((2, 1), kac.FusionBranch.TWO_ONE)):
        h = kac.kac_weight(k, label)
        speed = virasoro.operator_speed(k, branch)
        v = virasoro.singular_vector(2, h, c)
        expected = (speed / 2) / -2
        got = None if v is None or v.coefficient((2,)) == 0 else v.coefficient((1, 1)) / v.coefficient((2,))
        out.append({
            "check": f"level2-nullvec-h{label[0]}{label[1]}",
            "kappa_or_h": k,
            "expected": expected,
            "got": got,
            "pass": got == expected,
        })
    return out


def cmd_verify_nullvec(args) -> int:
    if args.kappa is not None:
        kappas = [args.kappa]
    else:
        rng = np.random.default_rng(args.seed)
        kappas = [_random_kappa(rng) for _ in range(args.samples)]
    results = [r for k in kappas for r in _nullvec_check(k)]
    failures = [r for r in results if not r["pass"]]
    payload = {
        "check": "level2-nullvec",
        "kappa_or_h": kappas if len(kappas) > 1 else kappas[0],
        "expected": "(kappa/2) L_-1^2 - 2 L_-2 at speed kappa for h12 and 16/kappa for h21",
        "got": failures[:5] if failures else "all proportional",
        "samples": len(results),
        "pass": not failures,
    }
    _verdict_only(payload)
    return 0 if not failures else 2


def _fusion_sample(h: Fraction, rng, pairs: int) -> list[str]:
    """Return failure descriptions for one h; empty when every check holds."""
    bad = []
    I2, I3 = -2 * (h + 1), h * (h + 1)
    h0 = (3 * h - 1) / 8
    t = virasoro.ope_coefficients(h0, h, 0, 0)
    betas = {(1,): Fraction(1, 2), (1, 1): (h + 1) / (8 * (h + 2)), (2,): (h + 1) / (4 * (h + 2))}
    for w, val in betas.items():
        if t[w] != val:
            bad.append(f"beta{w} at h={h}: {t[w]} != {val}")
    done = 0
    while done < pairs:
        b111, b3 = _random_rational(rng, -5, 5), _random_rational(rng, -5, 5)
        try:
            got = virasoro.fused_ratios(h, b111, b3)
        except virasoro.ResampleError:
            continue
        done += 1
        if got != (I2, I3):
            bad.append(f"I2,I3 at h={h}, b=({b111},{b3}): {got}")
    return bad


def cmd_verify_fusion(args) -> int:
    rng = np.random.default_rng(args.seed)
    hs, failures = [], []
    while len(hs) < args.samples:
        h = _random_rational(rng)
        try:
            bad = _fusion_sample(h, rng, args.pairs)
        except virasoro.SingularParameterError:
            continue
        hs.append(h)
        failures.extend(bad)
    payload = {
        "check": "fused-ratios",
        "kappa_or_h": hs,
        "expected": {"I2": "-2(h+1)", "I3": "h(h+1)", "beta1": "1/2", "beta11": "(h+1)/(8(h+2))", "beta2": "(h+1)/(4(h+2))"},
        "got": failures[:5] if failures else "all equal",
        "checks": ["I2", "I3", "beta1", "beta11", "beta2"],
        "pass": not failures,
    }
    _verdict_only(payload)
    return 0 if not failures else 2


def cmd_trace(args) -> int:
    path = loewner.sample_driving(float(args.kappa), args.T, args.N, args.seed)
    tr = loewner.trace_from_driving(path)
    out = _Output(args.out)
    rows = [[repr(t), repr(p.real), repr(p.imag)] for t, p in zip(tr.times.tolist(), tr.points.tolist())]
    out.data(_csv_text(["t", "re", "im"], rows))
    if args.chain_out:
        loewner.write_chain_csv(loewner.MapChain.from_driving(path), args.chain_out)
    tip = tr.points[-1]
    out.verdict({"check": "trace", "kappa": args.kappa, "T": args.T, "N": args.N, "seed": args.seed,
                 "tip": [tip.real, tip.imag], "pass": True})
    return 0


def _epsilons(args):
    if args.epsilons:
        return sorted(args.epsilons, reverse=True)
    return np.geomspace(args.eps_max, args.eps_min, args.eps_count).tolist()


def cmd_hitprob(args) -> int:
    kappa = float(args.kappa)
    eps = _epsilons(args)
    ests = montecarlo.estimate_hits(kappa, args.z0, eps, args.trials, args.seed, T=args.T, N=args.N,
                                    event=args.event, workers=args.workers)
    out = _Output(args.out)
    out.data(_csv_text(["epsilon", "hits", "trials", "p_hat", "stderr"],
                       [[repr(e.epsilon), e.hits, e.trials, repr(e.p_hat), repr(e.stderr)] for e in ests]))
    target = montecarlo.radial_exponent(args.kappa, args.event) if args.target is None else args.target
    try:
        fit = montecarlo.fit_exponent(ests)
    except montecarlo.StatisticsError as exc:
        out.verdict({"check": "hitprob", "kappa": args.kappa, "event": args.event, "pass": False, "reason": str(exc)})
        return 2
    ok = abs(fit.slope - target) <= args.tol
    out.verdict({"check": "hitprob", "kappa": args.kappa, "z0": [args.z0.real, args.z0.imag], "event": args.event,
                 "hits": [e.hits for e in ests], "slope": fit.slope, "slope_stderr": fit.stderr_slope,
                 "target": target, "tol": args.tol, "pass": ok})
    return 0 if ok else 2


def symmetry_pairs(scan) -> list[dict]:
    """p_hat(alpha) against p_hat(pi - alpha) for angles placed symmetrically."""
    out = []
    n = len(scan.angles)
    for j in range(n // 2):
        a, b = scan.estimates[j], scan.estimates[n - 1 - j]
        if not math.isclose(scan.angles[j] + scan.angles[n - 1 - j], math.pi, abs_tol=1e-9):
            continue
        se = math.hypot(a.stderr, b.stderr)
        out.append({"alpha": scan.angles[j], "p": a.p_hat, "p_mirror": b.p_hat,
                    "pass": abs(a.p_hat - b.p_hat) <= 2 * se})
    return out


def cmd_angular(args) -> int:
    kappa = float(args.kappa)
    angles = args.angles or np.linspace(args.alpha_min, math.pi - args.alpha_min, args.angle_count).tolist()
    scan = montecarlo.angular_scan(kappa, args.radius, angles, args.epsilon, args.trials, args.seed,
                                   T=args.T, event=args.event, workers=args.workers)
    out = _Output(args.out)
    out.data(_csv_text(["alpha", "hits", "p_hat", "stderr"],
                       [[repr(a), e.hits, repr(e.p_hat), repr(e.stderr)] for a, e in zip(scan.angles, scan.estimates)]))
    target = float(8 / args.kappa - 1) if args.target is None else args.target
    sym = symmetry_pairs(scan)
    ok = abs(scan.fitted_q - target) <= args.tol and all(s["pass"] for s in sym)
    out.verdict({"check": "angular", "kappa": args.kappa, "fitted_q": scan.fitted_q, "stderr_q": scan.stderr_q,
                 "target": target, "tol": args.tol, "symmetry": sym, "pass": ok})
    return 0 if ok else 2


def cmd_multi_sim(args) -> int:
    kappa = args.kappa
    Z = multi.PairwisePower(2 / kappa if args.alpha is None else args.alpha)
    rng = np.random.default_rng(args.seed)
    state = multi.MultiState.start(args.x0, kappa)
    n = max(1, round(args.t_end / args.dt))
    rows = [[repr(0.0)] + [repr(v) for v in state.x]]
    collision = None
    for _ in range(n):
        try:
            state = multi.step_sde(state, Z, args.t_end / n, rng.standard_normal(state.m), rng=rng)
        except multi.CollisionEvent as exc:
            collision = {"pair": list(exc.pair), "t": exc.t}
            break
        rows.append([repr(state.t)] + [repr(v) for v in state.x])
    out = _Output(args.out)
    out.data(_csv_text(["t"] + [f"x{i + 1}" for i in range(state.m)], rows))
    out.verdict({"check": "multi-sim", "kappa": kappa, "alpha": Z.alpha, "steps": len(rows) - 1,
                 "final": list(state.x), "collision": collision, "pass": collision is None})
    return 0 if collision is None else 2


def cmd_martingale_check(args) -> int:
    res = multi.martingale_drift_test(args.kappa, args.x0, args.t_end, args.paths, args.seed, N=args.N,
                                      workers=args.workers)
    ok = res.passed and res.stderr <= args.max_stderr
    if args.tol is not None:
        ok = ok and abs(res.mean - 1) <= args.tol
    payload = {"kappa": args.kappa, "t_end": args.t_end, "paths": args.paths, "mean": res.mean,
               "stderr": res.stderr, "mean_plus_sign": res.mean_plus, "stderr_plus_sign": res.stderr_plus,
               "rejected": res.rejected, "intersected": res.intersected, "pass": ok}
    if args.out:
        Path(args.out).write_text(_dumps(payload) + "\n")
    _verdict_only({"check": "martingale", **payload})
    return 0 if ok else 2


def cmd_collapse(args) -> int:
    Z = None if args.alpha is None else multi.PairwisePower(args.alpha)
    spreads = np.geomspace(args.spread_max, args.spread_min, args.count)
    res = multi.collapse_scaling(args.kappa, args.m, spreads, Z=Z)
    target = res.target if args.alpha is None else Fraction(args.m * (args.m - 1), 2) * args.alpha
    ok = abs(res.slope - float(target)) <= 1e-9
    _verdict_only({"check": "collapse", "kappa": args.kappa, "m": args.m, "slope": res.slope,
                   "target": target, "kac_target": res.kac_target, "pass": ok})
    return 0 if ok else 2


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="slelab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("kac-table", help="conformal weights h_(r,s)")
    s.add_argument("--kappa", type=_rational, required=True)
    s.add_argument("--rmax", type=_positive_int, default=3)
    s.add_argument("--smax", type=_positive_int, default=3)
    s.add_argument("--format", choices=("csv", "json"), default="csv")
    s.add_argument("--out")
    s.set_defaults(func=cmd_kac_table)

    s = sub.add_parser("verify-nullvec", help="level-2 singular vectors against the SLE generator")
    s.add_argument("--kappa", type=_rational)
    s.add_argument("--samples", type=_positive_int, default=50)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_verify_nullvec, needs_seed=lambda a: a.kappa is None)

    s = sub.add_parser("verify-fusion", help="fused level-3 ratios I2, I3 and the level-1,2 OPE coefficients")
    s.add_argument("--samples", type=_positive_int, default=50)
    s.add_argument("--pairs", type=_positive_int, default=3)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_verify_fusion, needs_seed=lambda a: True)

    s = sub.add_parser("trace", help="SLE trace from a sampled driving function")
    s.add_argument("--kappa", type=_rational, required=True)
    s.add_argument("--T", type=float, default=1.0)
    s.add_argument("--N", type=_positive_int, default=1000)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--chain-out")
    s.set_defaults(func=cmd_trace, needs_seed=lambda a: True)

    def mc_common(s):
        s.add_argument("--kappa", type=_rational, required=True)
        s.add_argument("--trials", type=_positive_int, default=10_000)
        s.add_argument("--seed", type=int)
        s.add_argument("--T", type=float)
        s.add_argument("--event", choices=montecarlo.EVENTS, default="trace")
        s.add_argument("--workers", type=_positive_int)
        s.add_argument("--target", type=float)
        s.add_argument("--out")

    s = sub.add_parser("hitprob", help="hit probabilities against epsilon and the fitted exponent")
    mc_common(s)
    s.add_argument("--z0", type=_point, default=2j)
    s.add_argument("--epsilons", type=float, nargs="+")
    s.add_argument("--eps-min", type=float, default=0.05)
    s.add_argument("--eps-max", type=float, default=0.4)
    s.add_argument("--eps-count", type=_positive_int, default=5)
    s.add_argument("--N", type=_positive_int)
    s.add_argument("--tol", type=float, default=0.12)
    s.set_defaults(func=cmd_hitprob, needs_seed=lambda a: True)

    s = sub.add_parser("angular", help="angular dependence of the hit probability")
    mc_common(s)
    s.add_argument("--radius", type=float, default=1.0)
    s.add_argument("--angles", type=float, nargs="+")
    s.add_argument("--alpha-min", type=float, default=0.4)
    s.add_argument("--angle-count", type=_positive_int, default=7)
    s.add_argument("--epsilon", type=float, default=0.05)
    s.add_argument("--tol", type=float, default=0.4)
    s.set_defaults(func=cmd_angular, needs_seed=lambda a: True)

    s = sub.add_parser("multi-sim", help="driving SDE of multiple SLE with a pairwise-power partition function")
    s.add_argument("--kappa", type=_rational, required=True)
    s.add_argument("--x0", type=float, nargs="+", required=True)
    s.add_argument("--t-end", type=float, default=0.1)
    s.add_argument("--dt", type=float, default=1e-3)
    s.add_argument("--alpha", type=_rational)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_multi_sim, needs_seed=lambda a: True)

    s = sub.add_parser("martingale-check", help="mean of the two-curve martingale under independent SLEs")
    s.add_argument("--kappa", type=_rational, default=Fraction(8, 3))
    s.add_argument("--x0", type=float, nargs=2, default=[-1.0, 1.0])
    s.add_argument("--t-end", type=float, default=0.05)
    s.add_argument("--paths", type=_positive_int, default=2000)
    s.add_argument("--N", type=_positive_int, default=40)
    s.add_argument("--max-stderr", type=float, default=0.05)
    s.add_argument("--tol", type=float, help="also require |mean - 1| <= tol")
    s.add_argument("--workers", type=_positive_int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_martingale_check, needs_seed=lambda a: True)

    s = sub.add_parser("collapse", help="log Z scaling as m tips merge")
    s.add_argument("--kappa", type=_rational, required=True)
    s.add_argument("--m", type=_positive_int, required=True)
    s.add_argument("--alpha", type=_rational)
    s.add_argument("--spread-max", type=float, default=1.0)
    s.add_argument("--spread-min", type=float, default=1e-4)
    s.add_argument("--count", type=_positive_int, default=9)
    s.set_defaults(func=cmd_collapse)
    return p


CONFIG_ERRORS = (
    UsageError, kac.DomainError, kac.PhaseError, kac.UnsupportedFusionError,
    montecarlo.ResolutionError, OSError,
)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        need = getattr(args, "needs_seed", None)
        if need is not None and need(args) and args.seed is None:
            raise UsageError(f"slelab {args.command}: --seed is required for stochastic runs")
        return args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (montecarlo.StatisticsError, montecarlo.InstabilityError) as exc:
        print(_dumps({"check": getattr(args, "command", None), "pass": False, "reason": str(exc)}))
        return 2


def main(argv=None) -> int:
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
