"""Monte Carlo estimates of the probability that an SLE comes eps-close to z0.

Each trial drives a single tracked point through the Loewner flow and
records the running minimum of the Koebe distance estimate
``Im g_t(z0) / |g_t'(z0)|``.  One batch of trials serves every eps at once.

By default the capacity step adapts to the tracked point,
``dt = step_factor^2 |g_t(z0) - xi_t|^2 / (kappa + 4)``, so resolution
follows the point instead of a global grid.  Passing ``N`` switches to
a uniform grid of N steps on [0, T].
"""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .kac import DomainError, hull_dimension, trace_dimension
from .loewner import _uhp_sqrt

BLOCK = 500
SWALLOW_REL = 1e-9
MAX_STEPS = 2_000_000


class ResolutionError(ValueError):
    def __init__(self, required_N: int, message: str):
        self.required_N = required_N
        super().__init__(message)


class StatisticsError(ValueError):
    pass


class InstabilityError(RuntimeError):
    pass


@dataclass(frozen=True)
class HitEstimate:
    epsilon: float
    hits: int
    trials: int
    p_hat: float
    stderr: float

    @classmethod
    def from_counts(cls, epsilon: float, hits: int, trials: int) -> "HitEstimate":
        if not 0 <= hits <= trials or trials < 1:
            raise DomainError(f"need 0 <= hits <= trials, trials >= 1; got {hits}/{trials}")
        p = hits / trials
        return cls(float(epsilon), int(hits), int(trials), p, math.sqrt(p * (1 - p) / trials))


@dataclass(frozen=True)
class ExponentFit:
    slope: float
    intercept: float
    stderr_slope: float
    r2: float


@dataclass(frozen=True)
class AngularScan:
    angles: list
    estimates: list
    fitted_q: float
    stderr_q: float
    radial_exponent: float


@dataclass(frozen=True)
class DistanceSample:
    """Per-trial outcome: running minimum of the Koebe distance and swallowing."""

    min_dist: np.ndarray
    swallowed: np.ndarray
    steps: int

    def hits(self, epsilon: float, event: str = "trace") -> int:
        hit = self.min_dist <= epsilon
        if event == "hull":
            hit = hit | self.swallowed
        elif event == "frontier":
            hit = hit & ~self.swallowed
        elif event != "trace":
            raise DomainError(f"unknown event {event!r}")
        return int(np.count_nonzero(hit))


EVENTS = ("trace", "hull", "frontier")


def radial_exponent(kappa, event: str = "trace") -> float:
    """2 - d for the event: the trace dimension for 'trace', the hull dimension otherwise."""
    k = Fraction(kappa).limit_denominator(10 ** 6)
    d = trace_dimension(k) if event == "trace" else hull_dimension(k)
    return float(2 - d)


def worker_count(requested: int | None = None) -> int:
    """Requested workers, bounded by SLE_LAB_THREADS when set."""
    n = requested if requested is not None else (os.cpu_count() or 1)
    env = os.environ.get("SLE_LAB_THREADS")
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise DomainError(f"SLE_LAB_THREADS must be an integer, got {env!r}") from None
        n = min(n, max(cap, 1))
    return max(int(n), 1)


def default_horizon(z0: complex) -> float:
    return 8.0 * abs(z0) ** 2


def check_resolution(kappa: float, T: float, N: int, epsilon: float) -> None:
    if math.sqrt(kappa * T / N) >= epsilon / 4:
        required = math.floor(16 * kappa * T / epsilon ** 2) + 1
        raise ResolutionError(
            required,
            f"step sqrt(kappa T/N) = {math.sqrt(kappa * T / N):.3g} is not below eps/4 = {epsilon / 4:.3g}; "
            f"need N >= {required}",
        )


def _run_block(args) -> tuple[np.ndarray, np.ndarray, int]:
    kappa, z0, n, T, N, seed, block, stop_below, step_factor = args
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(block,)))
    w = np.full(n, complex(z0))  # g_t(z0) - xi_t
    dg = np.ones(n, dtype=complex)
    t = np.zeros(n)
    min_d = np.full(n, complex(z0).imag)
    swallowed = np.zeros(n, dtype=bool)
    active = min_d > stop_below
    tol = SWALLOW_REL * abs(z0)
    sk = math.sqrt(kappa)
    steps = 0
    while True:
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        steps += 1
        if steps > MAX_STEPS:
            raise InstabilityError(f"{idx.size} trials still running after {MAX_STEPS} steps")
        wi = w[idx]
        if N is None:
            dt = np.minimum(step_factor ** 2 * np.abs(wi) ** 2 / (kappa + 4), T - t[idx])
        else:
            dt = np.full(idx.size, T / N)
        u = wi - sk * np.sqrt(dt) * rng.standard_normal(idx.size)
        s = _uhp_sqrt(u * u + 4 * dt, u)
        dgi = dg[idx] * (u / s)
        ti = t[idx] + dt
        d = s.imag / np.abs(dgi)
        w[idx], dg[idx], t[idx] = s, dgi, ti
        min_d[idx] = np.minimum(min_d[idx], d)
        sw = (s.imag < tol) | (np.abs(s) < 1e3 * tol)
        swallowed[idx] = sw
        done = sw | (min_d[idx] <= stop_below)
        if N is None:
            done |= ti >= T * (1 - 1e-12)
        elif steps >= N:
            done[:] = True
        active[idx[done]] = False
    return min_d, swallowed, steps


def simulate_distances(
    kappa: float,
    z0: complex,
    trials: int,
    seed: int,
    T: float | None = None,
    N: int | None = None,
    stop_below: float = 0.0,
    step_factor: float = 0.1,
    workers: int | None = None,
) -> DistanceSample:
    """Run ``trials`` independent SLE_kappa paths and record their closest approach to z0.

    Trials are grouped in fixed blocks of 500, each with its own spawned
    seed, so counts do not depend on how blocks are spread over workers.
    Paths stop early once the distance drops to ``stop_below``.
    """
    kappa = float(kappa)
    z0 = complex(z0)
    if not 0 < kappa < 8:
        raise DomainError(f"need 0 < kappa < 8, got {kappa}")
    if not z0.imag > 0:
        raise DomainError(f"z0 must lie in the upper half plane, got {z0}")
    if trials < 1:
        raise DomainError("trials must be positive")
    T = default_horizon(z0) if T is None else float(T)
    nblocks = -(-trials // BLOCK)
    jobs = [
        (kappa, z0, min(BLOCK, trials - b * BLOCK), T, N, seed, b, stop_below, step_factor)
        for b in range(nblocks)
    ]
    nw = min(worker_count(workers), nblocks)
    if nw > 1:
        with ProcessPoolExecutor(max_workers=nw) as pool:
            results = list(pool.map(_run_block, jobs))
    else:
        results = [_run_block(j) for j in jobs]
    return DistanceSample(
        np.concatenate([r[0] for r in results]),
        np.concatenate([r[1] for r in results]),
        max(r[2] for r in results),
    )


def estimate_hits(
    kappa: float,
    z0: complex,
    epsilons,
    trials: int,
    seed: int,
    T: float | None = None,
    N: int | None = None,
    event: str = "hull",
    step_factor: float = 0.1,
    workers: int | None = None,
) -> list[HitEstimate]:
    """Hit estimates for several radii from one shared batch of paths.

    ``event`` selects what counts as a hit, with d the running minimum of
    the Koebe distance up to min(T, swallowing time):

    * ``"trace"``: d <= eps.  Later trace never enters a swallowed pocket,
      so this is the trace-distance event.
    * ``"hull"``: d <= eps or z0 swallowed by T.
    * ``"frontier"``: d <= eps and z0 not swallowed by T, i.e. z0 lies
      outside K_T within eps of its boundary.  Paths run to T.
    """
    if event not in EVENTS:
        raise DomainError(f"event must be one of {EVENTS}, got {event!r}")
    eps = [float(e) for e in epsilons]
    if not eps or min(eps) <= 0:
        raise DomainError("epsilons must be positive")
    T_ = default_horizon(z0) if T is None else float(T)
    if N is not None:
        check_resolution(float(kappa), T_, int(N), min(eps))
    stop = -1.0 if event == "frontier" else min(eps)
    sample = simulate_distances(
        kappa, z0, trials, seed, T=T_, N=N, stop_below=stop, step_factor=step_factor, workers=workers
    )
    return [HitEstimate.from_counts(e, sample.hits(e, event), trials) for e in eps]


def estimate_hit(
    kappa: float,
    z0: complex,
    epsilon: float,
    trials: int,
    T: float | None = None,
    N: int | None = None,
    seed: int = 0,
    **kwargs,
) -> HitEstimate:
    """Fraction of paths whose Koebe distance to z0 reaches epsilon; see :func:`estimate_hits`."""
    return estimate_hits(kappa, z0, [epsilon], trials, seed, T=T, N=N, **kwargs)[0]


def _wls(x, y, w) -> ExponentFit:
    x, y, w = (np.asarray(v, dtype=float) for v in (x, y, w))
    X = np.column_stack([np.ones_like(x), x])
    A = X.T @ (w[:, None] * X)
    cov = np.linalg.inv(A)
    intercept, slope = cov @ (X.T @ (w * y))
    resid = y - (intercept + slope * x)
    ybar = np.sum(w * y) / np.sum(w)
    ss_tot = np.sum(w * (y - ybar) ** 2)
    r2 = 1.0 - np.sum(w * resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    return ExponentFit(float(slope), float(intercept), float(math.sqrt(cov[1, 1])), float(r2))


def _log_weights(estimates, min_hits: int):
    if len(estimates) < 4:
        raise StatisticsError(f"need at least 4 estimates, got {len(estimates)}")
    low = [e for e in estimates if e.hits < min_hits]
    if low:
        raise StatisticsError(f"estimates with fewer than {min_hits} hits: eps={[e.epsilon for e in low]}")
    p = np.array([e.p_hat for e in estimates])
    se = np.array([e.stderr for e in estimates])
    if np.any(se <= 0):
        raise StatisticsError("every estimate needs a positive standard error (0 < p_hat < 1)")
    return np.log(p), (p / se) ** 2


def fit_exponent(estimates, min_hits: int = 20, min_span: float = 8.0) -> ExponentFit:
    """Weighted least squares of log p_hat on log eps, weights (p_hat / stderr)^2.

    ``min_span`` is the smallest allowed ratio between the largest and
    smallest eps.
    """
    estimates = list(estimates)
    y, w = _log_weights(estimates, min_hits)
    eps = np.array([e.epsilon for e in estimates])
    if eps.max() / eps.min() < min_span * (1 - 1e-12):
        raise StatisticsError(f"eps range {eps.min():g}..{eps.max():g} spans less than a factor {min_span:g}")
    return _wls(np.log(eps), y, w)


def angular_scan(
    kappa: float,
    radius: float,
    angles,
    epsilon: float,
    trials: int,
    seed: int,
    T: float | None = None,
    event: str = "trace",
    step_factor: float = 0.1,
    workers: int | None = None,
    min_hits: int = 20,
) -> AngularScan:
    """p_hat at z0 = radius e^{i alpha}; the sine exponent after dividing out (eps / Im z0)^(2-d).

    Im z0 = radius sin(alpha), so with p ~ (eps / Im z0)^(2-d) sin(alpha)^q the
    log-log slope in sin(alpha) is q - (2 - d).
    """
    angles = [float(a) for a in angles]
    if any(b <= a for a, b in zip(angles, angles[1:])):
        raise DomainError("angles must be strictly increasing")
    if any(not 0.1 < a < math.pi - 0.1 for a in angles):
        raise DomainError("angles must lie in (0.1, pi - 0.1)")
    if len(angles) < 4:
        raise StatisticsError("need at least 4 angles")
    ests = []
    for j, a in enumerate(angles):
        z0 = radius * complex(math.cos(a), math.sin(a))
        T_ = default_horizon(z0) if T is None else T
        ests.append(
            estimate_hits(
                kappa, z0, [epsilon], trials, seed=[int(seed), j], T=T_,
                event=event, step_factor=step_factor, workers=workers,
            )[0]
        )
    y, w = _log_weights(ests, min_hits)
    q0 = radial_exponent(kappa, event)
    fit = _wls(np.log(np.sin(angles)), y, w)
    return AngularScan(angles, ests, fit.slope + q0, fit.stderr_slope, q0)


def write_hits_csv(estimates, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epsilon", "hits", "trials", "p_hat", "stderr"])
        for e in estimates:
            w.writerow([repr(e.epsilon), e.hits, e.trials, repr(e.p_hat), repr(e.stderr)])


def write_angular_csv(scan: AngularScan, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "p_hat", "stderr"])
        for a, e in zip(scan.angles, scan.estimates):
            w.writerow([repr(a), repr(e.p_hat), repr(e.stderr)])


def summary_json(kappa, z0, fit: ExponentFit, target: float, tol: float) -> str:
    z0 = complex(z0)
    return json.dumps(
        {
            "kappa": kappa,
            "z0": [z0.real, z0.imag],
            "slope": fit.slope,
            "slope_stderr": fit.stderr_slope,
            "target": target,
            "pass": abs(fit.slope - target) <= tol,
        }
    )


def estimate_to_dict(e: HitEstimate) -> dict:
    return asdict(e)
