"""Multiple SLE: driving SDE with a partition-function drift and the reweighting martingale.

The martingale is tested against the unweighted two-curve process: two
independent SLE_kappa curves, each parameterised by its own half-plane
capacity.  For curve i, ``H^i = G o (g^i)^{-1}`` removes the other curve
as seen from curve i; it is built by a vertical-slit zipper through the
points g^i(gamma^j), and its derivatives at the tip image w^i come from
a five-point stencil on the real line.
"""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .kac import DomainError, as_kappa, central_charge, collapse_exponent_identity, kac_weight
from .loewner import TipCollision, _uhp_sqrt
from .montecarlo import InstabilityError, worker_count
from .virasoro import apply_D2_twopoint

BLOCK = 250


def exact_kappa(kappa) -> Fraction:
    """Exact rational for a kappa given as int, Fraction, 'p/q' or float (8/3. -> 8/3)."""
    if isinstance(kappa, float):
        return as_kappa(Fraction(kappa).limit_denominator(10 ** 6))
    return as_kappa(kappa)


class DegenerateDerivativeError(ArithmeticError):
    pass


# -- partition functions ------------------------------------------------------

@dataclass(frozen=True)
class PairwisePower:
    """Z = prod_{i<j} (x_j - x_i)^alpha on the ordered chamber."""

    alpha: Fraction

    def __post_init__(self):
        object.__setattr__(self, "alpha", Fraction(self.alpha))

    def log_z(self, x) -> float:
        x = np.asarray(x, dtype=float)
        a = float(self.alpha)
        return sum(a * math.log(x[j] - x[i]) for i in range(len(x)) for j in range(i + 1, len(x)))

    def grad(self, x, i: int) -> float:
        a = float(self.alpha)
        return sum(a / (x[i] - x[k]) for k in range(len(x)) if k != i)

    def hess(self, x, i: int) -> float:
        """d^2 log Z / dx_i^2."""
        a = float(self.alpha)
        return sum(-a / (x[i] - x[k]) ** 2 for k in range(len(x)) if k != i)


@dataclass(frozen=True)
class UserTable:
    """log Z and its gradient supplied by the caller; the diagonal Hessian is differenced."""

    log_z_fn: Callable
    grad_fn: Callable
    step: float = 1e-5

    def log_z(self, x) -> float:
        return float(self.log_z_fn(np.asarray(x, dtype=float)))

    def grad(self, x, i: int) -> float:
        return float(self.grad_fn(np.asarray(x, dtype=float))[i])

    def hess(self, x, i: int) -> float:
        x = np.asarray(x, dtype=float)
        e = np.zeros_like(x)
        e[i] = self.step
        return (self.grad(x + e, i) - self.grad(x - e, i)) / (2 * self.step)


PartitionSpec = PairwisePower | UserTable


# -- state and SDE ------------------------------------------------------------

def check_kappa_relation(kappas) -> bool:
    """Every pair equal or dual (kappa_j = 16 / kappa_i), with equal central charges."""
    ks = [exact_kappa(k) for k in kappas]
    for i in range(len(ks)):
        for j in range(i + 1, len(ks)):
            if ks[i] != ks[j] and ks[i] * ks[j] != 16:
                return False
            if central_charge(ks[i]) != central_charge(ks[j]):
                return False
    return True


@dataclass(frozen=True)
class MultiState:
    x: tuple
    kappas: tuple
    a: tuple
    t: float = 0.0

    def __post_init__(self):
        x = tuple(float(v) for v in self.x)
        m = len(x)
        kappas = tuple(self.kappas) if len(self.kappas) == m else tuple(self.kappas) * m
        a = tuple(float(v) for v in (self.a if len(self.a) == m else tuple(self.a) * m))
        if len(kappas) != m or len(a) != m:
            raise DomainError("x, kappas and a must have the same length")
        if any(b <= c for c, b in zip(x, x[1:])):
            raise DomainError(f"tips must be strictly increasing, got {x}")
        if not check_kappa_relation(kappas):
            raise DomainError(f"kappas {kappas} violate the kappa-relation")
        if any(v < 0 for v in a) or sum(a) <= 0:
            raise DomainError("growth rates must be >= 0 with positive sum")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "kappas", kappas)
        object.__setattr__(self, "a", a)

    @classmethod
    def start(cls, x, kappa, a=1.0) -> "MultiState":
        return cls(tuple(x), (kappa,), (a,))

    @property
    def m(self) -> int:
        return len(self.x)


def drift(state: MultiState, Z: PartitionSpec, i: int) -> float:
    """kappa_i a_i d_i log Z + sum_{k != i} 2 a_i / (x_i - x_k)."""
    x = state.x
    if not 0 <= i < state.m:
        raise DomainError(f"index {i} out of range")
    for k in range(state.m):
        if k != i and x[k] == x[i]:
            raise TipCollision((min(i, k), max(i, k)))
    ai = state.a[i]
    out = float(state.kappas[i]) * ai * Z.grad(x, i)
    out += sum(2 * ai / (x[i] - x[k]) for k in range(state.m) if k != i)
    return out


class CollisionEvent(TipCollision):
    def __init__(self, pair, t):
        self.t = t
        super().__init__(pair, f"tips {pair[0]} and {pair[1]} collide near t = {t:g}")


def _em_step(state, Z, dt, dB):
    x = list(state.x)
    new = []
    for i in range(state.m):
        sk = math.sqrt(float(state.kappas[i]))
        new.append(x[i] + sk * math.sqrt(state.a[i]) * dB[i] + drift(state, Z, i) * dt)
    return new


def step_sde(
    state: MultiState,
    Z: PartitionSpec,
    dt: float,
    noise: Sequence[float],
    max_halvings: int = 12,
    rng: np.random.Generator | None = None,
) -> MultiState:
    """Euler-Maruyama step of the driving SDE with adaptive halving.

    ``noise`` holds m standard normals; the Brownian increment is
    sqrt(dt) * noise.  If the tip ordering would flip, the step is split in
    two, the midpoint drawn from the Brownian bridge (``rng``) or, without
    an rng, by splitting the increment evenly.
    """
    if not dt > 0:
        raise DomainError("dt must be positive")
    noise = np.asarray(noise, dtype=float)
    if noise.shape != (state.m,):
        raise DomainError(f"need {state.m} normals")
    return _step_increment(state, Z, dt, math.sqrt(dt) * noise, max_halvings, rng)


def _step_increment(state, Z, dt, dB, halvings, rng):
    x = _em_step(state, Z, dt, dB)
    if all(b > a for a, b in zip(x, x[1:])):
        return replace(state, x=tuple(x), t=state.t + dt)
    if halvings == 0:
        bad = next(i for i in range(state.m - 1) if x[i + 1] <= x[i])
        raise CollisionEvent((bad, bad + 1), state.t + dt)
    if rng is not None:
        mid = dB / 2 + math.sqrt(dt / 4) * rng.standard_normal(state.m)
    else:
        mid = dB / 2
    half = _step_increment(state, Z, dt / 2, mid, halvings - 1, rng)
    return _step_increment(half, Z, dt / 2, dB - mid, halvings - 1, rng)


# -- Schwarzian --------------------------------------------------------------

_OFFSETS = np.arange(-2, 3)


def stencil_derivatives(samples, spacing: float):
    """f', f'', f''' at the centre of five equally spaced samples (O(spacing^2))."""
    f = np.asarray(samples)
    fm2, fm1, f0, f1, f2 = (f[..., k] for k in range(5))
    h = spacing
    d1 = (fm2 - 8 * fm1 + 8 * f1 - f2) / (12 * h)
    d2 = (-fm2 + 16 * fm1 - 30 * f0 + 16 * f1 - f2) / (12 * h * h)
    d3 = (-fm2 + 2 * fm1 - 2 * f1 + f2) / (2 * h ** 3)
    return d1, d2, d3


def schwarzian_from_derivatives(d1, d2, d3):
    return d3 / d1 - 1.5 * (d2 / d1) ** 2


def schwarzian_fd(f, x: float, spacing: float, tol: float = 1e-12) -> float:
    """S f = f'''/f' - (3/2)(f''/f')^2 from a five-point central stencil.

    ``f`` is either a callable or the five samples f(x + k spacing), k = -2..2.
    """
    if not spacing > 0:
        raise DomainError("spacing must be positive")
    samples = [f(x + k * spacing) for k in _OFFSETS] if callable(f) else list(f)
    if len(samples) != 5 or not np.all(np.isfinite(samples)):
        raise DomainError("need five finite stencil values")
    d1, d2, d3 = stencil_derivatives(samples, spacing)
    if abs(d1) < tol:
        raise DegenerateDerivativeError(f"|f'| = {abs(d1):g} below tolerance")
    # differences at the rounding level of the samples are treated as exact zeros
    noise = 64 * np.finfo(float).eps * max(abs(v) for v in samples)
    if abs(d2) * spacing ** 2 <= noise and abs(d3) * spacing ** 3 <= noise:
        return 0.0
    return float(np.real(schwarzian_from_derivatives(d1, d2, d3)))


def loop_soup_weight(H_prime: float, schwarzian_integral: float, kappa) -> float:
    """Phi'^h exp(-(c/6) int S Phi) with h = h_(1,2)(kappa) and c = c(kappa)."""
    k = exact_kappa(kappa)
    if not 0 < H_prime <= 1:
        raise DomainError("H_prime must lie in (0, 1]")
    if k > Fraction(8, 3):
        raise DomainError("loop-soup weights need kappa <= 8/3")
    h = kac_weight(k, (1, 2))
    c = central_charge(k)
    if c == 0:
        return float(H_prime) ** float(h)
    return float(H_prime) ** float(h) * math.exp(-float(c) / 6 * schwarzian_integral)


# -- two-curve runs and the martingale --------------------------------------

@dataclass(frozen=True)
class TwoCurveRun:
    """Independent SLE_kappa drivers w (paths, 2, N+1) and traces in H on a common grid."""

    kappa: float
    times: np.ndarray
    w: np.ndarray
    traces: np.ndarray


def _inverse(dt, xi, w):
    u = w - xi
    return xi + _uhp_sqrt(u * u - 4 * dt, u)


def _forward(dt, xi, z):
    u = z - xi
    return xi + _uhp_sqrt(u * u + 4 * dt, u)


def _traces(xi: np.ndarray, dt: float) -> np.ndarray:
    """gamma_k for every row of drivers xi (P, N+1), vectorized over rows."""
    P, n1 = xi.shape
    pts = np.empty((P, n1), dtype=complex)
    pts[:, 0] = xi[:, 0]
    W = xi[:, 1:] + 2j * math.sqrt(dt)
    for j in range(n1 - 2, 0, -1):
        W[:, j:] = _inverse(dt, xi[:, j, None], W[:, j:])
    pts[:, 1:] = W
    return pts


def sample_two_curves(kappa: float, x0, t_end: float, N: int, paths: int, rng) -> TwoCurveRun:
    kappa = float(kappa)
    if not t_end >= 0 or N < 1:
        raise DomainError("need t_end >= 0 and N >= 1")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (2,) or not x0[0] < x0[1]:
        raise DomainError("x0 must be an increasing pair")
    dt = t_end / N
    inc = rng.standard_normal((paths, 2, N)) * math.sqrt(kappa * dt)
    w = np.concatenate([np.broadcast_to(x0[None, :, None], (paths, 2, 1)), x0[None, :, None] + np.cumsum(inc, axis=2)], axis=2)
    if dt > 0:
        tr = np.stack([_traces(w[:, 0], dt), _traces(w[:, 1], dt)], axis=1)
    else:
        tr = w.astype(complex)
    return TwoCurveRun(kappa, np.linspace(0.0, t_end, N + 1), w, tr)


def _zipper_stencil(curve: np.ndarray, centre: np.ndarray, spacing: float) -> np.ndarray:
    """Map that removes the polygon through ``curve`` (P, k), evaluated on a real stencil."""
    ev = centre[:, None] + spacing * _OFFSETS[None, :] + 0j
    pts = curve.copy()
    for j in range(pts.shape[1]):
        p = pts[:, j]
        xi = p.real[:, None]
        dtj = (p.imag ** 2 / 4)[:, None]
        if j + 1 < pts.shape[1]:
            pts[:, j + 1:] = _forward(dtj, xi, pts[:, j + 1:])
        ev = _forward(dtj, xi, ev)
    return ev


@dataclass
class MartingalePath:
    times: np.ndarray
    M: np.ndarray
    components: dict = field(default_factory=dict)
    alive: np.ndarray | None = None
    rejected: np.ndarray | None = None


def _null_factor_vanishes(Z, kappa) -> bool:
    """Exact check that the two-point D_{-2} coefficient is zero for Z = (x2-x1)^alpha, h = h_(1,2)."""
    k = exact_kappa(kappa)
    return isinstance(Z, PairwisePower) and apply_D2_twopoint(k, kac_weight(k, (1, 2)), Z.alpha) == 0


def martingale_weight(
    run: TwoCurveRun,
    Z: PartitionSpec | None = None,
    schwarzian_sign: int = -1,
    stencil_rel: float = 1e-3,
) -> MartingalePath:
    """M_t = Z(x_t)/Z(x_0) prod_i H_i'(w_i)^h exp(sign (c/6) int S H_i) exp(-int D Z / Z).

    sign = -1 is the loop-soup (restriction) convention; the null-vector
    factor is exactly 1 when Z = (x2-x1)^(2/kappa).  Paths whose curves meet
    get M = 0 from then on; non-finite stencil values mark a path rejected.
    """
    k = exact_kappa(run.kappa)
    kappa = float(k)
    if k > Fraction(8, 3):
        raise DomainError("martingale weights are bounded only for kappa <= 8/3")
    Z = PairwisePower(2 / k) if Z is None else Z
    h = float(kac_weight(k, (1, 2)))
    c = float(central_charge(k))
    P, _, n1 = run.w.shape
    N = n1 - 1
    dt = run.times[1] - run.times[0] if N else 0.0
    x0 = run.w[0, :, 0]
    spacing = stencil_rel * float(x0[1] - x0[0])

    logd = np.zeros((P, 2, n1))
    S = np.zeros((P, 2, n1))
    x = np.zeros((P, 2, n1))
    x[:, :, 0] = run.w[:, :, 0]
    alive = np.ones(P, dtype=bool)
    death = np.full(P, n1, dtype=int)
    rejected = np.zeros(P, dtype=bool)

    # Q[:, i] holds g^i_t applied to the other curve's trace points
    Q = run.traces[:, ::-1].copy()
    tol = 1e-12 * float(x0[1] - x0[0])
    for step in range(1, n1):
        for i in range(2):
            Q[:, i] = _forward(dt, run.w[:, i, step, None], Q[:, i])
        for i in range(2):
            curve = Q[:, i, 1:step + 1]
            hit = curve.imag.min(axis=1) <= tol
            newly = hit & alive
            death[newly] = step
            alive &= ~hit
            ev = _zipper_stencil(curve, run.w[:, i, step], spacing)
            d1, d2, d3 = stencil_derivatives(ev.real, spacing)
            bad = ~np.isfinite(d1) | ~np.isfinite(d3) | (d1 <= 0)
            rejected |= bad & alive
            with np.errstate(all="ignore"):
                logd[:, i, step] = np.log(np.where(bad, 1.0, d1))
                S[:, i, step] = np.where(bad, 0.0, schwarzian_from_derivatives(d1, d2, d3))
            x[:, i, step] = ev[:, 2].real

    with np.errstate(all="ignore"):
        gap = x[:, 1] - x[:, 0]
        if isinstance(Z, PairwisePower):
            log_ratio = float(Z.alpha) * (np.log(gap) - math.log(x0[1] - x0[0]))
        else:
            log_ratio = np.array([[Z.log_z(x[p, :, s]) for s in range(n1)] for p in range(P)])
            log_ratio -= log_ratio[:, :1]
    log_deriv = h * logd.sum(axis=1)
    Ssum = S.sum(axis=1)
    integral = np.concatenate([np.zeros((P, 1)), np.cumsum((Ssum[:, 1:] + Ssum[:, :-1]) * dt / 2, axis=1)], axis=1)
    log_schw = schwarzian_sign * c / 6 * integral
    if _null_factor_vanishes(Z, k):
        log_null = np.zeros((P, n1))
    else:
        a = np.exp(2 * logd)  # a_i = H_i'(w_i)^2 with unit own-capacity rates
        dens = np.zeros((P, n1))
        for p in range(P):
            for s in range(n1):
                xs = x[p, :, s]
                dens[p, s] = sum(
                    a[p, i, s] * v for i, v in enumerate(_per_tip_null(Z, xs, kappa, h))
                )
        log_null = -np.concatenate(
            [np.zeros((P, 1)), np.cumsum((dens[:, 1:] + dens[:, :-1]) * dt / 2, axis=1)], axis=1
        )
    logM = log_ratio + log_deriv + log_schw + log_null
    M = np.exp(logM)
    steps = np.arange(n1)[None, :]
    M = np.where(steps >= death[:, None], 0.0, M)
    M[rejected] = np.nan
    return MartingalePath(
        run.times,
        M,
        {"ratio": log_ratio, "deriv": log_deriv, "schwarz": log_schw, "null": log_null},
        alive,
        rejected,
    )


def _per_tip_null(Z, x, kappa, h):
    """(1/Z) D_{-2}(x_i) Z for each tip; the spectator derivative acts on x_k."""
    out = []
    for i in range(len(x)):
        g = Z.grad(x, i)
        val = kappa / 2 * (Z.hess(x, i) + g * g)
        for k in range(len(x)):
            if k != i:
                d = x[k] - x[i]
                val -= 2 * (h / d ** 2 - Z.grad(x, k) / d)
        out.append(val)
    return out


@dataclass(frozen=True)
class DriftTestResult:
    kappa: float
    t_end: float
    paths: int
    mean: float
    stderr: float
    mean_plus: float
    stderr_plus: float
    rejected: int
    intersected: int

    @property
    def passed(self) -> bool:
        return abs(self.mean - 1) <= 3 * self.stderr + 1e-15


def _drift_block(args):
    kappa, x0, t_end, N, n, seed, block, stencil_rel = args
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(block,)))
    run = sample_two_curves(kappa, x0, t_end, N, n, rng)
    out = []
    for sign in (-1, 1):
        mp = martingale_weight(run, schwarzian_sign=sign, stencil_rel=stencil_rel)
        out.append(mp.M[:, -1])
    return out[0], out[1], int(np.count_nonzero(~mp.alive))


def martingale_drift_test(
    kappa,
    x0,
    t_end: float,
    paths: int,
    seed: int,
    N: int = 40,
    stencil_rel: float = 1e-3,
    workers: int | None = None,
) -> DriftTestResult:
    """Average M_{t_end} over unweighted two-curve paths; a martingale has mean 1.

    Both Schwarzian signs are evaluated on the same paths; ``mean`` is the
    -c/6 convention and ``mean_plus`` the +c/6 one.
    """
    if paths < 2:
        raise DomainError("need at least 2 paths")
    x0 = tuple(float(v) for v in x0)
    if t_end > 0.1 * (x0[1] - x0[0]) ** 2:
        raise DomainError("t_end must be at most 0.1 (x2 - x1)^2")
    if t_end == 0:
        return DriftTestResult(float(kappa), 0.0, paths, 1.0, 0.0, 1.0, 0.0, 0, 0)
    nblocks = -(-paths // BLOCK)
    jobs = [
        (float(kappa), x0, t_end, N, min(BLOCK, paths - b * BLOCK), seed, b, stencil_rel)
        for b in range(nblocks)
    ]
    nw = min(worker_count(workers), nblocks)
    if nw > 1:
        with ProcessPoolExecutor(max_workers=nw) as pool:
            res = list(pool.map(_drift_block, jobs))
    else:
        res = [_drift_block(j) for j in jobs]
    m_minus = np.concatenate([r[0] for r in res])
    m_plus = np.concatenate([r[1] for r in res])
    intersected = sum(r[2] for r in res)
    bad = ~np.isfinite(m_minus)
    if bad.mean() > 0.2:
        raise InstabilityError(f"{bad.sum()} of {paths} paths rejected (non-finite stencil values)")
    good_m, good_p = m_minus[~bad], m_plus[~bad]
    n = good_m.size
    return DriftTestResult(
        float(kappa), t_end, paths,
        float(good_m.mean()), float(good_m.std(ddof=1) / math.sqrt(n)),
        float(good_p.mean()), float(good_p.std(ddof=1) / math.sqrt(n)),
        int(bad.sum()), intersected,
    )


# -- collapse ----------------------------------------------------------------

@dataclass(frozen=True)
class CollapseResult:
    slope: float
    target: Fraction
    kac_target: Fraction


def collapse_scaling(kappa, m: int, spreads, Z: PartitionSpec | None = None, pattern=None, centre=0.0) -> CollapseResult:
    """Slope of log Z(centre + spread u) against log spread; m(m-1)/kappa for Z = prod (x_j-x_i)^(2/kappa)."""
    k = exact_kappa(kappa)
    if m < 2:
        raise DomainError("need m >= 2")
    spreads = np.asarray(spreads, dtype=float)
    if np.any(np.diff(spreads) >= 0) or spreads[-1] <= 0:
        raise DomainError("spreads must be positive and decreasing")
    if math.log10(spreads[0] / spreads[-1]) < 2:
        raise DomainError("spreads must span at least two decades")
    Z = PairwisePower(2 / k) if Z is None else Z
    u = np.arange(m) - (m - 1) / 2 if pattern is None else np.asarray(pattern, dtype=float)
    logz = [Z.log_z(centre + s * u) for s in spreads]
    slope = float(np.polyfit(np.log(spreads), logz, 1)[0])
    lhs, rhs = collapse_exponent_identity(k, m)
    return CollapseResult(slope, Fraction(m * (m - 1)) / k, lhs - m * kac_weight(k, (1, 2)))


def write_martingale_csv(mp: MartingalePath, path, index: int = 0) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "M", "logfac_deriv", "logfac_schwarz", "logfac_null"])
        comp = mp.components
        for s, t in enumerate(mp.times.tolist()):
            w.writerow([
                repr(t), repr(float(mp.M[index, s])), repr(float(comp["deriv"][index, s])),
                repr(float(comp["schwarz"][index, s])), repr(float(comp["null"][index, s])),
            ])
