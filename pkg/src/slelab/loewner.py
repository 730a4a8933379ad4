"""Discretized chordal Loewner evolution with piecewise-constant driving.

Over an interval of length ``delta`` with constant driver ``xi`` the
Loewner flow is the vertical-slit map ``xi + sqrt((z - xi)^2 + 4 delta)``.
A driving path is turned into a chain of such maps; the trace, tracked
points and their derivatives all come from composing them.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kac import DomainError

SWALLOW_TOL = 1e-9
TRACE_TOL = 1e-9


class BranchCutError(ArithmeticError):
    """Trace extraction met the slit branch cut even after regularization."""


class TipCollision(ArithmeticError):
    def __init__(self, pair, message=None):
        self.pair = tuple(pair)
        super().__init__(message or f"tips {self.pair[0]} and {self.pair[1]} collide")


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DrivingPath:
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = _frozen(self.times)
        v = _frozen(self.values)
        if t.ndim != 1 or t.shape != v.shape or t.size < 1:
            raise DomainError("times and values must be 1-d arrays of equal, nonzero length")
        if t[0] != 0:
            raise DomainError("times must start at 0")
        if np.any(np.diff(t) <= 0):
            raise DomainError("times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def T(self) -> float:
        return float(self.times[-1])


@dataclass(frozen=True)
class MapChain:
    """Elementary maps g_k(z) = xi_k + sqrt((z - xi_k)^2 + 4 dt_k), applied k = 1, 2, ..."""

    dt: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        dt = _frozen(self.dt)
        xi = _frozen(self.xi)
        if dt.shape != xi.shape or dt.ndim != 1:
            raise DomainError("dt and xi must be 1-d arrays of equal length")
        if np.any(dt <= 0):
            raise DomainError("every step needs dt > 0")
        object.__setattr__(self, "dt", dt)
        object.__setattr__(self, "xi", xi)

    @classmethod
    def from_steps(cls, steps) -> "MapChain":
        steps = list(steps)
        if not steps:
            return cls(np.zeros(0), np.zeros(0))
        dt, xi = zip(*steps)
        return cls(np.array(dt), np.array(xi))

    @classmethod
    def from_driving(cls, path: DrivingPath) -> "MapChain":
        # the step over [t_{k-1}, t_k] uses the right-endpoint driver, so the
        # tip of step k sits exactly at the preimage of xi_k
        return cls(np.diff(path.times), path.values[1:])

    @property
    def steps(self) -> list[tuple[float, float]]:
        return list(zip(self.dt.tolist(), self.xi.tolist()))

    @property
    def capacity_time(self) -> float:
        """T, so that the half-plane capacity of the hull is 2T."""
        return float(self.dt.sum())

    def __len__(self) -> int:
        return self.dt.size

    def __getitem__(self, s: slice) -> "MapChain":
        return MapChain(self.dt[s], self.xi[s])

    def __add__(self, other: "MapChain") -> "MapChain":
        return MapChain(np.concatenate([self.dt, other.dt]), np.concatenate([self.xi, other.xi]))


@dataclass
class PointState:
    z: complex
    dg: complex = 1.0 + 0j
    swallowed: bool = False
    swallow_time: float | None = None
    t: float = 0.0


@dataclass(frozen=True)
class Trace:
    times: np.ndarray
    points: np.ndarray
    eps_reg: float = 0.0


def sample_driving(kappa: float, T: float, N: int, seed: int) -> DrivingPath:
    """sqrt(kappa) B on a uniform grid of N steps over [0, T]."""
    kappa = float(kappa)
    if kappa < 0 or not T > 0 or int(N) != N or N < 1:
        raise DomainError(f"need kappa >= 0, T > 0, integer N >= 1; got {kappa}, {T}, {N}")
    rng = np.random.default_rng(seed)
    steps = rng.standard_normal(int(N)) * np.sqrt(kappa * T / N)
    values = np.concatenate([[0.0], np.cumsum(steps)])
    return DrivingPath(np.linspace(0.0, T, int(N) + 1), values)


def _uhp_sqrt(w, ref):
    """sqrt(w) on the branch with Im >= 0; on the real axis the sign follows Re(ref)."""
    s = np.sqrt(np.asarray(w, dtype=complex))
    ref = np.asarray(ref, dtype=complex)
    flip = (s.imag < 0) | ((s.imag == 0) & (s.real * ref.real < 0))
    return np.where(flip, -s, s)


def _out(a):
    return complex(a) if np.ndim(a) == 0 else a


def elementary_map(delta, xi, z):
    """xi + sqrt((z - xi)^2 + 4 delta), hydrodynamically normalized; vectorized."""
    if np.any(np.asarray(delta) < 0):
        raise DomainError("delta must be >= 0")
    u = np.asarray(z, dtype=complex) - xi
    return _out(xi + _uhp_sqrt(u * u + 4 * np.asarray(delta), u))


def elementary_inverse(delta, xi, w):
    """Inverse of :func:`elementary_map`; the driving point maps to the slit tip xi + 2i sqrt(delta)."""
    if np.any(np.asarray(delta) < 0):
        raise DomainError("delta must be >= 0")
    u = np.asarray(w, dtype=complex) - xi
    return _out(xi + _uhp_sqrt(u * u - 4 * np.asarray(delta), u))


def elementary_derivative(delta, xi, z):
    u = np.asarray(z, dtype=complex) - xi
    return _out(u / _uhp_sqrt(u * u + 4 * np.asarray(delta), u))


def _trace_points(chain: MapChain, x0: float, eps_reg: float) -> np.ndarray:
    n = len(chain)
    pts = np.empty(n + 1, dtype=complex)
    pts[0] = x0
    if n == 0:
        return pts
    w = elementary_inverse(chain.dt, chain.xi, chain.xi + 1j * eps_reg)
    # w[k] holds F_{k+1}(xi_{k+1}); peel off F_j for every later index, innermost first
    for j in range(n - 2, -1, -1):
        w[j + 1:] = elementary_inverse(chain.dt[j], chain.xi[j], w[j + 1:])
    pts[1:] = w
    return pts


def trace_from_driving(path: DrivingPath, eps_reg: float = 0.0) -> Trace:
    """gamma(t_n) = F_1(F_2(...F_n(xi_n + i eps_reg)...)), O(N^2) but vectorized per layer.

    With vertical slits the preimage of the driver is exactly the slit tip,
    so no regularization is needed; ``eps_reg`` is kept for cross-checks.
    On a branch-cut failure one retry is made with a larger offset.
    """
    chain = MapChain.from_driving(path)
    x0 = float(path.values[0])
    tries = [eps_reg]
    if len(chain):
        tries.append(max(10 * eps_reg, 1e-6 * float(np.sqrt(chain.dt.mean()))))
    for eps in tries:
        pts = _trace_points(chain, x0, eps)
        if np.all(np.isfinite(pts)) and pts.imag.min() >= -TRACE_TOL:
            return Trace(path.times, _frozen(pts, complex), eps)
    raise BranchCutError(f"trace extraction failed with eps_reg up to {tries[-1]:g}")


def evolve_point(chain: MapChain, z0: complex, swallow_tol: float = SWALLOW_TOL) -> PointState:
    """Push z0 through the chain, accumulating g'(z0); stops once swallowed."""
    z0 = complex(z0)
    if not z0.imag > 0:
        raise DomainError(f"tracked point must lie in the upper half plane, got {z0}")
    z, dg, t = z0, 1.0 + 0j, 0.0
    for delta, xi in zip(chain.dt.tolist(), chain.xi.tolist()):
        u = z - xi
        s = complex(_uhp_sqrt(u * u + 4 * delta, u))
        dg *= u / s
        z = xi + s
        t += delta
        if z.imag < swallow_tol:
            return PointState(z, dg, True, t, t)
    return PointState(z, dg, False, None, t)


def koebe_distance(state: PointState) -> float:
    """Im g(z0) / |g'(z0)|: within a factor 4 of dist(z0, hull union R); 0 once swallowed."""
    if state.swallowed:
        return 0.0
    return state.z.imag / abs(state.dg)


def mirror_extend(chain: MapChain, w: complex) -> complex:
    """Schwarz reflection of the chain to the lower half plane and the free real axis."""
    w = complex(w)
    if w.imag > 0:
        return evolve_point(chain, w, swallow_tol=0.0).z
    if w.imag < 0:
        return evolve_point(chain, w.conjugate(), swallow_tol=0.0).z.conjugate()
    x = w.real
    side = 0.0
    for delta, xi in zip(chain.dt.tolist(), chain.xi.tolist()):
        s = np.sign(x - xi)
        if s == 0 or (side and s != side):
            raise DomainError(f"real point {w.real} lies in the hull footprint")
        side = s
        x = xi + s * np.sqrt((x - xi) ** 2 + 4 * delta)
    return complex(x)


def _field(z, tips):
    f = np.zeros_like(z)
    df = np.zeros_like(z)
    for x, a in tips:
        u = z - x
        f = f + 2 * a / u
        df = df - 2 * a / (u * u)
    return f, df


def multiple_step(states, tips, dt: float, swallow_tol: float = SWALLOW_TOL):
    """One RK4 step of dG/dt = sum_i 2 a_i / (G - x_i) with the tips held fixed.

    Derivatives follow d(G')/dt = -sum_i 2 a_i / (G - x_i)^2 G'.  Returns the
    new list of states and the (unchanged) tips.
    """
    if not dt > 0:
        raise DomainError("dt must be positive")
    tips = [(float(x), float(a)) for x, a in tips]
    for i, (x, a) in enumerate(tips):
        if a < 0:
            raise DomainError(f"growth rate a_{i} must be >= 0")
        for j in range(i):
            if abs(x - tips[j][0]) <= 1e-12 * max(1.0, abs(x)):
                raise TipCollision((j, i))
    live = [k for k, s in enumerate(states) if not s.swallowed]
    out = list(states)
    if not live:
        return out, tips
    z = np.array([states[k].z for k in live], dtype=complex)
    g = np.array([states[k].dg for k in live], dtype=complex)

    def rhs(z, g):
        f, df = _field(z, tips)
        return f, df * g

    k1 = rhs(z, g)
    k2 = rhs(z + dt / 2 * k1[0], g + dt / 2 * k1[1])
    k3 = rhs(z + dt / 2 * k2[0], g + dt / 2 * k2[1])
    k4 = rhs(z + dt * k3[0], g + dt * k3[1])
    z = z + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    g = g + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    for k, zk, gk in zip(live, z.tolist(), g.tolist()):
        t = states[k].t + dt
        if zk.imag < swallow_tol:
            out[k] = PointState(zk, gk, True, t, t)
        else:
            out[k] = PointState(zk, gk, False, None, t)
    return out, tips


def write_trace_csv(trace: Trace, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "re", "im"])
        for t, p in zip(trace.times.tolist(), trace.points.tolist()):
            w.writerow([repr(t), repr(p.real), repr(p.imag)])


def write_chain_csv(chain: MapChain, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dt", "xi"])
        for d, x in chain.steps:
            w.writerow([repr(d), repr(x)])


def read_chain_csv(path) -> MapChain:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return MapChain.from_steps((float(r["dt"]), float(r["xi"])) for r in rows)
