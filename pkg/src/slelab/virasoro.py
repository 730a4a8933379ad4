"""Exact Verma-module computations up to level three.

A state is a finite linear combination of words ``L_{-n1} L_{-n2} ... |h>``.
Words are stored as tuples ``(n1, n2, ...)`` of positive integers; the PBW
basis uses non-increasing tuples, i.e. partitions.  Coefficients are
:class:`~fractions.Fraction`.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np
import sympy as sp

from .kac import (
    DomainError,
    FusionBranch,
    as_kappa,
    central_charge,
    fusion_gap,
    kac_weight,
)

MAX_LEVEL = 3


class SingularParameterError(ArithmeticError):
    """A denominator of the coefficient recursion vanishes at the given parameters."""


class ResampleError(ArithmeticError):
    """Normalisation vanished at the chosen free parameters; pick different ones."""


Word = tuple[int, ...]


def _coef(v):
    """Exact coefficient: Fraction, or an expanded sympy expression when symbolic."""
    if isinstance(v, sp.Basic):
        v = sp.expand(v)
        return Fraction(int(v.p), int(v.q)) if v.is_Rational else v
    return Fraction(v)


def partitions(level: int) -> list[Word]:
    """Partitions of ``level`` with parts in non-increasing order, lexicographically descending."""
    if level == 0:
        return [()]
    out: list[Word] = []

    def rec(rem, cap, acc):
        if rem == 0:
            out.append(tuple(acc))
            return
        for p in range(min(rem, cap), 0, -1):
            rec(rem - p, p, acc + [p])

    rec(level, level, [])
    return out


@dataclass
class DescendantVector:
    """Linear combination of words acting on a highest-weight state of weight h, charge c."""

    terms: dict[Word, Fraction]
    h: Fraction
    c: Fraction

    def __post_init__(self):
        self.h = _coef(self.h)
        self.c = _coef(self.c)
        terms = {tuple(w): _coef(v) for w, v in self.terms.items()}
        self.terms = {w: v for w, v in terms.items() if v != 0}

    @classmethod
    def highest_weight(cls, h, c) -> "DescendantVector":
        return cls({(): 1}, h, c)

    @classmethod
    def word(cls, word: Sequence[int], h, c, coeff=1) -> "DescendantVector":
        return cls({tuple(word): coeff}, h, c)

    @property
    def levels(self) -> set[int]:
        return {sum(w) for w in self.terms}

    @property
    def level(self) -> int:
        lv = self.levels
        if len(lv) > 1:
            raise DomainError(f"state is not level-homogeneous: levels {sorted(lv)}")
        return lv.pop() if lv else 0

    def is_zero(self) -> bool:
        return not self.terms

    def normal_ordered(self) -> "DescendantVector":
        return DescendantVector(_normal_order(self.terms), self.h, self.c)

    def coefficient(self, word: Sequence[int]) -> Fraction:
        return self.normal_ordered().terms.get(tuple(word), Fraction(0))

    def __add__(self, other: "DescendantVector") -> "DescendantVector":
        terms = dict(self.terms)
        for w, v in other.terms.items():
            terms[w] = terms.get(w, 0) + v
        return DescendantVector(terms, self.h, self.c)

    def __rmul__(self, scalar) -> "DescendantVector":
        s = _coef(scalar)
        return DescendantVector({w: s * v for w, v in self.terms.items()}, self.h, self.c)

    def __eq__(self, other):
        if not isinstance(other, DescendantVector):
            return NotImplemented
        return (self.h, self.c) == (other.h, other.c) and (
            self.normal_ordered().terms == other.normal_ordered().terms
        )


def _add(acc: dict, word: Word, coeff: Fraction) -> None:
    if coeff == 0:
        return
    v = _coef(acc.get(word, 0) + coeff)
    if v == 0:
        acc.pop(word, None)
    else:
        acc[word] = v


def _normal_order(terms: Mapping[Word, Fraction]) -> dict[Word, Fraction]:
    # [L_{-a}, L_{-b}] = (b - a) L_{-a-b}; no central term among lowering modes
    out: dict[Word, Fraction] = {}
    stack = [(w, v) for w, v in terms.items() if v != 0]
    while stack:
        w, v = stack.pop()
        for i in range(len(w) - 1):
            a, b = w[i], w[i + 1]
            if a < b:
                stack.append((w[:i] + (b, a) + w[i + 2:], v))
                stack.append((w[:i] + (a + b,) + w[i + 2:], v * (b - a)))
                break
        else:
            _add(out, w, v)
    return out


def _apply_mode(k: int, word: Word, h: Fraction, c: Fraction) -> dict[Word, Fraction]:
    """L_k acting on ``word |h>`` for any integer k, as a dict of (unordered) words."""
    if k < 0:
        return {(-k,) + word: 1}
    if not word:
        return {(): h} if k == 0 else {}
    if k == 0:
        return {word: h + sum(word)}
    n, rest = word[0], word[1:]
    out: dict[Word, Fraction] = {}
    # L_k L_{-n} = L_{-n} L_k + (k + n) L_{k-n} + (c/12) k (k^2 - 1) delta_{k,n}
    for w, v in _apply_mode(k, rest, h, c).items():
        _add(out, (n,) + w, v)
    if k + n:
        for w, v in _apply_mode(k - n, rest, h, c).items():
            _add(out, w, (k + n) * v)
    if k == n:
        _add(out, rest, c * k * (k * k - 1) / 12)
    return out


def act_raise(k: int, state: DescendantVector) -> DescendantVector:
    """Apply the raising mode ``L_k`` (1 <= k <= 3) and return the PBW-ordered result."""
    if not 1 <= k <= MAX_LEVEL:
        raise DomainError(f"raising mode k must be in 1..{MAX_LEVEL}, got {k}")
    if state.is_zero():
        return state
    top = max(state.levels)
    if top > MAX_LEVEL:
        raise DomainError(f"levels above {MAX_LEVEL} are not supported")
    if k > top:
        raise DomainError(f"L_{k} on a state of level {top}")
    acc: dict[Word, Fraction] = {}
    for w, v in state.terms.items():
        for w2, v2 in _apply_mode(k, w, state.h, state.c).items():
            _add(acc, w2, v * v2)
    return DescendantVector(_normal_order(acc), state.h, state.c)


# -- exact linear algebra -------------------------------------------------

def _nullspace(rows: list[list[Fraction]], ncols: int) -> list[list[Fraction]]:
    """Basis of the right null space via reduced row echelon form."""
    m = [list(map(Fraction, r)) for r in rows]
    pivots: list[int] = []
    r = 0
    for col in range(ncols):
        piv = next((i for i in range(r, len(m)) if m[i][col] != 0), None)
        if piv is None:
            continue
        m[r], m[piv] = m[piv], m[r]
        inv = 1 / m[r][col]
        m[r] = [x * inv for x in m[r]]
        for i in range(len(m)):
            if i != r and m[i][col] != 0:
                f = m[i][col]
                m[i] = [a - f * b for a, b in zip(m[i], m[r])]
        pivots.append(col)
        r += 1
        if r == len(m):
            break
    free = [j for j in range(ncols) if j not in pivots]
    basis = []
    for fj in free:
        vec = [Fraction(0)] * ncols
        vec[fj] = Fraction(1)
        for i, pc in enumerate(pivots):
            vec[pc] = -m[i][fj]
        basis.append(vec)
    return basis


def _solve(rows: list[list[Fraction]], rhs: list[Fraction]) -> list[Fraction] | None:
    """Unique solution of an (over)determined exact system, or None if inconsistent."""
    n = len(rows[0])
    aug = [list(r) + [b] for r, b in zip(rows, rhs)]
    sols = _nullspace(aug, n + 1)
    # particular solution has last component -1 after scaling
    part = next((v for v in sols if v[n] != 0), None)
    if part is None:
        return None
    homog = [v for v in sols if v[n] == 0]
    if homog or len(sols) > 1:
        raise SingularParameterError("linear system is underdetermined at these parameters")
    s = -1 / part[n]
    return [x * s for x in part[:n]]


def _constraint_rows(words: Sequence[Word], h, c, level: int):
    """Matrix of (L_1, L_2) acting on each word, in PBW coordinates of the target levels."""
    rows: list[list[Fraction]] = []
    for k in (1, 2):
        if k > level:
            continue
        targets = partitions(level - k)
        images = [act_raise(k, DescendantVector.word(w, h, c)) for w in words]
        for t in targets:
            rows.append([img.terms.get(t, Fraction(0)) for img in images])
    return rows


def singular_vector(level: int, h, c) -> DescendantVector | None:
    """Solve L_1 chi = L_2 chi = 0 over the PBW basis at ``level``.

    Returns the solution normalised to unit ``L_{-1}^level`` coefficient, or
    ``None`` if only the zero vector is annihilated.
    """
    if level not in (2, 3):
        raise DomainError(f"singular vectors are computed at level 2 or 3, got {level}")
    h, c = Fraction(h), Fraction(c)
    basis = partitions(level)
    kernel = _nullspace(_constraint_rows(basis, h, c, level), len(basis))
    if not kernel:
        return None
    if len(kernel) > 1:
        raise SingularParameterError(f"{len(kernel)}-dimensional singular space at level {level}")
    vec = kernel[0]
    lead = vec[basis.index((1,) * level)]
    if lead == 0:
        raise SingularParameterError("singular vector has no L_{-1}^level component")
    return DescendantVector({w: v / lead for w, v in zip(basis, vec)}, h, c)


# -- OPE coefficients of the fused channel ----------------------------------

# word basis used in the coefficient recursion; the level-3 set is overcomplete
OPE_WORDS: dict[int, list[Word]] = {
    1: [(1,)],
    2: [(1, 1), (2,)],
    3: [(1, 1, 1), (1, 2), (2, 1), (3,)],
}


@dataclass
class OpeTable:
    h0: Fraction
    h: Fraction
    c: Fraction
    levels: dict[int, dict[Word, Fraction]] = field(default_factory=dict)

    def phi(self, j: int) -> DescendantVector:
        """The level-j OPE descendant sum_Y beta_Y L_{-Y} |h>."""
        if j == 0:
            return DescendantVector.highest_weight(self.h, self.c)
        return DescendantVector(dict(self.levels[j]), self.h, self.c)

    def __getitem__(self, word) -> Fraction:
        word = tuple(word)
        return self.levels[sum(word)][word]


def appendix_substitutions(h) -> dict:
    """t, c and h0 in terms of the fused weight h (the (2,1) x (2,1) -> (3,1) channel)."""
    if not isinstance(h, sp.Basic):
        h = Fraction(h)
        if h + 1 == 0:
            raise SingularParameterError("h + 1 = 0: central charge substitution is singular")
    return {
        "t": (h + 1) / 2,
        "c": -(3 * h - 1) * (h - 2) / (h + 1),
        "h0": (3 * h - 1) / 8,
    }


def _covariance_factor(h0, h, j, k):
    mu = 2 * h0 - h
    return h0 * (k + 1) + j - k - mu


def _covariance_system(j, table: OpeTable):
    """Rows (over OPE_WORDS[j]) and right-hand sides of L_k phi^(j) = f_jk phi^(j-k), k = 1..j."""
    words = OPE_WORDS[j]
    h, c = table.h, table.c
    rows, rhs = [], []
    for k in range(1, j + 1):
        images = [act_raise(k, DescendantVector.word(w, h, c)) for w in words]
        target = _covariance_factor(table.h0, h, j, k) * table.phi(j - k).normal_ordered()
        for t in partitions(j - k):
            rows.append([img.terms.get(t, 0) for img in images])
            rhs.append(target.terms.get(t, 0))
    return rows, rhs


_H, _B111, _B3 = sp.symbols("h b111 b3")


@functools.lru_cache(maxsize=None)
def _fused_family_solution() -> dict[Word, sp.Expr]:
    """beta_Y as rational functions of (h, b111, b3) on the fused family."""
    sub = appendix_substitutions(_H)
    table = OpeTable(_coef(sub["h0"]), _H, sub["c"])
    table.levels[1] = {(1,): sp.Rational(1, 2)}
    out: dict[Word, sp.Expr] = {(1,): sp.Rational(1, 2)}
    for j in (2, 3):
        words = OPE_WORDS[j]
        unknowns = {w: sp.Symbol("beta_" + "".join(map(str, w))) for w in words}
        if j == 3:
            unknowns[(1, 1, 1)] = _B111
            unknowns[(3,)] = _B3
        rows, rhs = _covariance_system(j, table)
        eqs = [sp.together(sum(r * unknowns[w] for r, w in zip(row, words)) - b) for row, b in zip(rows, rhs)]
        eqs = [sp.numer(e) for e in eqs]
        solve_for = [unknowns[w] for w in words if unknowns[w] not in (_B111, _B3)]
        sol = sp.solve(eqs, solve_for, dict=True)
        if len(sol) != 1:
            raise SingularParameterError(f"fused-family level-{j} system has {len(sol)} solutions")
        level = {w: sp.factor(sol[0].get(unknowns[w], unknowns[w])) for w in words}
        table.levels[j] = level
        out.update(level)
    return out


def _evaluate(expr: sp.Expr, h: Fraction, b111: Fraction, b3: Fraction) -> Fraction:
    num, den = sp.fraction(sp.factor(expr))
    subs = {_H: sp.Rational(h.numerator, h.denominator),
            _B111: sp.Rational(b111.numerator, b111.denominator),
            _B3: sp.Rational(b3.numerator, b3.denominator)}
    d = den.subs(subs)
    if d == 0:
        _, factors = sp.factor_list(den)
        bad = [f for f, _ in factors if f.subs(subs) == 0]
        raise SingularParameterError(f"{bad[0]} = 0 at h = {h}")
    return _coef(num.subs(subs) / d)


def _on_fused_family(h0: Fraction, h: Fraction, c) -> bool:
    if h + 1 == 0:
        return False
    sub = appendix_substitutions(h)
    return h0 == sub["h0"] and (c is None or Fraction(c) == sub["c"])


def ope_coefficients(h0, h, b111=0, b3=0, c=None) -> OpeTable:
    """OPE descendant coefficients from the global covariance constraints.

    Level j solves ``L_k phi^(j) = [h0 (k+1) + j - k - mu] phi^(j-k)`` for
    k = 1..j with ``mu = 2 h0 - h``.  Levels 1 and 2 are unique.  At level
    3 the four words are overcomplete and the fused weight is degenerate,
    so beta_111 and beta_3 are fixed by the caller and beta_12, beta_21
    solved.  ``c`` defaults to the degenerate central charge for weight h.

    On the (2,1) x (2,1) family (h0 = (3h-1)/8) the system is solved once
    as rational functions of h and then evaluated, so removable
    singularities such as the level-2 degeneracy at h = 1/2 are harmless.
    """
    h0, h = Fraction(h0), Fraction(h)
    b111, b3 = Fraction(b111), Fraction(b3)
    if c is None:
        c = appendix_substitutions(h)["c"]
    if _on_fused_family(h0, h, c):
        table = OpeTable(h0, h, Fraction(c))
        for w, expr in _fused_family_solution().items():
            table.levels.setdefault(sum(w), {})[w] = _evaluate(expr, h, b111, b3)
        return table
    return _ope_exact(h0, h, b111, b3, Fraction(c))


def _ope_exact(h0, h, b111, b3, c) -> OpeTable:
    """Pointwise exact solve; raises where any level's system degenerates."""
    table = OpeTable(h0, h, c)
    # level 1: 2h beta_1 = h; the common factor h cancels identically
    lhs = act_raise(1, DescendantVector.word((1,), h, c)).terms.get((), Fraction(0))
    rhs = _covariance_factor(h0, h, 1, 1)
    if lhs != 0:
        beta1 = rhs / lhs
    elif rhs == 0:
        beta1 = Fraction(1, 2)
    else:
        raise SingularParameterError("h = 0 with nonzero covariance factor: level-1 equation inconsistent")
    table.levels[1] = {(1,): beta1}

    rows, rhs_vec = _covariance_system(2, table)
    det = rows[0][0] * rows[1][1] - rows[0][1] * rows[1][0]
    if det == 0:
        raise SingularParameterError(f"level-2 Gram determinant vanishes at h={h}, c={c}")
    table.levels[2] = dict(zip(OPE_WORDS[2], _solve(rows, rhs_vec)))

    words = OPE_WORDS[3]
    rows, rhs_vec = _covariance_system(3, table)
    fixed = {(1, 1, 1): b111, (3,): b3}
    free_idx = [i for i, w in enumerate(words) if w not in fixed]
    rhs_vec = [
        b - sum(row[i] * fixed[words[i]] for i in range(len(words)) if words[i] in fixed)
        for row, b in zip(rows, rhs_vec)
    ]
    rows = [[row[i] for i in free_idx] for row in rows]
    try:
        sol = _solve(rows, rhs_vec)
    except SingularParameterError as exc:
        raise SingularParameterError(f"level 3: {exc}") from None
    if sol is None:
        raise SingularParameterError(
            "level-3 covariance system is inconsistent: h0 does not fuse into weight h"
        )
    level = dict(fixed)
    level.update({words[i]: v for i, v in zip(free_idx, sol)})
    table.levels[3] = {w: level[w] for w in words}
    return table


@dataclass(frozen=True)
class FusedCoefficients:
    V1: Fraction
    V2: Fraction
    V3: Fraction
    K1: Fraction
    K12: Fraction
    K21: Fraction
    K3: Fraction

    @property
    def I2(self) -> Fraction:
        return (self.K12 + self.K21) / self.K1

    @property
    def I3(self) -> Fraction:
        return (self.K12 + self.K3) / self.K1


def fused_coefficients(h, b111, b3) -> FusedCoefficients:
    """Coefficients K of the level-three operator left by the j = 1 term of the fused equation."""
    h = Fraction(h)
    sub = appendix_substitutions(h)
    t, c, h0 = sub["t"], sub["c"], sub["h0"]
    table = ope_coefficients(h0, h, b111, b3, c=c)
    V1 = (3 - 2 * h0 + h) * (2 - 2 * h0 + h) - t * (3 * h0 - 3 - h)
    V2 = -2 * (2 - 2 * h0 + h)
    V3 = -t
    b = table
    return FusedCoefficients(
        V1=V1,
        V2=V2,
        V3=V3,
        K1=V1 * b[(1, 1, 1)] + V2 * b[(1, 1)] + b[(1,)],
        K12=V1 * b[(1, 2)] + V2 * b[(2,)],
        K21=V1 * b[(2, 1)] + V3 * b[(1,)],
        K3=V1 * b[(3,)],
    )


def fused_ratios(h, b111, b3) -> tuple[Fraction, Fraction]:
    """(I2, I3) = ((K12 + K21)/K1, (K12 + K3)/K1); expected -2(h+1) and h(h+1)."""
    k = fused_coefficients(h, b111, b3)
    if k.K1 == 0:
        raise ResampleError(f"K1 vanishes at h={h}, b111={b111}, b3={b3}")
    return k.I2, k.I3


def fused_null_vector(h, b111, b3) -> DescendantVector:
    """The fused level-3 operator, PBW-ordered and normalised to unit L_{-1}^3."""
    k = fused_coefficients(h, b111, b3)
    if k.K1 == 0:
        raise ResampleError(f"K1 vanishes at h={h}, b111={b111}, b3={b3}")
    h = Fraction(h)
    c = appendix_substitutions(h)["c"]
    vec = DescendantVector(
        {(1, 1, 1): k.K1, (1, 2): k.K12, (2, 1): k.K21, (3,): k.K3}, h, c
    ).normal_ordered()
    return (1 / k.K1) * vec


# -- differential operators on power-law correlators -------------------------

def operator_speed(kappa, branch: FusionBranch = FusionBranch.ONE_TWO) -> Fraction:
    """Speed multiplying d^2/2 in the level-two operator for the branch's input field.

    A (2,1) field at speed kappa obeys the (1,2) equation of the dual speed 16/kappa.
    """
    k = as_kappa(kappa)
    return k if branch is FusionBranch.ONE_TWO else 16 / k


def apply_D2_twopoint(kappa, h, p) -> Fraction:
    """Coefficient of (x2 - x1)^(p-2) in D_{-2}(x1) (x2 - x1)^p, spectator weight h at x2."""
    k = as_kappa(kappa)
    h, p = Fraction(h), Fraction(p)
    return k / 2 * p * (p - 1) + 2 * p - 2 * h


def _d2_ratio(speed, weights, exps_pairs, points) -> Fraction:
    """(D_{-2} F)/F at points[0] for F = prod_{i<j} (x_i - x_j)^{e_ij}; exact rational."""
    n = len(points)
    x = [Fraction(p) for p in points]

    def dlog(i):
        s = Fraction(0)
        for (a, b), e in exps_pairs.items():
            if a == i:
                s += e / (x[a] - x[b])
            elif b == i:
                s -= e / (x[a] - x[b])
        return s

    def d2log_00():
        s = Fraction(0)
        for (a, b), e in exps_pairs.items():
            if 0 in (a, b):
                s -= e / (x[a] - x[b]) ** 2
        return s

    g0 = dlog(0)
    out = speed / 2 * (g0 * g0 + d2log_00())
    for l in range(1, n):
        d = x[l] - x[0]
        out -= 2 * (weights[l] / d ** 2 - dlog(l) / d)
    return out


def threepoint_D2_check(kappa, branch: FusionBranch, channel_h, sample) -> Fraction:
    """(D_{-2} F)/F for the three-point power law of two branch fields and a channel field.

    F = (x0-x1)^(h-2h0) (x0-x)^(-h) (x1-x)^(-h) with h0 the branch input
    weight; the operator acts at x0.  Returns 0 exactly on the identity and
    fused channels.
    """
    x0, x1, x = (Fraction(v) for v in sample)
    if len({x0, x1, x}) < 3:
        raise DomainError(f"sample points must be pairwise distinct, got {sample}")
    h0 = kac_weight(kappa, branch.input_label)
    h = Fraction(channel_h)
    exps = {(0, 1): h - 2 * h0, (0, 2): -h, (1, 2): -h}
    return _d2_ratio(operator_speed(kappa, branch), [h0, h0, h], exps, [x0, x1, x])


@dataclass(frozen=True)
class TransmutationFit:
    slope: float
    gap: Fraction
    offset: float  # slope - gap; -1 from one transmuted power of eps over two of d^2


def fit_loglog(x, y) -> tuple[float, float]:
    """Ordinary least-squares slope and intercept of log|y| against log x."""
    lx = np.log(np.asarray(x, dtype=float))
    ly = np.log(np.abs(np.asarray(y, dtype=float)))
    slope, intercept = np.polyfit(lx, ly, 1)
    return float(slope), float(intercept)


def transmutation_leading_power(
    kappa, branch: FusionBranch, epsilons: Sequence, x1=0, x=3, probe=None
) -> TransmutationFit:
    """Fit the eps-scaling of D_{-2} applied to the leading fused OPE term.

    The leading term is eps^nu G(x1) with x0 = x1 + eps and probe
    correlator G = (x1 - x)^probe, by default the two-point power
    -2h' of the fused field.  Its eps^(nu-2) coefficient is the two-point
    indicial polynomial at p = nu, which vanishes; what survives is
    -2 eps^(nu-1) dG/dx1, so the slope is nu - 1 whenever G depends on x1.
    When h' = 0 the default probe would be constant and the probe falls
    back to -1; the eps-power does not depend on the choice.
    """
    eps = [Fraction(e) for e in epsilons]
    if len(eps) < 4:
        raise DomainError("need at least 4 epsilon values")
    if any(a <= b for a, b in zip(eps, eps[1:])) or eps[-1] <= 0:
        raise DomainError("epsilons must be positive and strictly decreasing")
    if math.log10(eps[0] / eps[-1]) < 2:
        raise DomainError("epsilons must span at least two decades")
    h0 = kac_weight(kappa, branch.input_label)
    hf = kac_weight(kappa, branch.output_label)
    nu = fusion_gap(kappa, branch)
    speed = operator_speed(kappa, branch)
    if probe is None:
        probe = -2 * hf if hf != 0 else Fraction(-1)
    probe = Fraction(probe)
    if probe == 0:
        raise DomainError("probe exponent must be nonzero")
    x1, x = Fraction(x1), Fraction(x)
    exps = {(0, 1): nu, (1, 2): probe}
    vals = []
    for e in eps:
        ratio = _d2_ratio(speed, [h0, h0, -probe / 2], exps, [x1 + e, x1, x])
        # |D F_lead| / |G| = |ratio| * eps^nu
        vals.append(abs(float(ratio)) * float(e) ** float(nu))
    slope, _ = fit_loglog([float(e) for e in eps], vals)
    return TransmutationFit(slope=slope, gap=nu, offset=slope - float(nu))
