"""Exact Kac-table arithmetic for the SLE speed parameter kappa.

Everything here works over :class:`fractions.Fraction`; floats are rejected
so that identities can be asserted with ``==``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction
from numbers import Rational


class DomainError(ValueError):
    """Argument outside the domain of a formula."""


class PhaseError(ValueError):
    """kappa lies in the wrong SLE phase for the requested quantity."""


class UnsupportedFusionError(ValueError):
    pass


def as_kappa(kappa) -> Fraction:
    """Coerce to an exact positive rational; floats are refused."""
    if isinstance(kappa, bool) or not isinstance(kappa, (Rational, str)):
        raise TypeError(f"kappa must be an exact rational, got {kappa!r}")
    k = Fraction(kappa)
    if k <= 0:
        raise DomainError(f"kappa must be positive, got {k}")
    return k


@dataclass(frozen=True, order=True)
class KacLabel:
    r: int
    s: int

    def __post_init__(self):
        if self.r < 1 or self.s < 1:
            raise DomainError(f"Kac labels must be >= 1, got ({self.r},{self.s})")


class FusionBranch(enum.Enum):
    """Self-fusion of a level-two degenerate field, minus the identity channel."""

    ONE_TWO = (1, 2)
    TWO_ONE = (2, 1)

    @property
    def input_label(self) -> KacLabel:
        return KacLabel(*self.value)

    @property
    def output_label(self) -> KacLabel:
        r, s = self.value
        return KacLabel(2 * r - 1, 2 * s - 1)


def central_charge(kappa) -> Fraction:
    k = as_kappa(kappa)
    return (3 * k - 8) * (6 - k) / (2 * k)


def kac_weight(kappa, label: KacLabel | tuple[int, int]) -> Fraction:
    k = as_kappa(kappa)
    if not isinstance(label, KacLabel):
        label = KacLabel(*label)
    return ((label.r * k - 4 * label.s) ** 2 - (k - 4) ** 2) / (16 * k)


def dual_kappa(kappa) -> Fraction:
    return 16 / as_kappa(kappa)


def trace_dimension(kappa) -> Fraction:
    return min(1 + as_kappa(kappa) / 8, Fraction(2))


def hull_dimension(kappa) -> Fraction:
    """Dimension of the hull boundary: the trace for kappa <= 4, the dual trace above."""
    k = as_kappa(kappa)
    if k >= 8:
        raise PhaseError(f"hull dimension is only defined for 0 < kappa < 8, got {k}")
    if k <= 4:
        return trace_dimension(k)
    return 1 + 2 / k


def fuse(a: KacLabel | tuple, b: KacLabel | tuple) -> list[KacLabel]:
    a = a if isinstance(a, KacLabel) else KacLabel(*a)
    b = b if isinstance(b, KacLabel) else KacLabel(*b)
    if a != b or (a.r, a.s) not in ((1, 2), (2, 1)):
        raise UnsupportedFusionError(f"fusion {a} x {b} is not supported")
    return [KacLabel(1, 1), FusionBranch((a.r, a.s)).output_label]


def fusion_gap(kappa, branch: FusionBranch) -> Fraction:
    """nu = h(r',s') - 2 h(r,s), the leading short-distance exponent of the fused channel.

    Positive by convention: 2/kappa for (1,2) and kappa/8 for (2,1).
    """
    return kac_weight(kappa, branch.output_label) - 2 * kac_weight(kappa, branch.input_label)


def exponent_identity(kappa, branch: FusionBranch) -> tuple[Fraction, Fraction]:
    """Return ``(nu, 2 - d)`` where d is the dimension matched to the branch's phase.

    (1,2) self-fusion pairs with the hull of 4 < kappa < 8, (2,1) with the
    simple trace of 0 < kappa < 4; kappa = 4 is accepted by both.
    """
    k = as_kappa(kappa)
    if branch is FusionBranch.ONE_TWO:
        if not 4 <= k < 8:
            raise PhaseError(f"(1,2) fusion pairs with 4 <= kappa < 8, got {k}")
        d = hull_dimension(k)
    else:
        if not 0 < k <= 4:
            raise PhaseError(f"(2,1) fusion pairs with 0 < kappa <= 4, got {k}")
        d = trace_dimension(k)
    return fusion_gap(k, branch), 2 - d


def collapse_exponent_identity(kappa, m: int) -> tuple[Fraction, Fraction]:
    """Both sides of h(1,m+1) = m h(1,2) + m(m-1)/kappa.

    The right side sums the pairwise gap 2/kappa over all m(m-1)/2 pairs.
    """
    k = as_kappa(kappa)
    if m < 1:
        raise DomainError(f"m must be positive, got {m}")
    lhs = kac_weight(k, (1, m + 1))
    rhs = m * kac_weight(k, (1, 2)) + Fraction(m * (m - 1), 2) * (2 / k)
    return lhs, rhs


def kac_table(kappa, rmax: int, smax: int) -> list[dict]:
    k = as_kappa(kappa)
    c = central_charge(k)
    return [
        {"r": r, "s": s, "kappa": k, "h": kac_weight(k, (r, s)), "c": c}
        for r in range(1, rmax + 1)
        for s in range(1, smax + 1)
    ]
