from __future__ import annotations

from fractions import Fraction as F

import pytest
from hypothesis import given, strategies as st

from slelab.kac import (
    DomainError,
    FusionBranch,
    KacLabel,
    PhaseError,
    UnsupportedFusionError,
    as_kappa,
    central_charge,
    collapse_exponent_identity,
    dual_kappa,
    exponent_identity,
    fuse,
    fusion_gap,
    hull_dimension,
    kac_table,
    kac_weight,
    trace_dimension,
)

kappas = st.fractions(min_value=F(1, 100), max_value=F(799, 100)).filter(lambda k: k > 0)


def test_rejects_floats_and_nonpositive():
    with pytest.raises(TypeError):
        as_kappa(6.0)
    with pytest.raises(DomainError):
        central_charge(0)
    with pytest.raises(DomainError):
        kac_weight(-1, (1, 2))
    assert as_kappa("8/3") == F(8, 3)


@pytest.mark.parametrize("k,c", [(6, 0), (F(8, 3), 0), (2, -2), (4, 1)])
def test_central_charge(k, c):
    assert central_charge(k) == c


def test_kac_weight_values():
    assert kac_weight(F(8, 3), (1, 2)) == F(5, 8)
    assert kac_weight(6, (1, 2)) == 0
    assert kac_weight(2, (2, 1)) == F(-1, 8)
    assert kac_weight(6, KacLabel(1, 3)) == F(1, 3)


@given(kappas)
def test_kac_weight_identity_and_duality(k):
    assert kac_weight(k, (1, 1)) == 0
    # (r,s) at kappa equals (s,r) at 16/kappa
    assert kac_weight(k, (2, 1)) == kac_weight(dual_kappa(k), (1, 2))
    assert central_charge(k) == central_charge(dual_kappa(k))


def test_dual_kappa():
    assert dual_kappa(4) == 4
    assert dual_kappa(6) == F(8, 3)
    assert dual_kappa(2) == 8


def test_dimensions():
    assert trace_dimension(8) == 2
    assert trace_dimension(6) == F(7, 4)
    assert trace_dimension(F(1, 1000)) == F(8001, 8000)
    assert trace_dimension(12) == 2
    assert hull_dimension(6) == F(4, 3)
    assert hull_dimension(2) == F(5, 4)
    assert hull_dimension(4) == F(3, 2)
    with pytest.raises(PhaseError):
        hull_dimension(8)


def test_fuse():
    assert fuse((1, 2), (1, 2)) == [KacLabel(1, 1), KacLabel(1, 3)]
    assert fuse(KacLabel(2, 1), (2, 1)) == [KacLabel(1, 1), KacLabel(3, 1)]
    with pytest.raises(UnsupportedFusionError):
        fuse((1, 3), (1, 2))
    with pytest.raises(DomainError):
        KacLabel(0, 1)


def test_fusion_gap():
    assert fusion_gap(6, FusionBranch.ONE_TWO) == F(1, 3)
    assert fusion_gap(5, FusionBranch.ONE_TWO) == F(2, 5)
    assert fusion_gap(2, FusionBranch.TWO_ONE) == F(1, 4)


@given(kappas)
def test_fusion_gap_closed_forms(k):
    assert fusion_gap(k, FusionBranch.ONE_TWO) == 2 / k
    assert fusion_gap(k, FusionBranch.TWO_ONE) == k / 8


def test_exponent_identity_examples():
    assert exponent_identity(6, FusionBranch.ONE_TWO) == (F(1, 3), F(2, 3))
    assert exponent_identity(2, FusionBranch.TWO_ONE) == (F(1, 4), F(3, 4))
    assert exponent_identity(4, FusionBranch.ONE_TWO)[0] == F(1, 2)
    assert exponent_identity(4, FusionBranch.TWO_ONE)[0] == F(1, 2)
    with pytest.raises(PhaseError):
        exponent_identity(2, FusionBranch.ONE_TWO)
    with pytest.raises(PhaseError):
        exponent_identity(6, FusionBranch.TWO_ONE)


@given(kappas, st.integers(1, 8))
def test_collapse_identity(k, m):
    lhs, rhs = collapse_exponent_identity(k, m)
    assert lhs == rhs


def test_collapse_examples():
    assert collapse_exponent_identity(6, 2) == (F(1, 3), F(1, 3))
    lhs, rhs = collapse_exponent_identity(7, 1)
    assert lhs == rhs == kac_weight(7, (1, 2))
    with pytest.raises(DomainError):
        collapse_exponent_identity(6, 0)


def test_kac_table():
    rows = kac_table(6, 3, 3)
    assert len(rows) == 9
    row = next(r for r in rows if (r["r"], r["s"]) == (1, 3))
    assert row["h"] == F(1, 3) and row["c"] == 0
