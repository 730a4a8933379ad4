from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slelab.kac import DomainError
from slelab.loewner import TipCollision
from slelab.multi import (
    CollisionEvent,
    DegenerateDerivativeError,
    MultiState,
    PairwisePower,
    UserTable,
    check_kappa_relation,
    collapse_scaling,
    drift,
    loop_soup_weight,
    martingale_drift_test,
    martingale_weight,
    sample_two_curves,
    schwarzian_fd,
    step_sde,
    write_martingale_csv,
)


def test_kappa_relation():
    assert check_kappa_relation([6, 6, 6])
    assert check_kappa_relation([6, 8 / 3])
    assert check_kappa_relation([Fraction(8, 3), 6, 6])
    assert not check_kappa_relation([6, 3])


def test_state_validation():
    with pytest.raises(DomainError):
        MultiState.start((1.0, 0.0), 2)
    with pytest.raises(DomainError):
        MultiState((0.0, 1.0), (6, 3), (1, 1))
    with pytest.raises(DomainError):
        MultiState.start((0.0, 1.0), 2, a=0.0)


def test_drift_two_tips():
    kappa, alpha = 4.0, Fraction(1, 2)
    s = MultiState.start((0.3, 2.3), kappa, a=0.7)
    expected = -(kappa * float(alpha) + 2) * 0.7 / 2.0
    assert drift(s, PairwisePower(alpha), 0) == pytest.approx(expected, rel=1e-14)
    assert drift(s, PairwisePower(alpha), 1) == pytest.approx(-expected, rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=3, max_size=3, unique=True),
    st.floats(-3, 3),
    st.floats(0.2, 5),
)
def test_drift_translation_and_scaling(xs, shift, lam):
    xs = sorted(xs)
    if min(np.diff(xs)) < 1e-2:
        return
    Z = PairwisePower(Fraction(2, 3))
    base = MultiState.start(xs, 3)
    moved = MultiState.start([v + shift for v in xs], 3)
    scaled = MultiState.start([lam * v for v in xs], 3)
    for i in range(3):
        d = drift(base, Z, i)
        assert drift(moved, Z, i) == pytest.approx(d, rel=1e-9, abs=1e-9)
        assert drift(scaled, Z, i) == pytest.approx(d / lam, rel=1e-9, abs=1e-9)


def test_user_table_matches_pairwise():
    Z = PairwisePower(Fraction(3, 4))
    U = UserTable(lambda x: Z.log_z(x), lambda x: [Z.grad(x, i) for i in range(len(x))])
    s = MultiState.start((-1.0, 0.5, 2.0), Fraction(8, 3))
    for i in range(3):
        assert drift(s, U, i) == pytest.approx(drift(s, Z, i), rel=1e-12)
    x = np.array([-1.0, 0.5, 2.0])
    assert U.hess(x, 1) == pytest.approx(Z.hess(x, 1), rel=1e-6)


def test_repulsion():
    rng = np.random.default_rng(5)
    kappa = Fraction(8, 3)
    Z = PairwisePower(2 / kappa)
    gaps = []
    for _ in range(200):
        s = MultiState.start((-0.5, 0.5), kappa)
        for _ in range(50):
            s = step_sde(s, Z, 2e-3, rng.standard_normal(2), rng=rng)
        gaps.append(s.x[1] - s.x[0])
    assert np.mean(gaps) > 1.0


def test_collision_signal():
    s = MultiState.start((0.0, 1e-3), 2)
    with pytest.raises(CollisionEvent) as info:
        step_sde(s, PairwisePower(0), 1e-8, [1e3, -1e3], max_halvings=3)
    assert info.value.pair == (0, 1)
    assert isinstance(info.value, TipCollision)


def test_step_sde_is_deterministic_given_noise():
    s = MultiState.start((-1.0, 1.0), 2)
    Z = PairwisePower(1)
    a = step_sde(s, Z, 1e-3, [0.3, -0.2])
    b = step_sde(s, Z, 1e-3, [0.3, -0.2])
    assert a == b
    assert a.t == pytest.approx(1e-3)


def test_schwarzian_fd():
    mob = lambda z: (2 * z + 1) / (0.5 * z + 3)
    for x in (-1.0, 0.0, 2.5):
        assert abs(schwarzian_fd(mob, x, 1e-3)) < 1e-6
    assert schwarzian_fd(lambda z: z * z, 1.0, 1e-3) == pytest.approx(-1.5, abs=1e-4)
    assert schwarzian_fd(lambda z: z, 0.3, 1e-3) == 0.0
    assert schwarzian_fd([-2e-3, -1e-3, 0.0, 1e-3, 2e-3], 0.0, 1e-3) == 0.0
    with pytest.raises(DegenerateDerivativeError):
        schwarzian_fd(lambda z: 1.0, 0.0, 1e-3)


def test_loop_soup_weight():
    assert loop_soup_weight(0.5, 3.7, Fraction(8, 3)) == pytest.approx(0.5 ** 0.625, rel=1e-15)
    assert loop_soup_weight(0.5, 0.0, 2) == pytest.approx(0.5, rel=1e-15)
    # c(2) = -2, so the Schwarzian factor is exp(I / 3)
    assert loop_soup_weight(1.0, 0.3, 2) == pytest.approx(math.exp(0.1), rel=1e-14)
    with pytest.raises(DomainError):
        loop_soup_weight(0.5, 0.0, 3)
    with pytest.raises(DomainError):
        loop_soup_weight(1.5, 0.0, 2)


@pytest.mark.parametrize("kappa,m,target", [(6, 2, Fraction(1, 3)), (Fraction(8, 3), 3, Fraction(9, 4)), (2, 4, Fraction(6))])
def test_collapse_scaling(kappa, m, target):
    res = collapse_scaling(kappa, m, np.geomspace(1, 1e-4, 9))
    assert res.target == target == res.kac_target
    assert abs(res.slope - float(target)) < 1e-9


def test_collapse_trivial_and_validation():
    assert abs(collapse_scaling(6, 2, np.geomspace(1, 1e-3, 5), Z=PairwisePower(0)).slope) < 1e-12
    with pytest.raises(DomainError):
        collapse_scaling(6, 2, [1.0, 0.5, 0.2])


def test_martingale_starts_at_one_and_far_limit():
    rng = np.random.default_rng(0)
    run = sample_two_curves(8 / 3, (-1000.0, 1000.0), 0.05, 20, 50, rng)
    mp = martingale_weight(run)
    assert np.all(mp.M[:, 0] == 1.0)
    assert np.all(np.abs(mp.M - 1) < 1e-3)
    for key in ("deriv", "schwarz", "null"):
        assert np.all(np.abs(mp.components[key]) < 1e-3)


def test_martingale_kappa_bound():
    rng = np.random.default_rng(0)
    run = sample_two_curves(4, (-1.0, 1.0), 0.01, 5, 3, rng)
    with pytest.raises(DomainError):
        martingale_weight(run)


def test_martingale_drift_small():
    res = martingale_drift_test(Fraction(8, 3), (-1.0, 1.0), 0.05, 500, seed=3)
    assert res.stderr < 0.05
    assert abs(res.mean - 1) <= 3 * res.stderr
    # c = 0 here, so the Schwarzian sign cannot matter
    assert res.mean == res.mean_plus


def test_martingale_detects_missing_factor():
    rng = np.random.default_rng(4)
    run = sample_two_curves(8 / 3, (-1.0, 1.0), 0.1, 40, 1000, rng)
    mp = martingale_weight(run)
    ok = np.isfinite(mp.M[:, -1])
    ratio_only = np.exp(mp.components["ratio"][ok, -1])
    diff = ratio_only - mp.M[ok, -1]
    assert diff.mean() > 10 * diff.std() / math.sqrt(ok.sum())


def test_drift_test_guards():
    with pytest.raises(DomainError):
        martingale_drift_test(8 / 3, (-1.0, 1.0), 1.0, 100, seed=0)
    res = martingale_drift_test(8 / 3, (-1.0, 1.0), 0.0, 100, seed=0)
    assert res.mean == 1.0 and res.stderr == 0.0


def test_drift_test_worker_independent(monkeypatch):
    a = martingale_drift_test(8 / 3, (-1.0, 1.0), 0.02, 300, seed=9, N=10, workers=1)
    b = martingale_drift_test(8 / 3, (-1.0, 1.0), 0.02, 300, seed=9, N=10, workers=2)
    assert a == b


def test_martingale_csv(tmp_path):
    rng = np.random.default_rng(1)
    mp = martingale_weight(sample_two_curves(2, (-1.0, 1.0), 0.02, 4, 2, rng))
    p = tmp_path / "m.csv"
    write_martingale_csv(mp, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "t,M,logfac_deriv,logfac_schwarz,logfac_null"
    assert len(lines) == 6
