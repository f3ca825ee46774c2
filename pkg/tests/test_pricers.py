import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from artifact.errors import DomainError, ParameterError
from artifact.pricers import (BarrierSpec, Payoff, PdeGrid, bachelier_knockout, bachelier_knockout_greeks,
                              bessel_survival, bs_barrier_call, bs_barrier_delta, bs_call, knockout_inner_slope,
                              pde_barrier_solve)

PAYOFFS = [Payoff.call(1.2), Payoff.put(0.8), Payoff.digital(1.1), Payoff.digital(),
           Payoff.custom([0.5, 1.0, 1.5], [0.0, 1.0, 0.2])]


def test_payoff_validation():
    with pytest.raises(ParameterError):
        Payoff("swap")
    with pytest.raises(ParameterError):
        Payoff("call")
    with pytest.raises(ParameterError):
        Payoff.custom([1, 0.5], [1, 1])
    with pytest.raises(ParameterError):
        Payoff.custom([0, 1], [1, -1])


def test_payoff_values():
    np.testing.assert_allclose(Payoff.call(1)(np.array([0.5, 2])), [0, 1])
    np.testing.assert_allclose(Payoff.digital(1)(np.array([0.5, 2])), [0, 1])
    np.testing.assert_allclose(Payoff.digital()(np.array([0.5, 2])), [1, 1])
    assert Payoff.call(1).scaled(0).is_zero


@pytest.mark.parametrize("g", PAYOFFS, ids=lambda g: g.kind)
@pytest.mark.parametrize("side,level,x", [("lower", 0.7, 1.0), ("upper", 1.6, 1.0), ("lower", 0.0, 0.3)])
def test_knockout_matches_quadrature(g, side, level, x):
    val = bachelier_knockout(g, 0.8, x, BarrierSpec(level, side))
    ref = oracles.bm_knockout_quad(g, 0.8, x, level, side)
    assert val == pytest.approx(ref, abs=1e-8)


def test_knockout_edge_cases():
    g = Payoff.call(1.0)
    assert bachelier_knockout(g, 1.0, 0.7, BarrierSpec(0.7, "lower")) == 0.0
    assert bachelier_knockout(g, 0.0, 1.5, BarrierSpec(0.7, "lower")) == 0.5
    with pytest.raises(DomainError):
        bachelier_knockout(g, 1.0, 0.5, BarrierSpec(0.7, "lower"))
    free = bachelier_knockout(Payoff.digital(), 1.0, 0.3)
    assert free == pytest.approx(1.0)


def test_knockout_greeks_by_finite_differences():
    g, tau, j = Payoff.call(1.1), 0.6, 0.5
    bar = BarrierSpec(j, "lower")
    px, pxx, pj = bachelier_knockout_greeks(g, tau, 1.0, bar)
    h = 1e-4
    f = lambda x, jj=j: bachelier_knockout(g, tau, x, BarrierSpec(jj, "lower"))
    assert px == pytest.approx((f(1 + h) - f(1 - h)) / (2 * h), rel=1e-6)
    assert pxx == pytest.approx((f(1 + h) - 2 * f(1) + f(1 - h)) / h ** 2, rel=1e-4)
    assert pj == pytest.approx((f(1.0, j + h) - f(1.0, j - h)) / (2 * h), rel=1e-6)
    # on the barrier: half the inside slope
    inside = knockout_inner_slope(g, tau, j, "lower")
    assert bachelier_knockout_greeks(g, tau, j, bar)[0] == pytest.approx(0.5 * inside)


@pytest.mark.parametrize("s,b,k", [(100, 80, 100), (100, 80, 70), (90, 85, 95), (100, 0, 100)])
def test_bs_barrier_against_quadrature(s, b, k):
    val = bs_barrier_call(1.0, s, b, k, 0.2)
    ref = oracles.black_scholes_call(1.0, s, k, 0.2) if b == 0 else oracles.down_and_out_call_quad(1.0, s, b, k, 0.2)
    assert val == pytest.approx(ref, rel=1e-7, abs=1e-9)


def test_bs_barrier_structure():
    assert bs_barrier_call(1.0, 80, 80, 100, 0.2) == 0.0
    assert bs_barrier_call(1.0, 100, 80, 100, 0.2) < bs_call(1.0, 100, 100, 0.2)
    d = bs_barrier_delta(1.0, 100.0, 80, 100, 0.2)
    h = 1e-4
    fd = (bs_barrier_call(1.0, 100 + h, 80, 100, 0.2) - bs_barrier_call(1.0, 100 - h, 80, 100, 0.2)) / (2 * h)
    assert d == pytest.approx(fd, rel=1e-6)
    with pytest.raises(DomainError):
        bs_barrier_call(1.0, 70, 80, 100, 0.2)


def test_pde_matches_closed_form():
    surf = pde_barrier_solve(PdeGrid(80.0, 400.0, 800, 800), 80.0, 100.0, 0.2, 1.0)
    assert np.all(surf.values[:, 0] == 0)
    for s in (85.0, 100.0, 130.0):
        assert abs(surf.at(s) - bs_barrier_call(1.0, s, 80, 100, 0.2)) < 1e-2


def test_pde_grid_validation():
    with pytest.raises(ParameterError):
        pde_barrier_solve(PdeGrid(70.0, 400.0, 100, 100), 80.0, 100.0, 0.2, 1.0)


def test_bessel_survival():
    assert bessel_survival(1.0, 1.0) == pytest.approx(oracles.bessel_survival(1.0, 1.0))
    with pytest.raises(DomainError):
        bessel_survival(0.0, 1.0)


@given(st.floats(0.05, 3.0), st.floats(0.0, 2.0), st.floats(0.01, 2.0), st.floats(0.01, 2.0))
def test_knockout_bounded_by_free_price(tau, level, gap, strike):
    g = Payoff.call(strike)
    x = level + gap
    ko = bachelier_knockout(g, tau, x, BarrierSpec(level, "lower"))
    free = bachelier_knockout(g, tau, x)
    assert -1e-12 <= ko <= free + 1e-12


@given(st.floats(0.05, 2.0), st.floats(50, 99), st.floats(60, 140), st.floats(0.05, 0.6))
def test_barrier_call_bounded_and_monotone_in_barrier(tau, b, k, sigma):
    s = 100.0
    hi = bs_barrier_call(tau, s, b, k, sigma)
    lo = bs_barrier_call(tau, s, min(b + 0.5, 99.9), k, sigma)
    assert 0 <= lo <= hi + 1e-9 <= bs_call(tau, s, k, sigma) + 2e-9
