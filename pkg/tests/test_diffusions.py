import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

import oracles
from artifact.diffusions import GenericDiffusion, PowerLawDiffusion, scale, scale_limit
from artifact.errors import ParameterError


def test_power_law_validation():
    with pytest.raises(ParameterError):
        PowerLawDiffusion(1.0, 1.0, 0.0, 1.0)
    with pytest.raises(ParameterError):
        PowerLawDiffusion(math.inf, 1.0, 1.0, 1.0)


@pytest.mark.parametrize("delta", [0.5, 1.0, 1.5, 3.0])
def test_squared_bessel_scale_closed_form(delta):
    d = PowerLawDiffusion.squared_bessel(delta)
    y = np.array([0.1, 0.5, 2.0, 7.0])
    np.testing.assert_allclose(scale(d, y, 1.0), oracles.besq_scale(y, delta), rtol=1e-10)
    np.testing.assert_allclose(scale(d, y, 1.0, closed=False), oracles.besq_scale(y, delta), rtol=1e-8)
    assert d.scale_at_zero_finite() == (delta < 2)
    assert d.scale_at_inf_finite() == (delta > 2)


def test_scale_limits():
    besq = PowerLawDiffusion.squared_bessel(1.0)
    assert scale_limit(besq, 1.0, "zero") == pytest.approx(-2.0)
    assert scale_limit(besq, 1.0, "inf") == math.inf
    gbm = PowerLawDiffusion.gbm(2.0, 1.0)  # a = 4: s(y) = (y^-3 - 1)/(-3)
    assert scale_limit(gbm, 1.0, "inf") == pytest.approx(1 / 3)
    assert scale_limit(gbm, 1.0, "zero") == -math.inf
    assert scale_limit(PowerLawDiffusion.brownian(), 2.0, "zero") == -2.0
    with pytest.raises(ParameterError):
        scale_limit(gbm, 1.0, "middle")


def test_non_closed_form_scale_by_quadrature():
    d = PowerLawDiffusion(1.0, 0.0, 1.0, 1.0)  # mu = 1, sigma = y: s' = exp(2/y - 2)
    assert d.scale_closed_form(np.array(2.0), 1.0) is None
    ref = integrate.quad(lambda u: math.exp(2 / u - 2), 1.0, 3.0, epsrel=1e-12)[0]
    assert float(scale(d, np.array(3.0), 1.0)) == pytest.approx(ref, rel=1e-9)
    assert d.scale_at_inf_finite() is False and d.scale_at_zero_finite() is False


def test_generic_matches_power_law():
    pl = PowerLawDiffusion(0.3, 1.0, 0.8, 1.0)
    gen = GenericDiffusion(lambda y: 0.3 * y, lambda y: 0.8 * y)
    y = np.array([0.5, 1.5, 4.0])
    np.testing.assert_allclose(gen.scale_density(y, 1.0), pl.scale_density(y, 1.0), rtol=1e-9)
    np.testing.assert_allclose(scale(gen, y, 1.0), scale(pl, y, 1.0), rtol=1e-8)
    np.testing.assert_allclose(gen.lamperti(y, 1.0), pl.lamperti(y, 1.0), rtol=1e-9)
    np.testing.assert_allclose(gen.lamperti_inverse(pl.lamperti(y, 1.0), 1.0), y, rtol=1e-9)
    np.testing.assert_allclose(gen.dsigma(y), pl.dsigma(y), rtol=1e-6)
    assert gen.scale_at_zero_finite() == pl.scale_at_zero_finite()
    assert gen.scale_at_inf_finite() == pl.scale_at_inf_finite()


@given(st.floats(-2, 2), st.floats(-1, 2), st.floats(0.2, 3), st.floats(0, 1.5), st.floats(0.05, 20))
def test_lamperti_inverts(mu0, q, sigma0, p, y):
    d = PowerLawDiffusion(mu0, q, sigma0, p)
    for sign in (1.0, -1.0):
        x = d.lamperti(np.array(y), 2.0, sign)
        assert float(d.lamperti_inverse(x, 2.0, sign)) == pytest.approx(y, rel=1e-9)


@given(st.floats(-3, 3), st.floats(0.3, 2.0), st.floats(0.0, 1.5), st.floats(0.05, 20))
def test_log_exponent_closed_form_matches_quadrature(a, sigma0, p, y):
    # mu / sigma^2 ~ 1/y: the scale function has a closed form for every drift ratio
    d = PowerLawDiffusion(0.5 * a * sigma0 ** 2, 2 * p - 1, sigma0, p)
    closed = float(scale(d, np.array(y), 1.0))
    quad = float(scale(d, np.array(y), 1.0, closed=False))
    assert closed == pytest.approx(quad, rel=1e-7, abs=1e-10)
