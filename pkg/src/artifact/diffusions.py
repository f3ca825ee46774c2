"""One-dimensional diffusions dS = mu(S) dt + sigma(S) dW on (0, inf): scale functions and Lamperti maps.

Power-law coefficients mu0 * y**q and sigma0 * y**p get closed forms wherever they exist;
everything else falls back to adaptive quadrature.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate, optimize

from .errors import IndeterminateError, ParameterError

_QUAD = dict(epsabs=0.0, epsrel=1e-12, limit=400)


def _quad(fn, a, b) -> float:
    """Quadrature that reports divergence as +-inf instead of warning."""
    if a == b:
        return 0.0
    sign = 1.0
    if a > b:
        a, b, sign = b, a, -1.0
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            if math.isfinite(a) and math.isfinite(b):
                pieces = np.geomspace(max(a, 1e-300), b, 9) if a > 0 and b / max(a, 1e-300) > 100 else [a, b]
                pieces = np.concatenate([[a], np.asarray(pieces)[1:-1], [b]])
                val = sum(integrate.quad(fn, lo, hi, **_QUAD)[0] for lo, hi in zip(pieces[:-1], pieces[1:]))
            else:
                val = integrate.quad(fn, a, b, **_QUAD)[0]
        except (integrate.IntegrationWarning, OverflowError, ZeroDivisionError):
            return sign * math.inf
    return sign * val if math.isfinite(val) else sign * math.inf


@dataclass(frozen=True)
class PowerLawDiffusion:
    """mu(y) = mu0 y^q, sigma(y) = sigma0 y^p."""
    mu0: float
    q: float
    sigma0: float
    p: float

    def __post_init__(self):
        if self.sigma0 == 0 or not all(map(math.isfinite, (self.mu0, self.q, self.sigma0, self.p))):
            raise ParameterError("power-law diffusion needs finite parameters and sigma0 != 0")

    @classmethod
    def gbm(cls, mu: float, sigma: float) -> "PowerLawDiffusion":
        return cls(mu, 1.0, sigma, 1.0)

    @classmethod
    def brownian(cls, sigma: float = 1.0) -> "PowerLawDiffusion":
        return cls(0.0, 0.0, sigma, 0.0)

    @classmethod
    def squared_bessel(cls, delta: float) -> "PowerLawDiffusion":
        return cls(delta, 0.0, 2.0, 0.5)

    @property
    def drift_ratio(self) -> float:
        """a = 2 mu0 / sigma0^2."""
        return 2.0 * self.mu0 / self.sigma0 ** 2

    @property
    def exponent(self) -> float:
        """e = q - 2p, the power of y in mu / sigma^2."""
        return self.q - 2.0 * self.p

    def mu(self, y):
        return self.mu0 * np.power(y, self.q)

    def sigma(self, y):
        return self.sigma0 * np.power(y, self.p)

    def dsigma(self, y):
        return self.sigma0 * self.p * np.power(y, self.p - 1.0)

    def _integrated_ratio(self, y0, y):
        """int_{y0}^{y} xi^e d xi."""
        e = self.exponent
        if e == -1:
            return np.log(y / y0)
        return (np.power(y, e + 1) - y0 ** (e + 1)) / (e + 1)

    def scale_density(self, y, y0: float):
        with np.errstate(over="ignore", divide="ignore"):
            return np.exp(-self.drift_ratio * self._integrated_ratio(y0, np.asarray(y, dtype=float)))

    def scale_closed_form(self, y, y0: float):
        """s(y) when a closed form exists (mu0 = 0 or q - 2p = -1), else None."""
        y = np.asarray(y, dtype=float)
        a, e = self.drift_ratio, self.exponent
        if a == 0:
            return y - y0
        if e == -1:
            if a == 1:
                return y0 * np.log(y / y0)
            return y0 / (1 - a) * (np.power(y / y0, 1 - a) - 1)
        return None

    def scale_at_zero_finite(self) -> bool:
        a, e = self.drift_ratio, self.exponent
        if a == 0 or e > -1:
            return True
        if e == -1:
            return a < 1
        return a < 0

    def scale_at_inf_finite(self) -> bool:
        a, e = self.drift_ratio, self.exponent
        if a == 0 or e < -1:
            return False
        if e == -1:
            return a > 1
        return a > 0

    def lamperti(self, y, y0: float, sign: float = 1.0):
        y = np.asarray(y, dtype=float)
        s0 = sign * abs(self.sigma0)
        if self.p == 1:
            with np.errstate(divide="ignore"):
                return np.log(y / y0) / s0
        return (np.power(y, 1 - self.p) - y0 ** (1 - self.p)) / (s0 * (1 - self.p))

    def lamperti_inverse(self, x, y0: float, sign: float = 1.0):
        x = np.asarray(x, dtype=float)
        s0 = sign * abs(self.sigma0)
        if self.p == 1:
            return y0 * np.exp(s0 * x)
        base = y0 ** (1 - self.p) + s0 * (1 - self.p) * x
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(base > 0, np.power(np.maximum(base, 0), 1 / (1 - self.p)),
                            0.0 if self.p < 1 else np.inf)


@dataclass(frozen=True)
class GenericDiffusion:
    """Arbitrary C^1 coefficients on (0, inf); all integrals by quadrature."""
    mu_fn: Callable[[float], float]
    sigma_fn: Callable[[float], float]
    dsigma_fn: Optional[Callable[[float], float]] = None

    def mu(self, y):
        return np.vectorize(self.mu_fn, otypes=[float])(y)

    def sigma(self, y):
        return np.vectorize(self.sigma_fn, otypes=[float])(y)

    def dsigma(self, y):
        if self.dsigma_fn is not None:
            return np.vectorize(self.dsigma_fn, otypes=[float])(y)
        y = np.asarray(y, dtype=float)
        h = 1e-6 * np.maximum(y, 1e-12)
        return (self.sigma(y + h) - self.sigma(y - h)) / (2 * h)

    def _ratio(self, x):
        return 2.0 * self.mu_fn(x) / self.sigma_fn(x) ** 2

    def scale_density(self, y, y0: float):
        def one(v):
            val = _quad(self._ratio, y0, v)
            return math.exp(-val) if val > -700 else math.inf
        return np.vectorize(one, otypes=[float])(y)

    def scale_closed_form(self, y, y0):
        return None

    def scale_at_zero_finite(self) -> bool:
        return math.isfinite(_quad(lambda v: self.scale_density(v, 1.0), 1.0, 0.0))

    def scale_at_inf_finite(self) -> bool:
        return math.isfinite(_quad(lambda v: self.scale_density(v, 1.0), 1.0, math.inf))

    def lamperti(self, y, y0: float, sign: float = 1.0):
        return np.vectorize(lambda v: _quad(lambda u: sign / abs(self.sigma_fn(u)), y0, v), otypes=[float])(y)

    def lamperti_inverse(self, x, y0: float, sign: float = 1.0):
        def one(v):
            if v == 0:
                return y0
            f = lambda y: float(self.lamperti(y, y0, sign)) - v
            lo, hi = y0, y0
            up = (v > 0) == (sign > 0)
            for _ in range(200):
                if up:
                    hi *= 2
                    if f(hi) * f(lo) <= 0:
                        break
                else:
                    lo /= 2
                    if f(hi) * f(lo) <= 0:
                        break
            else:
                raise IndeterminateError("Lamperti inverse could not bracket the target")
            return optimize.brentq(f, lo, hi, xtol=1e-14, rtol=1e-13)
        return np.vectorize(one, otypes=[float])(x)


def scale(diff, y, y0: float, closed: bool = True):
    """s(y) = int_{y0}^{y} s'(eta) d eta with s(y0) = 0, s'(y0) = 1."""
    if closed:
        c = diff.scale_closed_form(y, y0)
        if c is not None:
            return c
    return np.vectorize(lambda v: _quad(lambda u: float(diff.scale_density(u, y0)), y0, v), otypes=[float])(y)


def scale_limit(diff, y0: float, end: str) -> float:
    """s(0) or s(inf); +-inf when the integral diverges."""
    if end == "zero":
        if not diff.scale_at_zero_finite():
            return -math.inf
        target = 0.0
    elif end == "inf":
        if not diff.scale_at_inf_finite():
            return math.inf
        target = math.inf
    else:
        raise ParameterError("end must be 'zero' or 'inf'")
    if diff.scale_closed_form(np.array(1.0), y0) is not None:
        if diff.drift_ratio == 0:
            return -y0
        a = diff.drift_ratio
        return -y0 / (1 - a) if end == "zero" else y0 / (a - 1)
    return _quad(lambda u: float(diff.scale_density(u, y0)), y0, target)
