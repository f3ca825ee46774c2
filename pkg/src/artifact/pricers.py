"""Closed-form and PDE reference prices.

Bachelier knock-out prices use exact Gaussian integrals of piecewise-linear
payoffs combined with the reflection principle. The same quantities are also
available by adaptive quadrature for cross-checking.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import integrate
from scipy.linalg import solve_banded
from scipy.special import ndtr

from .errors import DomainError, ParameterError, SolverError

_SQRT2PI = math.sqrt(2 * math.pi)


def _pdf(z):
    return np.exp(-0.5 * np.square(z)) / _SQRT2PI


# ---------------------------------------------------------------- payoffs


@dataclass(frozen=True)
class Payoff:
    """Maturity-T claim g(S_T). Digital with strike None pays 1 in every state."""
    kind: str
    strike: Optional[float] = None
    maturity: float = 1.0
    table_x: tuple = ()
    table_g: tuple = ()
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("call", "put", "digital", "custom"):
            raise ParameterError(f"unknown payoff kind {self.kind!r}")
        if self.kind in ("call", "put") and self.strike is None:
            raise ParameterError("calls and puts need a strike")
        if self.strike is not None and not (math.isfinite(self.strike) and self.strike >= 0):
            raise ParameterError("strike must be finite and >= 0")
        if not (math.isfinite(self.maturity) and self.maturity >= 0):
            raise ParameterError("maturity must be finite and >= 0")
        if self.kind == "custom":
            xs, gs = np.asarray(self.table_x, float), np.asarray(self.table_g, float)
            if xs.ndim != 1 or xs.size < 1 or xs.shape != gs.shape:
                raise ParameterError("custom table needs matching nonempty abscissae and values")
            if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(gs))):
                raise ParameterError("custom table must be finite")
            if np.any(gs < 0):
                raise ParameterError("custom table must be nonnegative")
            if np.any(np.diff(xs) <= 0):
                raise ParameterError("custom abscissae must be strictly increasing")

    @classmethod
    def call(cls, strike, maturity=1.0):
        return cls("call", float(strike), float(maturity))

    @classmethod
    def put(cls, strike, maturity=1.0):
        return cls("put", float(strike), float(maturity))

    @classmethod
    def digital(cls, strike=None, maturity=1.0):
        return cls("digital", None if strike is None else float(strike), float(maturity))

    @classmethod
    def custom(cls, xs, gs, maturity=1.0):
        return cls("custom", None, float(maturity), tuple(map(float, xs)), tuple(map(float, gs)))

    def scaled(self, factor: float) -> "Payoff":
        return Payoff(self.kind, self.strike, self.maturity, self.table_x, self.table_g, self.scale * factor)

    def pieces(self) -> list[tuple[float, float, float, float]]:
        """Representation as sum of c0 + c1*y on intervals (a, b)."""
        k, c = self.strike, self.scale
        inf = math.inf
        if self.kind == "call":
            return [(k, inf, -k * c, c)]
        if self.kind == "put":
            return [(-inf, k, k * c, -c)]
        if self.kind == "digital":
            return [(-inf if k is None else k, inf, c, 0.0)]
        xs, gs = np.asarray(self.table_x), np.asarray(self.table_g) * c
        out = [(-inf, xs[0], gs[0], 0.0)]
        for i in range(len(xs) - 1):
            slope = (gs[i + 1] - gs[i]) / (xs[i + 1] - xs[i])
            out.append((xs[i], xs[i + 1], gs[i] - slope * xs[i], slope))
        out.append((xs[-1], inf, gs[-1], 0.0))
        return out

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        k, c = self.strike, self.scale
        if self.kind == "call":
            return c * np.maximum(y - k, 0.0)
        if self.kind == "put":
            return c * np.maximum(k - y, 0.0)
        if self.kind == "digital":
            return c * (np.ones_like(y) if k is None else (y > k).astype(float))
        return c * np.interp(y, self.table_x, self.table_g)

    @property
    def is_zero(self) -> bool:
        return self.scale == 0 or (self.kind == "custom" and not any(self.table_g))


@dataclass(frozen=True)
class BarrierSpec:
    level: float = 0.0
    side: str = "lower"

    def __post_init__(self):
        if self.side not in ("lower", "upper", "none"):
            raise ParameterError("side must be lower, upper or none")
        if not (math.isfinite(self.level) and self.level >= 0):
            raise ParameterError("barrier level must be finite and >= 0")


# ---------------------------------------------------------------- Gaussian integrals of pieces


def _gauss_piece(z, tau, a, b, c0, c1):
    """I(z) = int_a^b (c0 + c1 y) phi_tau(y - z) dy and its first two z-derivatives.

    All arguments broadcast; infinite endpoints contribute no boundary terms.
    """
    sd = np.sqrt(tau)
    z = np.asarray(z, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    mass = ndtr((b - z) / sd) - ndtr((a - z) / sd)
    total = (c0 + c1 * z) * mass
    d1 = c1 * mass
    d2 = 0.0
    for end, sign in ((b, 1.0), (a, -1.0)):
        fin = np.isfinite(end)
        if not np.any(fin):
            continue
        e = np.where(fin, end, 0.0)
        dens = np.where(fin, _pdf((e - z) / sd) / sd, 0.0)  # phi_tau(end - z)
        g_end = c0 + c1 * e
        total = total - sign * c1 * tau * dens
        d1 = d1 - sign * g_end * dens
        d2 = d2 - sign * (c1 * dens + g_end * (e - z) / tau * dens)
    return total, d1, d2 + np.zeros_like(total)


def _free_integral(g: Payoff, tau, z, lo=-math.inf, hi=math.inf):
    """A(z) = E[g(z + W_tau) 1{lo < z + W_tau < hi}] with derivatives; lo and hi may be arrays."""
    z = np.asarray(z, dtype=float)
    tot = d1 = d2 = 0.0
    for a, b, c0, c1 in g.pieces():
        a2, b2 = np.maximum(a, lo), np.minimum(b, hi)
        if np.all(a2 >= b2):
            continue
        b2 = np.maximum(a2, b2)
        p0, p1, p2 = _gauss_piece(z, tau, a2, b2, c0, c1)
        tot, d1, d2 = tot + p0, d1 + p1, d2 + p2
    zero = np.zeros(np.broadcast(z, tau, lo, hi).shape)
    return tot + zero, d1 + zero, d2 + zero


def knockout_parts(g: Payoff, tau, x, level, side: str):
    """Psi, Psi_x, Psi_xx, Psi_j from the reflection formula, valid up to and including x = level
    as the one-sided limit from the live side. tau, x and level broadcast."""
    x = np.asarray(x, dtype=float)
    if side == "none":
        a, a1, a2 = _free_integral(g, tau, x)
        return a, a1, a2, np.zeros_like(a)
    level = np.asarray(level, dtype=float)
    lo, hi = (level, math.inf) if side == "lower" else (-math.inf, level)
    img = 2 * level - x
    a, a1, a2 = _free_integral(g, tau, x, lo, hi)
    b, b1, b2 = _free_integral(g, tau, img, lo, hi)
    return a - b, a1 + b1, a2 - b2, -2.0 * b1


def _check_tau_x(tau, x, barrier):
    if not (tau >= 0 and math.isfinite(tau)):
        raise DomainError("tau must be finite and >= 0")
    x = np.asarray(x, dtype=float)
    if barrier.side == "lower" and np.any(x < barrier.level):
        raise DomainError("x below a lower barrier")
    if barrier.side == "upper" and np.any(x > barrier.level):
        raise DomainError("x above an upper barrier")
    return x


def _alive(x, barrier):
    if barrier.side == "lower":
        return x > barrier.level
    if barrier.side == "upper":
        return x < barrier.level
    return np.ones_like(x, dtype=bool)


def bachelier_knockout(g: Payoff, tau: float, x, barrier: BarrierSpec = BarrierSpec(0.0, "none"),
                       method: str = "closed"):
    """Psi^g(tau, x, j) = E_x[g(X_tau) ; no barrier hit before tau] for a standard BM X."""
    x = _check_tau_x(tau, x, barrier)
    if tau == 0:
        out = np.where(_alive(x, barrier), g(x), 0.0)
        return out if out.ndim else float(out)
    if method == "quad":
        out = np.vectorize(lambda xi: _knockout_quad(g, tau, xi, barrier))(x)
        return out if out.ndim else float(out)
    val = knockout_parts(g, tau, x, barrier.level, barrier.side)[0]
    val = np.where(_alive(x, barrier), np.maximum(val, 0.0) if g.scale >= 0 else val, 0.0)
    return val if val.ndim else float(val)


def _knockout_quad(g: Payoff, tau, x, barrier):
    sd = math.sqrt(tau)
    dens = lambda y: math.exp(-0.5 * ((y - x) / sd) ** 2) / (sd * _SQRT2PI)
    if barrier.side == "lower":
        kern = lambda y: dens(y) - math.exp(-0.5 * ((y + x - 2 * barrier.level) / sd) ** 2) / (sd * _SQRT2PI)
        lo, hi = barrier.level, math.inf
    elif barrier.side == "upper":
        kern = lambda y: dens(y) - math.exp(-0.5 * ((y + x - 2 * barrier.level) / sd) ** 2) / (sd * _SQRT2PI)
        lo, hi = -math.inf, barrier.level
    else:
        kern, lo, hi = dens, -math.inf, math.inf
    breaks = sorted({p for piece in g.pieces() for p in piece[:2] if math.isfinite(p) and lo < p < hi} | {x})
    edges = [lo] + breaks + [hi]
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        if a >= b:
            continue
        val, err = integrate.quad(lambda y: float(g(y)) * kern(y), a, b, epsabs=1e-10, epsrel=1e-10, limit=200)
        if not math.isfinite(val):
            raise SolverError("quadrature failed for payoff")
        total += val
    return total


def bachelier_knockout_greeks(g: Payoff, tau: float, x, barrier: BarrierSpec = BarrierSpec(0.0, "none")):
    """(Psi_x, Psi_xx, Psi_j). At x = j: Psi_x is half the inside limit, Psi_xx the jump of Psi_x."""
    x = _check_tau_x(tau, x, barrier)
    if tau <= 0:
        raise DomainError("greeks need tau > 0")
    _, px, pxx, pj = knockout_parts(g, tau, x, barrier.level, barrier.side)
    if barrier.side != "none":
        on = x == barrier.level
        sgn = 1.0 if barrier.side == "lower" else -1.0
        # value vanishes on the dead side: Psi_x(j,j) = average, Psi_xx(j,j) = jump of Psi_x
        px = np.where(on, 0.5 * px, px)
        pxx = np.where(on, sgn * _inner_slope(g, tau, barrier), pxx)
    scalar = lambda a: a if np.ndim(a) else float(a)
    return scalar(px), scalar(pxx), scalar(pj)


def _inner_slope(g, tau, barrier):
    return float(knockout_parts(g, tau, barrier.level, barrier.level, barrier.side)[1])


def knockout_inner_slope(g: Payoff, tau, level, side: str):
    """Psi_x at the barrier as the limit from the live side."""
    return knockout_parts(g, tau, level, level, side)[1]


# ---------------------------------------------------------------- Black-Scholes barrier


def bs_call(tau, s, strike, sigma):
    return bs_barrier_call(tau, s, 0.0, strike, sigma)


def _g_above(tau, s, m, strike, sigma):
    """E[(S_tau - K) 1{S_tau > m}] for driftless GBM from s, and its s-derivative."""
    vol = abs(sigma) * np.sqrt(tau)
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore"):
        d2 = (np.log(s / m) - 0.5 * vol ** 2) / vol
    d1 = d2 + vol
    val = s * ndtr(d1) - strike * ndtr(d2)
    with np.errstate(invalid="ignore", divide="ignore"):
        delta = ndtr(d1) + np.where(m > strike, (m - strike) * _pdf(d2) / (s * vol), 0.0)
    return val, delta


def _barrier_call_parts(tau, s, b, strike, sigma):
    s = np.asarray(s, dtype=float)
    m = max(strike, b)
    if m == 0:
        return s - strike, np.ones_like(s)
    g, gd = _g_above(tau, s, m, strike, sigma)
    if b == 0:
        return g, gd
    img = b * b / s
    gi, gid = _g_above(tau, img, m, strike, sigma)
    val = g - (s / b) * gi
    delta = gd - gi / b + (b / s) * gid
    return val, delta


def bs_barrier_call(tau, s, b, strike, sigma):
    """Down-and-out call on driftless GBM (zero rate) with lower barrier b (b = 0: no barrier)."""
    s_arr = np.asarray(s, dtype=float)
    if b < 0 or np.any(s_arr < b):
        raise DomainError("bs_barrier_call needs s >= b >= 0")
    if sigma == 0:
        raise ParameterError("sigma must be nonzero")
    if tau < 0:
        raise DomainError("tau must be >= 0")
    if tau == 0:
        out = np.maximum(s_arr - strike, 0.0) * ((s_arr > b) | (b == 0))
    else:
        out = np.where(s_arr > b, _barrier_call_parts(tau, np.maximum(s_arr, 1e-300), b, strike, sigma)[0], 0.0)
        if b == 0:
            out = _barrier_call_parts(tau, s_arr, b, strike, sigma)[0]
        out = np.maximum(out, 0.0)
    return out if out.ndim else float(out)


def bs_barrier_delta(tau, s, b, strike, sigma):
    """dC/ds of bs_barrier_call; the inside limit is used at s = b."""
    s_arr = np.asarray(s, dtype=float)
    if tau <= 0:
        raise DomainError("delta needs tau > 0")
    out = _barrier_call_parts(tau, s_arr, b, strike, sigma)[1]
    return out if out.ndim else float(out)


# ---------------------------------------------------------------- PDE


@dataclass(frozen=True)
class PdeGrid:
    s_min: float
    s_max: float
    n_space: int = 800
    n_time: int = 800

    def __post_init__(self):
        if not self.s_min < self.s_max:
            raise ParameterError("s_min must be below s_max")
        if self.n_space < 2 or self.n_time < 1:
            raise ParameterError("PDE grid too small")


@dataclass
class PdeSurface:
    s: np.ndarray
    tau: np.ndarray
    values: np.ndarray  # values[i] is the slice at time-to-maturity tau[i]

    def at(self, s: float, tau: Optional[float] = None) -> float:
        i = -1 if tau is None else int(np.argmin(np.abs(self.tau - tau)))
        return float(np.interp(s, self.s, self.values[i]))


def pde_barrier_solve(grid: PdeGrid, b: float, strike: float, sigma: float, T: float) -> PdeSurface:
    """Crank-Nicolson for C_tau = 1/2 sigma^2 s^2 C_ss on [b, s_max], C(tau, b) = 0, C_ss = 0 at s_max.

    The first step is replaced by two backward-Euler half steps to damp the payoff kink.
    """
    if not math.isclose(grid.s_min, b, rel_tol=0, abs_tol=1e-12):
        raise ParameterError("PDE grid must start exactly at the barrier")
    if sigma == 0 or T <= 0:
        raise SolverError("need sigma != 0 and T > 0")
    s = np.linspace(grid.s_min, grid.s_max, grid.n_space + 1)
    ds = s[1] - s[0]
    dt = T / grid.n_time
    inner = s[1:-1]
    coef = 0.5 * sigma ** 2 * inner ** 2 / ds ** 2  # operator: coef * (u_{i-1} - 2u_i + u_{i+1})
    n_in = inner.size

    def banded(theta_dt):
        ab = np.zeros((3, n_in))
        ab[0, 1:] = -theta_dt * coef[:-1]
        ab[1, :] = 1 + 2 * theta_dt * coef
        ab[2, :-1] = -theta_dt * coef[1:]
        return ab

    def apply_op(u, full):
        return coef * (full[:-2] - 2 * u + full[2:])

    upper_value = lambda: max(grid.s_max - strike, 0.0)  # C_ss = 0 keeps the linear payoff at s_max
    u = np.maximum(s - strike, 0.0)
    u[0] = 0.0
    out = np.empty((grid.n_time + 1, s.size))
    out[0] = u
    implicit_half = banded(0.5 * dt)
    cn = banded(0.5 * dt)
    for k in range(grid.n_time):
        if k == 0:
            for _ in range(2):
                rhs = u[1:-1].copy()
                rhs[-1] += 0.5 * dt * coef[-1] * upper_value()
                u[1:-1] = solve_banded((1, 1), implicit_half, rhs)
        else:
            rhs = u[1:-1] + 0.5 * dt * apply_op(u[1:-1], u)
            rhs[-1] += 0.5 * dt * coef[-1] * upper_value()
            u[1:-1] = solve_banded((1, 1), cn, rhs)
        u[0], u[-1] = 0.0, upper_value()
        if not np.all(np.isfinite(u)):
            raise SolverError("PDE solution became non-finite")
        out[k + 1] = u
    return PdeSurface(s=s, tau=np.linspace(0, T, grid.n_time + 1), values=out)


# ---------------------------------------------------------------- Bessel survival


def bessel_survival(tau, x):
    """P_x[BM survives 0 until tau] = 2 Phi(x / sqrt(tau)) - 1."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError("x must be >= 0")
    if np.any(np.asarray(tau) <= 0):
        raise DomainError("tau must be > 0")
    out = 2 * ndtr(x / np.sqrt(tau)) - 1
    return out if out.ndim else float(out)


def bessel_survival_x(tau, x):
    x = np.asarray(x, dtype=float)
    sd = np.sqrt(tau)
    out = 2 * _pdf(x / sd) / sd
    return out if out.ndim else float(out)
