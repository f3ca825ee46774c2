"""Minimal deflators along simulated paths and the Monte Carlo pricing formulas built on them.

The deflator is Z = exp(-int theta dbeta - 1/2 int theta^2 dt) with theta = lambda * sigma,
killed when the mean-variance trade-off K = int theta^2 dt explodes or the price is absorbed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import paths as P
from .errors import (ParameterError, RegimeViolationError, StructuralError, UnsupportedModelError,
                     UnsupportedRecursionError)
from .montecarlo import Estimate, Moments, map_chunks, reduce_moments
from .pricers import Payoff


@dataclass(frozen=True)
class MarketStructure:
    lambda_fn: Callable  # (t, s) -> market price of risk density
    sigma_fn: Callable  # (t, s) -> diffusion coefficient of the price
    rho_plus_rule: str = "none"  # "none", "zero" (strong arbitrage at the start) or "marker"
    kbar_cap: float = 1e8
    log_z_exact: Optional[Callable] = None  # batch -> exact log deflator, when known
    potential: Optional[Callable] = None  # s -> Phi(s) with Phi' = lambda, for time-homogeneous lambda
    kappa_support: Callable = lambda batch: np.diff(batch.kappa_var, axis=1) > 0

    def __post_init__(self):
        if not self.kbar_cap > 0:
            raise ParameterError("kbar_cap must be positive")
        if self.rho_plus_rule not in ("none", "zero", "marker"):
            raise ParameterError("unknown rho_plus_rule")

    def theta(self, t, s):
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.lambda_fn(t, s) * self.sigma_fn(t, s)


def _const(c):
    return lambda t, s: np.full(np.broadcast(t, s).shape, float(c))


def market_structure(model) -> MarketStructure:
    """Market price of risk and diffusion coefficient of each in-scope model."""
    if isinstance(model, (P.ReflectedGBM, P.GBM)):
        mu, sig = model.mu, model.sigma
        ratio = 0.0 if mu == 0 else (mu / sig ** 2 if sig != 0 else math.inf)
        return MarketStructure(lambda t, s: ratio / s, lambda t, s: sig * np.asarray(s),
                               potential=lambda s: ratio * np.log(s))
    if isinstance(model, (P.SkewBM, P.LocalTimeAlpha, P.DoublyReflectedBM)):
        return MarketStructure(_const(0.0), _const(1.0), potential=np.zeros_like)
    if isinstance(model, P.WilliamsBessel):
        return MarketStructure(_const(0.0), _const(1.0), rho_plus_rule="marker")
    if isinstance(model, P.Bessel3):
        return MarketStructure(lambda t, s: 1.0 / s, _const(1.0), "zero" if model.x0 == 0 else "none",
                               log_z_exact=lambda b: np.log(b.values[:, :1] / b.values), potential=np.log)
    if isinstance(model, P.BesselIndex):
        c = model.nu + 0.5
        return MarketStructure(lambda t, s: c / s, _const(1.0), potential=lambda s: c * np.log(s))
    if isinstance(model, P.SquaredBessel):
        return MarketStructure(lambda t, s: model.delta / (4.0 * s), lambda t, s: 2.0 * np.sqrt(s),
                               potential=lambda s: 0.25 * model.delta * np.log(s))
    if isinstance(model, P.SqrtDrift):
        return MarketStructure(lambda t, s: 0.5 / np.sqrt(t) + 0 * s, _const(1.0), rho_plus_rule="zero")
    if isinstance(model, P.ConstDriftGBM):
        sig = model.sigma
        # the 1/s potential is too singular near absorption for the potential scheme
        return MarketStructure(lambda t, s: -1.0 / (sig * sig * s * s), lambda t, s: sig * np.asarray(s))
    raise UnsupportedModelError(f"no market structure for {type(model).__name__}")


@dataclass
class DeflatorTrack:
    grid: P.TimeGrid
    Z: np.ndarray
    L: np.ndarray
    K: np.ndarray
    log_z: np.ndarray
    rho_star_idx: np.ndarray  # grid index, n_steps + 1 when not detected
    rho_plus_idx: np.ndarray
    rho_one_idx: np.ndarray
    theta_eps_idx: Optional[np.ndarray] = None

    def _time(self, idx):
        t = self.grid.times
        idx = np.asarray(idx)
        out = np.where(idx <= self.grid.n_steps, t[np.minimum(idx, self.grid.n_steps)], np.inf)
        return out if out.ndim else float(out)

    @property
    def rho_star(self):
        return self._time(self.rho_star_idx)

    @property
    def rho_plus(self):
        return self._time(self.rho_plus_idx)

    @property
    def rho_one(self):
        return self._time(self.rho_one_idx)

    @property
    def theta_eps(self):
        return None if self.theta_eps_idx is None else self._time(self.theta_eps_idx)


def _first_true(mask: np.ndarray, none: int) -> np.ndarray:
    return np.where(mask.any(axis=1), mask.argmax(axis=1), none)


def _log_deflator(batch: P.PathBatch, ms: MarketStructure, scheme: str):
    grid = batch.grid
    t = grid.times[None, :]
    s = batch.values
    dt = grid.dt
    n = grid.n_steps
    ab = batch.absorbed_at if batch.absorbed_at is not None else np.full(batch.n_paths, -1)
    step_idx = np.arange(n)[None, :]
    alive_step = (ab[:, None] < 0) | (step_idx < ab[:, None] - 1)  # both endpoints alive
    kill_step = (ab[:, None] > 0) & (step_idx == ab[:, None] - 1)  # step into absorption
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        theta = ms.theta(t, s)
        if "theta_dbeta" in batch.aux:
            ito = batch.aux["theta_dbeta"]
            k_inc = batch.aux["theta_sq_dt"]
        else:
            left = theta[:, :-1] * batch.driver_increments
            if scheme == "auto":
                scheme = "potential" if ms.potential is not None else "simpson"
            if scheme == "potential":
                # Ito on Phi (Phi' = lambda) turns int theta dbeta into Delta Phi minus time integrals and
                # the kappa term; the stochastic sum then carries no discretization error
                if ms.potential is None:
                    raise ParameterError("potential scheme needs MarketStructure.potential")
                h = 1e-6 * np.maximum(np.abs(s), 1.0)
                lam = ms.lambda_fn(t, s)
                dlam = (ms.lambda_fn(t, s + h) - ms.lambda_fn(t, s - h)) / (2 * h)
                sig2 = np.square(ms.sigma_fn(t, s))
                q = (lam * lam + dlam) * sig2
                phi = ms.potential(s)
                dk = np.diff(batch.kappa, axis=1)
                kappa_term = np.where(dk != 0, lam[:, 1:] * dk, 0.0)
                log_inc = -np.diff(phi, axis=1) + 0.25 * (q[:, :-1] + q[:, 1:]) * dt + kappa_term
                pot = -log_inc - 0.5 * np.square(theta[:, :-1]) * dt
                ito = np.where(np.isfinite(pot), pot, left)
            elif scheme == "ito":
                ito = left
            elif scheme in ("trapezoid", "simpson"):
                # Stratonovich sum along the linearly interpolated path, then the Ito correction
                h = 1e-6 * np.maximum(np.abs(s), 1.0)
                dtheta = (ms.theta(t, s + h) - ms.theta(t, s - h)) / (2 * h)
                corr = 0.5 * dtheta[:, :-1] * ms.sigma_fn(t, s)[:, :-1] * dt
                if scheme == "simpson":
                    mid = ms.theta(0.5 * (t[:, :-1] + t[:, 1:]), 0.5 * (s[:, :-1] + s[:, 1:]))
                    weight = (theta[:, :-1] + 4.0 * mid + theta[:, 1:]) / 6.0
                else:
                    weight = 0.5 * (theta[:, :-1] + theta[:, 1:])
                trap = weight * batch.driver_increments - corr
                ito = np.where(np.isfinite(trap), trap, left)
            else:
                raise ParameterError(f"unknown scheme {scheme!r}")
            ito = np.where(kill_step, left, ito)
            k_inc = np.square(theta[:, :-1]) * dt
        ito = np.where(alive_step | kill_step, ito, 0.0)
        k_inc = np.where(alive_step | kill_step, k_inc, 0.0)
        k_inc = np.where(np.isnan(k_inc), np.inf, k_inc)
        ito = np.where(np.isnan(ito), 0.0, ito)
        K = P._prepend_zero(np.cumsum(k_inc, axis=1))
        log_z = -P._prepend_zero(np.cumsum(ito + 0.5 * k_inc, axis=1))
    return log_z, K


def deflate(path, ms: Optional[MarketStructure] = None, scheme: str = "auto", eps: Optional[float] = None,
            exact: bool = False) -> DeflatorTrack:
    """Deflator track along a path or batch. `exact` uses the model's closed-form log deflator if declared."""
    batch = P.as_batch(path)
    batch.check()
    ms = ms or market_structure(batch.model)
    n = batch.grid.n_steps
    if exact and ms.log_z_exact is not None:
        log_z = ms.log_z_exact(batch)
        _, K = _log_deflator(batch, ms, scheme)
    else:
        log_z, K = _log_deflator(batch, ms, scheme)
    none = n + 1
    cap_idx = _first_true(~(K < ms.kbar_cap), none)
    ab = batch.absorbed_at if batch.absorbed_at is not None else np.full(batch.n_paths, -1)
    rho_one = np.minimum(cap_idx, np.where(ab >= 0, ab, none))
    rho_star = _first_true(np.diff(batch.kappa_var, axis=1) > 0, none - 1) + 1
    rho_star = np.where(rho_star > n, none, rho_star)
    if ms.rho_plus_rule == "zero":
        rho_plus = np.zeros(batch.n_paths, dtype=np.int64)
    elif ms.rho_plus_rule == "marker":
        rho_plus = np.asarray(batch.markers["rho_plus_index"], dtype=np.int64)
    else:
        rho_plus = np.full(batch.n_paths, none, dtype=np.int64)
    idx = np.arange(n + 1)[None, :]
    # L is stopped at rho_one with its left-limit value; Z is killed from rho_one on
    stop = np.minimum(rho_one, n)[:, None]
    log_l = np.take_along_axis(log_z, np.minimum(idx, stop), axis=1)
    log_l = np.where(np.isfinite(log_l), log_l, -np.inf)
    with np.errstate(over="ignore"):
        L = np.exp(log_l)
    Z = np.where(idx < rho_one[:, None], L, 0.0)
    theta_eps = None if eps is None else _first_true(L < eps, none)
    track = DeflatorTrack(batch.grid, Z, L, K, log_z, rho_star, rho_plus, rho_one, theta_eps)
    if isinstance(path, P.SamplePath):
        track = DeflatorTrack(batch.grid, Z[0], L[0], K[0], log_z[0], int(rho_star[0]), int(rho_plus[0]),
                              int(rho_one[0]), None if theta_eps is None else int(theta_eps[0]))
    return track


# ---------------------------------------------------------------- Brownian-bridge knock-out corrections


def _cross_prob(z0, z1, level, var_dt):
    """P[a Brownian bridge from z0 to z1 with variance var_dt crosses `level`], both ends above it."""
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        p = np.exp(-2.0 * np.maximum(z0 - level, 0) * np.maximum(z1 - level, 0) / var_dt)
    return np.where(var_dt > 0, p, 0.0)


def survival_weight(batch: P.PathBatch, event: str) -> np.ndarray:
    """Bridge-corrected probability that a path has no `event` ("star" or "one") on [0, T].

    Paths with a grid-detected event get weight 0; the others get prod(1 - p_k) where p_k is the
    chance the continuous path touched the level between grid points.
    """
    m, dt, s = batch.model, batch.grid.dt, batch.values
    ones = np.ones(batch.n_paths)
    if event == "star":
        if isinstance(m, P.ReflectedGBM):
            z, levels, v2 = np.log(s), [(math.log(m.b), 1)], m.sigma ** 2 * dt
        elif isinstance(m, P.LocalTimeAlpha):
            z, levels, v2 = s, [(m.s0 - m.beta0_abs, 1)], dt
        elif isinstance(m, P.SkewBM):
            z, levels, v2 = s, [(0.0, 1)], dt
        elif isinstance(m, P.DoublyReflectedBM):
            z, levels, v2 = s, [(m.k1, 1), (m.k2, -1)], dt
        else:
            return ones
        hit = (np.diff(batch.kappa_var, axis=1) > 0).any(axis=1)
        if isinstance(m, P.SkewBM) and m.s0 == 0:
            return np.zeros(batch.n_paths)
    elif event == "one":
        if isinstance(m, P.BesselIndex) and m.nu < 0:
            z, levels, v2 = s, [(0.0, 1)], dt
        else:
            return ones
        hit = batch.absorbed_at >= 0
    else:
        raise ParameterError("event must be 'star' or 'one'")
    logw = np.zeros(batch.n_paths)
    for level, side in levels:
        zz = side * z
        lv = side * level
        p = _cross_prob(zz[:, :-1], zz[:, 1:], lv, v2)
        with np.errstate(divide="ignore"):
            logw += np.log1p(-np.minimum(p, 1.0)).sum(axis=1)
    return np.where(hit, 0.0, np.exp(logw))


# ---------------------------------------------------------------- Monte Carlo prices


CONTINUATION = {
    # post-rho+ law is j + Bessel(3) from 0, whose restart price of any bounded claim is 0
    P.WilliamsBessel: lambda model, g, tau: 0.0,
}


def _chunk_value(model, g, grid, seed, a, b, mode, bridge, extra):
    batch = P.simulate_batch(model, grid, seed, np.arange(a, b))
    ms = market_structure(model)
    track = deflate(batch, ms)
    n = grid.n_steps
    payoff = g(batch.values[:, -1])
    if mode == "ip":
        if np.any(track.rho_one_idx <= n):
            raise RegimeViolationError("mean-variance trade-off reached the cap on a path")
        w = survival_weight(batch, "star") if bridge else (track.rho_star_idx > n).astype(float)
        vals = payoff * track.Z[:, -1] * w
    elif mode == "na1":
        w = survival_weight(batch, "one") if bridge else (track.rho_one_idx > n).astype(float)
        vals = payoff * track.L[:, -1] * w * (track.rho_one_idx > n)
    elif mode == "master":
        ws = survival_weight(batch, "star") if bridge else (track.rho_star_idx > n).astype(float)
        wo = survival_weight(batch, "one") if bridge else (track.rho_one_idx > n).astype(float)
        plus_before = track.rho_plus_idx <= n
        vals = payoff * track.L[:, -1] * ws * wo * (track.rho_one_idx > n) * ~plus_before
        if plus_before.any():
            cont = CONTINUATION.get(type(model))
            if cont is None:
                raise UnsupportedRecursionError(f"no continuation pricer declared for {type(model).__name__}")
            rho = np.minimum(np.minimum(track.rho_star_idx, track.rho_one_idx), track.rho_plus_idx)
            first = plus_before & (track.rho_plus_idx == rho)
            ip = np.minimum(track.rho_plus_idx, n)
            tau = grid.t_end - grid.times[ip]
            xi = np.array([cont(model, g, t) for t in tau[first]])
            l_plus = np.take_along_axis(track.L, ip[:, None], axis=1)[:, 0]
            add = np.zeros(batch.n_paths)
            if first.any():
                add[first] = xi * l_plus[first]
            vals = vals + add
    elif mode == "truncated":
        vals = payoff * track.L[:, -1] * (track.rho_one_idx > n) * np.exp(-extra * batch.kappa_var[:, -1])
    else:
        raise ParameterError(f"unknown mode {mode!r}")
    return Moments.of(vals)


def _run(model, g: Payoff, n_paths: int, grid: P.TimeGrid, seed: int, mode: str, bridge: bool = True,
         extra: float = 0.0, workers: int = 1, chunk: Optional[int] = None) -> Estimate:
    if n_paths <= 0:
        raise ParameterError("n_paths must be positive")
    if abs(g.maturity - (grid.t_end - grid.t_start)) > 1e-12 and grid.t_start == 0:
        grid = P.TimeGrid(0.0, g.maturity, grid.n_steps)
    chunk = chunk or P.default_chunk(grid.n_steps)
    jobs = [(model, g, grid, seed, a, b, mode, bridge, extra) for a, b in P.chunk_ranges(n_paths, chunk)]
    parts = map_chunks(_chunk_value, jobs, workers)
    if g.is_zero:
        return Estimate(0.0, 0.0, n_paths)
    return reduce_moments(parts)


def price_increasing_profit(model, g: Payoff, n_paths: int, grid: P.TimeGrid, seed: int = 0,
                            bridge: bool = True, workers: int = 1) -> Estimate:
    """E[g(S_T) Z_T 1{T <= rho*}] with bridge-corrected detection of the first singular activity."""
    return _run(model, g, n_paths, grid, seed, "ip", bridge, workers=workers)


def price_na1(model, g: Payoff, n_paths: int, grid: P.TimeGrid, seed: int = 0, bridge: bool = True,
              workers: int = 1) -> Estimate:
    """E[g(S_T) L_T 1{T <= rho1}] with rho1 detected by absorption or trade-off explosion."""
    return _run(model, g, n_paths, grid, seed, "na1", bridge, workers=workers)


def price_master(model, g: Payoff, n_paths: int, grid: P.TimeGrid, seed: int = 0, bridge: bool = True,
                 workers: int = 1) -> Estimate:
    """E[g L_T 1{T <= rho}] + E[xi_{rho+} L_{rho+} 1{rho+ = rho < T}] with rho = min(rho*, rho+, rho1)."""
    return _run(model, g, n_paths, grid, seed, "master", bridge, workers=workers)


def price_truncated(model, g: Payoff, n_trunc: float, n_paths: int, grid: P.TimeGrid, seed: int = 0,
                    workers: int = 1) -> Estimate:
    """E[g(S_T) L_T exp(-n |kappa|_T)]: decreases in n toward the grid increasing-profit price."""
    return _run(model, g, n_paths, grid, seed, "truncated", False, extra=float(n_trunc), workers=workers)


# ---------------------------------------------------------------- strong arbitrage


def restart_state(model, eps: float, seed: int, path_indices) -> np.ndarray:
    """Exact sample of the price at time eps."""
    if isinstance(model, P.SqrtDrift):
        z = P.normals(seed, path_indices, 1, stream=P.RESTART_NORMALS)[:, 0, 0]
        return model.s0 + math.sqrt(eps) * z + math.sqrt(eps)
    if isinstance(model, P.Bessel3):
        z = P.normals(seed, path_indices, 1, dim=3, stream=P.RESTART_NORMALS)[:, 0, :] * math.sqrt(eps)
        z[:, 0] += model.x0
        return np.sqrt((z ** 2).sum(axis=1))
    raise UnsupportedModelError("strong-arbitrage restarts are defined for SqrtDrift and Bessel3")


def _sa_chunk(model, g, grid, seed, a, b, exact):
    idx = np.arange(a, b)
    x_eps = restart_state(model, grid.t_start, seed, idx)
    batch = P.simulate_batch(model, grid, seed, idx, initial=x_eps)
    track = deflate(batch, exact=exact)
    if not np.all(np.isfinite(track.K[:, -1])):
        raise RegimeViolationError("restarted mean-variance trade-off is not finite")
    return Moments.of(g(batch.values[:, -1]) * track.L[:, -1])


def price_strong_arbitrage(model, g: Payoff, eps_sequence: Sequence[float], n_paths: int, n_steps: int = 1000,
                           seed: int = 0, exact: bool = True, workers: int = 1) -> list[tuple[float, Estimate]]:
    """E[g(S_T) L_{eps,T}] with the deflator restarted at each eps, for the caller to take eps -> 0."""
    ms = market_structure(model)
    if ms.rho_plus_rule != "zero":
        raise UnsupportedModelError("model has no strong arbitrage at time 0")
    if n_paths <= 0:
        raise ParameterError("n_paths must be positive")
    T = g.maturity
    out = []
    for eps in eps_sequence:
        if not 0 < eps < T:
            raise ParameterError("each eps must lie in (0, T)")
        grid = P.TimeGrid(eps, T, n_steps)
        chunk = P.default_chunk(n_steps, 3)
        jobs = [(model, g, grid, seed, a, b, exact) for a, b in P.chunk_ranges(n_paths, chunk)]
        est = reduce_moments(map_chunks(_sa_chunk, jobs, workers))
        out.append((float(eps), Estimate(0.0, 0.0, n_paths) if g.is_zero else est))
    return out


# ---------------------------------------------------------------- inverse deflator identity


def inverse_deflator_identity_residual(path, ms: Optional[MarketStructure] = None, eps: float = 0.01) -> float:
    """max_k |1/L_{k^theta} - 1 - sum_{i<k^theta} (1/L_i) lambda_i dS_i| with theta the first time L < eps."""
    batch = P.as_batch(path)
    ms = ms or market_structure(batch.model)
    track = deflate(batch, ms, eps=eps)
    n = batch.grid.n_steps
    t = batch.grid.times[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = ms.lambda_fn(t, batch.values)
    stop = np.minimum(track.theta_eps_idx, track.rho_one_idx)
    idx = np.arange(n + 1)[None, :]
    active = idx[:, :-1] < stop[:, None]
    inc = np.where(active, lam[:, :-1] * np.diff(batch.values, axis=1) / track.L[:, :-1], 0.0)
    rhs = 1.0 + P._prepend_zero(np.cumsum(inc, axis=1))
    lhs = 1.0 / np.take_along_axis(track.L, np.minimum(idx, np.minimum(stop, n)[:, None]), axis=1)
    within = idx <= np.minimum(stop, n)[:, None]
    resid = np.where(within, np.abs(lhs - rhs), 0.0)
    return float(resid.max())
