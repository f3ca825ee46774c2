"""Explicit trading strategies, their discretized wealth processes and pathwise verification.

Holdings are computed for a whole batch at once from left-endpoint information only,
so the strategy at step k never sees the price increment of step k.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import paths as P
from .errors import ParameterError, UnsupportedModelError
from .montecarlo import map_chunks
from .pricers import (BarrierSpec, Payoff, _barrier_call_parts, bachelier_knockout, bessel_survival,
                      bessel_survival_x, bs_barrier_call, knockout_parts)


@dataclass(frozen=True)
class Strategy:
    name: str
    holdings_fn: Callable[[P.PathBatch], np.ndarray]  # (paths, n_steps) units held over each step
    admissibility_floor: float = 0.0
    initial_fortune_fn: Optional[Callable[[object], float]] = None

    def __post_init__(self):
        if self.admissibility_floor < 0:
            raise ParameterError("admissibility floor must be >= 0")

    def holdings(self, path) -> np.ndarray:
        batch = P.as_batch(path)
        h = self.holdings_fn(batch)
        return h[0] if isinstance(path, P.SamplePath) else h

    def holdings_at(self, k: int, path) -> np.ndarray:
        return self.holdings(path)[..., k]

    def initial_fortune(self, model) -> float:
        if self.initial_fortune_fn is None:
            raise ParameterError(f"strategy {self.name} has no declared initial fortune")
        return float(self.initial_fortune_fn(model))


def _tau(batch: P.PathBatch, maturity: float) -> np.ndarray:
    return (maturity - batch.grid.times[:-1])[None, :]


def constant_strategy(units: float) -> Strategy:
    return Strategy(f"hold {units}", lambda b: np.full((b.n_paths, b.grid.n_steps), float(units)))


def wealth_process(path, strat: Strategy, x0: float) -> np.ndarray:
    """V = x0 + sum h_k (S_{k+1} - S_k)."""
    batch = P.as_batch(path)
    h = strat.holdings(batch)
    v = x0 + P._prepend_zero(np.cumsum(h * np.diff(batch.values, axis=1), axis=1))
    return v[0] if isinstance(path, P.SamplePath) else v


# ---------------------------------------------------------------- strategies from the examples


def barrier_delta_strategy(b: float, strike: float, T: float, sigma: float) -> Strategy:
    """Delta of the down-and-out call on driftless GBM, held against a price reflected at b."""
    def holdings(batch):
        return _barrier_call_parts(_tau(batch, T), batch.values[:, :-1], b, strike, sigma)[1]

    return Strategy("barrier_delta", holdings,
                    initial_fortune_fn=lambda m: bs_barrier_call(T, P.initial_value(m), b, strike, sigma))


def default_bandwidth(dt: float, c: float = 0.5) -> float:
    return c * math.sqrt(dt)


def localtime_corrected_strategy(g: Payoff, T: float, alpha: float, bandwidth: Optional[float] = None) -> Strategy:
    """Knock-out delta against the moving barrier j_t plus ((alpha-1)/alpha) Psi_j while |beta| is near 0.

    On the barrier the inside (right) limit of Psi_x is used.
    """
    if alpha < 1:
        raise ParameterError("alpha must be >= 1")
    coef = (alpha - 1.0) / alpha

    def holdings(batch):
        if not isinstance(batch.model, P.LocalTimeAlpha):
            raise UnsupportedModelError("localtime strategy needs the LocalTimeAlpha model")
        bw = bandwidth if bandwidth is not None else default_bandwidth(batch.grid.dt)
        tau = _tau(batch, T)
        s = batch.values[:, :-1]
        j = batch.aux["barrier"][:, :-1]
        _, px, _, pj = knockout_parts(g, tau, s, j, "lower")
        if coef == 0:
            return px
        near = batch.aux["abs_beta"][:, :-1] <= bw
        _, _, _, pj_on = knockout_parts(g, tau, j, j, "lower")
        return px + coef * np.where(near, pj_on, 0.0)

    def x0(m):
        return bachelier_knockout(g, T, m.s0, BarrierSpec(m.s0 - m.beta0_abs, "lower"))

    return Strategy(f"localtime_alpha{alpha}", holdings, initial_fortune_fn=x0)


def skew_price(g: Payoff, tau, x):
    """Price of g for skew BM: knock-out at 0 on the side where the price currently is."""
    x = np.asarray(x, dtype=float)
    up = knockout_parts(g, tau, np.maximum(x, 0), 0.0, "lower")[0]
    dn = knockout_parts(g, tau, np.minimum(x, 0), 0.0, "upper")[0]
    return np.where(x > 0, up, np.where(x < 0, dn, 0.0))


def skew_corrected_strategy(g: Payoff, T: float, alpha: float, bandwidth: Optional[float] = None) -> Strategy:
    """Side-wise knock-out delta plus (1/2)(1/(2 alpha - 1)) times the jump of Psi_x at 0 near 0."""
    if not 0 < alpha < 1:
        raise ParameterError("alpha must lie in (0, 1)")
    if alpha == 0.5:
        raise ParameterError("alpha = 1/2 is plain BM; no correction is defined")
    k = 2 * alpha - 1

    def holdings(batch):
        bw = bandwidth if bandwidth is not None else default_bandwidth(batch.grid.dt)
        tau = _tau(batch, T)
        s = batch.values[:, :-1]
        up = knockout_parts(g, tau, np.maximum(s, 0), 0.0, "lower")[1]
        dn = knockout_parts(g, tau, np.minimum(s, 0), 0.0, "upper")[1]
        a_plus = knockout_parts(g, tau, 0.0, 0.0, "lower")[1]
        a_minus = knockout_parts(g, tau, 0.0, 0.0, "upper")[1]
        base = np.where(s > 0, up, np.where(s < 0, dn, 0.5 * (a_plus + a_minus)))
        jump = a_plus - a_minus
        return base + np.where(np.abs(s) <= bw, 0.5 * jump / k, 0.0)

    return Strategy(f"skew_alpha{alpha}", holdings,
                    initial_fortune_fn=lambda m: float(skew_price(g, T, m.s0)))


def bessel_na_strategy(T: float, x0: Optional[float] = None) -> Strategy:
    """Hold Psi_x(T - t, X_t) from zero capital: wealth Psi(T - t, X_t) - Psi(T, x0)."""
    def holdings(batch):
        return bessel_survival_x(_tau(batch, T), batch.values[:, :-1])

    floor = 0.0 if x0 is None else float(bessel_survival(T, x0))
    return Strategy("bessel_na", holdings, admissibility_floor=floor, initial_fortune_fn=lambda m: 0.0)


def increasing_profit_strategy(model, bandwidth: float) -> Strategy:
    """Hold one unit, signed by the direction of d(kappa), while the price sits at its singular level."""
    if bandwidth <= 0:
        raise ParameterError("bandwidth must be positive")

    if isinstance(model, P.ReflectedGBM):
        rule = lambda b: (b.values[:, :-1] <= model.b + bandwidth).astype(float)
    elif isinstance(model, P.LocalTimeAlpha):
        rule = lambda b: (b.aux["abs_beta"][:, :-1] <= bandwidth).astype(float)
    elif isinstance(model, P.DoublyReflectedBM):
        rule = lambda b: ((b.values[:, :-1] <= model.k1 + bandwidth).astype(float)
                          - (b.values[:, :-1] >= model.k2 - bandwidth).astype(float))
    elif isinstance(model, P.SkewBM) and model.alpha != 0.5:
        sign = 1.0 if model.alpha > 0.5 else -1.0
        rule = lambda b: sign * (np.abs(b.values[:, :-1]) <= bandwidth)
    else:
        raise UnsupportedModelError(f"{type(model).__name__} has no singular component to trade on")
    return Strategy("increasing_profit", rule, initial_fortune_fn=lambda m: 0.0)


def level_indicator_strategy(level: float, bandwidth: float, sign: float = 1.0) -> Strategy:
    """Hold `sign` units while the price is within bandwidth above `level` (control strategy)."""
    return Strategy("level_indicator", lambda b: sign * (b.values[:, :-1] <= level + bandwidth).astype(float))


# ---------------------------------------------------------------- verification


@dataclass
class WealthReport:
    initial: float
    min_wealth: float
    terminal_shortfall: float  # worst payoff - V_T over paths
    violation_fraction: float
    paths_checked: int
    tolerance: float
    floor: float
    per_path_min: np.ndarray = field(repr=False, default=None)
    per_path_shortfall: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if not 0 <= self.violation_fraction <= 1:
            raise ParameterError("violation_fraction outside [0, 1]")

    def summary(self) -> dict:
        return {"initial": self.initial, "min_wealth": self.min_wealth, "terminal_shortfall": self.terminal_shortfall,
                "violation_fraction": self.violation_fraction, "paths_checked": self.paths_checked,
                "tolerance": self.tolerance, "floor": self.floor,
                "mean_shortfall": float(np.mean(self.per_path_shortfall)),
                "rms_shortfall": float(np.sqrt(np.mean(self.per_path_shortfall ** 2)))}

    def shifted(self, new_initial: float) -> "WealthReport":
        """Report for a different initial fortune on the same paths (wealth is affine in x0)."""
        d = new_initial - self.initial
        return _report(new_initial, self.per_path_min + d, self.per_path_shortfall - d, self.tolerance, self.floor)


def _report(x0, mins, shortfall, tol, floor):
    bad = (shortfall > tol) | (mins < -floor - tol)
    return WealthReport(float(x0), float(mins.min()), float(shortfall.max()), float(bad.mean()), int(mins.size),
                        float(tol), float(floor), mins, shortfall)


def _verify_chunk(model, strat, x0, g, grid, seed, a, b):
    batch = P.simulate_batch(model, grid, seed, np.arange(a, b))
    v = wealth_process(batch, strat, x0)
    return v.min(axis=1), g(batch.values[:, -1]) - v[:, -1]


def verify_superreplication(model, strat: Strategy, x0: Optional[float], g: Payoff, n_paths: int,
                            grid: P.TimeGrid, seed: int = 0, tolerance: Optional[float] = None,
                            workers: int = 1) -> WealthReport:
    """Run the strategy from x0 on n_paths paths and count shortfalls above tolerance or floor breaches."""
    if n_paths <= 0:
        raise ParameterError("n_paths must be positive")
    if x0 is None:
        x0 = strat.initial_fortune(model)
    tol = 0.02 * P.initial_value(model) if tolerance is None else tolerance
    chunk = P.default_chunk(grid.n_steps, 3)
    jobs = [(model, strat, x0, g, grid, seed, a, b) for a, b in P.chunk_ranges(n_paths, chunk)]
    parts = map_chunks(_verify_chunk, jobs, workers)
    mins = np.concatenate([p[0] for p in parts])
    short = np.concatenate([p[1] for p in parts])
    return _report(x0, mins, short, tol, strat.admissibility_floor)


def gains(path, strat: Strategy) -> np.ndarray:
    return wealth_process(path, strat, 0.0)
