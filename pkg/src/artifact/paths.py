"""Path simulation for one-dimensional market models with singular components.

Every model is simulated on a uniform grid. Random draws are a pure function of
(master_seed, path_index, step, stream), so a path never depends on how paths
are batched.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Iterator, Optional, Union

import numpy as np

from .errors import DiscretizationError, ParameterError, StructuralError, UnsupportedModelError

BLOCK = 256  # paths per generator stream

# generator stream ids
NORMALS = 0
UNIFORMS = 1
AUX_NORMALS = 2
TAIL_UNIFORMS = 3
RESTART_NORMALS = 5


# ---------------------------------------------------------------- grid and rng


@dataclass(frozen=True)
class TimeGrid:
    t_start: float = 0.0
    t_end: float = 1.0
    n_steps: int = 1000

    def __post_init__(self):
        if not (math.isfinite(self.t_start) and math.isfinite(self.t_end)):
            raise ParameterError("grid times must be finite")
        if self.t_end <= self.t_start:
            raise ParameterError("t_end must exceed t_start")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ParameterError("n_steps must be a positive integer")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.t_start, self.t_end, self.n_steps + 1)

    @classmethod
    def from_dt(cls, t_end: float, dt: float, t_start: float = 0.0) -> "TimeGrid":
        n = int(round((t_end - t_start) / dt))
        return cls(t_start, t_end, max(n, 1))


@dataclass(frozen=True)
class RngSpec:
    master_seed: int = 0
    path_index: int = 0

    def __post_init__(self):
        if self.master_seed < 0 or self.master_seed >= 2**64:
            raise ParameterError("master_seed must be a 64-bit nonnegative integer")
        if self.path_index < 0:
            raise ParameterError("path_index must be nonnegative")


def _generator(seed: int, block: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(block), int(stream)])))


def _draw(seed: int, paths: np.ndarray, n: int, dim: int, stream: int, kind: str) -> np.ndarray:
    """Draws of shape (len(paths), n, dim); entry [i, k] depends only on (seed, paths[i], k)."""
    paths = np.asarray(paths, dtype=np.int64)
    out = np.empty((len(paths), n, dim))
    blocks = paths // BLOCK
    for blk in np.unique(blocks):
        gen = _generator(seed, blk, stream)
        if kind == "normal":
            z = gen.standard_normal((n, BLOCK, dim))
        else:
            z = gen.random((n, BLOCK, dim))
        sel = np.nonzero(blocks == blk)[0]
        out[sel] = z[:, paths[sel] % BLOCK, :].transpose(1, 0, 2)
    return out


def normals(seed, paths, n, dim=1, stream=NORMALS):
    return _draw(seed, paths, n, dim, stream, "normal")


def uniforms(seed, paths, n, dim=1, stream=UNIFORMS):
    return _draw(seed, paths, n, dim, stream, "uniform")


# ---------------------------------------------------------------- models


def _check_finite(obj):
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, (int, float)) and not math.isfinite(v):
            raise ParameterError(f"{type(obj).__name__}.{f.name} must be finite")


@dataclass(frozen=True)
class ReflectedGBM:
    """GBM reflected upward at the level b."""
    s0: float
    b: float
    mu: float
    sigma: float

    def __post_init__(self):
        _check_finite(self)
        if not 0 < self.b < self.s0:
            raise ParameterError("ReflectedGBM requires 0 < b < s0")


@dataclass(frozen=True)
class GBM:
    """Unreflected GBM, used as a control model without singular part."""
    s0: float
    mu: float
    sigma: float

    def __post_init__(self):
        _check_finite(self)
        if self.s0 <= 0:
            raise ParameterError("GBM requires s0 > 0")


@dataclass(frozen=True)
class SkewBM:
    s0: float
    alpha: float

    def __post_init__(self):
        _check_finite(self)
        if not 0 < self.alpha < 1:
            raise ParameterError("SkewBM requires alpha in (0, 1)")
        if self.s0 < 0:
            raise ParameterError("SkewBM requires s0 >= 0")


@dataclass(frozen=True)
class Bessel3:
    x0: float

    def __post_init__(self):
        _check_finite(self)
        if self.x0 < 0:
            raise ParameterError("Bessel3 requires x0 >= 0")


@dataclass(frozen=True)
class BesselIndex:
    """Bessel process of index nu: dX = dbeta + (nu + 1/2)/X dt, absorbed at 0 when nu < 0."""
    x0: float
    nu: float

    def __post_init__(self):
        _check_finite(self)
        if self.x0 < 0:
            raise ParameterError("BesselIndex requires x0 >= 0")


@dataclass(frozen=True)
class SquaredBessel:
    """dY = delta dt + 2 sqrt(Y) dbeta, absorbed at 0."""
    s0: float
    delta: float

    def __post_init__(self):
        _check_finite(self)
        if self.s0 < 0 or self.delta < 0:
            raise ParameterError("SquaredBessel requires s0 >= 0 and delta >= 0")


@dataclass(frozen=True)
class LocalTimeAlpha:
    """S = s0 - |beta0| + |beta| + (alpha - 1) L(beta), beta a BM with |beta_0| = beta0_abs."""
    s0: float
    beta0_abs: float
    alpha: float

    def __post_init__(self):
        _check_finite(self)
        if self.alpha < 1:
            raise ParameterError("LocalTimeAlpha requires alpha >= 1")
        if not 0 <= self.beta0_abs <= self.s0:
            raise ParameterError("LocalTimeAlpha requires 0 <= beta0_abs <= s0")


@dataclass(frozen=True)
class DoublyReflectedBM:
    s0: float
    k1: float
    k2: float

    def __post_init__(self):
        _check_finite(self)
        if not 0 <= self.k1 < self.k2:
            raise ParameterError("DoublyReflectedBM requires 0 <= k1 < k2")
        if not self.k1 <= self.s0 <= self.k2:
            raise ParameterError("DoublyReflectedBM requires k1 <= s0 <= k2")


@dataclass(frozen=True)
class SqrtDrift:
    """S_t = s0 + beta_t + sqrt(t)."""
    s0: float

    def __post_init__(self):
        _check_finite(self)
        if self.s0 < 0:
            raise ParameterError("SqrtDrift requires s0 >= 0")


@dataclass(frozen=True)
class ConstDriftGBM:
    """dS = -dt + sigma S dbeta, absorbed at 0."""
    s0: float
    sigma: float

    def __post_init__(self):
        _check_finite(self)
        if self.s0 <= 0:
            raise ParameterError("ConstDriftGBM requires s0 > 0")
        if self.sigma == 0:
            raise ParameterError("ConstDriftGBM requires sigma != 0")


@dataclass(frozen=True)
class WilliamsBessel:
    """BM from x0 until it hits j, then j plus a Bessel(3) process started at 0."""
    x0: float
    j: float

    def __post_init__(self):
        _check_finite(self)
        if not 0 < self.j < self.x0:
            raise ParameterError("WilliamsBessel requires 0 < j < x0")


Model = Union[ReflectedGBM, GBM, SkewBM, Bessel3, BesselIndex, SquaredBessel, LocalTimeAlpha,
              DoublyReflectedBM, SqrtDrift, ConstDriftGBM, WilliamsBessel]

MODEL_KINDS = {cls.__name__: cls for cls in
               (ReflectedGBM, GBM, SkewBM, Bessel3, BesselIndex, SquaredBessel, LocalTimeAlpha,
                DoublyReflectedBM, SqrtDrift, ConstDriftGBM, WilliamsBessel)}


def initial_value(model) -> float:
    return float(model.x0 if hasattr(model, "x0") else model.s0)


def diffusion_coefficient(model, t, s):
    """Squared diffusion coefficient sigma(t, s)^2 of the price."""
    s = np.asarray(s, dtype=float)
    if isinstance(model, (ReflectedGBM, GBM, ConstDriftGBM)):
        return model.sigma ** 2 * s ** 2
    if isinstance(model, SquaredBessel):
        return 4.0 * np.maximum(s, 0.0)
    return np.ones_like(s)


# ---------------------------------------------------------------- path containers


@dataclass
class PathBatch:
    """A batch of paths stored as 2-d arrays (path, time index)."""
    grid: TimeGrid
    values: np.ndarray
    driver_increments: np.ndarray
    kappa: np.ndarray
    kappa_var: np.ndarray
    local_times: dict = field(default_factory=dict)
    future_inf: Optional[np.ndarray] = None
    absorbed_at: Optional[np.ndarray] = None  # index of absorption, -1 if none
    aux: dict = field(default_factory=dict)
    markers: dict = field(default_factory=dict)
    model: object = None
    path_indices: Optional[np.ndarray] = None
    master_seed: Optional[int] = None

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    def check(self):
        n = self.grid.n_steps + 1
        for name in ("values", "kappa", "kappa_var"):
            if getattr(self, name).shape[1] != n:
                raise StructuralError(f"{name} has wrong length")
        if self.driver_increments.shape[1] != n - 1:
            raise StructuralError("driver_increments has wrong length")
        if self.future_inf is not None and self.future_inf.shape[1] != n:
            raise StructuralError("future_inf has wrong length")

    def path(self, i: int) -> "SamplePath":
        ab = None
        if self.absorbed_at is not None and self.absorbed_at[i] >= 0:
            ab = int(self.absorbed_at[i])
        return SamplePath(
            grid=self.grid,
            values=self.values[i].copy(),
            driver_increments=self.driver_increments[i].copy(),
            kappa=self.kappa[i].copy(),
            kappa_var=self.kappa_var[i].copy(),
            local_times={k: v[i].copy() for k, v in self.local_times.items()},
            future_inf=None if self.future_inf is None else self.future_inf[i].copy(),
            absorbed_at=ab,
            aux={k: v[i].copy() for k, v in self.aux.items()},
            markers={k: v[i].item() for k, v in self.markers.items()},
            model=self.model,
            path_index=None if self.path_indices is None else int(self.path_indices[i]),
            master_seed=self.master_seed,
        )


@dataclass
class SamplePath:
    grid: TimeGrid
    values: np.ndarray
    driver_increments: np.ndarray
    kappa: np.ndarray
    kappa_var: np.ndarray
    local_times: dict = field(default_factory=dict)
    future_inf: Optional[np.ndarray] = None
    absorbed_at: Optional[int] = None
    aux: dict = field(default_factory=dict)
    markers: dict = field(default_factory=dict)
    model: object = None
    path_index: Optional[int] = None
    master_seed: Optional[int] = None

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def as_batch(self) -> PathBatch:
        return PathBatch(
            grid=self.grid,
            values=self.values[None, :],
            driver_increments=self.driver_increments[None, :],
            kappa=self.kappa[None, :],
            kappa_var=self.kappa_var[None, :],
            local_times={k: v[None, :] for k, v in self.local_times.items()},
            future_inf=None if self.future_inf is None else self.future_inf[None, :],
            absorbed_at=np.array([-1 if self.absorbed_at is None else self.absorbed_at]),
            aux={k: np.asarray(v)[None, ...] for k, v in self.aux.items()},
            markers={k: np.array([v]) for k, v in self.markers.items()},
            model=self.model,
            path_indices=None if self.path_index is None else np.array([self.path_index]),
            master_seed=self.master_seed,
        )


def as_batch(path) -> PathBatch:
    return path if isinstance(path, PathBatch) else path.as_batch()


# ---------------------------------------------------------------- simulators


def _prepend_zero(a: np.ndarray) -> np.ndarray:
    return np.concatenate([np.zeros(a.shape[:1] + (1,) + a.shape[2:]), a], axis=1)


def _running_reflection(free: np.ndarray) -> np.ndarray:
    """Regulator R of the discrete Skorokhod problem keeping free + R >= 0."""
    return np.maximum.accumulate(np.maximum(-free, 0.0), axis=1)


def _sim_reflected_gbm(m: ReflectedGBM, grid, seed, paths, x0, **_):
    dt = grid.dt
    z = normals(seed, paths, grid.n_steps)[..., 0] * math.sqrt(dt)
    drift = (m.mu - 0.5 * m.sigma ** 2) * dt
    inc = _prepend_zero(np.cumsum(drift + m.sigma * z, axis=1))
    r = _running_reflection(np.log(x0 / m.b)[:, None] + inc)
    s = x0[:, None] * np.exp(inc + r)
    s = np.maximum(s, m.b)  # guards exp/log round-off at the boundary
    kappa = m.b * r
    return dict(values=s, driver_increments=z, kappa=kappa, kappa_var=kappa.copy(),
                local_times={float(m.b): 2.0 * kappa})


def _sim_gbm(m: GBM, grid, seed, paths, x0, **_):
    dt = grid.dt
    z = normals(seed, paths, grid.n_steps)[..., 0] * math.sqrt(dt)
    y = np.log(x0)[:, None] + _prepend_zero(np.cumsum((m.mu - 0.5 * m.sigma ** 2) * dt + m.sigma * z, axis=1))
    zero = np.zeros_like(y)
    return dict(values=np.exp(y), driver_increments=z, kappa=zero, kappa_var=zero.copy())


def _sim_skew(m: SkewBM, grid, seed, paths, x0, **_):
    n = grid.n_steps
    z = normals(seed, paths, n)[..., 0] * math.sqrt(grid.dt)
    a0 = np.abs(x0)[:, None]
    free = a0 + _prepend_zero(np.cumsum(z, axis=1))
    r = _running_reflection(free)
    a = free + r
    hit = np.zeros(a.shape, dtype=bool)
    hit[:, 1:] = r[:, 1:] > r[:, :-1]
    hit[:, 0] = x0 == 0
    exc = np.cumsum(hit, axis=1)
    u = uniforms(seed, paths, n + 2)[..., 0]
    sign = np.where(np.take_along_axis(u, exc, axis=1) < m.alpha, 1.0, -1.0)
    sign = np.where(exc == 0, 1.0, sign)
    s = sign * a
    k = 2 * m.alpha - 1
    driver = np.diff(s, axis=1) - k * np.diff(r, axis=1)
    return dict(values=s, driver_increments=driver, kappa=k * r, kappa_var=abs(k) * r,
                local_times={0.0: r})


def _bessel3_radius(seed, paths, n, dt, x0, stream=NORMALS):
    z = normals(seed, paths, n, dim=3, stream=stream) * math.sqrt(dt)
    pos = _prepend_zero(np.cumsum(z, axis=1))
    pos[:, :, 0] += x0[:, None]
    return np.sqrt(np.einsum("pkd,pkd->pk", pos, pos))


def _bessel_driver(x: np.ndarray, dt: float) -> np.ndarray:
    """Martingale increments dX - dt/X with a trapezoid drift; 1/0 replaced by the next value."""
    with np.errstate(divide="ignore"):
        inv = 1.0 / x
    bad = ~np.isfinite(inv)
    if bad.any():
        nxt = np.roll(inv, -1, axis=1)
        inv = np.where(bad, nxt, inv)
        inv[~np.isfinite(inv)] = 0.0
    return np.diff(x, axis=1) - 0.5 * (inv[:, :-1] + inv[:, 1:]) * dt


def _sim_bessel3(m: Bessel3, grid, seed, paths, x0, **_):
    x = _bessel3_radius(seed, paths, grid.n_steps, grid.dt, x0)
    zero = np.zeros_like(x)
    return dict(values=x, driver_increments=_bessel_driver(x, grid.dt), kappa=zero, kappa_var=zero.copy())


def _euler_absorbed(step, x0, z, absorb: bool):
    """Generic Euler loop with absorption or reflection at 0; returns values, absorption index, guard count."""
    p, n = z.shape
    x = np.empty((p, n + 1))
    x[:, 0] = x0
    absorbed = np.full(p, -1, dtype=np.int64)
    alive = x0 > 0
    absorbed[~alive & absorb] = 0
    guards = 0
    cur = x0.astype(float).copy()
    for k in range(n):
        nxt = step(cur, z[:, k])
        neg = alive & (nxt <= 0)
        if absorb:
            hit = neg & (absorbed < 0)
            absorbed[hit] = k + 1
            alive = alive & ~neg
            nxt = np.where(alive, nxt, 0.0)
        else:
            guards += int(neg.sum())
            nxt = np.abs(nxt)
        cur = nxt
        x[:, k + 1] = cur
    return x, absorbed, guards


def _guard_check(guards, total, limit):
    if total and guards / total > limit:
        raise DiscretizationError(f"positivity guard fired on {guards / total:.3%} of steps (limit {limit:.3%})")


def _sim_bessel_index(m: BesselIndex, grid, seed, paths, x0, max_guard_fraction=0.01, **_):
    dt = grid.dt
    z = normals(seed, paths, grid.n_steps)[..., 0] * math.sqrt(dt)
    c = m.nu + 0.5
    absorb = m.nu < 0
    with np.errstate(divide="ignore", invalid="ignore"):
        step = lambda x, dz: x + dz + np.where(x > 0, c * dt / np.where(x > 0, x, 1.0), 0.0)
        x, absorbed, guards = _euler_absorbed(step, x0, z, absorb)
    _guard_check(guards, z.size, max_guard_fraction)
    drv = z.copy()
    for i in np.nonzero(absorbed >= 0)[0]:
        drv[i, absorbed[i]:] = 0.0
    zero = np.zeros_like(x)
    return dict(values=x, driver_increments=drv, kappa=zero, kappa_var=zero.copy(),
                absorbed_at=absorbed)


def _sim_squared_bessel(m: SquaredBessel, grid, seed, paths, x0, max_guard_fraction=0.01, **_):
    dt = grid.dt
    z = normals(seed, paths, grid.n_steps)[..., 0] * math.sqrt(dt)
    absorb = m.delta < 2
    step = lambda y, dz: y + m.delta * dt + 2.0 * np.sqrt(np.maximum(y, 0.0)) * dz
    x, absorbed, guards = _euler_absorbed(step, x0, z, absorb)
    _guard_check(guards, z.size, max_guard_fraction)
    drv = z.copy()
    for i in np.nonzero(absorbed >= 0)[0]:
        drv[i, absorbed[i]:] = 0.0
    zero = np.zeros_like(x)
    return dict(values=x, driver_increments=drv, kappa=zero, kappa_var=zero.copy(), absorbed_at=absorbed)


def _sim_localtime_alpha(m: LocalTimeAlpha, grid, seed, paths, x0, **_):
    z = normals(seed, paths, grid.n_steps)[..., 0] * math.sqrt(grid.dt)
    free = m.beta0_abs + _prepend_zero(np.cumsum(z, axis=1))
    r = _running_reflection(free)
    a = free + r
    base = (x0 - m.beta0_abs)[:, None]
    barrier = base + (m.alpha - 1.0) * r
    s = barrier + a
    kappa = m.alpha * r
    return dict(values=s, driver_increments=z, kappa=kappa, kappa_var=kappa.copy(),
                aux={"barrier": barrier, "abs_beta": a, "beta_local_time": r})


def fold_local_times(b: np.ndarray, width: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-step fold crossings of B at the levels m*width.

    Returns (level index crossed or a large sentinel, local-time increment 2*overshoot, signed dkappa).
    Even levels map to the lower wall, odd levels to the upper wall.
    """
    cell = np.floor(b / width)
    moved = cell[:, 1:] != cell[:, :-1]
    level = np.maximum(cell[:, 1:], cell[:, :-1])
    overshoot = np.abs(b[:, 1:] - level * width)
    inc = np.where(moved, 2.0 * overshoot, 0.0)
    even = (level % 2) == 0
    dk = np.where(even, inc, -inc)
    return np.where(moved, level, np.iinfo(np.int64).min), inc, dk


def _sim_doubly_reflected(m: DoublyReflectedBM, grid, seed, paths, x0, **_):
    z = normals(seed, paths, grid.n_steps)[..., 0] * math.sqrt(grid.dt)
    width = m.k2 - m.k1
    b = (x0 - m.k1)[:, None] + _prepend_zero(np.cumsum(z, axis=1))
    y = np.mod(b, 2 * width)
    s = m.k1 + np.where(y <= width, y, 2 * width - y)
    _, _, dk = fold_local_times(b, width)
    slope = np.where((y > 0) & (y <= width), 1.0, -1.0)
    l1 = _prepend_zero(np.cumsum(np.maximum(dk, 0.0), axis=1))
    l2 = _prepend_zero(np.cumsum(np.maximum(-dk, 0.0), axis=1))
    return dict(values=s, driver_increments=slope[:, :-1] * z, kappa=l1 - l2, kappa_var=l1 + l2,
                local_times={float(m.k1): 2.0 * l1, float(m.k2): 2.0 * l2}, aux={"B": b})


def _sim_sqrt_drift(m: SqrtDrift, grid, seed, paths, x0, **_):
    n, dt = grid.n_steps, grid.dt
    z = normals(seed, paths, n, dim=2)
    t = grid.times
    db = z[..., 0] * math.sqrt(dt)
    s = x0[:, None] + _prepend_zero(np.cumsum(db, axis=1)) + (np.sqrt(t) - math.sqrt(t[0]))[None, :]
    # exact joint law of (dbeta, int theta dbeta) with theta(u) = 1/(2 sqrt u)
    m1 = np.sqrt(t[1:]) - np.sqrt(t[:-1])
    with np.errstate(divide="ignore"):
        m2 = 0.25 * np.log(t[1:] / t[:-1])
    resid = np.sqrt(np.maximum(m2 - m1 ** 2 / dt, 0.0))
    with np.errstate(invalid="ignore"):
        theta_db = (m1 / dt)[None, :] * db + resid[None, :] * z[..., 1]
    theta_db = np.where(np.isfinite(m2)[None, :], theta_db, np.inf)
    zero = np.zeros_like(s)
    return dict(values=s, driver_increments=db, kappa=zero, kappa_var=zero.copy(),
                aux={"theta_dbeta": theta_db, "theta_sq_dt": np.broadcast_to(m2, db.shape).copy()})


def _sim_const_drift_gbm(m: ConstDriftGBM, grid, seed, paths, x0, **_):
    n, dt = grid.n_steps, grid.dt
    z = normals(seed, paths, n)[..., 0] * math.sqrt(dt)
    u = np.arange(n + 1) * dt
    logE = m.sigma * _prepend_zero(np.cumsum(z, axis=1)) - 0.5 * m.sigma ** 2 * u[None, :]
    inv = np.exp(-logE)
    integral = _prepend_zero(np.cumsum(0.5 * (inv[:, :-1] + inv[:, 1:]) * dt, axis=1))
    bracket = x0[:, None] - integral
    dead = bracket <= 0
    absorbed = np.where(dead.any(axis=1), dead.argmax(axis=1), -1)
    s = np.where(np.maximum.accumulate(dead, axis=1), 0.0, np.exp(logE) * bracket)
    drv = z.copy()
    for i in np.nonzero(absorbed >= 0)[0]:
        drv[i, absorbed[i]:] = 0.0
    zero = np.zeros_like(s)
    return dict(values=s, driver_increments=drv, kappa=zero, kappa_var=zero.copy(), absorbed_at=absorbed)


def _sim_williams(m: WilliamsBessel, grid, seed, paths, x0, **_):
    n, dt = grid.n_steps, grid.dt
    z = normals(seed, paths, n)[..., 0] * math.sqrt(dt)
    free = x0[:, None] + _prepend_zero(np.cumsum(z, axis=1))
    u = uniforms(seed, paths, n)[..., 0]
    d0, d1 = free[:, :-1] - m.j, free[:, 1:] - m.j
    with np.errstate(over="ignore"):
        cross = np.exp(-2.0 * np.maximum(d0, 0) * np.maximum(d1, 0) / dt)
    hit_step = (d1 <= 0) | (u < cross)
    any_hit = hit_step.any(axis=1)
    hit_idx = np.where(any_hit, hit_step.argmax(axis=1) + 1, n + 1)  # grid index of tau_j
    idx = np.arange(n + 1)[None, :]
    # Bessel(3) from 0 started at the hitting index
    w3 = normals(seed, paths, n, dim=3, stream=AUX_NORMALS) * math.sqrt(dt)
    c3 = _prepend_zero(np.cumsum(w3, axis=1))
    start = np.take_along_axis(c3, np.minimum(hit_idx, n)[:, None, None], axis=1)
    rad = np.sqrt(((c3 - start) ** 2).sum(axis=2))
    after = idx >= hit_idx[:, None]
    x = np.where(after, m.j + rad, free)
    drv = np.where(after[:, 1:], _bessel_driver(x - m.j, dt), z)
    zero = np.zeros_like(x)
    return dict(values=x, driver_increments=drv, kappa=zero, kappa_var=zero.copy(),
                markers={"rho_plus_index": hit_idx})


_SIMULATORS = {
    ReflectedGBM: _sim_reflected_gbm,
    GBM: _sim_gbm,
    SkewBM: _sim_skew,
    Bessel3: _sim_bessel3,
    BesselIndex: _sim_bessel_index,
    SquaredBessel: _sim_squared_bessel,
    LocalTimeAlpha: _sim_localtime_alpha,
    DoublyReflectedBM: _sim_doubly_reflected,
    SqrtDrift: _sim_sqrt_drift,
    ConstDriftGBM: _sim_const_drift_gbm,
    WilliamsBessel: _sim_williams,
}


def simulate_batch(model, grid: TimeGrid, master_seed: int, path_indices, initial=None,
                   max_guard_fraction: float = 0.01) -> PathBatch:
    """Simulate the given path indices. `initial` optionally overrides the start value per path."""
    try:
        sim = _SIMULATORS[type(model)]
    except KeyError:
        raise UnsupportedModelError(f"no simulator for {type(model).__name__}") from None
    RngSpec(master_seed, 0)
    paths = np.atleast_1d(np.asarray(path_indices, dtype=np.int64))
    if initial is None:
        x0 = np.full(len(paths), initial_value(model))
    else:
        x0 = np.broadcast_to(np.asarray(initial, dtype=float), (len(paths),)).copy()
    out = sim(model, grid, master_seed, paths, x0, max_guard_fraction=max_guard_fraction)
    absorbed = out.pop("absorbed_at", None)
    if absorbed is None:
        absorbed = np.full(len(paths), -1, dtype=np.int64)
    batch = PathBatch(grid=grid, model=model, path_indices=paths, master_seed=master_seed,
                      absorbed_at=absorbed, **out)
    batch.check()
    return batch


def simulate(model, grid: TimeGrid, rng: RngSpec) -> SamplePath:
    return simulate_batch(model, grid, rng.master_seed, [rng.path_index]).path(0)


def default_chunk(n_steps: int, dim: int = 1) -> int:
    """Paths per batch: a multiple of BLOCK sized for ~2e6 grid points per array."""
    return BLOCK * max(1, 2_000_000 // (max(n_steps, 1) * BLOCK * dim))


def chunk_ranges(n_paths: int, chunk: int, first: int = 0) -> list[tuple[int, int]]:
    return [(a, min(a + chunk, first + n_paths)) for a in range(first, first + n_paths, chunk)]


def iter_batches(model, grid: TimeGrid, master_seed: int, n_paths: int, chunk: Optional[int] = None,
                 first_index: int = 0) -> Iterator[PathBatch]:
    chunk = chunk or default_chunk(grid.n_steps)
    for a, b in chunk_ranges(n_paths, chunk, first_index):
        yield simulate_batch(model, grid, master_seed, np.arange(a, b))


# ---------------------------------------------------------------- derived tracks


def _tail_infimum(model, batch: PathBatch, u: np.ndarray) -> np.ndarray:
    """Post-horizon infimum sampled from the scale-function hitting law."""
    x_end = batch.values[:, -1]
    if isinstance(model, Bessel3):
        return x_end * u
    if isinstance(model, BesselIndex) and model.nu > 0:
        return x_end * u ** (1.0 / (2.0 * model.nu))
    if isinstance(model, SquaredBessel) and model.delta > 2:
        return x_end * u ** (2.0 / (model.delta - 2.0))
    if isinstance(model, LocalTimeAlpha) and model.alpha == 2:
        j_end = batch.aux["barrier"][:, -1]
        touched = batch.aux["beta_local_time"][:, -1] > 0
        # after the first touch S - j is a Bessel(3) path and the barrier stops at its future minimum
        return np.where(touched, j_end + (x_end - j_end) * u, j_end)
    if isinstance(model, WilliamsBessel):
        touched = batch.markers["rho_plus_index"] <= batch.grid.n_steps
        return np.where(touched, model.j + (x_end - model.j) * u, model.j)
    raise UnsupportedModelError(f"future infimum needs a model transient to +inf, got {type(model).__name__}")


def future_infimum(path, model=None, rng: Optional[RngSpec] = None):
    """Fill future_inf: J_k = min(values[k:], tail); the current point is included so J <= S on the grid."""
    batch = as_batch(path)
    model = model if model is not None else batch.model
    seed = rng.master_seed if rng is not None else (batch.master_seed or 0)
    if rng is not None:
        idx = np.array([rng.path_index])
    elif batch.path_indices is not None:
        idx = batch.path_indices
    else:
        idx = np.arange(batch.n_paths)
    u = uniforms(seed, idx, 1, stream=TAIL_UNIFORMS)[:, 0, 0]
    tail = _tail_infimum(model, batch, u)
    rev = np.minimum.accumulate(batch.values[:, ::-1], axis=1)[:, ::-1]
    j = np.minimum(rev, tail[:, None])
    out = replace(batch, future_inf=j)
    return out.path(0) if isinstance(path, SamplePath) else out


def local_time_estimate(path, level: float, bandwidth: float, sigma2=None) -> np.ndarray:
    """Occupation-density local time (1/bw) * sum 1{level < S <= level + bw} sigma^2(S) dt."""
    if bandwidth <= 0:
        raise ParameterError("bandwidth must be positive")
    batch = as_batch(path)
    s = batch.values[:, :-1]
    t = batch.grid.times[:-1]
    var = sigma2(t, s) if sigma2 is not None else diffusion_coefficient(batch.model, t, s)
    inside = (s > level) & (s <= level + bandwidth)
    est = _prepend_zero(np.cumsum(np.where(inside, var, 0.0) * batch.grid.dt, axis=1)) / bandwidth
    return est[0] if isinstance(path, SamplePath) else est


def williams_bessel(x0: float, j: float, grid: TimeGrid, rng: RngSpec) -> SamplePath:
    return simulate(WilliamsBessel(x0, j), grid, rng)


def coarsen(path, factor: int):
    """Subsample a path onto a grid `factor` times coarser, summing driver increments."""
    batch = as_batch(path)
    n = batch.grid.n_steps
    if factor < 1 or n % factor:
        raise StructuralError("factor must divide n_steps")
    sub = slice(None, None, factor)
    g = TimeGrid(batch.grid.t_start, batch.grid.t_end, n // factor)
    drv = batch.driver_increments.reshape(batch.n_paths, n // factor, factor).sum(axis=2)
    aux = {k: v[:, sub] for k, v in batch.aux.items() if v.shape[1] == n + 1}
    ab = batch.absorbed_at
    if ab is not None:
        ab = np.where(ab >= 0, -(-ab // factor), -1)
    out = replace(batch, grid=g, values=batch.values[:, sub], driver_increments=drv, kappa=batch.kappa[:, sub],
                  kappa_var=batch.kappa_var[:, sub], local_times={k: v[:, sub] for k, v in batch.local_times.items()},
                  future_inf=None if batch.future_inf is None else batch.future_inf[:, sub], aux=aux,
                  absorbed_at=ab)
    return out.path(0) if isinstance(path, SamplePath) else out
