"""Share-count schedules of a fundraiser whose issuance and repurchase move the price.

A path carries a singular term kappa. Under the zero-sum constraint the fundraiser's share count is
n_t = n0 exp(-int (1 + q) dkappa / S), where q is the arbitrager's position per share (0 when absent).
The repurchase and issuance transforms built from scale functions and the Lamperti map live
at the bottom of the module.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from . import paths as P
from .diffusions import PowerLawDiffusion, scale, scale_limit
from .errors import ParameterError, SingularityError, StructuralError, UnsupportedModelError

SCHEMES = ("trapezoid", "left", "exact")
STEP_RATE_WARNING = 1.0  # largest (1 + q) dkappa / S on one step that the summed schemes resolve


@dataclass(frozen=True)
class QProfile:
    """Arbitrager holdings per share: q_at_lower while kappa increases, q_at_upper while it decreases."""
    q_at_lower: float = 0.0
    q_at_upper: float = 0.0

    def __post_init__(self):
        if not self.q_at_lower >= 0:
            raise ParameterError("q_at_lower must be >= 0")
        if not -1 < self.q_at_upper <= 0:
            raise ParameterError("q_at_upper must lie in (-1, 0]")


@dataclass
class FundingTrack:
    times: np.ndarray
    S: np.ndarray
    kappa: np.ndarray
    n: np.ndarray
    F: np.ndarray  # money raised, int S dn
    H: np.ndarray  # aggregate impact, int n dkappa
    G: np.ndarray  # arbitrager gain, int q n dkappa
    V_cap: np.ndarray

    @property
    def zero_sum_residual(self) -> np.ndarray:
        return self.F + self.G + self.H

    @property
    def capital_residual(self) -> np.ndarray:
        """V_t - V_0 - sum n d(S - kappa) + G_t."""
        n, s, k = (np.atleast_2d(a) for a in (self.n, self.S, self.kappa))
        integral = P._prepend_zero(np.cumsum(n[:, :-1] * np.diff(s - k, axis=1), axis=1))
        out = n * s - (n * s)[:, :1] - integral + np.atleast_2d(self.G)
        return out if self.n.ndim > 1 else out[0]

    def max_zero_sum_residual(self) -> float:
        return float(np.max(np.abs(self.zero_sum_residual)))

    def rows(self):
        """Per-time rows (t, S, n, F, G, H, V_cap, zero-sum residual, capital residual) of a single path."""
        if self.n.ndim != 1:
            raise StructuralError("rows() needs a single-path track")
        cols = (self.times, self.S, self.n, self.F, self.G, self.H, self.V_cap,
                self.zero_sum_residual, self.capital_residual)
        return [tuple(float(c[i]) for c in cols) for i in range(self.times.size)]


def _log_mean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (b - a) / np.log(b / a)
    return np.where(np.isclose(a, b, rtol=1e-12, atol=0.0), 0.5 * (a + b), out)


def _boundary_price(batch: P.PathBatch, dk: np.ndarray) -> np.ndarray:
    """Price at which kappa acts during each step.

    A moving reflecting level recorded in aux["barrier"] enters through its logarithmic step mean,
    which is exact when kappa moves in proportion to that level. Fixed walls of the reflected models
    are used as they are. Otherwise the lower endpoint is used for dk > 0 and the upper for dk < 0.
    """
    s = batch.values
    m = batch.model
    if "barrier" in batch.aux:
        j = batch.aux["barrier"]
        level = _log_mean(j[:, :-1], j[:, 1:])
    elif isinstance(m, P.DoublyReflectedBM):
        level = np.where(dk > 0, m.k1, m.k2)
    elif isinstance(m, P.ReflectedGBM):
        level = np.full(dk.shape, m.b)
    else:
        lo = np.minimum(s[:, :-1], s[:, 1:])
        hi = np.maximum(s[:, :-1], s[:, 1:])
        level = np.where(dk > 0, lo, hi)
    return np.where(dk != 0, level, s[:, :-1])


def shares_with_arbitrager(path, n0: float, q: QProfile, scheme: str = "trapezoid") -> FundingTrack:
    """Share schedule under F + G + H = 0 with arbitrager profile q.

    n is the exact exponential of the path integral. The schemes differ in how F, H and G are summed:
    "left" uses left-point sums, with a zero-sum residual of O(sqrt(dt));
    "trapezoid" uses the price at which kappa acts and the step average of n, with residual O(dt);
    "exact" integrates n in closed form within each step, so the residual is round-off only.
    Use "exact" when (1 + q) dkappa / S is not small on a single step.
    """
    if n0 <= 0:
        raise ParameterError("n0 must be positive")
    if scheme not in SCHEMES:
        raise ParameterError(f"scheme must be one of {SCHEMES}")
    batch = P.as_batch(path)
    s, k = batch.values, batch.kappa
    dk = np.diff(k, axis=1)
    s_star = _boundary_price(batch, dk)
    active = dk != 0
    if np.any(active & (s_star <= 0)):
        raise SingularityError("kappa is active at a zero price")
    qk = np.where(dk > 0, q.q_at_lower, np.where(dk < 0, q.q_at_upper, 0.0))
    rate = np.where(active, (1 + qk) * dk / np.where(active, s_star, 1.0), 0.0)
    log_n = math.log(n0) - P._prepend_zero(np.cumsum(rate, axis=1))
    n = np.exp(log_n)
    dn = np.diff(n, axis=1)
    if scheme != "exact" and rate.size and np.max(rate) > STEP_RATE_WARNING:
        warnings.warn(f"(1 + q) dkappa / S reaches {np.max(rate):.2f} on one step; F, G and H from the "
                      f"{scheme} scheme are unreliable, use scheme='exact'", RuntimeWarning, stacklevel=2)
    if scheme == "left":
        f_inc, h_inc = s[:, :-1] * dn, n[:, :-1] * dk
    elif scheme == "trapezoid":
        f_inc, h_inc = s_star * dn, 0.5 * (n[:, :-1] + n[:, 1:]) * dk
    else:
        f_inc, h_inc = s_star * dn, -s_star * dn / (1 + qk)
    F = P._prepend_zero(np.cumsum(f_inc, axis=1))
    H = P._prepend_zero(np.cumsum(h_inc, axis=1))
    G = P._prepend_zero(np.cumsum(qk * h_inc, axis=1))
    track = FundingTrack(batch.grid.times, s, k, n, F, H, G, n * s)
    if isinstance(path, P.SamplePath):
        return FundingTrack(track.times, *(a[0] for a in (s, k, n, F, H, G, n * s)))
    return track


def shares_from_kappa(path, n0: float, scheme: str = "trapezoid") -> FundingTrack:
    """Share schedule n = n0 exp(-int dkappa / S) with no arbitrager."""
    return shares_with_arbitrager(path, n0, QProfile(), scheme)


# ---------------------------------------------------------------- closed forms for the worked examples


def localtime_shares(n0: float, b: float, c: float, L, q: float = 0.0):
    """n_t = n0 (1 + c L / b)^(-p), p = (1 + q)(1 + 1/c), for S = b + |beta| + c L (c = alpha - 1)."""
    L = np.asarray(L, dtype=float)
    if c == 0:
        return n0 * np.exp(-(1 + q) * L / b)
    p = (1 + q) * (1 + 1 / c)
    return n0 * np.power(1 + c * L / b, -p)


def localtime_spent(n0: float, b: float, c: float, L, q: float = 0.0):
    """-F_t = p/(p-1) n0 b (1 - (1 + cL/b)^(1-p)); q = 0 gives (1 + c) n0 b (1 - (1 + cL/b)^(-1/c))."""
    L = np.asarray(L, dtype=float)
    if c == 0:
        return n0 * b * (1 - np.exp(-(1 + q) * L / b))
    p = (1 + q) * (1 + 1 / c)
    return p / (p - 1) * n0 * b * (1 - np.power(1 + c * L / b, 1 - p))


def localtime_arbitrager_gain(n0: float, b: float, c: float, L, q: float):
    """G_t = int q n dkappa = (q / (1 + q)) (-F_t); this is what F + G + H = 0 forces."""
    return q / (1 + q) * localtime_spent(n0, b, c, L, q)


def localtime_arbitrager_gain_as_displayed(n0: float, b: float, c: float, L, q: float):
    """The alternative p^2/(p^2 - 1) expression. It is nonzero at q = 0 and disagrees with the constraint."""
    p = (1 + q) * (1 + 1 / c)
    return p * p / (p * p - 1) * n0 * b * (1 - np.power(1 + c * np.asarray(L, dtype=float) / b, 1 - p))


def doubly_reflected_shares(n0, k1, k2, lower_local_time, upper_local_time, q: QProfile = QProfile()):
    """n = n0 exp((1 - q2)/K2 * L_upper - (1 + q1)/K1 * L_lower) with q2 = -q_at_upper."""
    q1, q2 = q.q_at_lower, -q.q_at_upper
    return n0 * np.exp((1 - q2) / k2 * np.asarray(upper_local_time) - (1 + q1) / k1 * np.asarray(lower_local_time))


def doubly_reflected_gain(n0, k1, k2, lower_local_times, upper_local_times, q: QProfile):
    """Arbitrager gain from per-level local times (sequences over even / odd fold levels).

    Exact only while a single wall has been active; with both walls the share count
    changes between the two sums and the expression is an approximation.
    """
    q1, q2 = q.q_at_lower, -q.q_at_upper
    lo = np.asarray(lower_local_times, dtype=float)
    up = np.asarray(upper_local_times, dtype=float)
    n = doubly_reflected_shares(n0, k1, k2, lo.sum(axis=0), up.sum(axis=0), q)
    upper_part = 0.0 if q2 == 0 else q2 * k2 / (1 - q2) * np.sum(1 - np.exp(-(1 - q2) * up / k2), axis=0)
    lower_part = q1 * k1 / (1 + q1) * np.sum(np.exp((1 + q1) * lo / k1) - 1, axis=0)
    return n * (upper_part + lower_part)


# ---------------------------------------------------------------- scale transforms


@dataclass(frozen=True)
class ScaleTransform:
    """Repurchase or issuance transform of the diffusion `diff` started at y0.

    f = s - s(0) + C (repurchase, increasing) or f = s(inf) - s + C (issuance, decreasing), C >= 0,
    so C = 0 is the minimal choice with f vanishing at the boundary the fundraiser defends.
    """
    diff: object
    y0: float
    mode: str
    C: float = 0.0

    def __post_init__(self):
        if self.mode not in ("repurchase", "issuance"):
            raise ParameterError("mode must be 'repurchase' or 'issuance'")
        if self.y0 <= 0 or self.C < 0 or not math.isfinite(self.C):
            raise ParameterError("need y0 > 0 and finite C >= 0")

    @property
    def sign(self) -> float:
        """Orientation of sigma: positive for repurchase, negative for issuance."""
        return 1.0 if self.mode == "repurchase" else -1.0

    @property
    def anchor(self) -> float:
        return scale_limit(self.diff, self.y0, "zero" if self.mode == "repurchase" else "inf")

    def s(self, y):
        return scale(self.diff, y, self.y0)

    def psi(self, y):
        return self.diff.lamperti(y, self.y0, self.sign)

    def psi_inverse(self, x):
        return self.diff.lamperti_inverse(x, self.y0, self.sign)

    def f(self, y):
        return self.sign * (self.s(y) - self.anchor) + self.C

    def f_prime(self, y):
        return self.sign * self.diff.scale_density(y, self.y0)

    def h(self, x):
        return self.f(self.psi_inverse(x))

    def sigma(self, y):
        return self.sign * np.abs(self.diff.sigma(y))

    def T_f(self, y):
        """f''/f' = -2 mu / sigma^2 (independent of the affine choice)."""
        y = np.asarray(y, dtype=float)
        return -2.0 * self.diff.mu(y) / self.diff.sigma(y) ** 2

    def T_h(self, x):
        """h''/h' at x = psi(y): sigma(y) T_f(y) + sigma'(y)."""
        y = self.psi_inverse(x)
        return self.sigma(y) * self.T_f(y) + self.sign * np.sign(self.diff.sigma(y)) * self.diff.dsigma(y)

    def endpoints(self) -> tuple[float, float]:
        """(l, r): the ordered endpoints of psi((0, inf))."""
        with np.errstate(all="ignore"):
            a = float(self.psi(np.array(0.0))) if self._psi_zero_finite() else -self.sign * math.inf
            b = float(self.psi(np.array(math.inf))) if self._psi_inf_finite() else self.sign * math.inf
        return (min(a, b), max(a, b))

    def _psi_zero_finite(self) -> bool:
        d = self.diff
        return d.p < 1 if isinstance(d, PowerLawDiffusion) else math.isfinite(float(self.psi(np.array(1e-300))))

    def _psi_inf_finite(self) -> bool:
        d = self.diff
        return d.p > 1 if isinstance(d, PowerLawDiffusion) else math.isfinite(float(self.psi(np.array(1e300))))


def build_scale_transform(diff, y0: float, mode: str, C: float = 0.0) -> ScaleTransform:
    zero_ok = diff.scale_at_zero_finite()
    inf_ok = diff.scale_at_inf_finite()
    if not zero_ok and not inf_ok:
        raise UnsupportedModelError("recurrent diffusion: both scale limits are infinite")
    if mode == "repurchase" and not zero_ok:
        raise UnsupportedModelError("repurchase needs a finite scale function at 0")
    if mode == "issuance" and not inf_ok:
        raise UnsupportedModelError("issuance needs a finite scale function at infinity")
    return ScaleTransform(diff, float(y0), mode, float(C))


@dataclass(frozen=True)
class TransformedCoefficients:
    sigma: Callable
    ordinary_drift: Callable  # drift seen with the price filtration only
    fundraiser_drift: Callable  # drift seen by the fundraiser, who also knows kappa
    kappa_rule: str  # "future_inf" (repurchase) or "future_sup" (issuance)


def transformed_model(st: ScaleTransform) -> TransformedCoefficients:
    """Ordinary drift -1/2 T_{1/f} sigma^2 = mu + sigma^2 f'/f; the fundraiser keeps mu and adds kappa."""
    diff = st.diff

    def ordinary(y):
        y = np.asarray(y, dtype=float)
        return diff.mu(y) + diff.sigma(y) ** 2 * st.f_prime(y) / st.f(y)

    return TransformedCoefficients(st.sigma, ordinary, diff.mu,
                                   "future_inf" if st.mode == "repurchase" else "future_sup")


def future_supremum(values: np.ndarray) -> np.ndarray:
    """M_k = max(values[k:]) over the simulated horizon."""
    v = np.asarray(values, dtype=float)
    return np.maximum.accumulate(v[..., ::-1], axis=-1)[..., ::-1]


def funding_schedule(path, st: ScaleTransform, n0: float, future_extreme: Optional[np.ndarray] = None) -> FundingTrack:
    """n_t = n0 (J_0 / J_t)^2, J the future infimum (repurchase) or supremum (issuance) of the price.

    Paths whose J_0 sits at the absorbing boundary keep n = n0.
    """
    if n0 <= 0:
        raise ParameterError("n0 must be positive")
    batch = P.as_batch(path)
    if future_extreme is None:
        if st.mode == "issuance":
            raise StructuralError("issuance schedule needs the future supremum; pass future_extreme")
        if batch.future_inf is None:
            raise StructuralError("path has no future_inf; call paths.future_infimum first")
        future_extreme = batch.future_inf
    j = np.atleast_2d(np.asarray(future_extreme, dtype=float))
    if j.shape != batch.values.shape:
        raise StructuralError("future extreme has the wrong shape")
    j0 = j[:, :1]
    alive = j0 > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        n = np.where(alive, n0 * (j0 / j) ** 2, n0)
    kappa = 2.0 * (j - j0)
    dk = np.diff(kappa, axis=1)
    s_star = np.where(dk != 0, j[:, 1:], batch.values[:, :-1])
    dn = np.diff(n, axis=1)
    n_bar = 0.5 * (n[:, :-1] + n[:, 1:])
    F = P._prepend_zero(np.cumsum(s_star * dn, axis=1))
    H = P._prepend_zero(np.cumsum(n_bar * dk, axis=1))
    G = np.zeros_like(F)
    s = batch.values
    if isinstance(path, P.SamplePath):
        return FundingTrack(batch.grid.times, s[0], kappa[0], n[0], F[0], H[0], G[0], (n * s)[0])
    return FundingTrack(batch.grid.times, s, kappa, n, F, H, G, n * s)


def with_kappa_from_future_extreme(path, future_extreme: Optional[np.ndarray] = None):
    """Copy of the path whose kappa is 2 (J_t - J_0), acting at the level J."""
    batch = P.as_batch(path)
    j = batch.future_inf if future_extreme is None else np.atleast_2d(future_extreme)
    if j is None:
        raise StructuralError("path has no future_inf")
    kappa = 2.0 * (j - j[:, :1])
    out = replace(batch, kappa=kappa, kappa_var=np.abs(kappa), aux={**batch.aux, "barrier": j})
    return out.path(0) if isinstance(path, P.SamplePath) else out
