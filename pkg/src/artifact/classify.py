"""No-arbitrage regime classification for diffusions absorbed at 0, before and after funding transforms.

Three laws are compared: the original diffusion (P_f), the diffusion seen by ordinary investors
after the repurchase or issuance transform (P_1f), and the driftless diffusion with the same
volatility (Q). Each verdict combines the finiteness of the drift integral int_0^1 y T(y)^2 dy with
accessibility of 0:
    NA    <=> drift integral finite or 0 Q-inaccessible
    NA1   <=> drift integral finite or 0 P-inaccessible
    NFLVR <=> drift integral finite or 0 both P- and Q-inaccessible
Power-law families are decided by exponent arithmetic; other coefficients by decade quadrature.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .diffusions import PowerLawDiffusion, _quad
from .errors import IndeterminateError, ParameterError, StructuralError
from .funding import ScaleTransform, build_scale_transform

CONVERGES, DIVERGES = "converges", "diverges"
HOLDS, FAILS = "holds", "fails"
ACCESSIBLE, INACCESSIBLE = "accessible", "inaccessible"
INDETERMINATE = "indeterminate"
INCONSISTENT_FLAG = "PAPER-INCONSISTENT"
MEASURES = ("P_f", "P_1f", "Q")


@dataclass(frozen=True)
class NumericFamily:
    """Coefficients given as functions. Declared exponents near 0 switch to exponent arithmetic."""
    mu_fn: Callable
    sigma_fn: Callable
    mu_exponent: Optional[float] = None
    sigma_exponent: Optional[float] = None

    def __post_init__(self):
        for e in (self.mu_exponent, self.sigma_exponent):
            if e is not None and not math.isfinite(e):
                raise ParameterError("declared exponents must be finite")

    def mu(self, y):
        return np.asarray(self.mu_fn(np.asarray(y, dtype=float)), dtype=float) * np.ones_like(y, dtype=float)

    def sigma(self, y):
        return np.asarray(self.sigma_fn(np.asarray(y, dtype=float)), dtype=float) * np.ones_like(y, dtype=float)

    def declared(self) -> Optional[PowerLawDiffusion]:
        """Power-law equivalent near 0 from the declared exponents and coefficients read at y = 1e-8."""
        if self.mu_exponent is None or self.sigma_exponent is None:
            return None
        y = 1e-8
        mu0 = float(self.mu(y)) / y ** self.mu_exponent
        sigma0 = abs(float(self.sigma(y))) / y ** self.sigma_exponent
        return PowerLawDiffusion(mu0, self.mu_exponent, sigma0, self.sigma_exponent)


# ---------------------------------------------------------------- numeric convergence of int_0^1


DECADES = np.arange(2, 11)  # decide from the increments over [1e-(k+1), 1e-k]
_POINTS_PER_DECADE = 400


def _log_grid():
    u = np.linspace(math.log(10.0 ** -(DECADES[-1] + 1)), 0.0, (DECADES[-1] + 1) * _POINTS_PER_DECADE + 1)
    return u, np.exp(u)


def _decade_log_increments(u: np.ndarray, log_integrand: np.ndarray) -> np.ndarray:
    """log of int over each decade of exp(log_integrand(y)) dy, with y = e^u."""
    du = u[1] - u[0]
    lw = log_integrand + u + math.log(du)
    out = []
    for k in DECADES:
        lo, hi = -(k + 1) * math.log(10.0), -k * math.log(10.0)
        sel = (u >= lo - 1e-12) & (u <= hi + 1e-12)
        out.append(np.logaddexp.reduce(lw[sel]))
    return np.array(out)


def decide_from_increments(log_inc: np.ndarray, r2_min: float = 0.999, band: tuple = (0.02, 0.05)) -> str:
    """Converges / diverges from decade increments D_k of int_eps^1 as eps shrinks.

    For an integrand ~ y^beta the increments scale as 10^(-k(beta+1)); a fit with R^2 >= r2_min
    decides by the sign of beta + 1. Exponents in the band are too close to call.
    """
    if np.all(np.isneginf(log_inc)):
        return CONVERGES
    if np.any(np.isposinf(log_inc)) or np.any(np.isnan(log_inc)):
        return DIVERGES
    if np.any(np.isneginf(log_inc)):
        raise IndeterminateError("integrand vanishes on some decades only")
    y = log_inc / math.log(10.0)
    k = DECADES.astype(float)
    slope, icpt = np.polyfit(k, y, 1)
    resid = y - (slope * k + icpt)
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss if ss > 0 else 1.0
    gamma = -slope
    flat = np.ptp(y) < 0.1  # nearly constant increments make R^2 meaningless
    if r2 < r2_min and not flat:
        d1 = np.diff(y)
        if np.all(d1 < 0) and np.all(np.diff(d1) < 0):
            return CONVERGES  # faster than any power
        if np.all(d1 > 0) and np.all(np.diff(d1) > 0):
            return DIVERGES
        raise IndeterminateError(f"no power-law behaviour near 0 (R^2 = {r2:.5f})")
    if gamma <= band[0]:
        return DIVERGES
    if gamma >= band[1]:
        return CONVERGES
    raise IndeterminateError(f"fitted exponent {gamma:.4f} too close to the convergence threshold")


def _safe_log_abs(x):
    with np.errstate(divide="ignore"):
        return np.log(np.abs(x))


def _numeric_condition_36(fam) -> str:
    u, y = _log_grid()
    r = 2.0 * fam.mu(y) / fam.sigma(y) ** 2
    return decide_from_increments(_decade_log_increments(u, np.log(y) + 2 * _safe_log_abs(r)))


def _numeric_condition_37(fam) -> str:
    u, y = _log_grid()
    conv = decide_from_increments(_decade_log_increments(u, np.log(y) - 2 * _safe_log_abs(fam.sigma(y))))
    return FAILS if conv == CONVERGES else HOLDS


def _numeric_accessible(fam, driftless: bool) -> str:
    """Feller test in the form int_0^1 s'(x) int_x^1 dy / (sigma^2 s'(y)) dx < inf."""
    u, y = _log_grid()
    du = u[1] - u[0]
    sig2_log = 2 * _safe_log_abs(fam.sigma(y))
    if driftless:
        log_sp = np.zeros_like(u)
    else:
        r = 2.0 * fam.mu(y) / fam.sigma(y) ** 2
        w = r * y * du  # int_x^1 r(y) dy on the log grid, trapezoid
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (w[1:] + w[:-1])[::-1])])[::-1]
        log_sp = cum  # log s'(x) normalized to s'(1) = 1
        if np.max(np.abs(np.diff(log_sp))) > 1.0:
            raise IndeterminateError("scale density varies too fast near 0 to resolve on the grid")
    inner = -log_sp - sig2_log + u + math.log(du)
    log_m = np.logaddexp.accumulate(inner[::-1])[::-1]
    conv = decide_from_increments(_decade_log_increments(u, log_sp + log_m))
    return ACCESSIBLE if conv == CONVERGES else INACCESSIBLE


# ---------------------------------------------------------------- exponent arithmetic


def _as_power_law(fam):
    if isinstance(fam, PowerLawDiffusion):
        return fam
    if isinstance(fam, NumericFamily):
        return fam.declared()
    raise ParameterError(f"unsupported family {type(fam).__name__}")


def condition_36(fam) -> str:
    """int_0^1 y (2 mu / sigma^2)^2 dy: converges or diverges."""
    pl = _as_power_law(fam)
    if pl is None:
        return _numeric_condition_36(fam)
    return CONVERGES if pl.mu0 == 0 or pl.exponent > -1 else DIVERGES


def condition_37(fam) -> str:
    """int_0^1 y / sigma^2 dy = inf holds (0 Q-inaccessible) or fails."""
    pl = _as_power_law(fam)
    if pl is None:
        return _numeric_condition_37(fam)
    return HOLDS if pl.p >= 1 else FAILS


def _pf_accessible(pl: PowerLawDiffusion) -> bool:
    a, e = pl.drift_ratio, pl.exponent
    if a == 0 or e > -1:
        return pl.p < 1
    if e == -1:
        return a < 1 and pl.p < 1
    return a < 0 and pl.q < 1


def _transformed(pl: PowerLawDiffusion, mode: str, C: float) -> tuple[bool, bool]:
    """(drift integral finite for 1/f, 0 accessible for P_1f) under the given transform."""
    a, e = pl.drift_ratio, pl.exponent
    if mode == "repurchase":
        if not pl.scale_at_zero_finite():
            raise StructuralError("repurchase needs a finite scale function at 0")
        if C == 0:
            return False, False  # 1/f blows up at 0: 0 becomes an entrance and the drift integral diverges
        return (a == 0 or e > -1), _pf_accessible(pl)
    if not pl.scale_at_inf_finite():
        raise StructuralError("issuance needs a finite scale function at infinity")
    if e == -1:  # then a > 1: f ~ y^(1-a) near 0 and T_{1/f} ~ (a - 2) / y
        return a == 2, pl.p < 1
    return True, pl.p < 1  # e > -1, a > 0: f(0) finite, f'/f bounded


def accessibility(fam, which: str, mode: str = "repurchase", C: float = 0.0) -> str:
    """Whether 0 is reached in finite time under P_f, P_1f (after the transform) or Q."""
    if which not in MEASURES:
        raise ParameterError(f"which must be one of {MEASURES}")
    pl = _as_power_law(fam)
    if which == "Q":
        if pl is None:
            return _numeric_accessible(fam, driftless=True)
        return ACCESSIBLE if pl.p < 1 else INACCESSIBLE
    if which == "P_f":
        if pl is None:
            return _numeric_accessible(fam, driftless=False)
        return ACCESSIBLE if _pf_accessible(pl) else INACCESSIBLE
    if pl is None:
        pl = fit_power_law(fam)
    return ACCESSIBLE if _transformed(pl, mode, C)[1] else INACCESSIBLE


def fit_power_law(fam, r2_min: float = 0.999) -> PowerLawDiffusion:
    """Local power laws of mu and sigma near 0 fitted over the decision decades."""
    y = 10.0 ** -np.linspace(DECADES[0], DECADES[-1] + 1, 60)
    out = []
    for vals in (fam.mu(y), np.abs(fam.sigma(y))):
        if np.all(vals == 0):
            out.append((0.0, 0.0))
            continue
        if np.any(vals == 0) or np.any(np.sign(vals) != np.sign(vals[0])):
            raise IndeterminateError("coefficient changes sign near 0")
        ly, lv = np.log(y), np.log(np.abs(vals))
        slope, icpt = np.polyfit(ly, lv, 1)
        resid = lv - (slope * ly + icpt)
        ss = np.sum((lv - lv.mean()) ** 2)
        if ss > 0 and 1 - np.sum(resid ** 2) / ss < r2_min:
            raise IndeterminateError("coefficient is not a power law near 0")
        expo = round(slope * 1e6) / 1e6
        out.append((float(np.sign(vals[0]) * np.exp(icpt)), float(expo)))
    (mu0, q), (sigma0, p) = out
    return PowerLawDiffusion(mu0, q, sigma0, p)


# ---------------------------------------------------------------- reports


@dataclass
class RegimeReport:
    cond36: dict  # drift integral per measure P_f, P_1f: converges / diverges
    cond37: str
    accessible0: dict
    verdicts: dict
    bankruptcy_possible: dict
    recommendation: str
    transform: Optional[dict] = None
    flags: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        rows = [f"{'measure':<6} {'drift int':<13} {'0':<14} {'NA':<6} {'NA1':<6} {'NFLVR':<6}"]
        for m in ("P_f", "P_1f"):
            v = self.verdicts.get(m)
            if v is None:
                rows.append(f"{m:<6} (no transform)")
                continue
            nflvr = str(v["NFLVR"]) + (" *" if f"{m}.NFLVR" in self.flags else "")
            rows.append(f"{m:<6} {self.cond36[m]:<13} {self.accessible0[m]:<14} "
                        f"{str(v['NA']):<6} {str(v['NA1']):<6} {nflvr:<6}")
        rows.append(f"Q      int y/sigma^2 = inf {self.cond37}; 0 {self.accessible0['Q']}")
        rows.append(f"recommended strategy: {self.recommendation}")
        for k, v in self.flags.items():
            rows.append(f"* {k}: {v}")
        return "\n".join(rows)


def verdicts_from(cond36: str, p_access: str, q_access: str) -> dict:
    vals = (cond36, p_access, q_access)
    if INDETERMINATE in vals:
        return {"NA": None, "NA1": None, "NFLVR": None}
    c = cond36 == CONVERGES
    p_in = p_access == INACCESSIBLE
    q_in = q_access == INACCESSIBLE
    out = {"NA": c or q_in, "NA1": c or p_in, "NFLVR": c or (p_in and q_in)}
    if out["NFLVR"] and not (out["NA"] and out["NA1"]):
        raise StructuralError("verdicts violate NFLVR => NA and NA1")
    return out


def _guard(fn, *args):
    try:
        return fn(*args)
    except IndeterminateError:
        return INDETERMINATE


def _scale_ends(fam):
    pl = _as_power_law(fam)
    if pl is None:
        try:
            pl = fit_power_law(fam)
        except IndeterminateError:
            return None, None
    return pl.scale_at_zero_finite(), pl.scale_at_inf_finite()


def _is_squared_bessel_below_two(pl) -> bool:
    return (pl is not None and pl.q == 0 and pl.p == 0.5 and abs(pl.sigma0) == 2.0 and 0 < pl.mu0 < 2)


def classify(fam, mode: Optional[str] = None, C: float = 0.0) -> RegimeReport:
    """Full report for the original model and, when a transform applies, the funded model.

    With mode=None the recommended strategy is used: repurchase when 0 is P_f-accessible and the
    scale function is finite at 0; otherwise issuance when the scale function is finite at infinity
    and the issued model cannot reach 0.
    """
    c36 = _guard(condition_36, fam)
    c37 = _guard(condition_37, fam)
    acc_q = _guard(accessibility, fam, "Q")
    acc_p = _guard(accessibility, fam, "P_f")
    zero_ok, inf_ok = _scale_ends(fam)

    def transformed(m):
        pl = _as_power_law(fam)
        if pl is None:
            pl = fit_power_law(fam)
        conv, acc = _transformed(pl, m, C)
        return (CONVERGES if conv else DIVERGES), (ACCESSIBLE if acc else INACCESSIBLE)

    recommendation = "none"
    if acc_p == ACCESSIBLE and zero_ok:
        recommendation = "repurchase"
    elif inf_ok:
        try:
            if transformed("issuance")[1] == INACCESSIBLE:
                recommendation = "issuance"
        except IndeterminateError:
            pass
    use = mode if mode is not None else (recommendation if recommendation != "none" else None)
    if use is not None and use not in ("repurchase", "issuance"):
        raise ParameterError("mode must be 'repurchase', 'issuance' or None")

    cond36 = {"P_f": c36, "P_1f": None}
    access = {"P_f": acc_p, "P_1f": None, "Q": acc_q}
    verdicts = {"P_f": verdicts_from(c36, acc_p, acc_q), "P_1f": None}
    transform = None
    if use is not None:
        try:
            c36_t, acc_t = transformed(use)
        except IndeterminateError:
            c36_t, acc_t = INDETERMINATE, INDETERMINATE
        except StructuralError as exc:
            if mode is not None:
                raise
            c36_t = acc_t = None
            transform = {"mode": use, "C": C, "error": str(exc)}
        if c36_t is not None:
            cond36["P_1f"], access["P_1f"] = c36_t, acc_t
            verdicts["P_1f"] = verdicts_from(c36_t, acc_t, acc_q)
            transform = {"mode": use, "C": C}
    bankrupt = {m: (None if access[m] in (None, INDETERMINATE) else access[m] == ACCESSIBLE) for m in ("P_f", "P_1f")}
    flags = {}
    if transform and transform.get("mode") == "repurchase" and _is_squared_bessel_below_two(_as_power_law(fam)):
        flags["P_1f.NFLVR"] = (f"{INCONSISTENT_FLAG}: NFLVR is often claimed for the squared-Bessel "
                               "repurchase, but the accessibility criterion gives false because 0 is Q-accessible")
    return RegimeReport(cond36, c37, access, verdicts, bankrupt, recommendation, transform, flags)


def duality_residual(st: ScaleTransform, eps, upper: float = 1.0) -> float:
    """Spread of the implied constant c in
    1/4 int_eps^1 y T_f^2 = 1/4 int_eps^1 y T_{1/f}^2 + log f(eps) - eps f'(eps)/f(eps) + c
    over the given eps values (0 when the identity holds)."""
    eps = np.atleast_1d(np.asarray(eps, dtype=float))
    if np.any(eps <= 0) or np.any(eps >= upper):
        raise ParameterError("eps must lie in (0, upper)")

    def ratio(y):
        return float(st.f_prime(np.array(y)) / st.f(np.array(y)))

    def t_f(y):
        return float(st.T_f(np.array(y)))

    def lhs(y):
        return 0.25 * y * t_f(y) ** 2

    def rhs(y):
        return 0.25 * y * (t_f(y) - 2 * ratio(y)) ** 2

    def integral(fn, lo):  # finite on [eps, upper]; the absolute floor handles integrands that cancel to 0
        return integrate.quad(fn, lo, upper, epsabs=1e-14, epsrel=1e-12, limit=400)[0]

    cs = []
    for e in eps:
        a = integral(lhs, e)
        b = integral(rhs, e)
        cs.append(a - b - math.log(abs(float(st.f(np.array(e))))) + e * ratio(e))
    return float(max(cs) - min(cs))


def duality_constant(st: ScaleTransform, upper: float = 1.0) -> float:
    """Closed value of c: f'(upper) upper / f(upper) - log f(upper)."""
    f1 = float(st.f(np.array(upper)))
    return upper * float(st.f_prime(np.array(upper))) / f1 - math.log(abs(f1))


def transform_for(fam, y0: float, mode: str, C: float = 0.0) -> ScaleTransform:
    pl = _as_power_law(fam)
    if pl is None:
        raise ParameterError("scale transforms need a power-law or declared family")
    return build_scale_transform(pl, y0, mode, C)
