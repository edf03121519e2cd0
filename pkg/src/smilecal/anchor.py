"""Debiasing anchor price inside the bid-ask interval.

The mid-price is a noisy estimate of the efficient price, with noise uniform
over the spread.  Because P -> IV^2(P) is curved, IV^2(mid) is biased at
second order in the tick.  Shifting the mid by ``nu * spread`` with

    rho = -d/dP IV^2(mid) / (d2/dP2 IV^2(mid) * spread)
    nu  = s^2 sgn(rho) / (|rho| + sqrt(rho^2 - s^2)),    s^2 = Var(U) = 1/12

cancels that term, leaving an O(tick^3) bias.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from smilecal.errors import InvalidInputError, InvalidPointError
from smilecal.market_data import MarketPoint
from smilecal.pricing import black_vega, iv2_derivative_arrays, price_bounds, implied_vol

UNIFORM_STD = 1.0 / math.sqrt(12.0)


@dataclass(frozen=True, slots=True)
class AnchorResult:
    rho: float
    nu: float
    anchor: float
    clamped: bool
    mid_iv: float


def nu_from_rho(rho, u_std: float = UNIFORM_STD):
    """Offset (in spread units) of the anchor from the mid.

    Infinite rho gives 0.  For |rho| < u_std the root is complex; the value is
    clamped to sgn(rho) * u_std, its limit on the admissible boundary.
    """
    rho = np.asarray(rho, dtype=np.float64)
    s2 = u_std * u_std
    a = np.abs(rho)
    with np.errstate(invalid="ignore", over="ignore"):
        disc = np.sqrt(np.maximum(rho * rho - s2, 0.0))
        nu = np.sign(rho) * s2 / (a + disc)
    nu = np.where(np.isinf(rho), 0.0, nu)
    nu = np.where(a < u_std, np.sign(rho) * u_std, nu)
    return nu if nu.ndim else float(nu)


def anchor_arrays(mid, spread, forward, strike, tau, is_call, u_std: float = UNIFORM_STD):
    """Vectorised anchor computation: returns (anchor, rho, nu, clamped, mid_iv)."""
    mid = np.asarray(mid, dtype=np.float64)
    spread = np.asarray(spread, dtype=np.float64)
    iv, d1, d2, _ = iv2_derivative_arrays(mid, forward, strike, tau, is_call)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(d2 == 0.0, np.inf, -d1 / (d2 * spread))
    nu = np.asarray(nu_from_rho(rho, u_std))
    clamped = np.abs(rho) < u_std
    return mid + spread * nu, rho, nu, clamped, iv


def compute_anchor(p: MarketPoint, u_std: float = UNIFORM_STD) -> AnchorResult:
    lower, upper = p.lower_bound, p.upper_bound
    if not (lower < p.mid < upper) or p.spread <= 0:
        raise InvalidPointError(f"mid {p.mid} not strictly inside ({lower}, {upper}) or empty spread")
    anc, rho, nu, clamped, iv = anchor_arrays(p.mid, p.spread, p.forward, p.strike, p.tau, p.is_call, u_std)
    if not np.isfinite(iv):
        raise InvalidPointError(f"implied vol undefined at mid {p.mid}")
    return AnchorResult(float(rho), float(nu), float(anc), bool(clamped), float(iv))


# ---------------------------------------------------------------------------
# applicability of the |rho| >= 1/sqrt(12) condition
# ---------------------------------------------------------------------------


def rho_at_vol(sigma, k, tau, forward, spread):
    """rho written as a function of the volatility: -sigma vega / ((-k^2/w + w/4 + 1) spread)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    strike = forward * np.exp(k)
    w = sigma * sigma * tau
    vega = black_vega(forward, strike, tau, sigma)
    with np.errstate(divide="ignore"):
        return -sigma * vega / ((-(k * k) / w + 0.25 * w + 1.0) * spread)


def min_implied_vol(k: float, tau: float, forward: float, tick_fwd: float, n_ticks: int = 1) -> float:
    """Volatility at which the OTM option at log-moneyness ``k`` is worth ``n_ticks`` ticks."""
    if n_ticks < 1:
        raise InvalidInputError("n_ticks must be >= 1")
    is_call = k >= 0
    strike = forward * math.exp(k)
    target = n_ticks * tick_fwd
    _, upper = price_bounds(forward, strike, is_call)
    if target >= float(upper):
        raise InvalidInputError(f"target price {target} above the upper bound {float(upper)}")
    return implied_vol(target, forward, strike, tau, is_call)


@dataclass(frozen=True)
class ConditionReport:
    tau: float
    tick_fwd: float
    spread_ticks: int
    n_ticks: int
    k: NDArray[np.float64]
    sigma_bar: NDArray[np.float64]
    rho: NDArray[np.float64]
    rho_increasing: bool

    @property
    def min_abs_rho(self) -> float:
        return float(np.min(np.abs(self.rho)))

    @property
    def condition_met(self) -> bool:
        return self.min_abs_rho >= UNIFORM_STD

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "tick_fwd": self.tick_fwd,
            "spread_ticks": self.spread_ticks,
            "n_ticks": self.n_ticks,
            "min_abs_rho": self.min_abs_rho,
            "threshold": UNIFORM_STD,
            "condition_met": self.condition_met,
            "rho_increasing": self.rho_increasing,
        }

    def write_csv(self, path: str | os.PathLike[str]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "sigma_bar", "rho"])
            for row in zip(self.k, self.sigma_bar, self.rho):
                w.writerow([f"{v:.10g}" for v in row])


def rho_condition_report(
    tau: float,
    tick_fwd: float,
    spread_ticks: int = 1,
    n_ticks: int = 1,
    *,
    forward: float = 1.0,
    n_grid: int = 201,
    n_vol: int = 200,
    sigma_max: float = 3.0,
) -> ConditionReport:
    """Scan k in [-2 sqrt(tau), 2 sqrt(tau)] at the worst-case (minimal) volatility.

    Any quote worth at least ``n_ticks`` ticks has an implied vol above
    ``min_implied_vol(k)``; the scan checks |rho| >= 1/sqrt(12) there, and that
    rho increases with the vol on the concave branch, which is what makes the
    minimal vol the worst case.
    """
    if not tau > 0:
        raise InvalidInputError("tau must be > 0")
    if not tick_fwd > 0:
        raise InvalidInputError("tick must be > 0")
    half = 2.0 * math.sqrt(tau)
    ks = np.linspace(-half, half, n_grid)
    spread = spread_ticks * tick_fwd
    sig = np.array([min_implied_vol(float(k), tau, forward, tick_fwd, n_ticks) for k in ks])
    rho = rho_at_vol(sig, ks, tau, forward, spread)

    increasing = all(
        rho_increasing_in_vol(float(k), tau, forward, spread, float(s0), sigma_max, n_vol)
        for k, s0 in zip(ks, sig)
        if k != 0.0
    )
    return ConditionReport(tau, tick_fwd, spread_ticks, n_ticks, ks, sig, rho, increasing)


def rho_increasing_in_vol(
    k: float, tau: float, forward: float, spread: float,
    sigma_lo: float, sigma_hi: float = 3.0, n_vol: int = 200,
) -> bool:
    """Check sigma -> rho(sigma) is increasing on the concave branch of IV^2.

    Small |rho| only occurs where P -> IV^2(P) is concave (rho > 0, low vols,
    OTM strikes); that branch ends at a pole after which rho is large and
    negative.  Monotonicity is checked on [sigma_lo, sigma_hi] up to the pole.
    """
    if sigma_lo >= sigma_hi:
        return True
    vols = np.geomspace(sigma_lo, sigma_hi, n_vol)
    w = vols * vols * tau
    curv = -(k * k) / w + 0.25 * w + 1.0
    r = rho_at_vol(vols, k, tau, forward, spread)
    concave = (curv[1:] < 0.0) & (curv[:-1] < 0.0)
    return bool(np.all(np.diff(r)[concave] > 0.0))
