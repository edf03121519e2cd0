"""Black-76 pricing in forward units, implied volatility, and IV^2 price derivatives.

Every price here is a *forward-unit* price: the fiat value of the option
divided by the fiat discount factor, so the Black formula needs no
discounting.  Array functions broadcast over numpy inputs; the scalar
wrappers validate their arguments and raise from :mod:`smilecal.errors`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import ndtr

from smilecal.errors import (
    AboveUpperBoundError,
    BelowLowerBoundError,
    ConvergenceError,
    DegenerateVolatilityError,
    InvalidInputError,
)

FloatArray = NDArray[np.float64]

SQRT_2PI = math.sqrt(2.0 * math.pi)
SIGMA_LO = 1e-8
SIGMA_HI_MAX = 1e4
PRICE_TOL = 1e-10


def norm_cdf(x: ArrayLike) -> FloatArray:
    """Standard normal CDF (Cephes ``ndtr``: erf/erfc split at |x| = 1/sqrt(2))."""
    return ndtr(x)


def norm_pdf(x: ArrayLike) -> FloatArray:
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-0.5 * x * x) / SQRT_2PI


@dataclass(frozen=True, slots=True)
class BlackInputs:
    forward: float
    strike: float
    tau: float
    sigma: float
    is_call: bool = True

    def __post_init__(self) -> None:
        vals = (self.forward, self.strike, self.tau, self.sigma)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInputError(f"non-finite Black inputs: {vals}")
        if self.forward <= 0 or self.strike <= 0 or self.tau <= 0:
            raise InvalidInputError("forward, strike and tau must be strictly positive")
        if self.sigma < 0:
            raise InvalidInputError("sigma must be non-negative")

    @property
    def log_moneyness(self) -> float:
        return math.log(self.strike / self.forward)


class Greeks(NamedTuple):
    vega: float
    vomma: float


class IvDerivatives(NamedTuple):
    """Implied vol at a price and the derivatives of IV^2 with respect to that price."""

    iv: float
    d1: float
    d2: float
    vega: float
    vomma: float


# ---------------------------------------------------------------------------
# array kernels
# ---------------------------------------------------------------------------


def d_plus_minus(forward, strike, tau, sigma) -> tuple[FloatArray, FloatArray]:
    v = np.asarray(sigma, dtype=np.float64) * np.sqrt(tau)
    with np.errstate(divide="ignore", invalid="ignore"):
        dp = np.log(np.divide(forward, strike)) / v + 0.5 * v
    return dp, dp - v


def black_price(forward, strike, tau, sigma, is_call) -> FloatArray:
    """Undiscounted Black price; puts are priced directly to avoid cancellation."""
    forward, strike, tau, sigma, is_call = np.broadcast_arrays(
        np.asarray(forward, dtype=np.float64),
        np.asarray(strike, dtype=np.float64),
        np.asarray(tau, dtype=np.float64),
        np.asarray(sigma, dtype=np.float64),
        np.asarray(is_call, dtype=bool),
    )
    dp, dm = d_plus_minus(forward, strike, tau, sigma)
    call = forward * ndtr(dp) - strike * ndtr(dm)
    put = strike * ndtr(-dm) - forward * ndtr(-dp)
    out = np.where(is_call, call, put)
    zero = sigma <= 0.0
    if np.any(zero):
        intrinsic = np.where(
            is_call, np.maximum(forward - strike, 0.0), np.maximum(strike - forward, 0.0)
        )
        out = np.where(zero, intrinsic, out)
    return out


def black_vega(forward, strike, tau, sigma) -> FloatArray:
    dp, _ = d_plus_minus(forward, strike, tau, sigma)
    return np.asarray(forward, dtype=np.float64) * np.sqrt(tau) * norm_pdf(dp)


def black_vomma(forward, strike, tau, sigma) -> FloatArray:
    dp, dm = d_plus_minus(forward, strike, tau, sigma)
    vega = np.asarray(forward, dtype=np.float64) * np.sqrt(tau) * norm_pdf(dp)
    return vega * dp * dm / np.asarray(sigma, dtype=np.float64)


def price_bounds(forward, strike, is_call) -> tuple[FloatArray, FloatArray]:
    """No-arbitrage interval (lower, upper) of a forward-unit option price."""
    forward = np.asarray(forward, dtype=np.float64)
    strike = np.asarray(strike, dtype=np.float64)
    lower = np.where(is_call, np.maximum(forward - strike, 0.0), np.maximum(strike - forward, 0.0))
    upper = np.where(is_call, forward, strike)
    return lower, upper


def implied_vol_array(
    price,
    forward,
    strike,
    tau,
    is_call,
    *,
    tol: float = PRICE_TOL,
    max_iter: int = 100,
) -> FloatArray:
    """Vectorised safeguarded Newton inversion of the Black formula.

    Entries outside the open arbitrage interval come back as NaN, entries that
    fail to converge as NaN too; the scalar :func:`implied_vol` turns those into
    exceptions.  In-the-money inputs are mapped to the out-of-the-money option
    through parity so the solver always works on time value.
    """
    price, forward, strike, tau, is_call = np.broadcast_arrays(
        np.asarray(price, dtype=np.float64),
        np.asarray(forward, dtype=np.float64),
        np.asarray(strike, dtype=np.float64),
        np.asarray(tau, dtype=np.float64),
        np.asarray(is_call, dtype=bool),
    )
    shape = price.shape
    price, forward, strike, tau, is_call = (
        a.ravel().copy() for a in (price, forward, strike, tau, is_call)
    )
    lower, upper = price_bounds(forward, strike, is_call)
    valid = (price > lower) & (price < upper) & np.isfinite(price)

    # work on the OTM side: c - p = F - K
    otm_call = strike >= forward
    target = price.copy()
    target = np.where(is_call & ~otm_call, price - (forward - strike), target)
    target = np.where(~is_call & otm_call, price + (forward - strike), target)
    use_call = otm_call

    k = np.log(strike / forward)
    sqrt_tau = np.sqrt(tau)
    # start at the inflection point of price(sigma), which makes Newton monotone
    sigma = np.sqrt(2.0 * np.abs(k) / tau)
    atm_guess = target / (0.4 * forward * sqrt_tau)
    sigma = np.where(sigma < 1e-3, np.maximum(atm_guess, 1e-3), sigma)

    lo = np.full_like(sigma, SIGMA_LO)
    hi = np.maximum(2.0 * sigma, 1.0)
    # grow the upper end of the bracket geometrically
    for _ in range(60):
        short = valid & (black_price(forward, strike, tau, hi, use_call) < target)
        if not np.any(short):
            break
        hi = np.where(short, hi * 2.0, hi)
    valid &= hi <= SIGMA_HI_MAX
    sigma = np.clip(sigma, lo, hi)

    abs_tol = tol * np.maximum(1.0, forward)
    done = ~valid
    converged = np.zeros_like(valid)
    for _ in range(max_iter):
        active = ~done
        if not np.any(active):
            break
        s = sigma[active]
        f = black_price(forward[active], strike[active], tau[active], s, use_call[active]) - target[active]
        l, h = lo[active], hi[active]
        l = np.where(f < 0.0, s, l)
        h = np.where(f > 0.0, s, h)
        vega = forward[active] * sqrt_tau[active] * norm_pdf(d_plus_minus(forward[active], strike[active], tau[active], s)[0])
        with np.errstate(divide="ignore", invalid="ignore"):
            step = f / vega
        newton = s - step
        bad = ~np.isfinite(newton) | (newton <= l) | (newton >= h)
        new = np.where(bad, 0.5 * (l + h), newton)
        small = (np.abs(f) <= abs_tol[active]) & (np.abs(new - s) <= 1e-14 * np.maximum(1.0, s))
        flat = (h - l) <= 4e-16 * h
        fin = small | (f == 0.0) | flat
        new = np.where(f == 0.0, s, new)

        idx = np.flatnonzero(active)
        sigma[idx] = new
        lo[idx] = l
        hi[idx] = h
        converged[idx] = fin & (np.abs(f) <= abs_tol[active])
        done[idx] = fin

    out = np.where(valid & converged, sigma, np.nan)
    return out.reshape(shape)


def iv2_derivative_arrays(price, forward, strike, tau, is_call) -> tuple[FloatArray, ...]:
    """(iv, d/dP IV^2, d2/dP2 IV^2, vega) for arrays of prices."""
    iv = implied_vol_array(price, forward, strike, tau, is_call)
    vega = black_vega(forward, strike, tau, iv)
    k = np.log(np.divide(strike, forward))
    w = iv * iv * tau
    d1 = 2.0 * iv / vega
    d2 = (2.0 / vega**2) * (-(k * k) / w + 0.25 * w + 1.0)
    return iv, d1, d2, vega


# ---------------------------------------------------------------------------
# validated scalar API
# ---------------------------------------------------------------------------


def black_price_fwd(inputs: BlackInputs) -> float:
    """Forward-unit Black price F N(d+) - K N(d-) (or its put mirror)."""
    return float(black_price(inputs.forward, inputs.strike, inputs.tau, inputs.sigma, inputs.is_call))


def greeks(inputs: BlackInputs) -> Greeks:
    if inputs.sigma == 0.0:
        raise DegenerateVolatilityError("vega/vomma undefined at sigma = 0")
    vega = float(black_vega(inputs.forward, inputs.strike, inputs.tau, inputs.sigma))
    vomma = float(black_vomma(inputs.forward, inputs.strike, inputs.tau, inputs.sigma))
    return Greeks(vega, vomma)


def _check_price(price: float, forward: float, strike: float, tau: float, is_call: bool) -> None:
    if not all(math.isfinite(v) for v in (price, forward, strike, tau)):
        raise InvalidInputError("non-finite input")
    if forward <= 0 or strike <= 0 or tau <= 0:
        raise InvalidInputError("forward, strike and tau must be strictly positive")
    lower, upper = price_bounds(forward, strike, is_call)
    if price <= lower:
        raise BelowLowerBoundError(f"price {price!r} <= lower bound {float(lower)!r}")
    if price >= upper:
        raise AboveUpperBoundError(f"price {price!r} >= upper bound {float(upper)!r}")


def implied_vol(
    price: float, forward: float, strike: float, tau: float, is_call: bool = True
) -> float:
    """Black volatility reproducing ``price`` (forward units)."""
    _check_price(price, forward, strike, tau, is_call)
    sigma = float(implied_vol_array(price, forward, strike, tau, is_call))
    if not math.isfinite(sigma):
        raise ConvergenceError(
            f"implied vol did not converge for price={price}, F={forward}, K={strike}, tau={tau}"
        )
    return sigma


def iv2_derivs(
    price: float, forward: float, strike: float, tau: float, is_call: bool = True
) -> IvDerivatives:
    """IV and the first two price-derivatives of IV^2.

    d1 = 2 IV / vega and d2 = (2 / vega^2) (-k^2 / w + w / 4 + 1), w = IV^2 tau.
    """
    iv = implied_vol(price, forward, strike, tau, is_call)
    g = greeks(BlackInputs(forward, strike, tau, iv, is_call))
    k = math.log(strike / forward)
    w = iv * iv * tau
    d1 = 2.0 * iv / g.vega
    d2 = (2.0 / g.vega**2) * (-(k * k) / w + 0.25 * w + 1.0)
    return IvDerivatives(iv, d1, d2, g.vega, g.vomma)


def iv_sensitivity(
    price: float, forward: float, strike: float, tau: float, is_call: bool = True
) -> float:
    """Relative IV sensitivity: d IV / d eps of price (1 + eps) at eps = 0."""
    iv = implied_vol(price, forward, strike, tau, is_call)
    vega = float(black_vega(forward, strike, tau, iv))
    return price / vega
