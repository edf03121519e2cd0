"""Beta(a, 1) imputation of prices across the bid-ask interval.

Each quote is replaced by N prices at the cell midpoints x_j = (j - 1/2) / N
of [bid, ask], weighted by the Beta(a, 1) mass of the cell,
``(j/N)^a - ((j-1)/N)^a``.  The shape ``a`` is solved so that the weighted
mean of IV^2 over the N prices equals IV^2 at the anchor price; the mean is
strictly increasing in ``a`` which makes bisection safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.typing import NDArray

from smilecal.anchor import AnchorResult
from smilecal.errors import InvalidInputError, InvalidPointError
from smilecal.market_data import MarketPoint
from smilecal.pricing import implied_vol_array

DEFAULT_N = 100
A_MIN = 1e-6
A_MAX = 1e6
_LOG_TOL = 1e-12
_MAX_ITER = 200


class BetaShape(NamedTuple):
    a: float
    clamped: bool


@dataclass(frozen=True)
class AugmentedQuote:
    source: MarketPoint
    prices: NDArray[np.float64]
    weights: NDArray[np.float64]
    iv2: NDArray[np.float64]
    beta_a: float
    clamped_edge: bool

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.prices.tolist(), self.weights.tolist()))

    @property
    def total_variance(self) -> NDArray[np.float64]:
        return self.source.tau * self.iv2


def cell_midpoints(n: int) -> NDArray[np.float64]:
    return (np.arange(1, n + 1) - 0.5) / n


def beta_cell_weights(a: float, n: int) -> NDArray[np.float64]:
    """Beta(a, 1) probability of each of the n cells of [0, 1]."""
    if not a > 0:
        raise InvalidInputError(f"Beta shape must be > 0, got {a}")
    if n < 1:
        raise InvalidInputError("point count must be >= 1")
    cdf = (np.arange(n + 1) / n) ** a
    return np.diff(cdf)


def _cell_weights_rows(log_a: NDArray[np.float64], n: int) -> NDArray[np.float64]:
    edges = np.arange(n + 1) / n
    return np.diff(edges[None, :] ** np.exp(log_a)[:, None], axis=1)


def solve_beta_shapes(phi: NDArray[np.float64], target: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.bool_]]:
    """Row-wise bisection on log(a): sum_j w_j(a) phi[i, j] = target[i].

    ``phi`` must be increasing along each row.  Targets outside the reachable
    range are clamped to the bracket end and flagged.
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    target = np.atleast_1d(np.asarray(target, dtype=np.float64))
    m, n = phi.shape
    lo = np.full(m, math.log(A_MIN))
    hi = np.full(m, math.log(A_MAX))

    mean_lo = np.sum(_cell_weights_rows(lo, n) * phi, axis=1)
    mean_hi = np.sum(_cell_weights_rows(hi, n) * phi, axis=1)
    below = target <= mean_lo
    above = target >= mean_hi
    done = below | above
    for _ in range(_MAX_ITER):
        if np.all(done):
            break
        mid = 0.5 * (lo + hi)
        err = np.sum(_cell_weights_rows(mid, n) * phi, axis=1) - target
        lo = np.where(~done & (err < 0), mid, lo)
        hi = np.where(~done & (err > 0), mid, hi)
        exact = ~done & (err == 0)
        lo = np.where(exact, mid, lo)
        hi = np.where(exact, mid, hi)
        done |= hi - lo <= _LOG_TOL
    log_a = np.where(below, lo, np.where(above, hi, 0.5 * (lo + hi)))
    return np.exp(log_a), below | above


def _phi(p: MarketPoint, x: NDArray[np.float64]) -> NDArray[np.float64]:
    prices = p.bid + x * p.spread
    iv = implied_vol_array(prices, p.forward, p.strike, p.tau, p.is_call)
    if not np.all(np.isfinite(iv)):
        raise InvalidPointError("implied vol undefined inside the bid-ask interval")
    return iv * iv


def solve_beta_a(p: MarketPoint, anchor: AnchorResult, n: int = DEFAULT_N) -> BetaShape:
    """Beta shape centring the discretised IV^2 on IV^2(anchor)."""
    if n < 2:
        raise InvalidInputError("need at least 2 points to solve for the shape")
    if not p.bid < anchor.anchor < p.ask:
        raise InvalidPointError("anchor not strictly inside (bid, ask)")
    phi = _phi(p, cell_midpoints(n))
    tgt = implied_vol_array(anchor.anchor, p.forward, p.strike, p.tau, p.is_call) ** 2
    a, clamped = solve_beta_shapes(phi[None, :], np.array([tgt]))
    return BetaShape(float(a[0]), bool(clamped[0]))


def augment_quote(p: MarketPoint, anchor: AnchorResult, n: int = DEFAULT_N) -> AugmentedQuote:
    if n < 1:
        raise InvalidInputError("point count must be >= 1")
    if n == 1:
        price = np.array([anchor.anchor])
        iv = implied_vol_array(price, p.forward, p.strike, p.tau, p.is_call)
        return AugmentedQuote(p, price, np.ones(1), iv * iv, 1.0, False)
    x = cell_midpoints(n)
    phi = _phi(p, x)
    tgt = implied_vol_array(anchor.anchor, p.forward, p.strike, p.tau, p.is_call) ** 2
    a, clamped = solve_beta_shapes(phi[None, :], np.array([tgt]))
    weights = beta_cell_weights(float(a[0]), n)
    return AugmentedQuote(p, p.bid + x * p.spread, weights, phi, float(a[0]), bool(clamped[0]))


def augment_arrays(
    bid, spread, anchor, forward, strike, tau, is_call, n: int = DEFAULT_N
) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64], NDArray[np.bool_]]:
    """Batch version of :func:`augment_quote` for m quotes.

    Returns ``(iv2, weights, a, clamped)`` with ``iv2`` and ``weights`` of shape (m, n).
    """
    bid = np.asarray(bid, dtype=np.float64)
    spread = np.asarray(spread, dtype=np.float64)
    m = bid.shape[0]
    cols = lambda v: np.broadcast_to(np.asarray(v)[..., None] if np.ndim(v) else v, (m, n))  # noqa: E731
    x = cell_midpoints(n)
    prices = bid[:, None] + x[None, :] * spread[:, None]
    iv = implied_vol_array(prices, cols(forward), cols(strike), cols(tau), cols(is_call))
    phi = iv * iv
    tgt = implied_vol_array(anchor, forward, strike, tau, is_call) ** 2
    if n == 1:
        return tgt[:, None], np.ones((m, 1)), np.ones(m), np.zeros(m, dtype=bool)
    a, clamped = solve_beta_shapes(phi, tgt)
    weights = _cell_weights_rows(np.log(a), n)
    return phi, weights, a, clamped
