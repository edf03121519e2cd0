"""Raw SVI total variance: w(k) = a + b (rho (k - m) + sqrt((k - m)^2 + sigma^2))."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from smilecal.errors import InvalidParamsError, UndefinedPointError

FloatArray = NDArray[np.float64]


@dataclass(frozen=True, slots=True)
class SviParams:
    a: float
    b: float
    rho: float
    m: float
    sigma: float

    @property
    def min_variance(self) -> float:
        """Minimum of w over k: a + b sigma sqrt(1 - rho^2)."""
        return self.a + self.b * self.sigma * math.sqrt(max(1.0 - self.rho * self.rho, 0.0))

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "SviParams":
        return cls(*(float(d[key]) for key in ("a", "b", "rho", "m", "sigma")))

    def as_array(self) -> FloatArray:
        return np.array([self.a, self.b, self.rho, self.m, self.sigma])


# parameters of the reference smile used throughout the experiments
REFERENCE_PARAMS = SviParams(a=0.02, b=0.2, rho=-0.3, m=0.05, sigma=0.6)


def validate_svi(chi: SviParams) -> bool:
    vals = (chi.a, chi.b, chi.rho, chi.m, chi.sigma)
    if not all(math.isfinite(v) for v in vals):
        return False
    return chi.b >= 0 and abs(chi.rho) < 1 and chi.sigma > 0 and chi.min_variance >= 0


def raw_total_variance(a, b, rho, m, sigma, k) -> FloatArray:
    km = np.asarray(k, dtype=np.float64) - m
    return a + b * (rho * km + np.sqrt(km * km + sigma * sigma))


def svi_total_variance(chi: SviParams, k: ArrayLike) -> FloatArray | float:
    if not validate_svi(chi):
        raise InvalidParamsError(f"invalid SVI parameters {chi}")
    w = raw_total_variance(chi.a, chi.b, chi.rho, chi.m, chi.sigma, k)
    return float(w) if np.ndim(w) == 0 else w


def svi_implied_vol(chi: SviParams, k: ArrayLike, tau: float) -> FloatArray | float:
    w = svi_total_variance(chi, k)
    return np.sqrt(np.maximum(w, 0.0) / tau) if np.ndim(w) else math.sqrt(max(w, 0.0) / tau)


def svi_derivatives(chi: SviParams, k: ArrayLike) -> tuple[FloatArray, FloatArray, FloatArray]:
    """(w, w', w'') at k."""
    km = np.asarray(k, dtype=np.float64) - chi.m
    root = np.sqrt(km * km + chi.sigma**2)
    w = chi.a + chi.b * (chi.rho * km + root)
    w1 = chi.b * (chi.rho + km / root)
    w2 = chi.b * chi.sigma**2 / root**3
    return w, w1, w2


def butterfly_g(chi: SviParams, k: ArrayLike) -> FloatArray | float:
    """Density-positivity function g(k); g >= 0 everywhere means no butterfly arbitrage.

    g = (1 - k w' / (2 w))^2 - (w'^2 / 4) (1 / w + 1 / 4) + w'' / 2
    """
    if not validate_svi(chi):
        raise InvalidParamsError(f"invalid SVI parameters {chi}")
    k = np.asarray(k, dtype=np.float64)
    w, w1, w2 = svi_derivatives(chi, k)
    if np.any(w <= 0):
        raise UndefinedPointError("total variance vanishes on the grid")
    g = (1.0 - k * w1 / (2.0 * w)) ** 2 - 0.25 * w1 * w1 * (1.0 / w + 0.25) + 0.5 * w2
    return float(g) if g.ndim == 0 else g


class ButterflyCheck(NamedTuple):
    min_g: float
    argmin_k: float
    arbitrage_free: bool


def butterfly_scan(chi: SviParams, k_grid: ArrayLike | None = None) -> ButterflyCheck:
    ks = np.linspace(-1.5, 1.5, 301) if k_grid is None else np.asarray(k_grid, dtype=np.float64)
    g = butterfly_g(chi, ks)
    i = int(np.argmin(g))
    return ButterflyCheck(float(g[i]), float(ks[i]), bool(g[i] > 0))


# ---------------------------------------------------------------------------
# unconstrained coordinates for the optimiser
# ---------------------------------------------------------------------------

_B_FLOOR = 1e-10
_RHO_CAP = 1.0 - 1e-12


def to_unconstrained(chi: SviParams) -> FloatArray:
    """(a, log b, atanh rho, m, log sigma)."""
    return np.array([
        chi.a,
        math.log(max(chi.b, _B_FLOOR)),
        math.atanh(min(max(chi.rho, -_RHO_CAP), _RHO_CAP)),
        chi.m,
        math.log(chi.sigma),
    ])


def from_unconstrained(x: ArrayLike) -> SviParams:
    x = np.asarray(x, dtype=np.float64)
    return SviParams(float(x[0]), math.exp(x[1]), math.tanh(x[2]), float(x[3]), math.exp(x[4]))
