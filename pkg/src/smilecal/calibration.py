"""SVI calibration: Huber loss on total variance, minimised by BFGS.

The mid method fits one point per quote (the mid, weight 1).  The
augmentation method fits the N weighted prices produced by
:mod:`smilecal.augmentation` for every quote.  Both go through the same
objective, written on flat arrays ``(k, w_obs, weight)``.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from smilecal.anchor import anchor_arrays
from smilecal.augmentation import DEFAULT_N, AugmentedQuote, augment_arrays
from smilecal.errors import InsufficientDataError, InvalidInputError, InvalidParamsError
from smilecal.market_data import MarketPoint
from smilecal.pricing import implied_vol_array
from smilecal.svi import (
    ButterflyCheck,
    SviParams,
    butterfly_scan,
    from_unconstrained,
    raw_total_variance,
    to_unconstrained,
)

FloatArray = NDArray[np.float64]

PENALTY_WEIGHT = 1e4
MIN_POINTS = 5
BPS = 1e4


class Method(str, Enum):
    MID = "mid"
    DATA_AUGMENTATION = "data_augmentation"

    @classmethod
    def parse(cls, text: str) -> "Method":
        t = text.strip().lower()
        if t == "mid":
            return cls.MID
        if t in ("aug", "augmentation", "data_augmentation"):
            return cls.DATA_AUGMENTATION
        raise ValueError(f"unknown calibration method {text!r}")


@dataclass(frozen=True, slots=True)
class CalibrationConfig:
    method: Method = Method.DATA_AUGMENTATION
    n_aug: int = DEFAULT_N
    huber_delta: float = 0.001
    max_iters: int = 500
    grad_tolerance: float = 1e-8
    restarts: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.huber_delta > 0:
            raise InvalidInputError("huber_delta must be > 0")
        if self.n_aug < 1:
            raise InvalidInputError("n_aug must be >= 1")
        if self.restarts < 1 or self.max_iters < 1:
            raise InvalidInputError("restarts and max_iters must be >= 1")
        if not isinstance(self.method, Method):
            object.__setattr__(self, "method", Method.parse(str(self.method)))


# ---------------------------------------------------------------------------
# data and loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitData:
    """Flattened calibration set; ``n_quotes`` normalises the loss."""

    k: FloatArray
    w: FloatArray
    weight: FloatArray
    n_quotes: int

    @classmethod
    def from_augmented(cls, data: Sequence[AugmentedQuote]) -> "FitData":
        if not data:
            raise InvalidInputError("empty calibration data")
        k = np.concatenate([np.full(q.prices.size, q.source.k) for q in data])
        w = np.concatenate([q.total_variance for q in data])
        weight = np.concatenate([q.weights for q in data])
        return cls(k, w, weight, len(data))


def huber(r: ArrayLike, delta: float) -> FloatArray:
    a = np.abs(r)
    q = np.minimum(a, delta)
    return q * (a - 0.5 * q)


def huber_grad(r: ArrayLike, delta: float) -> FloatArray:
    return np.clip(r, -delta, delta)


def _as_fit_data(data) -> FitData:
    if isinstance(data, FitData):
        if data.n_quotes < 1 or data.k.size == 0:
            raise InvalidInputError("empty calibration data")
        return data
    return FitData.from_augmented(list(data))


def objective(chi: SviParams, data: Sequence[AugmentedQuote] | FitData, cfg: CalibrationConfig | None = None) -> float:
    """Weighted Huber loss of total-variance residuals plus the validity penalty."""
    cfg = cfg or CalibrationConfig()
    if not (chi.b >= 0 and abs(chi.rho) < 1 and chi.sigma > 0):
        raise InvalidParamsError(f"SVI parameters outside the parametrised domain: {chi}")
    fd = _as_fit_data(data)
    r = fd.w - raw_total_variance(chi.a, chi.b, chi.rho, chi.m, chi.sigma, fd.k)
    loss = float(np.sum(fd.weight * huber(r, cfg.huber_delta))) / fd.n_quotes
    c = chi.min_variance
    return loss + PENALTY_WEIGHT * min(c, 0.0) ** 2


_EXP_CAP = 300.0


def objective_and_gradient(x: FloatArray, fd: FitData, delta: float) -> tuple[float, FloatArray]:
    """Loss and gradient in unconstrained coordinates (a, log b, atanh rho, m, log sigma)."""
    if not (np.all(np.isfinite(x)) and abs(x[1]) < _EXP_CAP and abs(x[4]) < _EXP_CAP):
        return math.inf, np.full(5, math.nan)
    a, b, rho, m = x[0], math.exp(x[1]), math.tanh(x[2]), x[3]
    sigma = math.exp(x[4])
    km = fd.k - m
    root = np.sqrt(km * km + sigma * sigma)
    bw = b * (rho * km + root)
    r = fd.w - (a + bw)
    loss = float(np.sum(fd.weight * huber(r, delta))) / fd.n_quotes
    g = -fd.weight * huber_grad(r, delta) / fd.n_quotes
    grad = np.array([
        g.sum(),
        g @ bw,
        (g @ km) * b * (1.0 - rho * rho),
        -b * (rho * g.sum() + g @ (km / root)),
        b * sigma * sigma * (g @ (1.0 / root)),
    ])
    sech = math.sqrt(1.0 - rho * rho)
    c = a + b * sigma * sech
    if c < 0.0:
        loss += PENALTY_WEIGHT * c * c
        dc = np.array([1.0, b * sigma * sech, -rho * b * sigma * sech, 0.0, b * sigma * sech])
        grad += 2.0 * PENALTY_WEIGHT * c * dc
    return loss, grad


# ---------------------------------------------------------------------------
# BFGS
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class BfgsResult:
    x: FloatArray
    fun: float
    grad: FloatArray
    iterations: int
    converged: bool


_ARMIJO_C = 1e-4
_MIN_STEP = 1e-20


def bfgs(
    fun: Callable[[FloatArray], tuple[float, FloatArray]],
    x0: ArrayLike,
    *,
    max_iters: int = 500,
    grad_tolerance: float = 1e-8,
) -> BfgsResult:
    """Inverse-Hessian BFGS with a halving Armijo line search.

    The identity start is rescaled by s'y / y'y after the first accepted step.
    A non-descent direction resets the metric to the identity.  Iteration stops
    when the gradient max-norm drops below ``grad_tolerance`` or the line
    search can no longer decrease the loss.
    """
    x = np.array(x0, dtype=np.float64)
    n = x.size
    f, g = fun(x)
    if not math.isfinite(f):
        raise InvalidInputError("objective not finite at the starting point")
    eye = np.eye(n)
    H = eye.copy()
    first = True
    it = 0
    while it < max_iters:
        if np.max(np.abs(g)) < grad_tolerance:
            break
        p = -H @ g
        slope = float(g @ p)
        if slope >= 0.0:
            H = eye.copy()
            p = -g
            slope = float(g @ p)
        t = 1.0
        while True:
            x_new = x + t * p
            f_new, g_new = fun(x_new)
            if math.isfinite(f_new) and f_new <= f + _ARMIJO_C * t * slope:
                break
            t *= 0.5
            if t < _MIN_STEP:
                break
        if t < _MIN_STEP:
            break
        it += 1
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        x, f, g = x_new, f_new, g_new
        if not np.all(np.isfinite(y)):
            H = eye.copy()
            first = True
        elif sy > 1e-300:
            if first:
                H = eye * (sy / float(y @ y))
                first = False
            rho = 1.0 / sy
            Hy = H @ y
            with np.errstate(over="ignore", invalid="ignore"):
                H_new = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + (rho * rho * float(y @ Hy) + rho) * np.outer(s, s)
            H = H_new if np.all(np.isfinite(H_new)) else eye.copy()
    return BfgsResult(x, float(f), g, it, bool(np.max(np.abs(g)) < grad_tolerance))


# ---------------------------------------------------------------------------
# initial guess
# ---------------------------------------------------------------------------


def _mid_total_variance(points: Sequence[MarketPoint]) -> tuple[FloatArray, FloatArray]:
    k = np.array([p.k for p in points])
    mid = np.array([p.mid for p in points])
    iv = implied_vol_array(
        mid,
        np.array([p.forward for p in points]),
        np.array([p.strike for p in points]),
        np.array([p.tau for p in points]),
        np.array([p.is_call for p in points]),
    )
    tau = np.array([p.tau for p in points])
    return k, iv * iv * tau


def _slope(k: FloatArray, w: FloatArray) -> float:
    if k.size < 2 or np.ptp(k) == 0:
        return 0.0
    kc = k - k.mean()
    return float(kc @ (w - w.mean()) / (kc @ kc))


def init_guess_from_variance(k: ArrayLike, w: ArrayLike) -> SviParams:
    k = np.asarray(k, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    ok = np.isfinite(w)
    k, w = k[ok], w[ok]
    if np.unique(k).size < MIN_POINTS:
        raise InsufficientDataError(f"need at least {MIN_POINTS} distinct strikes, got {np.unique(k).size}")
    i = int(np.argmin(w))
    m = float(k[i])
    a = 0.9 * float(w[i])
    q75, q25 = np.percentile(k, [75, 25])
    sigma = max(0.05, 0.5 * float(q75 - q25))
    right = _slope(k[k >= m], w[k >= m])
    left = _slope(k[k <= m], w[k <= m])
    # right slope b(1 + rho), left slope -b(1 - rho)
    b = max(0.5 * (right - left), 0.0)
    rho = float(np.clip((right + left) / (right - left), -0.99, 0.99)) if b > 0 else 0.0
    return SviParams(a=a, b=b, rho=rho, m=m, sigma=sigma)


def init_guess(data: Sequence[MarketPoint]) -> SviParams:
    """Heuristic start from the mid total variances."""
    if len(data) < MIN_POINTS:
        raise InsufficientDataError(f"need at least {MIN_POINTS} quotes, got {len(data)}")
    k, w = _mid_total_variance(data)
    return init_guess_from_variance(k, w)


def _perturb(chi: SviParams, rng: np.random.Generator, scale: float = 0.1) -> SviParams:
    z = 1.0 + scale * rng.standard_normal(5)
    return SviParams(
        a=chi.a * z[0],
        b=max(chi.b * z[1], 1e-6),
        rho=float(np.clip(chi.rho * z[2], -0.99, 0.99)),
        m=chi.m * z[3],
        sigma=max(chi.sigma * z[4], 1e-4),
    )


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationReport:
    chi_star: SviParams
    final_loss: float
    iterations: int
    converged: bool
    method: Method
    tau: float
    k: FloatArray
    data_w: FloatArray
    fitted_w: FloatArray
    butterfly: ButterflyCheck
    restart_losses: tuple[float, ...] = ()
    n_points: int = 0
    stats: dict = field(default_factory=dict)

    @property
    def residuals(self) -> FloatArray:
        """Per-strike total-variance residuals, data minus fit."""
        return self.data_w - self.fitted_w

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "tau": self.tau,
            "params": self.chi_star.to_dict(),
            "final_loss": self.final_loss,
            "iterations": self.iterations,
            "converged": self.converged,
            "restart_losses": list(self.restart_losses),
            "n_quotes": int(self.k.size),
            "n_points": self.n_points,
            "butterfly": {
                "min_g": self.butterfly.min_g,
                "argmin_k": self.butterfly.argmin_k,
                "arbitrage_free": self.butterfly.arbitrage_free,
            },
            "residuals": [
                {"k": float(k), "residual": float(r)} for k, r in zip(self.k, self.residuals)
            ],
            **({"stats": dict(self.stats)} if self.stats else {}),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def write_residuals_csv(self, path: str | os.PathLike[str]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "fitted_iv", "data_iv"])
            for k, fw, dw in zip(self.k, self.fitted_w, self.data_w):
                w.writerow([f"{k:.10g}", f"{math.sqrt(max(fw, 0.0) / self.tau):.10g}",
                            f"{math.sqrt(max(dw, 0.0) / self.tau):.10g}"])


def _point_arrays(points: Sequence[MarketPoint]) -> dict[str, FloatArray]:
    return {
        "k": np.array([p.k for p in points]),
        "tau": np.array([p.tau for p in points]),
        "forward": np.array([p.forward for p in points]),
        "strike": np.array([p.strike for p in points]),
        "is_call": np.array([p.is_call for p in points]),
        "bid": np.array([p.bid for p in points]),
        "ask": np.array([p.ask for p in points]),
    }


def build_fit_data(points: Sequence[MarketPoint], cfg: CalibrationConfig) -> tuple[FitData, FloatArray]:
    """Calibration set for the configured method and the per-quote data total variance."""
    arr = _point_arrays(points)
    mid = 0.5 * (arr["bid"] + arr["ask"])
    spread = arr["ask"] - arr["bid"]
    args = (arr["forward"], arr["strike"], arr["tau"], arr["is_call"])
    if cfg.method is Method.MID:
        iv = implied_vol_array(mid, *args)
        w = iv * iv * arr["tau"]
        keep = np.isfinite(w)
        return FitData(arr["k"][keep], w[keep], np.ones(int(keep.sum())), int(keep.sum())), w

    anchor, *_ = anchor_arrays(mid, spread, *args)
    n = cfg.n_aug
    iv2, weights, _, _ = augment_arrays(arr["bid"], spread, anchor, *args, n=n)
    w = iv2 * arr["tau"][:, None]
    keep = np.all(np.isfinite(w), axis=1) & (spread > 0)
    if n == 1:
        keep &= np.isfinite(anchor)
    data_w = np.where(keep, np.sum(weights * np.where(np.isfinite(w), w, 0.0), axis=1), np.nan)
    nk = int(keep.sum())
    fd = FitData(
        np.repeat(arr["k"][keep], n),
        w[keep].ravel(),
        weights[keep].ravel(),
        nk,
    )
    return fd, data_w


def calibrate_smile(points: Sequence[MarketPoint], cfg: CalibrationConfig | None = None) -> CalibrationReport:
    """Fit raw SVI to one expiry; best of ``cfg.restarts`` BFGS runs."""
    cfg = cfg or CalibrationConfig()
    points = list(points)
    if len(points) < MIN_POINTS:
        raise InsufficientDataError(f"need at least {MIN_POINTS} quotes, got {len(points)}")
    taus = {p.tau for p in points}
    if len(taus) != 1:
        raise InvalidInputError("all points must share one expiry")
    tau = points[0].tau

    fd, data_w = build_fit_data(points, cfg)
    if fd.n_quotes < MIN_POINTS:
        raise InsufficientDataError(f"only {fd.n_quotes} usable quotes after preprocessing")
    k_all = np.array([p.k for p in points])
    ok = np.isfinite(data_w)
    chi0 = init_guess_from_variance(k_all[ok], data_w[ok])

    fun = lambda x: objective_and_gradient(x, fd, cfg.huber_delta)  # noqa: E731
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)
    best: BfgsResult | None = None
    losses = []
    for i, ss in enumerate(seeds):
        start = chi0 if i == 0 else _perturb(chi0, np.random.Generator(np.random.Philox(ss)))
        res = bfgs(fun, to_unconstrained(start), max_iters=cfg.max_iters, grad_tolerance=cfg.grad_tolerance)
        losses.append(res.fun)
        if best is None or res.fun < best.fun:
            best = res
    assert best is not None
    chi = from_unconstrained(best.x)
    if chi.min_variance < 0:
        # the penalty leaves a tiny violation at worst; lift a onto the boundary
        chi = replace(chi, a=chi.a - chi.min_variance)
    fitted_w = raw_total_variance(chi.a, chi.b, chi.rho, chi.m, chi.sigma, k_all[ok])
    return CalibrationReport(
        chi_star=chi,
        final_loss=best.fun,
        iterations=best.iterations,
        converged=best.converged,
        method=cfg.method,
        tau=tau,
        k=k_all[ok],
        data_w=data_w[ok],
        fitted_w=fitted_w,
        butterfly=butterfly_scan(chi),
        restart_losses=tuple(losses),
        n_points=int(fd.k.size),
    )


# ---------------------------------------------------------------------------
# error metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class ErrorMetrics:
    bias: float
    l1: float
    l2: float

    def to_dict(self) -> dict[str, float]:
        return {"bias": self.bias, "l1": self.l1, "l2": self.l2}


def error_metrics(
    fitted: SviParams, truth_iv: Callable[[FloatArray], ArrayLike], grid: ArrayLike, tau: float
) -> ErrorMetrics:
    """Bias, mean absolute and root-mean-square IV error over ``grid``, in bps."""
    k = np.asarray(grid, dtype=np.float64)
    if k.size == 0:
        raise InvalidInputError("empty strike grid")
    w = raw_total_variance(fitted.a, fitted.b, fitted.rho, fitted.m, fitted.sigma, k)
    diff = (np.sqrt(np.maximum(w, 0.0) / tau) - np.asarray(truth_iv(k), dtype=np.float64)) * BPS
    return ErrorMetrics(
        bias=math.fsum(diff) / k.size,
        l1=math.fsum(np.abs(diff)) / k.size,
        l2=math.sqrt(math.fsum(diff * diff) / k.size),
    )
