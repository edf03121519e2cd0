"""Synthetic quote scenarios under uniform mid-price noise, and the experiment harness.

Quotes are generated from a known SVI smile: the mid is the efficient Black
price plus ``spread * U`` with U uniform on [-1/2, 1/2]; bid and ask are then
snapped outward onto the tick grid.  A fraction of strikes get a spurious
bid of 0 or 1 tick.  Each scenario draws from its own Philox stream keyed by
``(seed, scenario_index)``, so runs are reproducible whatever the order or
process layout used to evaluate them.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from typing import NamedTuple, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import stats

from smilecal.anchor import anchor_arrays
from smilecal.calibration import CalibrationConfig, ErrorMetrics, Method, calibrate_smile, error_metrics
from smilecal.errors import InvalidInputError, InvalidParamsError, SmileCalError
from smilecal.market_data import DAYS_PER_YEAR, OptionType, Quote, prepare_points
from smilecal.pricing import black_price, implied_vol_array
from smilecal.svi import REFERENCE_PARAMS, SviParams, svi_total_variance, validate_svi

FloatArray = NDArray[np.float64]

REFERENCE_TIME = datetime(2024, 1, 5, 8, 0, tzinfo=timezone.utc)
MIN_SCENARIOS = 30
PLACEMENTS = ("cheapest", "uniform")


@dataclass(frozen=True, slots=True)
class UseCaseSpec:
    n_strikes: int
    spread_ticks: int
    spurious_bid_fraction: float = 0.0
    tick_fwd: float = 5e-4
    tau: float = 0.25
    truth: SviParams = REFERENCE_PARAMS
    k_range: tuple[float, float] | None = None
    spurious_placement: str = "cheapest"

    def __post_init__(self) -> None:
        if self.n_strikes < 5:
            raise InvalidInputError("n_strikes must be >= 5")
        if self.spread_ticks < 1:
            raise InvalidInputError("spread_ticks must be >= 1")
        if not 0.0 <= self.spurious_bid_fraction <= 1.0:
            raise InvalidInputError("spurious_bid_fraction must lie in [0, 1]")
        if not (self.tick_fwd > 0 and self.tau > 0):
            raise InvalidInputError("tick_fwd and tau must be > 0")
        if self.spurious_placement not in PLACEMENTS:
            raise InvalidInputError(f"spurious_placement must be one of {PLACEMENTS}")
        if self.k_range is not None and not self.k_range[0] < self.k_range[1]:
            raise InvalidInputError("k_range must be increasing")

    @property
    def spread(self) -> float:
        return self.spread_ticks * self.tick_fwd

    @property
    def k_grid(self) -> FloatArray:
        lo, hi = self.k_range or (-2.0 * math.sqrt(self.tau), 2.0 * math.sqrt(self.tau))
        return np.linspace(lo, hi, self.n_strikes)

    def truth_iv(self, k) -> FloatArray:
        return np.sqrt(svi_total_variance(self.truth, k) / self.tau)

    def efficient_prices(self) -> FloatArray:
        k = self.k_grid
        return black_price(1.0, np.exp(k), self.tau, self.truth_iv(k), k >= 0)

    def to_dict(self) -> dict:
        return {
            "n_strikes": self.n_strikes,
            "spread_ticks": self.spread_ticks,
            "spurious_bid_fraction": self.spurious_bid_fraction,
            "tick_fwd": self.tick_fwd,
            "tau": self.tau,
            "truth": self.truth.to_dict(),
            "k_range": list(self.k_range) if self.k_range else None,
            "spurious_placement": self.spurious_placement,
        }


USE_CASES: dict[int, UseCaseSpec] = {
    1: UseCaseSpec(n_strikes=30, spread_ticks=2, spurious_bid_fraction=0.0),
    2: UseCaseSpec(n_strikes=20, spread_ticks=4, spurious_bid_fraction=0.15),
    3: UseCaseSpec(n_strikes=10, spread_ticks=10, spurious_bid_fraction=0.30),
}


def scenario_rng(seed: int, index: int) -> np.random.Generator:
    """Independent Philox stream for scenario ``index``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


class ScenarioDraw(NamedTuple):
    eff: FloatArray
    mid: FloatArray
    bid_ticks: NDArray[np.int64]
    ask_ticks: NDArray[np.int64]
    spurious: NDArray[np.bool_]


def draw_scenario(spec: UseCaseSpec, rng: np.random.Generator) -> ScenarioDraw:
    """Efficient prices, noisy mid and snapped integer bid/ask ticks."""
    if not validate_svi(spec.truth):
        raise InvalidParamsError(f"invalid truth parameters {spec.truth}")
    n = spec.n_strikes
    eff = spec.efficient_prices()
    u = rng.uniform(-0.5, 0.5, n)
    mid = eff + spec.spread * u
    half = 0.5 * spec.spread_ticks
    # 1e-9 guards grid points that land a rounding error off an integer
    bid = np.floor(mid / spec.tick_fwd - half + 1e-9).astype(np.int64)
    ask = np.ceil(mid / spec.tick_fwd + half - 1e-9).astype(np.int64)
    bid = np.maximum(bid, 0)

    if spec.spurious_placement == "cheapest":
        count = rng.binomial(n, spec.spurious_bid_fraction)
        spurious = np.zeros(n, dtype=bool)
        spurious[np.argsort(eff, kind="stable")[:count]] = True
    else:
        spurious = rng.uniform(size=n) < spec.spurious_bid_fraction
    forced = rng.integers(0, 2, n)
    bid = np.where(spurious, forced, bid)
    return ScenarioDraw(eff, mid, bid, ask, spurious)


def generate_scenario(spec: UseCaseSpec, seed: int, index: int = 0, *, now: datetime = REFERENCE_TIME) -> list[Quote]:
    """Quotes of one scenario, expressed with spot = future = 1 and no discounting."""
    draw = draw_scenario(spec, scenario_rng(seed, index))
    expiry = now + timedelta(days=spec.tau * DAYS_PER_YEAR)
    quotes = []
    for k, b, a in zip(spec.k_grid, draw.bid_ticks, draw.ask_ticks):
        quotes.append(Quote(
            option_type=OptionType.CALL if k >= 0 else OptionType.PUT,
            strike=math.exp(k),
            expiry=expiry,
            bid_ticks=int(b),
            ask_ticks=int(a),
            tick_size=spec.tick_fwd,
            spot=1.0,
            future=1.0,
            discount=1.0,
        ))
    return quotes


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------

METHODS = (Method.MID, Method.DATA_AUGMENTATION)


@dataclass(frozen=True)
class ScenarioResult:
    index: int
    metrics: dict[str, ErrorMetrics | None]
    converged: dict[str, bool]
    errors: dict[str, str]


def run_scenario(spec: UseCaseSpec, seed: int, index: int, cfg: CalibrationConfig) -> ScenarioResult:
    quotes = generate_scenario(spec, seed, index)
    points, _ = prepare_points(quotes, REFERENCE_TIME)
    metrics: dict[str, ErrorMetrics | None] = {}
    converged: dict[str, bool] = {}
    errors: dict[str, str] = {}
    for method in METHODS:
        c = replace(cfg, method=method, seed=cfg.seed + index)
        try:
            rep = calibrate_smile(points, c)
        except SmileCalError as exc:
            metrics[method.value] = None
            converged[method.value] = False
            errors[method.value] = f"{type(exc).__name__}: {exc}"
            continue
        metrics[method.value] = error_metrics(rep.chi_star, spec.truth_iv, spec.k_grid, spec.tau)
        converged[method.value] = rep.converged
    return ScenarioResult(index, metrics, converged, errors)


def _mean_halfwidth(values: Sequence[float]) -> tuple[float, float]:
    n = len(values)
    if n == 0:
        return math.nan, math.nan
    mean = math.fsum(values) / n
    if n < 2:
        return mean, math.nan
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, 1.96 * math.sqrt(var) / math.sqrt(n)


@dataclass(frozen=True)
class ExperimentReport:
    spec: UseCaseSpec
    n_scenarios: int
    seed: int
    means: dict[str, ErrorMetrics]
    half_widths: dict[str, ErrorMetrics]
    failures: dict[str, int]
    not_converged: dict[str, int]
    scenarios: tuple[ScenarioResult, ...] = field(repr=False, default=())
    use_case: int | None = None

    def improvement(self, metric: str) -> float:
        """Relative reduction of the augmentation error against the mid error."""
        mid = getattr(self.means[Method.MID.value], metric)
        aug = getattr(self.means[Method.DATA_AUGMENTATION.value], metric)
        return 1.0 - aug / mid

    def to_dict(self) -> dict:
        return {
            "use_case": self.use_case,
            "spec": self.spec.to_dict(),
            "n_scenarios": self.n_scenarios,
            "seed": self.seed,
            "means": {m: v.to_dict() for m, v in self.means.items()},
            "half_widths": {m: v.to_dict() for m, v in self.half_widths.items()},
            "failures": dict(self.failures),
            "not_converged": dict(self.not_converged),
            "improvement": {"l1": self.improvement("l1"), "l2": self.improvement("l2")},
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def table(self) -> str:
        title = f"Use case {self.use_case}" if self.use_case else "Experiment"
        lines = [
            f"{title}: {self.n_scenarios} scenarios, seed {self.seed} (errors in bps, mean +/- 95% half-width)",
            f"{'method':<20}{'bias':>20}{'L1':>20}{'L2':>20}",
        ]
        for m in self.means:
            mu, hw = self.means[m], self.half_widths[m]
            cells = [f"{getattr(mu, f):.2f} +/- {getattr(hw, f):.2f}" for f in ("bias", "l1", "l2")]
            lines.append(f"{m:<20}" + "".join(f"{c:>20}" for c in cells))
        lines.append(f"L1 reduction {100 * self.improvement('l1'):.1f}%, L2 reduction {100 * self.improvement('l2'):.1f}%")
        if any(self.failures.values()):
            lines.append(f"failed calibrations: {self.failures}")
        return "\n".join(lines)

    def write_scenarios_csv(self, path: str | os.PathLike[str]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario", "method", "bias", "l1", "l2", "converged", "error"])
            for s in self.scenarios:
                for m in s.metrics:
                    e = s.metrics[m]
                    vals = ["", "", ""] if e is None else [f"{e.bias:.10g}", f"{e.l1:.10g}", f"{e.l2:.10g}"]
                    w.writerow([s.index, m, *vals, int(s.converged[m]), s.errors.get(m, "")])


def _run_one(args: tuple) -> ScenarioResult:
    return run_scenario(*args)


def run_experiment(
    spec: UseCaseSpec,
    n_scenarios: int,
    seed: int,
    cfg: CalibrationConfig | None = None,
    *,
    workers: int = 1,
    use_case: int | None = None,
) -> ExperimentReport:
    """Mid and augmentation calibrations on ``n_scenarios`` independent scenarios.

    A scenario where either method raises is excluded from both sets of
    means and counted in ``failures``, so the comparison stays paired.
    """
    if n_scenarios < MIN_SCENARIOS:
        raise InvalidInputError(f"n_scenarios must be >= {MIN_SCENARIOS}")
    cfg = cfg or CalibrationConfig()
    jobs = [(spec, seed, i, cfg) for i in range(n_scenarios)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_one, jobs, chunksize=max(1, n_scenarios // (4 * workers))))
    else:
        results = [_run_one(j) for j in jobs]

    names = [m.value for m in METHODS]
    ok = [r for r in results if all(r.metrics[m] is not None for m in names)]
    means, hws = {}, {}
    for m in names:
        cols = {}
        for f in ("bias", "l1", "l2"):
            cols[f] = _mean_halfwidth([getattr(r.metrics[m], f) for r in ok])
        means[m] = ErrorMetrics(*(cols[f][0] for f in ("bias", "l1", "l2")))
        hws[m] = ErrorMetrics(*(cols[f][1] for f in ("bias", "l1", "l2")))
    failures = {m: sum(r.metrics[m] is None for r in results) for m in names}
    not_conv = {m: sum(r.metrics[m] is not None and not r.converged[m] for r in results) for m in names}
    return ExperimentReport(spec, n_scenarios, seed, means, hws, failures, not_conv, tuple(results), use_case)


# ---------------------------------------------------------------------------
# Monte Carlo diagnostics of the mid and anchor estimators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorSample:
    k: float
    tau: float
    spread: float
    eff_iv2: float
    mid_iv2: FloatArray
    anchor_iv2: FloatArray

    @property
    def mid_bias(self) -> float:
        return float(np.mean(self.mid_iv2)) - self.eff_iv2

    @property
    def anchor_bias(self) -> float:
        return float(np.mean(self.anchor_iv2)) - self.eff_iv2


def sample_estimators(
    k: float,
    spread: float,
    n_draws: int,
    seed: int,
    *,
    tau: float = 0.25,
    truth: SviParams = REFERENCE_PARAMS,
    scheme: str = "antithetic",
) -> EstimatorSample:
    """IV^2 at the mid and at the anchor for ``n_draws`` noisy mids around the efficient price.

    No tick snapping: bid and ask are mid -/+ spread / 2.  ``scheme`` picks
    how the uniforms are drawn: ``"iid"``; ``"antithetic"`` pairs (U, -U),
    which cancels the odd-order noise in the sample mean; ``"stratified"``
    puts one antithetic pair in each of n/2 equal strata of [0, 1/2], for
    bias estimates far below the plain Monte Carlo noise floor.
    """
    if n_draws < 2:
        raise InvalidInputError("n_draws must be >= 2")
    if scheme not in SAMPLING_SCHEMES:
        raise InvalidInputError(f"scheme must be one of {SAMPLING_SCHEMES}")
    is_call = k >= 0
    strike = math.exp(k)
    eff_iv = math.sqrt(float(svi_total_variance(truth, k)) / tau)
    eff = float(black_price(1.0, strike, tau, eff_iv, is_call))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    m = (n_draws + 1) // 2
    if scheme == "iid":
        u = rng.uniform(-0.5, 0.5, n_draws)
    else:
        if scheme == "antithetic":
            half = rng.uniform(-0.5, 0.5, m)
        else:
            half = 0.5 * (np.arange(m) + rng.uniform(size=m)) / m
        u = np.concatenate([half, -half])[:n_draws]
    mid = eff + spread * u
    anchor, _, _, _, mid_iv = anchor_arrays(mid, np.full_like(mid, spread), 1.0, strike, tau, is_call)
    anchor_iv = implied_vol_array(anchor, 1.0, strike, tau, is_call)
    return EstimatorSample(k, tau, spread, eff_iv * eff_iv, mid_iv * mid_iv, anchor_iv * anchor_iv)


SAMPLING_SCHEMES = ("iid", "antithetic", "stratified")


class TTestResult(NamedTuple):
    statistic: float
    pvalue: float
    alternative: str


def mid_bias_ttest(sample: EstimatorSample, alternative: str) -> TTestResult:
    """One-sided t-test of E[IV^2(mid)] against IV^2(eff).

    With antithetic draws the pair means are the independent observations.
    """
    x = sample.mid_iv2
    if x.size % 2 == 0:
        x = 0.5 * (x[: x.size // 2] + x[x.size // 2:])
    res = stats.ttest_1samp(x, sample.eff_iv2, alternative=alternative)
    return TTestResult(float(res.statistic), float(res.pvalue), alternative)


# ---------------------------------------------------------------------------
# fractional parts of finely discretised variables
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class RoundoffCheck:
    delta: float
    n_draws: int
    ks_statistic: float
    pvalue: float
    correlation: float

    @property
    def uniform(self) -> bool:
        return self.pvalue > 0.01


def roundoff_uniformity_check(delta: float, n_draws: int = 100_000, seed: int = 0) -> RoundoffCheck:
    """KS test of the fractional parts {Y / delta}, Y standard normal, against U[0, 1]."""
    if not delta > 0:
        raise InvalidInputError("delta must be > 0")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    y = rng.standard_normal(n_draws)
    frac = np.mod(y / delta, 1.0)
    res = stats.kstest(frac, "uniform")
    corr = float(np.corrcoef(y, frac)[0, 1])
    return RoundoffCheck(delta, n_draws, float(res.statistic), float(res.pvalue), corr)
