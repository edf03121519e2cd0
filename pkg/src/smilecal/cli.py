"""Command-line front end: ``smilecal {calibrate,simulate,iv,diagnose}``.

Exit codes: 0 success, 1 input error, 2 calibration did not converge.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from smilecal.anchor import anchor_arrays, rho_condition_report
from smilecal.calibration import CalibrationConfig, Method, calibrate_smile
from smilecal.errors import ConvergenceError, SmileCalError
from smilecal.market_data import as_utc, prepare_points, read_quotes_csv
from smilecal.pricing import implied_vol, implied_vol_array
from smilecal.svi import raw_total_variance
from smilecal.synthetic import MIN_SCENARIOS, PLACEMENTS, USE_CASES, run_experiment

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NOT_CONVERGED = 2


class InputError(Exception):
    pass


def _parse_time(text: str) -> datetime:
    t = text.strip()
    if t.endswith("Z"):
        t = t[:-1] + "+00:00"
    try:
        return as_utc(datetime.fromisoformat(t))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not an ISO-8601 time: {text!r}") from exc


def _method(text: str) -> Method:
    try:
        return Method.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smilecal", description="SVI smile calibration from bid-ask quotes.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--json", action="store_true", help="print machine-readable JSON on stdout")
        p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("calibrate", help="calibrate one expiry from a quote CSV")
    common(p)
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--output", required=True, type=Path, help="directory for calibration.json and smile.csv")
    p.add_argument("--now", required=True, type=_parse_time, help="valuation time, ISO-8601 (UTC if naive)")
    p.add_argument("--expiry", type=_parse_time, help="expiry to calibrate when the file holds several")
    p.add_argument("--method", type=_method, default=Method.DATA_AUGMENTATION, help="mid | aug")
    p.add_argument("--n-aug", type=int, default=100)
    p.add_argument("--huber-delta", type=float, default=0.001)
    p.add_argument("--restarts", type=int, default=5)

    p = sub.add_parser("simulate", help="mid vs augmentation on synthetic scenarios")
    common(p)
    p.add_argument("--use-case", type=int, required=True)
    p.add_argument("--scenarios", type=int, default=200)
    p.add_argument("--n-aug", type=int, default=100)
    p.add_argument("--huber-delta", type=float, default=0.001)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--placement", choices=PLACEMENTS, default="cheapest",
                   help="which strikes receive the spurious bids")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--output", type=Path, help="write the report JSON here")
    p.add_argument("--scenario-csv", type=Path, help="write per-scenario errors here")

    p = sub.add_parser("iv", help="implied volatility of a single forward-unit price")
    common(p)
    p.add_argument("--price", type=float, required=True)
    p.add_argument("--forward", type=float, required=True)
    p.add_argument("--strike", type=float, required=True)
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--type", choices=("call", "put"), default="call")

    p = sub.add_parser("diagnose", help="scan |rho| against its admissibility threshold")
    common(p)
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--tick", type=float, default=5e-4, help="tick as a fraction of the forward")
    p.add_argument("--spread-ticks", type=int, default=1)
    p.add_argument("--min-ticks", type=int, default=1)
    p.add_argument("--output", type=Path, help="write the scan CSV here")
    return parser


def _emit(args: argparse.Namespace, payload: dict, text: str) -> None:
    print(json.dumps(payload) if args.json else text)


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------


def _select_expiry(quotes, expiry: datetime | None):
    expiries = sorted({q.expiry for q in quotes})
    if expiry is not None:
        chosen = [q for q in quotes if q.expiry == expiry]
        if not chosen:
            raise InputError(f"no quote with expiry {expiry.isoformat()}")
        return chosen
    if len(expiries) > 1:
        raise InputError(f"{len(expiries)} expiries in the file; pick one with --expiry")
    return quotes


def _iv_or_nan(price, points) -> np.ndarray:
    return implied_vol_array(
        price,
        np.array([p.forward for p in points]),
        np.array([p.strike for p in points]),
        np.array([p.tau for p in points]),
        np.array([p.is_call for p in points]),
    )


def _write_smile_csv(path: Path, points, chi) -> None:
    bid = np.array([p.bid for p in points])
    ask = np.array([p.ask for p in points])
    mid = 0.5 * (bid + ask)
    arr = [np.array([getattr(p, f) for p in points]) for f in ("forward", "strike", "tau", "is_call")]
    anchor, *_ = anchor_arrays(mid, ask - bid, *arr)
    k = np.array([p.k for p in points])
    tau = points[0].tau
    cols = {
        "bid_iv": _iv_or_nan(bid, points),
        "ask_iv": _iv_or_nan(ask, points),
        "mid_iv": _iv_or_nan(mid, points),
        "anchor_iv": _iv_or_nan(anchor, points),
        "fitted_iv": np.sqrt(raw_total_variance(chi.a, chi.b, chi.rho, chi.m, chi.sigma, k) / tau),
    }
    order = np.argsort(k, kind="stable")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["k", *cols])
        for i in order:
            w.writerow([f"{k[i]:.10g}", *("" if math.isnan(c[i]) else f"{c[i]:.10g}" for c in cols.values())])


def cmd_calibrate(args: argparse.Namespace) -> int:
    if not args.input.is_file():
        raise InputError(f"input file not found: {args.input}")
    quotes = _select_expiry(read_quotes_csv(args.input), args.expiry)
    points, stats = prepare_points(quotes, args.now)
    cfg = CalibrationConfig(method=args.method, n_aug=args.n_aug, huber_delta=args.huber_delta,
                            restarts=args.restarts, seed=args.seed)
    report = calibrate_smile(points, cfg)
    args.output.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload["stats"] = stats
    payload["repaired_bids"] = stats["repaired_bids"]
    (args.output / "calibration.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")
    _write_smile_csv(args.output / "smile.csv", points, report.chi_star)
    p = report.chi_star
    text = (
        f"{report.method.value}: a={p.a:.6g} b={p.b:.6g} rho={p.rho:.6g} m={p.m:.6g} sigma={p.sigma:.6g}\n"
        f"loss={report.final_loss:.6g} iterations={report.iterations} converged={report.converged} "
        f"repaired_bids={stats['repaired_bids']} butterfly_free={report.butterfly.arbitrage_free}\n"
        f"wrote {args.output / 'calibration.json'} and {args.output / 'smile.csv'}"
    )
    _emit(args, payload, text)
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


# ---------------------------------------------------------------------------
# simulate / iv / diagnose
# ---------------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    if args.use_case not in USE_CASES:
        raise InputError(f"unknown use case {args.use_case}; choose from {sorted(USE_CASES)}")
    if args.scenarios < MIN_SCENARIOS:
        raise InputError(f"--scenarios must be >= {MIN_SCENARIOS}")
    spec = replace(USE_CASES[args.use_case], spurious_placement=args.placement)
    cfg = CalibrationConfig(n_aug=args.n_aug, huber_delta=args.huber_delta, restarts=args.restarts, seed=args.seed)
    report = run_experiment(spec, args.scenarios, args.seed, cfg, workers=args.workers, use_case=args.use_case)
    if args.output:
        args.output.write_text(report.to_json(indent=2), encoding="utf-8")
    if args.scenario_csv:
        report.write_scenarios_csv(args.scenario_csv)
    _emit(args, report.to_dict(), report.table())
    return EXIT_OK


def cmd_iv(args: argparse.Namespace) -> int:
    sigma = implied_vol(args.price, args.forward, args.strike, args.tau, args.type == "call")
    _emit(args, {"implied_vol": sigma}, f"{sigma:.10g}")
    return EXIT_OK


def cmd_diagnose(args: argparse.Namespace) -> int:
    if not (math.isfinite(args.tau) and args.tau > 0):
        raise InputError("--tau must be > 0")
    if not (math.isfinite(args.tick) and args.tick > 0):
        raise InputError("--tick must be > 0")
    rep = rho_condition_report(args.tau, args.tick, args.spread_ticks, args.min_ticks)
    if args.output:
        rep.write_csv(args.output)
    verdict = "condition met" if rep.condition_met else "condition NOT met"
    _emit(args, rep.to_dict(), f"tau={args.tau:.6g} min|rho|={rep.min_abs_rho:.6g} threshold={1 / math.sqrt(12):.6g}: {verdict}")
    return EXIT_OK


COMMANDS = {"calibrate": cmd_calibrate, "simulate": cmd_simulate, "iv": cmd_iv, "diagnose": cmd_diagnose}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        return COMMANDS[args.command](args)
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (InputError, SmileCalError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
