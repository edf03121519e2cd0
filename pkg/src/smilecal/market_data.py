"""Quote ingestion: unit conversion, moneyness, OTM filtering and bid repair.

Deribit-style options are quoted in crypto per contract, in integer ticks.
A crypto price ``ticks * tick_size`` is turned into forward units with
``X * price / Bf`` where ``X`` is the spot rate and ``Bf`` the fiat discount
factor.  All downstream math works on these forward-unit prices.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from enum import Enum
from typing import Iterable, Sequence

from smilecal.errors import (
    IncoherentAskError,
    InvalidInputError,
    QuoteDroppedError,
    QuoteParseError,
)

DAYS_PER_YEAR = 365.25
CSV_HEADER = ("type", "strike", "expiry", "bid_ticks", "ask_ticks", "tick_size", "spot", "future", "discount")


class OptionType(str, Enum):
    CALL = "call"
    PUT = "put"

    @classmethod
    def parse(cls, text: str) -> "OptionType":
        t = text.strip().lower()
        if t in ("c", "call"):
            return cls.CALL
        if t in ("p", "put"):
            return cls.PUT
        raise ValueError(f"unknown option type {text!r}")


@dataclass(frozen=True, slots=True)
class Quote:
    option_type: OptionType
    strike: float
    expiry: datetime
    bid_ticks: int | None
    ask_ticks: int | None
    tick_size: float
    spot: float
    future: float
    discount: float = 1.0

    def __post_init__(self) -> None:
        if not (self.tick_size > 0 and self.strike > 0 and self.future > 0 and self.spot > 0):
            raise InvalidInputError("tick_size, strike, spot and future must be strictly positive")
        if not 0.0 < self.discount <= 1.0:
            raise InvalidInputError(f"discount must lie in (0, 1], got {self.discount}")
        if self.bid_ticks is not None and self.bid_ticks < 0:
            raise InvalidInputError("bid_ticks must be >= 0")
        if self.ask_ticks is not None and self.ask_ticks <= 0:
            raise InvalidInputError("ask_ticks must be > 0")

    @property
    def is_call(self) -> bool:
        return self.option_type is OptionType.CALL

    @property
    def tick_fwd(self) -> float:
        """One tick expressed in forward units."""
        return self.spot * self.tick_size / self.discount


@dataclass(frozen=True, slots=True)
class MarketPoint:
    """A normalised top-of-book observation, prices in forward units."""

    tau: float
    k: float
    forward: float
    strike: float
    is_call: bool
    bid: float
    ask: float
    tick: float
    bid_repaired: bool = False
    source: Quote | None = None

    @property
    def mid(self) -> float:
        return 0.5 * (self.bid + self.ask)

    @property
    def spread(self) -> float:
        return self.ask - self.bid

    @property
    def lower_bound(self) -> float:
        if self.is_call:
            return max(self.forward - self.strike, 0.0)
        return max(self.strike - self.forward, 0.0)

    @property
    def upper_bound(self) -> float:
        return self.forward if self.is_call else self.strike

    @classmethod
    def from_forward_prices(
        cls,
        *,
        k: float,
        tau: float,
        bid: float,
        ask: float,
        is_call: bool,
        forward: float = 1.0,
        tick: float = 5e-4,
    ) -> "MarketPoint":
        return cls(tau=tau, k=k, forward=forward, strike=forward * math.exp(k), is_call=is_call,
                   bid=bid, ask=ask, tick=tick)


def forward_from_irp(spot: float, crypto_discount: float, fiat_discount: float) -> float:
    """Forward exchange rate from interest-rate parity, X * Bc / Bf."""
    for name, v in (("spot", spot), ("crypto_discount", crypto_discount), ("fiat_discount", fiat_discount)):
        if not math.isfinite(v) or v <= 0:
            raise InvalidInputError(f"{name} must be finite and > 0, got {v}")
    if crypto_discount > 1 or fiat_discount > 1:
        raise InvalidInputError("discount factors must lie in (0, 1]")
    return spot * crypto_discount / fiat_discount


def year_fraction(start: datetime, end: datetime) -> float:
    """ACT/365.25 year fraction."""
    return (as_utc(end) - as_utc(start)).total_seconds() / (86400.0 * DAYS_PER_YEAR)


def as_utc(t: datetime) -> datetime:
    if t.tzinfo is None:
        return t.replace(tzinfo=timezone.utc)
    return t.astimezone(timezone.utc)


def normalize_quote(q: Quote, now: datetime) -> MarketPoint:
    """Convert a tick quote to a forward-unit :class:`MarketPoint`.

    A missing ask drops the quote.  A missing bid is encoded as 0 and the
    point is left for :func:`repair_bid`.
    """
    if q.ask_ticks is None:
        raise QuoteDroppedError("quote has no ask")
    tau = year_fraction(now, q.expiry)
    if tau <= 0:
        raise QuoteDroppedError(f"quote expired ({q.expiry.isoformat()} <= {now.isoformat()})")
    tick = q.tick_fwd
    bid = 0.0 if q.bid_ticks is None else q.bid_ticks * tick
    return MarketPoint(
        tau=tau,
        k=math.log(q.strike / q.future),
        forward=q.future,
        strike=q.strike,
        is_call=q.is_call,
        bid=bid,
        ask=q.ask_ticks * tick,
        tick=tick,
        bid_repaired=False,
        source=q,
    )


def to_ticks(price: float, tick: float) -> int:
    """Inverse of the tick conversion; exact for prices produced by it."""
    return int(round(price / tick))


def filter_otm(points: Iterable[MarketPoint]) -> list[MarketPoint]:
    """Keep calls with k >= 0 and puts with k <= 0 (both sides kept at k = 0)."""
    return [p for p in points if (p.is_call and p.k >= 0) or (not p.is_call and p.k <= 0)]


def repair_bid(p: MarketPoint) -> MarketPoint:
    """Project a missing or incoherent bid on the lower arbitrage bound.

    The replacement bid is the first tick-grid price strictly above the lower
    bound, never below one tick.  If that would not leave room under the ask,
    the bid is put on the bound itself.
    """
    lower, upper = p.lower_bound, p.upper_bound
    if not lower < p.ask < upper:
        raise IncoherentAskError(f"ask {p.ask} outside arbitrage bounds ({lower}, {upper})")
    if lower < p.bid < p.ask:
        return p
    bid = max((math.floor(lower / p.tick + 1e-9) + 1) * p.tick, p.tick)
    if bid >= p.ask:
        bid = lower
    return replace(p, bid=bid, bid_repaired=True)


def prepare_points(quotes: Iterable[Quote], now: datetime) -> tuple[list[MarketPoint], dict[str, int]]:
    """normalize -> repair -> OTM filter, with counts of what was dropped or fixed."""
    stats = {"quotes": 0, "dropped_no_ask": 0, "dropped_expired": 0, "dropped_incoherent_ask": 0,
             "repaired_bids": 0, "itm_filtered": 0}
    points: list[MarketPoint] = []
    for q in quotes:
        stats["quotes"] += 1
        try:
            p = normalize_quote(q, now)
        except QuoteDroppedError:
            stats["dropped_no_ask" if q.ask_ticks is None else "dropped_expired"] += 1
            continue
        try:
            p = repair_bid(p)
        except IncoherentAskError:
            stats["dropped_incoherent_ask"] += 1
            continue
        stats["repaired_bids"] += p.bid_repaired
        points.append(p)
    kept = filter_otm(points)
    stats["itm_filtered"] = len(points) - len(kept)
    return kept, stats


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _parse_expiry(text: str) -> datetime:
    t = text.strip()
    if t.endswith("Z"):
        t = t[:-1] + "+00:00"
    return as_utc(datetime.fromisoformat(t))


def _parse_int(text: str, *, optional: bool) -> int | None:
    t = text.strip()
    if t == "":
        if optional:
            return None
        raise ValueError("empty field")
    v = float(t)
    if v != int(v):
        raise ValueError(f"tick count {t!r} is not an integer")
    return int(v)


def parse_quotes(stream: io.TextIOBase | Iterable[str]) -> list[Quote]:
    """Parse the quote CSV; the first record must be the header row."""
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise QuoteParseError("empty file", line=1) from None
    cols = [h.strip().lower() for h in header]
    missing = [c for c in CSV_HEADER if c not in cols]
    if missing:
        raise QuoteParseError(f"missing columns {missing}", line=1)
    idx = {c: cols.index(c) for c in CSV_HEADER}

    quotes: list[Quote] = []
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < len(cols):
            raise QuoteParseError(f"expected {len(cols)} fields, got {len(row)}", line=line)
        try:
            ask = _parse_int(row[idx["ask_ticks"]], optional=True)
            quotes.append(
                Quote(
                    option_type=OptionType.parse(row[idx["type"]]),
                    strike=float(row[idx["strike"]]),
                    expiry=_parse_expiry(row[idx["expiry"]]),
                    bid_ticks=_parse_int(row[idx["bid_ticks"]], optional=True),
                    ask_ticks=ask,
                    tick_size=float(row[idx["tick_size"]]),
                    spot=float(row[idx["spot"]]),
                    future=float(row[idx["future"]]),
                    discount=float(row[idx["discount"]]),
                )
            )
        except (ValueError, InvalidInputError) as exc:
            raise QuoteParseError(str(exc), line=line) from exc
    return quotes


def read_quotes_csv(path: str | os.PathLike[str]) -> list[Quote]:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_quotes(fh)


def write_quotes_csv(path: str | os.PathLike[str], quotes: Sequence[Quote]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for q in quotes:
            w.writerow([
                q.option_type.value,
                repr(q.strike),
                q.expiry.isoformat(),
                "" if q.bid_ticks is None else q.bid_ticks,
                "" if q.ask_ticks is None else q.ask_ticks,
                repr(q.tick_size),
                repr(q.spot),
                repr(q.future),
                repr(q.discount),
            ])
