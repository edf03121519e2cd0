import io
import math
from datetime import datetime, timedelta, timezone

import pytest

from smilecal.errors import IncoherentAskError, InvalidInputError, QuoteDroppedError, QuoteParseError
from smilecal.market_data import (
    CSV_HEADER,
    MarketPoint,
    OptionType,
    Quote,
    filter_otm,
    forward_from_irp,
    normalize_quote,
    parse_quotes,
    prepare_points,
    read_quotes_csv,
    repair_bid,
    to_ticks,
    write_quotes_csv,
    year_fraction,
)

NOW = datetime(2024, 3, 1, 8, 0, tzinfo=timezone.utc)
EXP = datetime(2024, 3, 29, 8, 0, tzinfo=timezone.utc)


def quote(**kw):
    base = dict(option_type=OptionType.CALL, strike=70000.0, expiry=EXP, bid_ticks=40, ask_ticks=45,
                tick_size=0.0005, spot=60000.0, future=60500.0, discount=0.995)
    base.update(kw)
    return Quote(**base)


def test_option_type_parse():
    assert OptionType.parse("C") is OptionType.CALL
    assert OptionType.parse(" put ") is OptionType.PUT
    with pytest.raises(ValueError):
        OptionType.parse("straddle")


def test_quote_validation():
    with pytest.raises(InvalidInputError):
        quote(tick_size=0.0)
    with pytest.raises(InvalidInputError):
        quote(discount=1.2)
    with pytest.raises(InvalidInputError):
        quote(bid_ticks=-1)
    with pytest.raises(InvalidInputError):
        quote(ask_ticks=0)


def test_forward_from_irp():
    assert forward_from_irp(60000.0, 0.999, 0.99) == pytest.approx(60000.0 * 0.999 / 0.99)
    with pytest.raises(InvalidInputError):
        forward_from_irp(60000.0, 1.1, 0.99)
    with pytest.raises(InvalidInputError):
        forward_from_irp(-1.0, 0.9, 0.99)


def test_year_fraction_act_365_25():
    assert year_fraction(NOW, NOW + timedelta(days=365.25)) == pytest.approx(1.0)
    naive = datetime(2024, 3, 1, 8, 0)
    assert year_fraction(naive, EXP) == pytest.approx(28 / 365.25)


def test_normalize_converts_ticks_to_forward_units():
    q = quote()
    p = normalize_quote(q, NOW)
    tick = 60000.0 * 0.0005 / 0.995
    assert p.tick == pytest.approx(tick)
    assert p.bid == pytest.approx(40 * tick)
    assert p.ask == pytest.approx(45 * tick)
    assert p.k == pytest.approx(math.log(70000.0 / 60500.0))
    assert p.tau == pytest.approx(28 / 365.25)
    assert to_ticks(p.ask, p.tick) == 45


def test_normalize_drops_missing_ask_and_expired():
    with pytest.raises(QuoteDroppedError):
        normalize_quote(quote(ask_ticks=None), NOW)
    with pytest.raises(QuoteDroppedError):
        normalize_quote(quote(), EXP + timedelta(seconds=1))


def test_missing_bid_becomes_zero():
    assert normalize_quote(quote(bid_ticks=None), NOW).bid == 0.0


def pt(bid, ask, k=0.3, is_call=True, tick=5e-4):
    return MarketPoint.from_forward_prices(k=k, tau=0.25, bid=bid, ask=ask, is_call=is_call, tick=tick)


def test_repair_leaves_coherent_bid():
    p = pt(0.010, 0.012)
    assert repair_bid(p) is p


@pytest.mark.parametrize("bid", [0.0, -0.001, 0.013])
def test_repair_moves_incoherent_bid_to_first_tick(bid):
    r = repair_bid(pt(bid, 0.012))
    assert r.bid_repaired
    assert r.bid == pytest.approx(5e-4)
    assert r.lower_bound < r.bid < r.ask


def test_repair_in_the_money_bid_lands_above_intrinsic():
    # call with K = e^-0.1: intrinsic 1 - K ~ 0.0951626
    p = pt(0.09, 0.1, k=-0.1)
    r = repair_bid(p)
    assert r.bid > r.lower_bound
    assert r.bid == pytest.approx(math.floor(r.lower_bound / 5e-4 + 1) * 5e-4)


def test_repair_falls_back_to_bound_when_no_tick_fits():
    r = repair_bid(pt(0.0, 4e-4))
    assert r.bid == 0.0 and r.bid_repaired


@pytest.mark.parametrize("ask", [0.0, 1.0, 1.5])
def test_repair_rejects_incoherent_ask(ask):
    with pytest.raises(IncoherentAskError):
        repair_bid(pt(0.001, ask))


def test_filter_otm_keeps_both_sides_at_the_money():
    pts = [pt(0.1, 0.11, k=0.0, is_call=True), pt(0.1, 0.11, k=0.0, is_call=False),
           pt(0.01, 0.02, k=0.2, is_call=False), pt(0.01, 0.02, k=-0.2, is_call=True),
           pt(0.01, 0.02, k=0.2, is_call=True), pt(0.01, 0.02, k=-0.2, is_call=False)]
    kept = filter_otm(pts)
    assert [(p.k, p.is_call) for p in kept] == [(0.0, True), (0.0, False), (0.2, True), (-0.2, False)]


def test_point_bounds():
    call = pt(0.01, 0.02, k=-0.2)
    assert call.lower_bound == pytest.approx(1 - math.exp(-0.2))
    assert call.upper_bound == 1.0
    put = pt(0.01, 0.02, k=0.2, is_call=False)
    assert put.upper_bound == pytest.approx(math.exp(0.2))


def test_prepare_points_counts():
    quotes = [
        quote(),
        quote(bid_ticks=None),
        quote(ask_ticks=None),
        quote(expiry=NOW - timedelta(days=1)),
        quote(strike=50000.0, bid_ticks=700, ask_ticks=720),  # ITM call
        quote(option_type=OptionType.PUT, strike=50000.0, bid_ticks=5, ask_ticks=8),
        quote(ask_ticks=10**7),  # ask above the forward
    ]
    pts, stats = prepare_points(quotes, NOW)
    assert stats == {"quotes": 7, "dropped_no_ask": 1, "dropped_expired": 1, "dropped_incoherent_ask": 1,
                     "repaired_bids": 1, "itm_filtered": 1}
    assert len(pts) == 3


def test_csv_roundtrip(tmp_path):
    quotes = [quote(), quote(bid_ticks=None, option_type=OptionType.PUT, strike=50000.0)]
    path = tmp_path / "q.csv"
    write_quotes_csv(path, quotes)
    assert read_quotes_csv(path) == quotes
    assert path.read_text().splitlines()[0] == ",".join(CSV_HEADER)


def test_parse_reports_line_numbers():
    text = ",".join(CSV_HEADER) + "\n" + \
        "call,70000,2024-03-29T08:00:00Z,40,45,0.0005,60000,60500,0.995\n" + \
        "call,70000,2024-03-29T08:00:00Z,4x,45,0.0005,60000,60500,0.995\n"
    with pytest.raises(QuoteParseError, match="line 3") as exc:
        parse_quotes(io.StringIO(text))
    assert exc.value.line == 3


def test_parse_rejects_missing_columns_and_short_rows():
    with pytest.raises(QuoteParseError, match="missing columns"):
        parse_quotes(io.StringIO("type,strike\ncall,1\n"))
    with pytest.raises(QuoteParseError, match="line 2"):
        parse_quotes(io.StringIO(",".join(CSV_HEADER) + "\ncall,1,2\n"))
    with pytest.raises(QuoteParseError, match="line 1"):
        parse_quotes(io.StringIO(""))


def test_parse_rejects_fractional_ticks_and_skips_blank_lines():
    ok = ",".join(CSV_HEADER) + "\n\ncall,70000,2024-03-29T08:00:00Z,,45,0.0005,60000,60500,0.995\n"
    (q,) = parse_quotes(io.StringIO(ok))
    assert q.bid_ticks is None and q.expiry.tzinfo is not None
    bad = ",".join(CSV_HEADER) + "\ncall,70000,2024-03-29T08:00:00Z,4.5,45,0.0005,60000,60500,0.995\n"
    with pytest.raises(QuoteParseError):
        parse_quotes(io.StringIO(bad))


def test_bundled_sample_has_a_missing_bid_wing():
    from importlib.resources import files

    quotes = read_quotes_csv(files("smilecal") / "data" / "sample_quotes.csv")
    missing = [q for q in quotes if q.bid_ticks is None]
    assert 0.10 <= len(missing) / len(quotes) <= 0.15
    assert all(q.option_type is OptionType.CALL and q.strike > q.future for q in missing)
