import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from smilecal.anchor import AnchorResult, compute_anchor
from smilecal.augmentation import (
    augment_arrays,
    augment_quote,
    beta_cell_weights,
    cell_midpoints,
    solve_beta_a,
    solve_beta_shapes,
)
from smilecal.errors import InvalidInputError, InvalidPointError
from smilecal.market_data import MarketPoint
from smilecal.pricing import implied_vol_array


def wing_quote():
    return MarketPoint.from_forward_prices(k=0.8, tau=0.25, bid=0.0030, ask=0.0045, is_call=True)


def test_cell_midpoints():
    np.testing.assert_allclose(cell_midpoints(4), [0.125, 0.375, 0.625, 0.875])


@pytest.mark.parametrize("a,n", [(2.0, 2), (0.3, 7), (1.0, 5), (40.0, 100)])
def test_weights_are_beta_cell_masses(a, n):
    w = beta_cell_weights(a, n)
    edges = np.arange(n + 1) / n
    np.testing.assert_allclose(w, np.diff(stats.beta(a, 1).cdf(edges)), atol=1e-15)
    assert w.sum() == pytest.approx(1.0, abs=1e-14)


def test_weights_reference():
    np.testing.assert_allclose(beta_cell_weights(2.0, 2), [0.25, 0.75])
    np.testing.assert_allclose(beta_cell_weights(1.0, 4), [0.25] * 4)


def test_weights_validate():
    with pytest.raises(InvalidInputError):
        beta_cell_weights(0.0, 3)
    with pytest.raises(InvalidInputError):
        beta_cell_weights(1.0, 0)


def test_shape_centres_the_quote():
    p = wing_quote()
    anc = compute_anchor(p)
    aug = augment_quote(p, anc, 100)
    target = implied_vol_array(anc.anchor, 1.0, p.strike, 0.25, True) ** 2
    assert not aug.clamped_edge
    assert aug.weights @ aug.iv2 == pytest.approx(target, abs=1e-12)
    assert aug.beta_a == pytest.approx(1.0676, abs=1e-4)
    assert len(aug.points) == 100
    np.testing.assert_allclose(aug.total_variance, 0.25 * aug.iv2)


def test_bisection_matches_brute_force_scan():
    p = wing_quote()
    anc = compute_anchor(p)
    n = 50
    x = cell_midpoints(n)
    phi = implied_vol_array(p.bid + x * p.spread, 1.0, p.strike, 0.25, True) ** 2
    target = implied_vol_array(anc.anchor, 1.0, p.strike, 0.25, True) ** 2
    grid = np.exp(np.linspace(math.log(0.5), math.log(2.0), 200001))
    means = np.array([beta_cell_weights(a, n) @ phi for a in grid[::100]])
    coarse = grid[::100][np.argmin(np.abs(means - target))]
    fine = grid[(grid > coarse / 1.01) & (grid < coarse * 1.01)]
    best = fine[np.argmin([abs(beta_cell_weights(a, n) @ phi - target) for a in fine])]
    got = solve_beta_a(p, anc, n)
    assert got.a == pytest.approx(best, rel=1e-4)


def test_large_n_limit_is_the_continuous_beta_mean():
    p = wing_quote()
    anc = compute_anchor(p)
    a = solve_beta_a(p, anc, 2000).a

    def integrand(x):
        iv = implied_vol_array(p.bid + x * p.spread, 1.0, p.strike, 0.25, True)
        return iv * iv * a * x ** (a - 1)

    cont, _ = integrate.quad(integrand, 0.0, 1.0, limit=200)
    target = implied_vol_array(anc.anchor, 1.0, p.strike, 0.25, True) ** 2
    assert cont == pytest.approx(target, rel=1e-6)


def test_unreachable_targets_are_clamped():
    phi = np.array([[1.0, 2.0, 3.0]])
    a, clamped = solve_beta_shapes(phi, np.array([5.0]))
    assert clamped[0] and a[0] == pytest.approx(1e6)
    a, clamped = solve_beta_shapes(phi, np.array([0.5]))
    assert clamped[0] and a[0] == pytest.approx(1e-6)


def test_uniform_target_gives_unit_shape():
    phi = np.array([[0.1, 0.2, 0.4, 0.8]])
    a, clamped = solve_beta_shapes(phi, np.array([phi.mean()]))
    assert not clamped[0] and a[0] == pytest.approx(1.0, abs=1e-10)


def test_anchor_outside_interval_rejected():
    p = wing_quote()
    bad = AnchorResult(rho=1.0, nu=0.6, anchor=p.ask + 1e-4, clamped=False, mid_iv=0.4)
    with pytest.raises(InvalidPointError):
        solve_beta_a(p, bad)
    with pytest.raises(InvalidInputError):
        solve_beta_a(p, compute_anchor(p), 1)


def test_single_point_is_the_anchor():
    p = wing_quote()
    anc = compute_anchor(p)
    aug = augment_quote(p, anc, 1)
    assert aug.prices[0] == anc.anchor and aug.weights[0] == 1.0


def test_batch_matches_single():
    quotes = [wing_quote(),
              MarketPoint.from_forward_prices(k=-0.5, tau=0.25, bid=0.012, ask=0.0135, is_call=False),
              MarketPoint.from_forward_prices(k=0.0, tau=0.25, bid=0.149, ask=0.150, is_call=True)]
    anchors = [compute_anchor(q) for q in quotes]
    iv2, w, a, clamped = augment_arrays(
        np.array([q.bid for q in quotes]), np.array([q.spread for q in quotes]),
        np.array([x.anchor for x in anchors]), 1.0, np.array([q.strike for q in quotes]), 0.25,
        np.array([q.is_call for q in quotes]), n=20)
    for i, (q, anc) in enumerate(zip(quotes, anchors)):
        single = augment_quote(q, anc, 20)
        np.testing.assert_allclose(iv2[i], single.iv2, rtol=1e-13)
        np.testing.assert_allclose(w[i], single.weights, rtol=1e-12, atol=1e-16)
        assert a[i] == pytest.approx(single.beta_a, rel=1e-12)


@given(nu=st.floats(-0.28, 0.28), n=st.integers(2, 60))
@settings(max_examples=60, deadline=None)
def test_centering_invariant_property(nu, n):
    p = wing_quote()
    anchor = p.mid + nu * p.spread
    res = AnchorResult(rho=math.nan, nu=nu, anchor=anchor, clamped=False, mid_iv=math.nan)
    aug = augment_quote(p, res, n)
    target = implied_vol_array(anchor, 1.0, p.strike, 0.25, True) ** 2
    if not aug.clamped_edge:
        assert aug.weights @ aug.iv2 == pytest.approx(target, abs=1e-10)
