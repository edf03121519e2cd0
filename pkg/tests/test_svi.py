import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smilecal.errors import InvalidParamsError, UndefinedPointError
from smilecal.svi import (
    REFERENCE_PARAMS as CHI,
    SviParams,
    butterfly_g,
    butterfly_scan,
    from_unconstrained,
    svi_derivatives,
    svi_implied_vol,
    svi_total_variance,
    to_unconstrained,
    validate_svi,
)

valid_params = st.builds(
    SviParams,
    a=st.floats(0.0, 0.2),
    b=st.floats(0.0, 1.0),
    rho=st.floats(-0.99, 0.99),
    m=st.floats(-0.5, 0.5),
    sigma=st.floats(0.01, 1.0),
)


def test_reference_values():
    assert svi_total_variance(CHI, 0.05) == pytest.approx(0.14, abs=1e-15)
    assert svi_total_variance(CHI, 0.0) == pytest.approx(0.143416, abs=1e-6)
    assert CHI.min_variance == pytest.approx(0.134473, abs=1e-6)
    assert svi_implied_vol(CHI, 0.05, 0.25) == pytest.approx(math.sqrt(0.56))


def test_asymptotic_slopes():
    w = lambda k: svi_total_variance(CHI, k)  # noqa: E731
    assert (w(1e6 + 1) - w(1e6)) == pytest.approx(0.14, rel=1e-6)
    assert (w(-1e6) - w(-1e6 - 1)) == pytest.approx(-0.26, rel=1e-6)


def test_validate():
    assert validate_svi(CHI)
    assert not validate_svi(replace(CHI, rho=1.5))
    assert not validate_svi(replace(CHI, b=-0.1))
    assert not validate_svi(replace(CHI, sigma=0.0))
    assert not validate_svi(replace(CHI, a=-1.0))
    assert not validate_svi(replace(CHI, m=math.nan))


def test_invalid_params_raise():
    with pytest.raises(InvalidParamsError):
        svi_total_variance(replace(CHI, b=-1.0), 0.0)


def test_array_evaluation_shape():
    assert svi_total_variance(CHI, np.zeros((2, 3))).shape == (2, 3)


@given(valid_params)
@settings(max_examples=200)
def test_convex_and_bounded_below(chi):
    if not validate_svi(chi):
        return
    k = np.linspace(-2, 2, 201)
    w = svi_total_variance(chi, k)
    assert np.all(np.diff(w, 2) >= -1e-12)
    assert np.all(w >= chi.min_variance - 1e-12)
    assert np.all(w >= 0)


@given(valid_params, st.floats(-1.0, 1.0))
@settings(max_examples=100)
def test_translation_invariance(chi, shift):
    if not validate_svi(chi):
        return
    k = np.linspace(-1, 1, 11)
    moved = replace(chi, m=chi.m + shift)
    np.testing.assert_allclose(svi_total_variance(moved, k + shift), svi_total_variance(chi, k), atol=1e-12)


def test_derivatives_against_finite_differences():
    k, h = np.linspace(-1, 1, 9), 1e-5
    w, w1, w2 = svi_derivatives(CHI, k)
    f = lambda x: svi_total_variance(CHI, x)  # noqa: E731
    np.testing.assert_allclose(w1, (f(k + h) - f(k - h)) / (2 * h), rtol=1e-7)
    np.testing.assert_allclose(w2, (f(k + h) - 2 * f(k) + f(k - h)) / h**2, rtol=1e-4)


def test_butterfly_flat_smile():
    flat = SviParams(a=0.04, b=0.0, rho=0.0, m=0.0, sigma=0.1)
    np.testing.assert_allclose(butterfly_g(flat, np.linspace(-1, 1, 5)), 1.0)


def test_butterfly_reference_smile_is_arbitrage_free():
    chk = butterfly_scan(CHI)
    assert chk.arbitrage_free and chk.min_g > 0


def test_butterfly_flags_steep_smile():
    chk = butterfly_scan(replace(CHI, b=2.0))
    assert not chk.arbitrage_free and chk.min_g < 0


def test_butterfly_undefined_where_variance_vanishes():
    chi = SviParams(a=-0.1, b=0.5, rho=0.0, m=0.0, sigma=0.2)  # w(0) = 0
    with pytest.raises(UndefinedPointError):
        butterfly_g(chi, 0.0)


def test_butterfly_formula_against_density():
    # g(k) n(d-) / sqrt(w) is the risk-neutral density in k; check with a finite-difference call price
    from smilecal.pricing import black_price

    tau, h = 1.0, 1e-4
    k = np.array([-0.6, 0.0, 0.4])

    def call(kk):
        iv = np.sqrt(svi_total_variance(CHI, kk) / tau)
        return black_price(1.0, np.exp(kk), tau, iv, True)

    K = np.exp(k)
    d2c = (call(k + h) - 2 * call(k) + call(k - h)) / h**2
    dc = (call(k + h) - call(k - h)) / (2 * h)
    density_K = (d2c - dc) / K**2  # d2C/dK2 from derivatives in k
    w = svi_total_variance(CHI, k)
    dm = -k / np.sqrt(w) - np.sqrt(w) / 2
    density_from_g = butterfly_g(CHI, k) * np.exp(-dm * dm / 2) / np.sqrt(2 * np.pi * w) / K
    np.testing.assert_allclose(density_K, density_from_g, rtol=1e-4)


def test_json_roundtrip():
    d = json.loads(CHI.to_json())
    assert set(d) == {"a", "b", "rho", "m", "sigma"}
    assert SviParams.from_dict(d) == CHI


@given(valid_params)
def test_unconstrained_roundtrip(chi):
    if chi.b < 1e-9 or abs(chi.rho) > 0.98:
        return
    back = from_unconstrained(to_unconstrained(chi))
    np.testing.assert_allclose(back.as_array(), chi.as_array(), rtol=1e-9, atol=1e-12)
