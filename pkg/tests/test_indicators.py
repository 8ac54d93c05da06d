import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from vta.errors import ParameterError
from vta.indicators import (IndicatorConfig, adx, bollinger, cci, compute_panel, ema, macd_line, momentum,
                            rsi, sma, stochastic_k, williams_r, window_stats)
from vta.market import BarSeries


def bars_from(high, low, close):
    n = len(close)
    c = np.asarray(close, dtype=float)
    return BarSeries(np.datetime64("2021-01-04") + np.arange(n), c.copy(), np.asarray(high, dtype=float),
                     np.asarray(low, dtype=float), c, c.copy(), np.ones(n))


def same(a, b, tol=1e-9):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.array_equal(np.isnan(a), np.isnan(b)) and np.all(np.abs(a - b)[~np.isnan(a)] < tol)


def test_sma_examples():
    assert sma([1, 2, 3, 4, 5], 5)[-1] == 3.0
    assert sma([7, 7, 7, 7], 4)[-1] == 7.0
    assert same(sma([2, 4, 6], 2), [np.nan, 3.0, 5.0])
    assert np.all(np.isnan(sma([1, 2], 3)))


def test_ema_examples():
    assert np.all(ema([4.0] * 8, 3)[2:] == 4.0)
    assert ema([2, 4], 1).tolist() == [2.0, 4.0]
    assert ema([1, 2, 3, 4], 3)[-1] == 3.0
    assert np.all(np.isnan(ema([1, 2], 3)))


def test_momentum_examples():
    assert np.all(momentum([3.0] * 6, 2)[2:] == 0)
    assert momentum([10, 11, 12, 13, 14, 15], 5)[-1] == 5.0
    d = 0.25
    x = 1 + d * np.arange(20)
    assert np.allclose(momentum(x, 7)[7:], 7 * d, atol=1e-12)


def test_rsi_examples():
    assert np.all(rsi(np.arange(1.0, 20), 14)[14:] == 100.0)
    assert np.all(rsi(np.arange(20.0, 1, -1), 14)[14:] == 0.0)
    alt = np.cumsum([0] + [1, -1] * 10).astype(float) + 10
    assert np.allclose(rsi(alt, 4)[4:], 50.0)


def test_macd_examples():
    assert np.all(macd_line([5.0] * 40)[25:] == 0)
    with pytest.raises(ParameterError):
        macd_line([1.0] * 40, 12, 12)
    ramp = np.arange(1.0, 60)
    m = macd_line(ramp)
    assert np.all(m[25:] > 0)
    assert same(m, np.array(oracles.macd(list(ramp), 12, 26)))


def test_range_oscillators_examples():
    b = bars_from([10, 12, 11], [8, 9, 7], [9, 12, 7])
    assert williams_r(b, 3)[-1] == -100.0 and stochastic_k(b, 3)[-1] == 0.0
    b = bars_from([10, 12, 11], [8, 9, 7], [9, 10, 12])
    assert williams_r(b, 3)[-1] == 0.0 and stochastic_k(b, 3)[-1] == 100.0
    b = bars_from([10, 12, 11], [8, 9, 8], [9, 10, 10])
    assert williams_r(b, 3)[-1] == -50.0 and stochastic_k(b, 3)[-1] == 50.0
    flat = bars_from([5] * 4, [5] * 4, [5] * 4)
    assert williams_r(flat, 3)[-1] == -50.0 and stochastic_k(flat, 3)[-1] == 50.0


def test_cci_examples():
    flat = bars_from([5] * 4, [5] * 4, [5] * 4)
    assert np.all(cci(flat, 3)[2:] == 0)
    # high = low = close makes the typical price equal the close
    b = bars_from([1, 2, 3], [1, 2, 3], [1, 2, 3])
    assert cci(b, 3)[-1] == pytest.approx(100.0, abs=1e-12)
    b = bars_from([1, 3, 2], [1, 3, 2], [1, 3, 2])
    assert cci(b, 3)[-1] == 0.0


def test_adx_examples():
    flat = bars_from([5] * 12, [4] * 12, [4.5] * 12)
    assert np.all(adx(flat, 3)[3:] == 0)
    d = 0.5
    rising = bars_from(10 + d * np.arange(12), [9.0] * 12, 9.5 + d * np.arange(12))
    assert np.allclose(adx(rising, 3)[3:], 100.0, atol=1e-12)
    assert np.all(np.isnan(adx(bars_from([1.0], [1.0], [1.0]), 1)))


def test_bollinger_examples():
    up, lo = bollinger([2.0] * 5, 3)
    assert np.all(up[2:] == 2.0) and np.all(lo[2:] == 2.0)
    up, lo = bollinger([1, 2, 3], 3, 2)
    assert up[-1] == pytest.approx(3.63299, abs=1e-5)
    assert up[-1] == pytest.approx(2 + 2 * math.sqrt(2 / 3), abs=1e-14)
    with pytest.raises(ParameterError):
        bollinger([1, 2, 3], 3, 0)


def test_window_stats():
    assert window_stats([1, 3, 2])[:3] == (2.0, 1.0, 3.0)
    assert window_stats([5]) == (5.0,) * 5
    x = np.random.default_rng(0).normal(size=1000)
    assert np.allclose(window_stats(x), oracles.window_stats(list(x)), rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        window_stats([])


def test_config_validation():
    with pytest.raises(ParameterError):
        IndicatorConfig(macd_fast=26, macd_slow=12)
    with pytest.raises(ParameterError):
        IndicatorConfig(rsi_n=0)
    with pytest.raises(ParameterError):
        IndicatorConfig(boll_k=0)


@pytest.mark.parametrize("coarse", [False, True])
def test_panel_matches_oracle(coarse):
    rng = np.random.default_rng(1 + coarse)
    for _ in range(20):
        b = oracles.random_bars(rng, 60, coarse)
        p = compute_panel(b).series
        x, h, l, c = list(b.adj_close), list(b.high), list(b.low), list(b.close)
        up, lo = oracles.bollinger(x, 20, 2.0)
        assert same(p["SMA"], oracles.sma(x, 10))
        assert same(p["EMA"], oracles.ema(x, 10))
        assert same(p["Momentum"], oracles.momentum(x, 10))
        assert same(p["RSI"], oracles.rsi(x, 14))
        assert same(p["MACD"], oracles.macd(x, 12, 26))
        assert same(p["WilliamsR"], oracles.williams_r(h, l, c, 10))
        assert same(p["StochasticK"], oracles.stochastic_k(h, l, c, 10))
        assert same(p["CCI"], oracles.cci(h, l, c, 10))
        assert same(p["ADX"], oracles.adx(h, l, 10))
        assert same(p["BollingerUpper"], up) and same(p["BollingerLower"], lo)



@given(seed=st.integers(0, 10_000), n=st.integers(1, 12), coarse=st.booleans())
def test_bounded_indicators(seed, n, coarse):
    b = oracles.random_bars(np.random.default_rng(seed), 40, coarse)
    for v, lo, hi in ((rsi(b.close, n), 0, 100), (stochastic_k(b, n), 0, 100), (williams_r(b, n), -100, 0)):
        v = v[~np.isnan(v)]
        assert np.all((v >= lo) & (v <= hi))


@given(seed=st.integers(0, 10_000), n=st.integers(1, 10), k=st.integers(1, 15))
def test_shift_equivariance(seed, n, k):
    b = oracles.random_bars(np.random.default_rng(seed), 40)
    sub = b[k:]
    for f in (lambda s: sma(s.close, n), lambda s: momentum(s.close, n), lambda s: rsi(s.close, n),
              lambda s: williams_r(s, n), lambda s: stochastic_k(s, n), lambda s: cci(s, n),
              lambda s: bollinger(s.close, n)[0]):
        full, part = f(b)[k:], f(sub)
        defined = ~np.isnan(part)
        assert np.allclose(part[defined], full[defined], rtol=1e-12, atol=1e-9)


@given(seed=st.integers(0, 10_000), n=st.integers(1, 10), shift=st.floats(-20.0, 200.0))
def test_translation(seed, n, shift):
    b = oracles.random_bars(np.random.default_rng(seed), 40)
    moved = BarSeries(b.dates, b.open + shift, b.high + shift, b.low + shift, b.close + shift,
                      b.adj_close + shift, b.volume)
    tol = dict(rtol=1e-9, atol=1e-7, equal_nan=True)
    for f in (lambda s: rsi(s.close, n), lambda s: williams_r(s, n), lambda s: stochastic_k(s, n),
              lambda s: momentum(s.close, n)):
        assert np.allclose(f(moved), f(b), **tol)
    for f in (lambda s: sma(s.close, n), lambda s: ema(s.close, n), lambda s: bollinger(s.close, n)[0],
              lambda s: bollinger(s.close, n)[1]):
        assert np.allclose(f(moved), f(b) + shift, **tol)
