import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gqhawkes.errors import ConfigError, DataError
from gqhawkes.ingest import EVENT_TYPES, PricePath
from gqhawkes.liquidity import (BookSnapshot, SignalKernel, VolumeTable, causality_asymmetry,
                                default_v_best, effective_spread, empirical_survival,
                                flux_from_kinds, lagged_correlation, liquidity_flux,
                                read_books, signals, survival_tail)


# effective spread ------------------------------------------------------------

def test_effective_spread_examples():
    assert effective_spread(BookSnapshot(0.0, {101: 10}, {100: 10}), 10) == 1
    assert effective_spread(BookSnapshot(0.0, {101: 4, 102: 10}, {100: 10}), 10) == 2


def test_effective_spread_errors():
    with pytest.raises(DataError, match="ask"):
        effective_spread(BookSnapshot(0.0, {101: 4}, {100: 10}), 10)
    with pytest.raises(DataError, match="bid"):
        effective_spread(BookSnapshot(0.0, {101: 40}, {100: 1, 99: 2}), 10)
    with pytest.raises(DataError, match="crossed"):
        BookSnapshot(0.0, {100: 1}, {100: 1})
    with pytest.raises(ConfigError):
        effective_spread(BookSnapshot(0.0, {101: 4}, {100: 10}), 0)


books = st.builds(
    lambda bid, gap, av, bv: BookSnapshot(
        0.0, {bid + gap + k: v for k, v in enumerate(av)},
        {bid - k: v for k, v in enumerate(bv)}),
    st.integers(50, 100), st.integers(1, 5),
    st.lists(st.floats(0.5, 20), min_size=1, max_size=8),
    st.lists(st.floats(0.5, 20), min_size=1, max_size=8))


@given(books, st.floats(0.5, 20))
def test_effective_spread_properties(book, v_best):
    try:
        s = effective_spread(book, v_best)
    except DataError:
        return
    assert s >= book.spread
    if book.asks[book.best_ask] >= v_best and book.bids[book.best_bid] >= v_best:
        assert s == book.spread
    assert effective_spread(book.scaled(2.0), v_best) <= s


def test_default_v_best_and_reader():
    text = ("# comment\ntime_s,side,level_ticks,volume\n"
            "0,a,101,4\n0,a,102,10\n0,b,100,10\n1,a,101,8\n1,b,100,6\n")
    bs = read_books(io.StringIO(text))
    assert [b.time for b in bs] == [0.0, 1.0]
    assert default_v_best(bs) == pytest.approx((4 + 10 + 8 + 6) / 4)
    with pytest.raises(DataError, match="line 3"):
        read_books(io.StringIO("time_s,side,level_ticks,volume\n0,a,101,4\n1,b,100,x\n"))


# survival -------------------------------------------------------------------

def test_survival_constant_refuses():
    vals, surv = empirical_survival(np.full(200, 3.0))
    np.testing.assert_array_equal(vals, [3.0])
    np.testing.assert_array_equal(surv, [0.0])
    with pytest.raises(DataError):
        survival_tail(np.full(200, 3.0))
    with pytest.raises(DataError):
        survival_tail(np.arange(50.0))


def test_survival_pareto_exponent(rng):
    x = rng.pareto(4.0, 100_000) + 1.0
    tail = survival_tail(x)
    assert abs(tail.exponent - 4.0) <= 0.3
    assert np.all(np.diff(tail.survival) <= 0)


# signals ----------------------------------------------------------------------

def _indicator(width=1.0):
    return SignalKernel(np.array([1e-9, width]), np.array([1.0, 1.0]) / width, width)


def test_sigma_indicator_kernel():
    d = 0.5
    path = PricePath([2.0], [d], 10.0)
    Z = _indicator(1.0)
    t = np.array([1.9, 2.0, 2.5, 3.0, 3.1, 5.0])
    sig = signals(path, _indicator(1.0), Z, sample_t=t)
    np.testing.assert_allclose(sig.sigma2, [0, 0, d * d, d * d, 0, 0])


def test_mu_cancels_sigma_adds():
    d = 0.3
    path = PricePath([1.0, 1.5], [d, -d], 10.0)
    K = _indicator(2.0)
    sig = signals(path, K.normalized(1), K.normalized(2), sample_t=np.array([2.0]))
    assert sig.mu[0] == pytest.approx(0.0, abs=1e-15)
    assert sig.sigma2[0] == pytest.approx(2 * 0.5 * d * d)


def test_unnormalized_kernel_rejected():
    path = PricePath([1.0], [1.0], 3.0)
    with pytest.raises(DataError, match="volatility"):
        signals(path, _indicator(2.0).normalized(2), _indicator(2.0).normalized(2))
    with pytest.raises(DataError, match="trend"):
        signals(path, _indicator(2.0), _indicator(2.0))


def test_sign_flip_invariance(rng):
    times = np.sort(rng.uniform(0, 500, 300))
    sizes = rng.choice([-1.0, 1.0], 300) * rng.uniform(0.5, 2, 300)
    psi = SignalKernel.from_function(lambda s: np.exp(-s / 10), 100, 2001).normalized(1)
    Z = SignalKernel.from_function(lambda s: np.exp(-s / 20), 100, 2001).normalized(2)
    a = signals(PricePath(times, sizes, 500.0), psi, Z)
    b = signals(PricePath(times, -sizes, 500.0), psi, Z)
    np.testing.assert_array_equal(a.sigma2, b.sigma2)
    np.testing.assert_allclose(b.mu, -a.mu, atol=1e-14)
    np.testing.assert_allclose(a.ratio, b.ratio, rtol=1e-12, equal_nan=True)


def test_iid_mu2_average(rng):
    T, rate = 200_000.0, 2.0
    n = rng.poisson(rate * T)
    times = np.sort(rng.uniform(0, T, n))
    sizes = rng.choice([-1.0, 1.0], n)
    path = PricePath(times, sizes, T)
    Z = SignalKernel.from_function(lambda s: np.exp(-s / 5), 60, 6001).normalized(2)
    psi = SignalKernel.from_function(lambda s: np.exp(-s / 5), 60, 6001).normalized(1)
    sig = signals(path, psi, Z, dt=1.0)
    assert np.mean(sig.mu2[100:]) == pytest.approx(path.moment(2), rel=0.03)
    assert np.mean(sig.sigma2[100:]) == pytest.approx(path.moment(2), rel=0.03)


# correlations -------------------------------------------------------------------

def test_self_correlation_and_white_noise(rng):
    x = rng.normal(size=5000)
    C = lagged_correlation(x, x, [-3, 0, 3])
    assert C[1] == pytest.approx(1.0)
    y = rng.normal(size=5000)
    C = lagged_correlation(x, y, np.arange(-10, 11))
    assert np.max(np.abs(C)) < 4 / np.sqrt(5000)
    assert np.all(np.abs(C) <= 1)


def test_correlation_lag_direction():
    y = np.sin(np.arange(400) * 0.37) + np.cos(np.arange(400) * 0.11)
    x = np.roll(y, -5)             # x(t) = y(t + 5): x leads the spread
    C = lagged_correlation(x, y, [-5, 5])
    assert C[0] == pytest.approx(1.0)
    with pytest.raises(DataError):
        lagged_correlation(np.ones(10), np.arange(10.0), [0])


def test_asymmetry_test():
    lags = np.array([-2, -1, 0, 1, 2])
    per = np.array([[0.3, 0.2, 0.1, 0.0, 0.0], [0.25, 0.2, 0.1, 0.01, 0.0],
                    [0.3, 0.25, 0.1, 0.0, 0.02]])
    res = causality_asymmetry(per, lags)
    assert res["mean_difference"] > 0 and res["significant"]
    with pytest.raises(DataError):
        causality_asymmetry(per[:1], lags)


# flux -----------------------------------------------------------------------------

def test_flux_table_values():
    assert flux_from_kinds({"LO": 18.8, "C": 20.4, "MO": 2.1}) == pytest.approx(-3.7, abs=1e-12)


def test_flux_zero_and_decomposition(rng):
    vt = VolumeTable(rng.uniform(10, 100, len(EVENT_TYPES)))
    zero = liquidity_flux(np.zeros(6), np.zeros(6), vt, 1.0)
    assert zero.J == 0.0
    rep = liquidity_flux(rng.uniform(0, 1, 6), rng.uniform(-0.5, 0.5, 6), vt, 0.7)
    assert abs(sum(rep.per_type.values()) - rep.J) <= 1e-12 * max(1.0, abs(rep.J))
    assert abs(sum(rep.per_kind.values()) - rep.J) <= 1e-12 * max(1.0, abs(rep.J))
    assert rep.volatility_part + rep.zumbach_part == pytest.approx(rep.J, abs=1e-12)


def test_flux_symmetric_lo_c_vanishes():
    # types: (C,b),(LO,b),(MO,b),(MO,a),(LO,a),(C,a)
    vt = VolumeTable([5.0, 5.0, 3.0, 3.0, 5.0, 5.0])
    k = np.array([0.4, 0.4, 0.0, 0.0, 0.4, 0.4])
    assert liquidity_flux(k, 0.5 * k, vt, 2.0).J == pytest.approx(0.0, abs=1e-14)


def test_volume_table_validation():
    with pytest.raises(DataError):
        VolumeTable([1.0] * 5)
    with pytest.raises(DataError):
        VolumeTable([1.0, 0.0, 1.0, 1.0, 1.0, 1.0])
