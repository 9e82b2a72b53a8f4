import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gqhawkes.errors import DataError
from gqhawkes.ingest import (EVENT_TYPES, AutocorrKernel, IntradayProfile, PricePath,
                             build_intraday_profile, estimate_autocorr, martingale_check,
                             micro_price, micro_price_values, mirror_index, parse_session,
                             rescale_time, session_from_times, surprise_price, type_index)

HEADER = "time_s,kind,side,volume,best_bid_ticks,best_ask_ticks,vol_bid,vol_ask\n"


def _book_session(bid, ask, vb, va):
    n = len(bid)
    rows = "".join(f"{float(k)},LO,b,1,{bid[k]},{ask[k]},{vb[k]},{va[k]}\n" for k in range(n))
    return parse_session(io.StringIO(HEADER + rows))


def test_parse_three_rows():
    text = HEADER + ("0.5,LO,b,3,100,101,10,12\n"
                     "1.0,C,a,2,100,101,10,10\n"
                     "2.5,MO,a,5,100,102,10,4\n")
    s = parse_session(io.StringIO(text), name="x")
    assert len(s) == 3
    assert list(s.types) == [type_index("LO", "b"), type_index("C", "a"), type_index("MO", "a")]
    assert s.duration == 2.5
    assert s.n_rejected == 0


def test_crossed_book_rejected():
    text = HEADER + "0.5,LO,b,3,100,101,10,12\n1.0,C,a,2,100,100,10,10\n"
    s = parse_session(io.StringIO(text))
    assert len(s) == 1
    assert s.n_rejected == 1
    assert s.rejected[0][0] == 3


def test_out_of_order_names_line():
    text = HEADER + "0.5,LO,b,3,100,101,10,12\n2.0,C,a,2,100,101,10,10\n1.0,C,a,2,100,101,10,10\n"
    with pytest.raises(DataError, match="line 4"):
        parse_session(io.StringIO(text))


def test_comment_lines_keep_line_numbers():
    text = "# provenance\n" + HEADER + "0.5,LO,b,3,100,101,10,12\n0.1,C,a,2,100,101,10,10\n"
    with pytest.raises(DataError, match="line 4"):
        parse_session(io.StringIO(text))


def test_csv_roundtrip():
    s = session_from_times([np.array([0.1, 0.7]), np.array([0.3])] + [np.zeros(0)] * 4, 1.0)
    s2 = parse_session(io.StringIO(s.to_csv()), duration=1.0)
    np.testing.assert_array_equal(s.time, s2.time)
    np.testing.assert_array_equal(s.types, s2.types)


def test_mirror_map():
    for i, (k, side) in enumerate(EVENT_TYPES):
        other = "a" if side == "b" else "b"
        assert mirror_index(i) == type_index(k, other) == 5 - i


@pytest.mark.parametrize("vb,va,expected", [(10, 10, 100.5), (30, 10, 100.75), (1, 1000, 100.000999)])
def test_micro_price_examples(vb, va, expected):
    s = _book_session([100], [101], [vb], [va])
    assert micro_price_values(s)[0] == pytest.approx(expected, abs=1e-6)


@given(st.integers(1, 1000), st.integers(1, 1000), st.floats(0.1, 100))
def test_micro_price_scale_invariant(vb, va, c):
    s = _book_session([100], [102], [vb], [va])
    base = micro_price_values(s)[0]
    s.vol_bid = np.array([vb * c])
    s.vol_ask = np.array([va * c])
    assert micro_price_values(s)[0] == pytest.approx(base, rel=1e-12)
    assert 100 <= base <= 102


def test_micro_price_jumps():
    s = _book_session([100, 100, 101], [101, 101, 102], [10, 30, 30], [10, 10, 10])
    p = micro_price(s)
    np.testing.assert_allclose(p.sizes, [0.25, 1.0])
    np.testing.assert_allclose(p.times, [1.0, 2.0])


def _path(sizes, dt=1.0):
    t = dt * np.arange(1, len(sizes) + 1)
    return PricePath(t, np.asarray(sizes, float), float(t[-1]))


def test_autocorr_iid_zero(rng):
    x = rng.choice([-1.0, 1.0], size=20000)
    rho = estimate_autocorr(_path(x), np.arange(0.5, 6.5, 1.0))
    se = 1.0 / np.sqrt(x.size)
    assert np.all(np.abs(rho.values) < 4 * se)


def test_autocorr_alternating():
    x = np.tile([1.0, -1.0], 500)
    rho = estimate_autocorr(_path(x), [0.5, 1.5, 2.5])
    assert rho.values[0] == pytest.approx(-1.0, abs=1e-2)
    assert rho.values[1] == pytest.approx(1.0, abs=1e-2)


def test_autocorr_ar1(rng):
    e = rng.normal(size=100_000)
    x = np.empty_like(e)
    x[0] = e[0]
    for k in range(1, e.size):
        x[k] = 0.5 * x[k - 1] + e[k]
    rho = estimate_autocorr(_path(x), [0.5, 1.5])
    assert rho.values[0] == pytest.approx(0.5, abs=0.05)


def test_surprise_zero_predictor():
    p = _path([1.0, -1.0, 2.0])
    rho = AutocorrKernel(np.array([0.0, 5.0]), np.array([0.0]), np.array([1.0]))
    np.testing.assert_array_equal(surprise_price(p, rho).sizes, p.sizes)


def test_surprise_one_term():
    p = PricePath(np.array([1.0, 3.0]), np.array([1.0, 1.0]), 4.0)
    rho = AutocorrKernel(np.array([1.5, 2.5]), np.array([0.3]), np.array([1.0]))
    np.testing.assert_allclose(surprise_price(p, rho).sizes, [1.0, 0.7])


def test_surprise_shrinks_alternating_correlation():
    rng = np.random.default_rng(3)
    x = np.tile([1.0, -1.0], 2000) + 0.5 * rng.normal(size=4000)
    p = _path(x)
    bounds = [0.5, 1.5, 2.5, 3.5]
    rho = estimate_autocorr(p, bounds)
    out = estimate_autocorr(surprise_price(p, rho), bounds)
    assert abs(out.values[0]) < abs(rho.values[0])


def test_martingale_check():
    p = _path([1.0, -1.0] * 50)
    assert martingale_check([p])["ok"]
    assert not martingale_check([_path([1.0] * 100)])["ok"]


def _uniform_session(rate, T, offset=0.0):
    t = np.arange(offset, T, 1.0 / rate) + 0.5 / rate
    return session_from_times([t] + [np.zeros(0)] * 5, T)


def test_profile_constant_and_average():
    prof = build_intraday_profile([_uniform_session(10, 900)], 300)
    np.testing.assert_allclose(prof.rates, 10.0)
    prof = build_intraday_profile([_uniform_session(5, 900), _uniform_session(15, 900)], 300)
    np.testing.assert_allclose(prof.rates, 10.0)


def test_profile_u_shape(rng):
    T, width = 3000.0, 300.0
    r = lambda t: 5 + 20 * ((t - T / 2) / (T / 2)) ** 2
    # inhomogeneous Poisson by thinning
    cand = np.sort(rng.uniform(0, T, rng.poisson(25 * T)))
    t = cand[rng.uniform(0, 25, cand.size) < r(cand)]
    prof = build_intraday_profile([session_from_times([t] + [np.zeros(0)] * 5, T)], width)
    centers = width * (np.arange(prof.rates.size) + 0.5)
    exact = [np.mean(r(np.linspace(c - width / 2, c + width / 2, 1001))) for c in centers]
    se = np.sqrt(np.array(exact) / width)
    assert np.all(np.abs(prof.rates - exact) < 4 * se)
    # rescaling flattens the binned counts
    s = session_from_times([t] + [np.zeros(0)] * 5, T)
    rs = rescale_time(s, prof)
    raw = np.histogram(s.time, bins=10, range=(0, T))[0]
    new = np.histogram(rs.time, bins=10, range=(0, rs.duration))[0]
    assert new.std() / new.mean() < raw.std() / raw.mean()


def test_rescale_identity_and_piecewise():
    prof = IntradayProfile(100.0, np.full(4, 3.0))
    np.testing.assert_allclose(prof.clock([0, 50, 399]), [0, 50, 399])
    prof = IntradayProfile(100.0, np.array([2.0, 2.0, 0.01, 0.01]))
    tau = prof.clock([100.0, 200.0])
    mean = prof.mean_rate
    np.testing.assert_allclose(tau, [200.0 / mean, 400.0 / mean])
    p = PricePath(np.array([50.0]), np.array([1.0]), 400.0)
    assert rescale_time(p, prof).times[0] == pytest.approx(100.0 / mean)
