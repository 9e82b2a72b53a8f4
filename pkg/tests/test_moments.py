import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from gqhawkes.errors import ConfigError, DataError
from gqhawkes.grids import build_grid, make_grid
from gqhawkes.moments import (MomentSet, Sample, estimate_chi_nn, estimate_chi_np,
                              estimate_chi_np2, estimate_chi_npp, estimate_chi_p2p2,
                              estimate_means, estimate_moments, fit_log_polynomial,
                              fit_p2p2_powerlaw, jackknife_stderr, smooth_moments,
                              symmetrize_bid_ask)
from gqhawkes.simulate import SimConfig, simulate_session


def random_sample(rng, d=2, n_events=200, n_jumps=80, T=50.0):
    events = [np.sort(rng.uniform(0, T, rng.poisson(n_events / d))) for _ in range(d)]
    jt = np.sort(rng.uniform(0, T, rng.poisson(n_jumps)))
    jt = np.unique(jt)
    return Sample(events, jt, rng.choice([-2.0, -1.0, 1.0, 2.0], jt.size), T)


def _close(a, b):
    scale = max(np.max(np.abs(b)), 1e-300)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12 * scale)


# -- hand examples --------------------------------------------------------


def test_means_examples():
    lam, d2, d3, d4, T = estimate_means(Sample([np.arange(100) / 2.0], [1.0, 2, 3],
                                               [1.0, -1.0, 2.0], 50.0))
    assert lam[0] == pytest.approx(2.0)
    lam, d2, d3, d4, T = estimate_means(Sample([np.zeros(0)], [1.0, 2, 3], [1.0, -1.0, 2.0], 10.0))
    # (1 + 1 + 4) / 10, (1 - 1 + 8) / 10, (1 + 1 + 16) / 10
    assert (d2, d3, d4) == pytest.approx((0.6, 0.8, 1.8))


def test_chi_nn_single_pair():
    s = Sample([np.array([1.3]), np.array([1.0])], [], [], 10.0)
    val = estimate_chi_nn(s, [0.25, 0.35], center=False, edge_correction=False)[0, 1, 0]
    assert val == pytest.approx(0.99)


def test_chi_np_single_pair():
    s = Sample([np.array([1.3])], [1.0], [2.0], 10.0)
    v1 = estimate_chi_np(s, [0.25, 0.35], center=False, edge_correction=False)[0, 0]
    v2 = estimate_chi_np2(s, [0.25, 0.35], center=False, edge_correction=False)[0, 0]
    lam, d2 = 0.1, 0.4
    assert v1 == pytest.approx(2.0)
    assert v2 == pytest.approx(4.0 - lam * d2)


def test_chi_npp_single_pair():
    s = Sample([np.array([1.0])], [0.0, 0.5], [1.0, -2.0], 10.0)
    bounds = [0.4, 0.6, 0.9, 1.1]
    v = estimate_chi_npp(s, bounds, center=False, edge_correction=False)[0]
    expected = 2 * (1 * -2.0) / (10 * 0.2 * 0.2)
    # symmetrized: each ordered cell holds half of the unordered pair total
    assert v[0, 2] + v[2, 0] == pytest.approx(expected)
    assert v[0, 2] == v[2, 0]
    assert v[1, 1] == 0.0


def test_chi_p2p2_regular_jumps():
    s = Sample([np.zeros(0)], np.arange(10.0), np.ones(10), 10.0)
    v = estimate_chi_p2p2(s, [0.95, 1.05], center=False, edge_correction=False)
    assert v[0] == pytest.approx(8.0)


# -- oracle equality ------------------------------------------------------


@pytest.mark.parametrize("center", [True, False])
@pytest.mark.parametrize("edge", [True, False])
def test_estimators_match_naive_loops(rng, center, edge):
    sessions = [random_sample(rng, T=float(rng.uniform(20, 60))) for _ in range(3)]
    bounds = np.array([0.0, 0.1, 0.3, 0.7, 1.5, 3.0, 8.0])
    kw = dict(center=center, edge_correction=edge)
    ok = dict(center=center, edge=edge)
    _close(estimate_chi_nn(sessions, bounds, **kw), oracles.chi_nn(sessions, bounds, **ok))
    _close(estimate_chi_np(sessions, bounds, **kw), oracles.chi_np(sessions, bounds, 1, **ok))
    _close(estimate_chi_np2(sessions, bounds, **kw), oracles.chi_np(sessions, bounds, 2, **ok))
    _close(estimate_chi_npp(sessions, bounds, **kw), oracles.chi_npp(sessions, bounds, **ok))
    _close(estimate_chi_p2p2(sessions, bounds, **kw), oracles.chi_p2p2(sessions, bounds, **ok))


def test_momentset_matches_estimators(rng):
    sessions = [random_sample(rng) for _ in range(3)]
    hg = build_grid(0.05, 0.5, 8.0, 5, 6)
    pg = build_grid(0.1, 1.0, 10.0, 4, 6)
    ms = estimate_moments(sessions, hg, pg)
    _close(ms.chi_nn_bins, estimate_chi_nn(sessions, hg))
    _close(ms.chi_np_bins, estimate_chi_np(sessions, pg))
    _close(ms.chi_np2_bins, estimate_chi_np2(sessions, pg))
    _close(ms.chi_npp_bins, estimate_chi_npp(sessions, pg))
    _close(ms.chi_p2p2_bins, estimate_chi_p2p2(sessions, pg))
    lam, d2, d3, d4, T = estimate_means(sessions)
    _close(ms.Lambda, lam)
    assert ms.Delta2 == pytest.approx(d2, rel=1e-14)


@settings(max_examples=15)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 5))
def test_merge_equals_single_pass(seed, n):
    rng = np.random.default_rng(seed)
    sessions = [random_sample(rng, n_events=60, n_jumps=30, T=20.0) for _ in range(n)]
    hg = build_grid(0.05, 0.5, 4.0, 4, 4)
    pg = build_grid(0.1, 1.0, 5.0, 3, 4)
    parts = [MomentSet.from_sample(s, hg, pg) for s in sessions]
    merged = parts[0]
    for p in parts[1:]:
        merged = merged.merge(p)
    once = estimate_moments(sessions, hg, pg)
    for attr in ("Lambda", "chi_nn", "chi_np", "chi_np2", "chi_npp", "chi_p2p2"):
        _close(getattr(merged, attr), getattr(once, attr))
    # associativity / commutativity of the accumulator
    rev = parts[-1]
    for p in parts[-2::-1]:
        rev = rev.merge(p)
    _close(rev.chi_npp, merged.chi_npp)


def test_merge_rejects_other_grids(rng):
    s = random_sample(rng)
    a = MomentSet.from_sample(s, build_grid(0.05, 0.5, 4.0, 4, 4), build_grid(0.1, 1, 5, 3, 4))
    b = MomentSet.from_sample(s, build_grid(0.05, 0.5, 5.0, 4, 4), build_grid(0.1, 1, 5, 3, 4))
    with pytest.raises(ConfigError):
        a.merge(b)


def test_npp_surface_exactly_symmetric(rng):
    s = random_sample(rng)
    v = estimate_chi_npp(s, [0.0, 0.2, 0.5, 1.0, 2.0])
    assert np.array_equal(v, np.swapaxes(v, 1, 2))


def test_independent_streams_are_uncorrelated():
    rng = np.random.default_rng(7)
    hg = build_grid(0.1, 1.0, 20.0, 5, 8)
    pg = build_grid(0.2, 2.0, 20.0, 4, 8)
    parts = []
    for _ in range(24):
        T = 400.0
        events = [np.sort(rng.uniform(0, T, rng.poisson(2 * T))) for _ in range(2)]
        jt = np.unique(np.sort(rng.uniform(0, T, rng.poisson(T))))
        parts.append(MomentSet.from_sample(
            Sample(events, jt, rng.choice([-1.0, 1.0], jt.size), T), hg, pg, with_npp=False))
    total = parts[0]
    for p in parts[1:]:
        total = total.merge(p)
    inside, count = 0, 0
    for attr in ("chi_nn", "chi_np", "chi_np2", "chi_p2p2"):
        val = getattr(total, attr)
        se = jackknife_stderr(parts, attr)
        inside += np.sum(np.abs(val) <= 4 * se)
        count += val.size
    assert inside >= 0.95 * count


def test_chi_nn_matches_exponential_hawkes():
    alpha, beta, mu = 0.5, 1.0, 1.0
    cfg = SimConfig.from_dict(dict(alpha0=[mu], phi=[[{"norm": alpha, "rate": beta}]], L=[None],
                                   duration=1e5, seed=4, n_sessions=1))
    sim = simulate_session(cfg)
    hg = build_grid(0.1, 1.0, 4.0, 10, 8)
    ms = estimate_moments([Sample(sim.by_type(), [], [], sim.duration)], hg, hg, with_npp=False)
    t = hg.points
    ref = oracles.exp_hawkes_covariance(t, mu, alpha, beta)
    w = hg.weights
    err = np.sqrt(np.sum(w * (ms.chi_nn[0, 0] - ref) ** 2) / np.sum(w * ref ** 2))
    assert err < 0.05


# -- symmetrization -------------------------------------------------------


def test_symmetrize_fixed_point_and_mirror(rng):
    hg = build_grid(0.05, 0.5, 4.0, 4, 4)
    pg = build_grid(0.1, 1.0, 5.0, 3, 4)
    s = random_sample(rng, d=6, n_events=600)
    ms = MomentSet.from_sample(s, hg, pg)
    sym = symmetrize_bid_ask(ms)
    m = np.arange(6)[::-1]
    np.testing.assert_allclose(sym.chi_np, -sym.chi_np[m])
    np.testing.assert_allclose(sym.chi_np2, sym.chi_np2[m])
    np.testing.assert_allclose(sym.chi_nn, sym.chi_nn[m][:, m])
    np.testing.assert_allclose(symmetrize_bid_ask(sym).chi_nn, sym.chi_nn)
    assert sym.Delta3 == 0.0
    # only bid-side events: ask entries mirror the (signed) bid entries
    bid_only = Sample([s.events[0], s.events[1], s.events[2]] + [np.zeros(0)] * 3,
                      s.jump_times, s.jump_sizes, s.duration)
    raw = MomentSet.from_sample(bid_only, hg, pg)
    sym = symmetrize_bid_ask(raw)
    np.testing.assert_allclose(sym.chi_np[5], -0.5 * raw.chi_np[0])
    np.testing.assert_allclose(sym.chi_np2[5], 0.5 * raw.chi_np2[0])


# -- persistence ----------------------------------------------------------


def test_save_load_roundtrip(tmp_path, rng):
    hg = build_grid(0.05, 0.5, 4.0, 4, 4)
    pg = build_grid(0.1, 1.0, 5.0, 3, 4)
    ms = estimate_moments([random_sample(rng) for _ in range(2)], hg, pg, symmetric=False)
    ms.save(str(tmp_path / "a"), provenance="stamp")
    back = MomentSet.load(str(tmp_path / "a"))
    for attr in ("Lambda", "chi_nn", "chi_npp", "chi_p2p2"):
        np.testing.assert_array_equal(getattr(back, attr), getattr(ms, attr))
    ms.save(str(tmp_path / "b"), provenance="stamp")
    for name in os.listdir(tmp_path / "a"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    with pytest.raises(DataError):
        MomentSet.load(str(tmp_path / "missing"))


# -- smoothing fits ---------------------------------------------------------


def test_powerlaw_exact_recovery():
    t = build_grid(0.1, 2.0, 1000.0, 8, 32).points
    A, B, C = 1.7e-4, 81.0, 0.71
    fit = fit_p2p2_powerlaw(t, A * (1 + t / B) ** -C)
    assert fit.A == pytest.approx(A, rel=1e-6)
    assert fit.B == pytest.approx(B, rel=1e-6)
    assert fit.C == pytest.approx(C, rel=1e-6)


def test_powerlaw_constant_and_noisy():
    t = build_grid(0.1, 2.0, 1000.0, 8, 32).points
    assert abs(fit_p2p2_powerlaw(t, np.full(t.size, 3.0)).C) < 1e-6
    rng = np.random.default_rng(0)
    C = []
    for _ in range(100):
        noisy = 1.7e-4 * (1 + t / 81.0) ** -0.71 * (1 + 0.1 * rng.normal(size=t.size))
        C.append(fit_p2p2_powerlaw(t, noisy).C)
    C = np.array(C)
    # the fit distribution is centred on the truth with spread below 0.1
    assert abs(np.median(C) - 0.71) < 0.02
    assert np.sqrt(np.mean((C - 0.71) ** 2)) <= 0.1


def test_powerlaw_needs_positive_majority():
    with pytest.raises(DataError):
        fit_p2p2_powerlaw(np.arange(1.0, 7.0), np.array([1.0, -1, -1, -1, 1, -1]))


def test_log_polynomial_examples():
    t = np.geomspace(0.1, 100, 30)
    fit = fit_log_polynomial(t, 1.0 / t, degree=1)
    assert fit.coefficients[1] == pytest.approx(-1.0)
    fit = fit_log_polynomial(t, np.full(t.size, 2.5), degree=0)
    assert fit.coefficients[0] == pytest.approx(np.log(2.5))
    fit = fit_log_polynomial(t, -3.0 / t, degree=1)
    np.testing.assert_allclose(fit(t), -3.0 / t)
    with pytest.raises(DataError):
        fit_log_polynomial(t, np.sin(t))


def test_smooth_moments_shapes(rng):
    hg = build_grid(0.05, 0.5, 4.0, 4, 4)
    pg = build_grid(0.1, 1.0, 20.0, 3, 8)
    ms = estimate_moments([random_sample(rng, n_events=2000, n_jumps=800, T=200.0)], hg, pg)
    sm = smooth_moments(ms, degree=3)
    assert sm.chi_np.shape == ms.chi_np.shape
    assert sm.chi_p2p2.shape == ms.chi_p2p2.shape
