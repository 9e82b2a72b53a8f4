import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from gqhawkes.calibrate import HawkesKernel
from gqhawkes.effective import (bare_from_effective, effective_K, resolvent,
                                solve_effective_L_Kd, weighted_rank_one, with_diagonal,
                                zumbach_decompose)
from gqhawkes.errors import NumericalError
from gqhawkes.grids import build_grid, quad_integrate


def _exp_phi(a, beta, grid):
    return HawkesKernel((a * beta * np.exp(-beta * grid.points))[None, None], grid)


def test_resolvent_exponential_closed_form():
    g = build_grid(0.002, 0.1, 200.0, 20, 60)
    a, beta = 0.5, 1.0
    R = resolvent(_exp_phi(a, beta, g))
    assert R.norms()[0, 0] == pytest.approx(1.0, rel=1e-2)
    exact = a * beta * np.exp(-beta * (1 - a) * g.points)
    w = g.weights
    err = np.sqrt(np.sum(w * (R.values[0, 0] - exact) ** 2) / np.sum(w * exact ** 2))
    assert err < 0.01


def test_resolvent_norm_identity():
    # norms of R satisfy ||R|| = ||phi|| (I - ||phi||)^-1 when supports fit the grid
    g = build_grid(0.002, 0.1, 400.0, 10, 30)
    vals = np.zeros((2, 2, len(g)))
    A = np.array([[0.3, 0.1], [0.2, 0.25]])
    for i in range(2):
        for j in range(2):
            vals[i, j] = A[i, j] * 4.0 * np.exp(-4.0 * g.points)
    phi = HawkesKernel(vals, g)
    pn = phi.norms()
    R = resolvent(phi)
    np.testing.assert_allclose(R.norms(), pn @ np.linalg.inv(np.eye(2) - pn), rtol=1e-4)


def test_resolvent_zero_and_divergent():
    g = build_grid(0.01, 0.5, 20.0, 5, 5)
    R = resolvent(HawkesKernel(np.zeros((2, 2, len(g))), g))
    assert not R.values.any()
    with pytest.raises(NumericalError):
        resolvent(_exp_phi(1.2, 1.0, build_grid(0.01, 0.5, 200.0, 5, 10)))


def test_effective_decoupled_limit(rng):
    pg = build_grid(0.1, 2.0, 50.0, 5, 8)
    n = len(pg)
    a, b = rng.normal(size=(2, n)), rng.normal(size=(2, n))
    pk = solve_effective_L_Kd(a, b, np.zeros(n), 4.0, 0.0, 3.0, pg)
    np.testing.assert_allclose(pk.L, a / 4.0)
    np.testing.assert_allclose(pk.K_d, b / 3.0)


def test_effective_K_outer():
    f = np.linspace(1, 2, 5)
    K = effective_K(2.0 * np.outer(f, f)[None], 1.0)
    np.testing.assert_allclose(K[0], np.outer(f, f))


def _random_grid():
    return build_grid(0.1, 1.0, 50.0, 5, 10)


def test_zumbach_exact_rank_one():
    g = _random_grid()
    t = g.points
    wc = g.clipped_weights(1000.0)
    Z = np.exp(-t / 10.0)
    Z /= np.sqrt(np.sum(wc * Z * Z))
    psi = np.exp(-t / 5.0)
    psi /= np.sum(wc * psi)
    K = with_diagonal(0.4 * np.outer(Z, Z), 0.7 * psi + 0.4 * Z * Z)
    dec = zumbach_decompose(K, g)
    assert dec.K_1[0] == pytest.approx(0.4, rel=1e-8)
    assert dec.K_d[0] == pytest.approx(0.7, rel=1e-8)
    np.testing.assert_allclose(dec.Z[0], Z, rtol=1e-6)
    np.testing.assert_allclose(dec.psi[0], psi, rtol=1e-6, atol=1e-12)
    assert np.sum(wc * dec.psi[0]) == pytest.approx(1.0, abs=1e-10)
    assert np.sum(wc * dec.Z[0] ** 2) == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_allclose(dec.reconstruct(0), K, atol=1e-10)


def test_zumbach_negative_rank_one():
    g = _random_grid()
    Z = np.exp(-g.points / 10.0)
    K = with_diagonal(-0.3 * np.outer(Z, Z), np.ones(len(g)))
    dec = zumbach_decompose(K, g)
    assert dec.K_1[0] < 0
    assert dec.Z[0][0] > 0


def test_zumbach_diagonal_only():
    g = _random_grid()
    K = np.diag(np.exp(-g.points / 7.0))
    dec = zumbach_decompose(K, g)
    assert abs(dec.K_1[0]) < 1e-12
    wc = g.clipped_weights(1000.0)
    assert dec.K_d[0] == pytest.approx(np.sum(wc * np.diag(K)))


@settings(max_examples=10)
@given(st.integers(0, 10_000))
def test_rank_one_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = 6
    A = rng.normal(size=(n, n))
    K = 0.5 * (A + A.T)
    w = rng.uniform(0.5, 2.0, n)
    c, z, f, _ = weighted_rank_one(K, w)
    best = oracles.brute_rank_one(K, w)
    assert f <= best + 1e-6 * max(1.0, best)
    assert np.sum(w * z * z) == pytest.approx(1.0)


def test_bare_from_effective_examples():
    assert float(bare_from_effective(0.26, 0.5)) == pytest.approx(0.13)
    np.testing.assert_allclose(bare_from_effective([0.1, 0.2], np.zeros((2, 2))), [0.1, 0.2])
    np.testing.assert_allclose(bare_from_effective([1.0, 1.0], 0.5 * np.eye(2)), [0.5, 0.5])
    with pytest.raises(NumericalError):
        bare_from_effective(1.0, 1.0)
