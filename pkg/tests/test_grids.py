import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from gqhawkes.errors import ConfigError, DataError
from gqhawkes.grids import (TimeGrid, build_grid, c1_integrate, convolution_matrix,
                            default_price_grid, make_grid, quad_integrate, sampled,
                            table_rows, to_disjoint_intervals)


def test_pure_linear_grid():
    g = build_grid(1.0, 4.0, 4.0, 4, 0)
    np.testing.assert_allclose(g.points, [1, 2, 3, 4])
    assert g.weights.sum() == pytest.approx(4.0)


def test_two_point_log_grid():
    g = build_grid(1.0, 1.0, 100.0, 0, 2)
    np.testing.assert_allclose(g.points, [10.0, 100.0])


def test_inverse_integral_on_log_grid():
    # 40 log-spaced points on [1, 1000]; the integration domain starts at 1
    pts = build_grid(1.0, 1.0, 1000.0, 0, 40).points
    grid = make_grid(pts, origin=1.0)
    assert quad_integrate(1.0 / grid.points, grid) == pytest.approx(np.log(1000.0), rel=0.02)


def test_disjoint_intervals_examples():
    b, _ = to_disjoint_intervals([1.0, 2.0, 3.0])
    np.testing.assert_allclose(b, [0, 1, 2, 3])
    b, _ = to_disjoint_intervals([1.0, 2.0, 10.0])
    np.testing.assert_allclose(b, [0, 1, 2, 10])


@given(st.floats(1e-3, 1.0), st.floats(1.05, 3.0), st.integers(2, 40))
def test_geometric_grid_intervals_non_decreasing(t0, ratio, n):
    pts = t0 * ratio ** np.arange(n)
    b, _ = to_disjoint_intervals(pts)
    w = np.diff(b)
    assert np.all(w > 0)
    assert np.all(np.diff(w) >= -1e-12 * w[1:])
    assert b[-1] == pts[-1]


def test_quad_constant_and_linear():
    g = build_grid(0.1, 2.0, 1000.0, 8, 32)
    assert quad_integrate(np.full(len(g), 3.0), g) == pytest.approx(3.0 * g.t_max)
    g = TimeGrid(np.array([1.0, 2, 3, 4]), np.ones(4), np.array([0.0, 1, 2, 3, 4]))
    assert quad_integrate(g.points, g) == pytest.approx(10.0)


def test_quad_powerlaw_on_default_price_grid():
    g = default_price_grid()
    f = lambda t: (1 + t / 81.0) ** -0.71
    fine = np.linspace(0.0, g.t_max, 2_000_001)
    ref = integrate.trapezoid(f(fine), fine)
    assert quad_integrate(f(g.points), g) == pytest.approx(ref, rel=0.01)


def test_cutoff_clips_weights():
    g = build_grid(0.1, 2.0, 1000.0, 8, 32)
    assert g.clipped_weights(100.0).sum() == pytest.approx(100.0)
    assert g.clipped_weights(None).sum() == pytest.approx(g.weights.sum())


def test_c1_integrate_examples(rng):
    pts = np.linspace(0, 3, 7)
    f = 2 * pts + 1
    assert c1_integrate(f, f, pts) == pytest.approx(12.0, rel=1e-14)
    # jump at node 1 on [0, 2]
    pts = np.array([0.0, 1.0, 2.0])
    assert c1_integrate([0.0, 1.0, 1.0], [0.0, 0.0, 1.0], pts) == pytest.approx(1.0)
    # random piecewise-linear function with jumps at nodes
    pts = np.sort(rng.uniform(0, 10, 12))
    right = rng.normal(size=12)
    left = rng.normal(size=12)
    exact = sum(0.5 * (pts[k + 1] - pts[k]) * (right[k] + left[k + 1]) for k in range(11))
    assert c1_integrate(right, left, pts) == pytest.approx(exact, rel=1e-12)


def test_grid_refinement_shrinks_error():
    f = lambda t: np.exp(-t)
    errs = []
    for n in (10, 20, 40):
        g = build_grid(0.01, 1.0, 20.0, n, n)
        errs.append(abs(quad_integrate(f(g.points), g) - (1 - np.exp(-20.0))))
    assert errs[2] < errs[1] < errs[0]


def test_build_grid_validation():
    with pytest.raises(ConfigError):
        build_grid(1.0, 0.5, 10.0, 3, 3)
    with pytest.raises(ConfigError):
        build_grid(1.0, 2.0, 10.0, 0, 0)
    with pytest.raises(DataError):
        quad_integrate(np.ones(3), build_grid(1.0, 2.0, 10.0, 2, 2))


def test_grid_csv_roundtrip():
    g = build_grid(0.002, 0.1, 200.0, 10, 30)
    g2 = TimeGrid.from_csv("# stamp line\n" + g.to_csv())
    assert g2.digest() == g.digest()
    assert table_rows("# c\na,b\n1,2\n\n") == [["1", "2"]]


def test_convolution_matrix_of_exponentials():
    g = build_grid(0.01, 1.0, 30.0, 40, 60)
    t = g.points
    fvals = np.exp(-t)
    C = convolution_matrix(t, sampled(g, np.exp(-2 * t)), t, g_points=t)
    exact = np.exp(-t) - np.exp(-2 * t)          # int_0^t e^{-(t-s)2} e^{-s} ds
    np.testing.assert_allclose(C @ fvals, exact, atol=2e-3)
