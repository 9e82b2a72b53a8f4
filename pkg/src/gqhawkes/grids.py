"""Time grids, estimation intervals and integral discretization.

Kernels are sampled on a grid that is linear at short lags and logarithmic
beyond a switch point. Each grid carries

* quadrature weights (midpoint rule on the partition of ``[origin, t_max]``),
* disjoint estimation intervals, built by sorting the point spacings and
  taking their cumulative sum, on which the binned covariance estimators
  operate; bin values are mapped back onto the points by linear
  interpolation.

Two discretizations of ``int_0^inf f(s) ds`` are provided: the plain
quadrature ``sum f(t_n) w_n`` and the piecewise-C1 (one-sided trapezoid)
rule, which copes with the jump of covariance functions at zero lag.
"""
from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DataError

# g(x, side) -> values of a function with a possible jump at x == 0;
# side=+1 asks for the limit from above, side=-1 from below.
OneSided = Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Quadrature points, weights and disjoint estimation intervals.

    Attributes
    ----------
    points : ndarray, shape (n,)
        Strictly increasing positive lags (seconds).
    weights : ndarray, shape (n,)
        Midpoint-rule weights; they sum to ``t_max - origin``.
    bounds : ndarray, shape (n + 1,)
        Edges of the disjoint estimation intervals, ``bounds[0] == origin``.
    origin : float
        Lower end of the integration domain (0 for causal kernels).
    """

    points: np.ndarray
    weights: np.ndarray
    bounds: np.ndarray
    origin: float = 0.0
    _interp: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("points", "weights", "bounds"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.bounds.size != self.points.size + 1:
            raise ConfigError("need exactly one estimation interval per grid point")
        object.__setattr__(self, "_interp", _interp_matrix(self.centers, self.points))

    def __len__(self):
        return self.points.size

    @property
    def t_max(self) -> float:
        return float(self.points[-1])

    @property
    def lo(self) -> np.ndarray:
        return self.bounds[:-1]

    @property
    def hi(self) -> np.ndarray:
        return self.bounds[1:]

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bounds[:-1] + self.bounds[1:])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.bounds)

    @property
    def cells(self) -> np.ndarray:
        """Edges of the midpoint partition that defines the weights."""
        return np.concatenate(([self.origin], np.cumsum(self.weights) + self.origin))

    def to_points(self, binned: np.ndarray, axis: int = -1) -> np.ndarray:
        """Map values on the estimation intervals onto the grid points."""
        binned = np.asarray(binned, dtype=float)
        moved = np.moveaxis(binned, axis, -1)
        out = moved @ self._interp.T
        return np.moveaxis(out, -1, axis)

    @property
    def interp_matrix(self) -> np.ndarray:
        return self._interp

    def clipped_weights(self, cutoff: float | None = None) -> np.ndarray:
        """Quadrature weights with every cell truncated at ``cutoff``."""
        if cutoff is None or cutoff >= self.cells[-1]:
            return self.weights.copy()
        cells = self.cells
        return np.clip(np.minimum(cells[1:], cutoff) - cells[:-1], 0.0, None)

    def evaluate(self, values: np.ndarray, x: np.ndarray, beyond: float = 0.0) -> np.ndarray:
        """Piecewise-linear evaluation of a sampled kernel at lags ``x``.

        Flat below the first point, ``beyond`` past the last point.
        """
        x = np.asarray(x, dtype=float)
        out = np.interp(x, self.points, values)
        return np.where(x > self.points[-1], beyond, out)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.points, self.weights, self.bounds):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        h.update(np.float64(self.origin).tobytes())
        return h.hexdigest()[:16]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t_n,w_n,lo,hi\n")
        for t, w, lo, hi in zip(self.points, self.weights, self.lo, self.hi):
            buf.write(f"{float(t)!r},{float(w)!r},{float(lo)!r},{float(hi)!r}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, origin: float = 0.0) -> "TimeGrid":
        data = np.array([[float(v) for v in row] for row in table_rows(text)])
        bounds = np.concatenate((data[:1, 2], data[:, 3]))
        return cls(data[:, 0], data[:, 1], bounds, origin=origin)


def table_rows(text: str) -> list[list[str]]:
    """Comma-split data rows of a CSV text: ``#`` comment lines and the header are dropped."""
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    return [ln.split(",") for ln in lines[1:]]


def _interp_matrix(x_from: np.ndarray, x_to: np.ndarray) -> np.ndarray:
    """Linear interpolation (with linear extrapolation) as a matrix."""
    n = x_from.size
    mat = np.zeros((x_to.size, n))
    if n == 1:
        mat[:, 0] = 1.0
        return mat
    idx = np.clip(np.searchsorted(x_from, x_to, side="right") - 1, 0, n - 2)
    left, right = x_from[idx], x_from[idx + 1]
    frac = (x_to - left) / (right - left)
    rows = np.arange(x_to.size)
    mat[rows, idx] = 1.0 - frac
    mat[rows, idx + 1] = frac
    return mat


def midpoint_weights(points: np.ndarray, origin: float = 0.0) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    edges = np.concatenate(([origin], 0.5 * (points[1:] + points[:-1]), [points[-1]]))
    return np.diff(edges)


def to_disjoint_intervals(points, origin: float = 0.0):
    """Disjoint estimation intervals for a grid of lags.

    The spacings between consecutive points (the first measured from
    ``origin``) are sorted and cumulatively summed; the result is a set of
    adjacent intervals of non-decreasing width that ends exactly at the last
    point.

    Returns
    -------
    bounds : ndarray, shape (n + 1,)
    to_points : callable
        Maps an array of per-interval values onto the original points by
        linear interpolation between interval midpoints.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 1 or points.size == 0:
        raise ConfigError("points must be a non-empty 1-d array")
    steps = np.diff(np.concatenate(([origin], points)))
    if np.any(steps <= 0):
        raise ConfigError("points must be strictly increasing and above the origin")
    bounds = np.concatenate(([origin], origin + np.cumsum(np.sort(steps))))
    bounds[-1] = points[-1]
    centers = 0.5 * (bounds[1:] + bounds[:-1])
    mat = _interp_matrix(centers, points)

    def to_points(binned):
        return np.asarray(binned, dtype=float) @ mat.T

    return bounds, to_points


def make_grid(points, origin: float = 0.0) -> TimeGrid:
    points = np.asarray(points, dtype=float)
    bounds, _ = to_disjoint_intervals(points, origin)
    return TimeGrid(points, midpoint_weights(points, origin), bounds, origin)


def build_grid(t_min: float, t_switch: float, t_max: float, n_linear: int, n_log: int,
               origin: float = 0.0) -> TimeGrid:
    """Linear-then-logarithmic grid.

    ``n_linear`` equispaced points on ``[t_min, t_switch]`` followed by
    ``n_log`` log-equispaced points on ``(t_switch, t_max]``.
    """
    if n_linear < 0 or n_log < 0 or n_linear + n_log < 1:
        raise ConfigError("grid point counts must be non-negative with at least one point")
    if not 0 <= origin < t_min:
        raise ConfigError("need origin < t_min")
    if not (t_min <= t_switch <= t_max):
        raise ConfigError("need t_min <= t_switch <= t_max")
    if n_log > 0 and not t_switch < t_max:
        raise ConfigError("logarithmic part needs t_switch < t_max")
    if n_linear > 1 and not t_min < t_switch:
        raise ConfigError("linear part needs t_min < t_switch")
    if n_linear == 1:
        lin = np.array([t_min])
    else:
        lin = np.linspace(t_min, t_switch, n_linear)
    k = np.arange(1, n_log + 1)
    log = t_switch * (t_max / t_switch) ** (k / max(n_log, 1))
    if n_log:
        log[-1] = t_max
    points = np.concatenate((lin, log))
    if np.any(np.diff(points) <= 0):
        raise ConfigError("grid points are not strictly increasing")
    return make_grid(points, origin)


def default_hawkes_grid() -> TimeGrid:
    return build_grid(0.002, 0.1, 200.0, 10, 30)


def default_price_grid() -> TimeGrid:
    return build_grid(0.1, 2.0, 1000.0, 8, 32)


def quad_integrate(samples, grid: TimeGrid, cutoff: float | None = None, axis: int = -1):
    """Quadrature ``sum_n f(t_n) w_n``, optionally truncated at ``cutoff``."""
    samples = np.asarray(samples, dtype=float)
    if samples.shape[axis] != len(grid):
        raise DataError(f"{samples.shape[axis]} samples for a grid of {len(grid)} points")
    w = grid.clipped_weights(cutoff)
    return np.tensordot(np.moveaxis(samples, axis, -1), w, axes=([-1], [0]))


def c1_integrate(right_limits, left_limits, points) -> float:
    """Piecewise-C1 rule ``sum_n (t_{n+1}-t_n)/2 [f(t_n+) + f(t_{n+1}-)]``.

    ``right_limits[n]`` is ``f(t_n+)`` and ``left_limits[n]`` is ``f(t_n-)``.
    """
    right_limits = np.asarray(right_limits, dtype=float)
    left_limits = np.asarray(left_limits, dtype=float)
    points = np.asarray(points, dtype=float)
    if not right_limits.shape == left_limits.shape == points.shape:
        raise DataError("one-sided limits must be aligned with the points")
    dt = np.diff(points)
    return float(np.sum(0.5 * dt * (right_limits[:-1] + left_limits[1:])))


def _hat_weights(points: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Rows: nodes ``s``; columns: grid points. Flat below the first point."""
    s = np.clip(s, points[0], points[-1])
    return _interp_matrix(points, s)


def convolution_matrix(points: np.ndarray, g: OneSided, t_eval: np.ndarray,
                       support: float | None = None,
                       g_points: np.ndarray | None = None) -> np.ndarray:
    """Matrix ``C`` with ``int_0^S f(s) g(t - s) ds ~= C @ f(points)``.

    ``f`` is known only at ``points``; it is taken piecewise linear between
    them, flat on ``[0, points[0]]`` and zero past ``support`` (default: the
    last point). ``g`` is piecewise linear between the lags ``g_points``
    (both signs). The integral is evaluated with the piecewise-C1 rule on
    the nodes ``{0} U points U (t - g_points) U {t}``, so both factors are
    linear between nodes and the jump of ``g`` at zero lag is split on a
    node and handled through one-sided limits.
    """
    points = np.asarray(points, dtype=float)
    t_eval = np.atleast_1d(np.asarray(t_eval, dtype=float))
    s_max = points[-1] if support is None else support
    lags = np.zeros(0) if g_points is None else np.asarray(g_points, dtype=float)
    lags = np.concatenate((lags, -lags, [0.0]))
    out = np.zeros((t_eval.size, points.size))
    base = np.concatenate(([0.0], points[points < s_max], [s_max]))
    for m, t in enumerate(t_eval):
        extra = t - lags
        nodes = np.union1d(base, extra[(extra > 0) & (extra < s_max)])
        lag = t - nodes
        g_right = g(lag, -1)   # s -> node+ means lag -> (t - node)-
        g_left = g(lag, +1)    # s -> node- means lag -> (t - node)+
        h = np.diff(nodes) * 0.5
        hat = _hat_weights(points, nodes)
        coef = np.zeros(nodes.size)
        coef[:-1] += h * g_right[:-1]
        coef[1:] += h * g_left[1:]
        out[m] = coef @ hat
    return out


def sampled(grid: TimeGrid, values: np.ndarray, negative: np.ndarray | None = None,
            symmetric: bool = False) -> OneSided:
    """One-sided function from values on ``grid``.

    For negative lags the function takes ``negative`` (sampled on the same
    grid, evaluated at ``-x``), the mirror of ``values`` if ``symmetric``,
    and zero otherwise.
    """
    values = np.asarray(values, dtype=float)
    neg = values if symmetric else negative

    def g(x, side):
        x = np.asarray(x, dtype=float)
        pos = grid.evaluate(values, np.abs(x))
        if neg is None:
            other = np.zeros_like(x)
        else:
            other = grid.evaluate(neg, np.abs(x))
        is_pos = (x > 0) | ((x == 0) & (side > 0))
        return np.where(is_pos, pos, other)

    return g
