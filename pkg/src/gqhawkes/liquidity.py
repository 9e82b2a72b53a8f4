"""Liquidity diagnostics: effective spread, trend/volatility signals, flux.

The effective spread measures how far one has to walk into the book on
each side to find ``V_best`` shares; the signals ``sigma^2`` and ``mu`` are
the volatility and trend filters of the quadratic feedback term.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numba import njit
from scipy import integrate, stats

from .errors import ConfigError, DataError
from .grids import TimeGrid
from .ingest import EVENT_TYPES, KINDS, PricePath

FLUX_SIGN = {"LO": 1.0, "C": -1.0, "MO": -1.0}


# ---------------------------------------------------------------------------
# book snapshots and effective spread


@dataclass(frozen=True)
class BookSnapshot:
    """Depth on both sides at one time; levels map price tick -> shares."""

    time: float
    asks: Mapping[int, float]
    bids: Mapping[int, float]

    def __post_init__(self):
        for side, levels in (("ask", self.asks), ("bid", self.bids)):
            if not levels:
                raise DataError(f"t={self.time}: empty {side} side")
            if any(v < 0 for v in levels.values()):
                raise DataError(f"t={self.time}: negative volume on the {side} side")
        if min(self.asks) <= max(self.bids):
            raise DataError(f"t={self.time}: crossed book (ask {min(self.asks)} <= bid {max(self.bids)})")

    @property
    def best_ask(self) -> int:
        return min(self.asks)

    @property
    def best_bid(self) -> int:
        return max(self.bids)

    @property
    def spread(self) -> int:
        return self.best_ask - self.best_bid

    def scaled(self, factor: float) -> "BookSnapshot":
        return BookSnapshot(self.time, {k: v * factor for k, v in self.asks.items()},
                            {k: v * factor for k, v in self.bids.items()})


def _inverse_depth(levels: Mapping[int, float], v_best: float, ascending: bool, side: str,
                   time: float) -> int:
    cum = 0.0
    for tick in sorted(levels, reverse=not ascending):
        cum += levels[tick]
        if cum >= v_best:
            return tick
    raise DataError(f"t={time}: insufficient {side} depth ({cum:g} < V_best={v_best:g})")


def effective_spread(book: BookSnapshot, v_best: float) -> int:
    """Ticks between the first ask and bid levels whose cumulative depth reaches ``v_best``."""
    if v_best <= 0:
        raise ConfigError("V_best must be positive")
    ask = _inverse_depth(book.asks, v_best, True, "ask", book.time)
    bid = _inverse_depth(book.bids, v_best, False, "bid", book.time)
    return ask - bid


def default_v_best(books: Sequence[BookSnapshot]) -> float:
    """Average volume at the best quotes (both sides pooled) over ``books``."""
    if not books:
        raise DataError("no book snapshots")
    vols = [b.asks[b.best_ask] for b in books] + [b.bids[b.best_bid] for b in books]
    return float(np.mean(vols))


def read_books(source) -> list[BookSnapshot]:
    """Parse ``time_s,side,level_ticks,volume`` rows into snapshots (grouped by time)."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source) as fh:
            text = fh.read()
    all_lines = text.splitlines()
    lines = [ln for ln in all_lines if not ln.startswith("#")]
    skipped = len(all_lines) - len(lines)       # provenance lines sit at the top
    reader = csv.reader(lines)
    header = [h.strip() for h in next(reader, [])]
    if header != ["time_s", "side", "level_ticks", "volume"]:
        raise DataError("book file: expected header time_s,side,level_ticks,volume")
    books, cur_t, asks, bids = [], None, {}, {}
    for lineno, row in enumerate(reader, start=2 + skipped):
        if not row:
            continue
        try:
            t, side, tick, vol = float(row[0]), row[1].strip(), int(row[2]), float(row[3])
        except (ValueError, IndexError):
            raise DataError(f"book file line {lineno}: malformed row {row!r}") from None
        if cur_t is not None and t != cur_t:
            if t < cur_t:
                raise DataError(f"book file line {lineno}: time goes backwards")
            books.append(BookSnapshot(cur_t, asks, bids))
            asks, bids = {}, {}
        cur_t = t
        if side == "a":
            asks[tick] = asks.get(tick, 0.0) + vol
        elif side == "b":
            bids[tick] = bids.get(tick, 0.0) + vol
        else:
            raise DataError(f"book file line {lineno}: side must be a or b")
    if cur_t is not None:
        books.append(BookSnapshot(cur_t, asks, bids))
    return books


# ---------------------------------------------------------------------------
# survival tail


@dataclass
class SurvivalTail:
    values: np.ndarray        # sorted distinct sample values
    survival: np.ndarray      # P(S > value)
    exponent: float
    stderr: float
    n_tail: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("S,survival\n")
        for v, p in zip(self.values, self.survival):
            buf.write(f"{float(v)!r},{float(p)!r}\n")
        return buf.getvalue()


def empirical_survival(samples) -> tuple[np.ndarray, np.ndarray]:
    """Distinct sample values and ``P(S > value)``."""
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise DataError("no samples")
    vals, counts = np.unique(x, return_counts=True)
    return vals, 1.0 - np.cumsum(counts) / x.size


def survival_tail(samples, tail_fraction: float = 0.1, min_samples: int = 100) -> SurvivalTail:
    """Empirical survival function and the log-log slope of its upper tail.

    The slope is fitted by least squares of ``log P(S > s)`` on ``log s``
    over the top ``tail_fraction`` of the samples (the extreme point, whose
    empirical survival is zero, is excluded). ``exponent`` is minus the slope.
    """
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    if n < min_samples:
        raise DataError(f"survival tail needs at least {min_samples} samples, got {n}")
    if x[0] == x[-1]:
        raise DataError("degenerate constant series: no tail to fit")
    vals, surv = empirical_survival(x)
    start = int(np.floor((1.0 - tail_fraction) * n))
    tail_x = x[start:-1]
    tail_s = 1.0 - (np.arange(start, n - 1) + 1.0) / n
    keep = (tail_x > 0) & (tail_s > 0)
    lx, ls = np.log(tail_x[keep]), np.log(tail_s[keep])
    if lx.size < 3 or np.ptp(lx) == 0:
        raise DataError("tail has too few distinct values for a slope fit")
    fit = stats.linregress(lx, ls)
    return SurvivalTail(vals, surv, float(-fit.slope), float(fit.stderr), int(lx.size))


# ---------------------------------------------------------------------------
# signals


@njit(cache=True)
def _causal_filter(jump_t, weights, sample_t, lag_pts, lag_vals, cutoff):
    """``sum_{s < t} f(t - s) w_s`` with ``f`` linear between ``lag_pts`` (flat before the first)."""
    out = np.zeros(sample_t.size)
    start = 0
    n_pts = lag_pts.size
    for k in range(sample_t.size):
        t = sample_t[k]
        while start < jump_t.size and t - jump_t[start] > cutoff:
            start += 1
        acc = 0.0
        m = start
        while m < jump_t.size and jump_t[m] < t:
            lag = t - jump_t[m]
            if lag <= lag_pts[0]:
                v = lag_vals[0]
            elif lag > lag_pts[n_pts - 1]:
                v = 0.0
            else:
                j = np.searchsorted(lag_pts, lag) - 1
                f = (lag - lag_pts[j]) / (lag_pts[j + 1] - lag_pts[j])
                v = lag_vals[j] * (1.0 - f) + lag_vals[j + 1] * f
            acc += v * weights[m]
            m += 1
        out[k] = acc
    return out


@dataclass
class SignalKernel:
    """A causal kernel known at ``points`` (linear in between, zero beyond ``cutoff``)."""

    points: np.ndarray
    values: np.ndarray
    cutoff: float

    @classmethod
    def from_grid(cls, grid: TimeGrid, values, cutoff: float = 1000.0) -> "SignalKernel":
        return cls(grid.points.copy(), np.asarray(values, dtype=float), float(cutoff))

    @classmethod
    def from_function(cls, f: Callable, support: float, n: int = 4001,
                      cutoff: float | None = None) -> "SignalKernel":
        pts = np.linspace(support / (n - 1), support, n - 1)
        return cls(pts, np.asarray(f(pts), dtype=float), float(cutoff or support))

    def normalized(self, power: int = 1) -> "SignalKernel":
        """Rescaled to unit integral (``power=1``) or unit square integral (``power=2``)."""
        val = self.integral(power)
        if val <= 0:
            raise DataError("kernel has no mass to normalize")
        return SignalKernel(self.points, self.values / val ** (1.0 / power), self.cutoff)

    def integral(self, power: int = 1) -> float:
        """``int_0^cutoff f^power`` under the same interpolation the filter uses."""
        pts = np.concatenate([[0.0], self.points[self.points <= self.cutoff]])
        v = np.concatenate([[self.values[0]], self.values[self.points <= self.cutoff]])
        if power == 1:
            return float(integrate.trapezoid(v, pts))
        # exact for piecewise-linear f: int (a + b s)^2 over each cell
        a, b = v[:-1], v[1:]
        h = np.diff(pts)
        return float(np.sum(h * (a * a + a * b + b * b) / 3.0))


def _check_normalized(kernel: SignalKernel, power: int, name: str, rtol: float):
    val = kernel.integral(power)
    if not abs(val - 1.0) <= rtol:
        what = "integral" if power == 1 else "square integral"
        raise DataError(f"{name} kernel is not normalized: {what} = {val:.6g}")


@dataclass
class SignalSeries:
    t: np.ndarray
    sigma2: np.ndarray
    mu: np.ndarray
    seff: np.ndarray | None = None
    floor: float = 0.0
    n_floored: int = 0

    @property
    def mu2(self) -> np.ndarray:
        return self.mu ** 2

    @property
    def ratio(self) -> np.ndarray:
        """``T = mu^2 / sigma^2`` where ``sigma^2`` exceeds the floor, NaN elsewhere."""
        out = np.full(self.t.shape, np.nan)
        ok = self.sigma2 > self.floor
        out[ok] = self.mu2[ok] / self.sigma2[ok]
        return out

    def to_csv(self) -> str:
        seff = self.seff if self.seff is not None else np.full(self.t.shape, np.nan)
        T = self.ratio
        buf = io.StringIO()
        buf.write("t,sigma2,mu,mu2,T,seff\n")
        for n in range(self.t.size):
            buf.write(f"{float(self.t[n])!r},{float(self.sigma2[n])!r},{float(self.mu[n])!r},{float(self.mu2[n])!r},"
                      f"{float(T[n])!r},{float(seff[n])!r}\n")
        return buf.getvalue()


def signals(path: PricePath, psi: SignalKernel, Z: SignalKernel, sample_t=None,
            dt: float = 1.0, floor_quantile: float = 0.01, rtol: float = 1e-6) -> SignalSeries:
    """``sigma^2(t) = sum_{s<t} psi(t-s) dP_s^2`` and ``mu(t) = sum_{s<t} Z(t-s) dP_s``.

    Parameters
    ----------
    path : PricePath
    psi, Z : SignalKernel
        Kernels normalized to ``int psi = 1`` and ``int Z^2 = 1``.
    sample_t : array, optional
        Sampling times; default ``dt, 2 dt, ...`` up to the path duration.
    floor_quantile : float
        ``T`` is only formed where ``sigma^2`` exceeds this quantile of the
        positive ``sigma^2`` values.
    """
    _check_normalized(psi, 1, "volatility", rtol)
    _check_normalized(Z, 2, "trend", rtol)
    if sample_t is None:
        sample_t = np.arange(dt, path.duration + 0.5 * dt, dt)
        sample_t = sample_t[sample_t <= path.duration]
    sample_t = np.asarray(sample_t, dtype=float)
    sig = _causal_filter(path.times, path.sizes ** 2, sample_t, psi.points, psi.values, psi.cutoff)
    mu = _causal_filter(path.times, path.sizes, sample_t, Z.points, Z.values, Z.cutoff)
    pos = sig[sig > 0]
    floor = float(np.quantile(pos, floor_quantile)) if pos.size else 0.0
    n_floored = int(np.sum(sig <= floor))
    return SignalSeries(sample_t, sig, mu, None, floor, n_floored)


def pooled_kernel(grid: TimeGrid, values: np.ndarray, kind: str, types=None,
                  cutoff: float = 1000.0) -> SignalKernel:
    """Average the normalized per-type kernels (``kind`` = ``psi`` or ``Z``) and renormalize."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if types is not None:
        values = values[list(types)]
    avg = values.mean(axis=0)
    if kind not in ("psi", "Z"):
        raise ConfigError("kind must be psi or Z")
    return SignalKernel.from_grid(grid, avg, cutoff).normalized(1 if kind == "psi" else 2)


def spread_series(books: Sequence[BookSnapshot], v_best: float, sample_t) -> np.ndarray:
    """Effective spread of the last snapshot at or before each sample time."""
    bt = np.array([b.time for b in books])
    se = np.array([effective_spread(b, v_best) for b in books], dtype=float)
    idx = np.searchsorted(bt, np.asarray(sample_t), side="right") - 1
    out = np.full(len(sample_t), np.nan)
    ok = idx >= 0
    out[ok] = se[idx[ok]]
    return out


# ---------------------------------------------------------------------------
# lagged correlations


def _lag_corr(x, y, lag):
    """``Cor[x(t + lag), y(t)]`` over the overlap (lag in samples)."""
    if lag >= 0:
        a, b = x[lag:], y[:y.size - lag]
    else:
        a, b = x[:x.size + lag], y[-lag:]
    ok = np.isfinite(a) & np.isfinite(b)
    a, b = a[ok], b[ok]
    if a.size < 3:
        raise DataError("series do not overlap at this lag")
    sa, sb = a.std(), b.std()
    if sa == 0 or sb == 0:
        raise DataError("zero variance series: correlation undefined")
    return float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))


def lagged_correlation(x, y, lags, return_sessions: bool = False):
    """Session-weighted ``C(tau) = Cor[X(t + tau), Y(t)]`` for integer sample lags.

    ``x`` and ``y`` are arrays or lists of per-session arrays; correlations
    are computed per session and averaged with session-length weights.
    Negative ``tau`` pairs past ``X`` with the current ``Y``.
    """
    if isinstance(x, np.ndarray) and x.ndim == 1:
        x, y = [x], [y]
    if len(x) != len(y):
        raise DataError("need the same number of X and Y sessions")
    lags = np.asarray(lags, dtype=int)
    per = np.zeros((len(x), lags.size))
    w = np.zeros(len(x))
    for s, (xs, ys) in enumerate(zip(x, y)):
        xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
        if xs.shape != ys.shape:
            raise DataError("X and Y must share the sampling grid within a session")
        per[s] = [_lag_corr(xs, ys, int(l)) for l in lags]
        w[s] = xs.size
    C = np.clip(w @ per / w.sum(), -1.0, 1.0)
    return (C, per) if return_sessions else C


def causality_asymmetry(per_session: np.ndarray, lags, alpha: float = 0.01) -> dict:
    """One-sided test that correlation mass at negative lags exceeds that at positive lags.

    Per session the statistic is ``sum_{tau<0} C(tau) - sum_{tau>0} C(tau)``;
    a one-sample t-test across sessions checks its mean is positive.
    """
    lags = np.asarray(lags)
    per = np.atleast_2d(per_session)
    diff = per[:, lags < 0].sum(axis=1) - per[:, lags > 0].sum(axis=1)
    if diff.size < 2:
        raise DataError("need at least two sessions for the asymmetry test")
    res = stats.ttest_1samp(diff, 0.0, alternative="greater")
    p = float(res.pvalue) if np.isfinite(res.pvalue) else 1.0
    return {"mean_difference": float(diff.mean()), "t": float(res.statistic), "p_value": p,
            "significant": bool(p < alpha), "n_sessions": int(diff.size)}


def correlations_csv(lags_s, C_mu, C_sigma, C_T) -> str:
    buf = io.StringIO()
    buf.write("tau,C_mu,C_sigma,C_T\n")
    for n, tau in enumerate(lags_s):
        buf.write(f"{float(tau)!r},{float(C_mu[n])!r},{float(C_sigma[n])!r},{float(C_T[n])!r}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# volumes and flux


@dataclass
class VolumeTable:
    volumes: np.ndarray             # average order size per event type
    types: tuple = EVENT_TYPES

    def __post_init__(self):
        self.volumes = np.asarray(self.volumes, dtype=float)
        if self.volumes.shape != (len(self.types),):
            raise DataError("one volume per event type required")
        if np.any(self.volumes <= 0) or not np.all(np.isfinite(self.volumes)):
            raise DataError("average volumes must be positive")

    @classmethod
    def from_sessions(cls, sessions) -> "VolumeTable":
        n = len(EVENT_TYPES)
        tot, cnt = np.zeros(n), np.zeros(n)
        for s in sessions:
            tot += np.bincount(s.types, weights=s.volume, minlength=n)
            cnt += np.bincount(s.types, minlength=n)
        if np.any(cnt == 0):
            missing = [EVENT_TYPES[i] for i in np.flatnonzero(cnt == 0)]
            raise DataError(f"no events of type(s) {missing}")
        return cls(tot / cnt)

    def to_dict(self) -> dict:
        return {f"{k}_{s}": float(v) for (k, s), v in zip(self.types, self.volumes)}


@dataclass
class FluxReport:
    J: float
    per_type: dict
    per_kind: dict
    volatility_part: float
    zumbach_part: float
    shares: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"J": self.J, "per_type": self.per_type, "per_kind": self.per_kind,
                "volatility_part": self.volatility_part, "zumbach_part": self.zumbach_part,
                "shares": self.shares}

    def to_json(self, extra: dict | None = None) -> str:
        payload = self.to_dict()
        if extra:
            payload.update(extra)
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def flux_from_kinds(contrib: Mapping[str, float]) -> float:
    """``J`` from kind-level products ``V ||Kbar|| Delta2`` (keys ``LO``, ``C``, ``MO``)."""
    return float(sum(FLUX_SIGN[k] * float(contrib.get(k, 0.0)) for k in KINDS))


def liquidity_flux(K_d, K_1, volumes: VolumeTable, Delta2: float,
                   side_weight: str = "mean") -> FluxReport:
    """Quadratic liquidity flux ``J = Delta2 sum_i s_i w_i V^i (Kbar_d^i + Kbar_1^i)``.

    ``s_i`` is +1 for limit orders and -1 for cancellations and market
    orders. With ``side_weight="mean"`` (default) each side counts 1/2, so
    the kind-level terms are side averages; ``"sum"`` adds both sides.
    """
    K_d = np.asarray(K_d, dtype=float)
    K_1 = np.asarray(K_1, dtype=float)
    types = volumes.types
    if K_d.shape != (len(types),) or K_1.shape != (len(types),):
        raise DataError("strengths must have one entry per event type")
    if side_weight not in ("mean", "sum"):
        raise ConfigError("side_weight must be mean or sum")
    w = 0.5 if side_weight == "mean" else 1.0
    sign = np.array([FLUX_SIGN[k] for k, _ in types])
    base = Delta2 * w * volumes.volumes
    vol_part = sign * base * K_d
    zum_part = sign * base * K_1
    per_type_arr = vol_part + zum_part
    J = float(np.sum(per_type_arr))
    per_type = {f"{k}_{s}": float(v) for (k, s), v in zip(types, per_type_arr)}
    per_kind = {k: float(sum(v for (kk, _), v in zip(types, per_type_arr) if kk == k))
                for k in KINDS}
    gross = float(np.sum(np.abs(per_type_arr)))
    shares = {k: (abs(v) / gross if gross else 0.0) for k, v in per_kind.items()}
    return FluxReport(J, per_type, per_kind, float(np.sum(vol_part)), float(np.sum(zum_part)),
                      shares)
