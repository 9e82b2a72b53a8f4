"""Empirical means and covariances of events and price jumps.

All covariance densities are estimated on disjoint lag bins
``(lo_k, hi_k]`` by the asynchronous pair-count recipe: for a target stream
with marks ``w_n`` at times ``t_n`` and a source stream with marks ``v_m`` at
``s_m``,

    A_k = sum_{n, m} w_n v_m 1{t_n - s_m in (lo_k, hi_k]}.

Pairs never span two sessions. Two forms of the mean correction are
available:

* ``center=True`` (default) subtracts ``rate_target * B_k`` where
  ``B_k = sum_m v_m |(s_m + lo_k, s_m + hi_k] ∩ [0, T]|`` is the exact
  integral of the source-side window over the session. This is the plain
  sample covariance and carries the same edge truncation as ``A_k``.
* ``center=False`` subtracts the product of the means, e.g.
  ``Lambda^i Lambda^j`` for event pairs.

Densities are normalized by ``T Δt`` or, with ``edge_correction=True``
(default), by ``T_eff Δt`` with ``T_eff = sum_sessions max(T_s - lag, 0)``
evaluated at the bin center: a pair at lag ``τ`` can only be observed when
its earlier member falls in ``[0, T_s - τ]``.

Accumulators are stored as raw sums, so merging two moment sets is exact
addition, and every derived quantity is recomputed from the merged sums.
"""
from __future__ import annotations

import io
import json
import os
import zipfile
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
from numba import njit
from scipy.optimize import least_squares

from .errors import ConfigError, DataError, NumericalError
from .grids import TimeGrid

# ---------------------------------------------------------------------------
# compiled pair sweeps


@njit(cache=True)
def _pair_bin_sums(t_target, w_target, t_source, w_source, bounds):
    nb = bounds.size - 1
    out = np.zeros(nb)
    lo0 = bounds[0]
    hi_last = bounds[-1]
    start = 0
    ns = t_source.size
    for n in range(t_target.size):
        t = t_target[n]
        while start < ns and t - t_source[start] > hi_last:
            start += 1
        m = start
        while m < ns:
            lag = t - t_source[m]
            if lag <= lo0:
                break
            k = np.searchsorted(bounds, lag) - 1
            out[k] += w_target[n] * w_source[m]
            m += 1
    return out


@njit(cache=True)
def _past_weighted_sum(times, sizes, bounds, values):
    """``out[n] = sum_{m: t_n - t_m in bin k} values[k] * sizes[m]``."""
    out = np.zeros(times.size)
    lo0 = bounds[0]
    hi_last = bounds[-1]
    start = 0
    for n in range(times.size):
        t = times[n]
        while start < n and t - times[start] > hi_last:
            start += 1
        acc = 0.0
        for m in range(start, n):
            lag = t - times[m]
            if lag <= lo0:
                break
            k = np.searchsorted(bounds, lag) - 1
            acc += values[k] * sizes[m]
        out[n] = acc
    return out


@njit(cache=True)
def _npp_sums(t_events, t_jumps, x_jumps, bounds):
    """Sum over events of ``x_p x_q`` for ordered jump pairs ``p != q``.

    Cell ``(a, b)`` collects pairs whose lags to the event fall in bins
    ``a`` and ``b`` respectively.
    """
    nb = bounds.size - 1
    out = np.zeros((nb, nb))
    s = np.zeros(nb)
    q = np.zeros(nb)
    lo0 = bounds[0]
    hi_last = bounds[-1]
    start = 0
    nj = t_jumps.size
    for n in range(t_events.size):
        t = t_events[n]
        while start < nj and t - t_jumps[start] > hi_last:
            start += 1
        s[:] = 0.0
        q[:] = 0.0
        m = start
        any_hit = False
        while m < nj:
            lag = t - t_jumps[m]
            if lag <= lo0:
                break
            k = np.searchsorted(bounds, lag) - 1
            s[k] += x_jumps[m]
            q[k] += x_jumps[m] * x_jumps[m]
            any_hit = True
            m += 1
        if not any_hit:
            continue
        for a in range(nb):
            if s[a] == 0.0 and q[a] == 0.0:
                continue
            for b in range(nb):
                if a == b:
                    out[a, a] += s[a] * s[a] - q[a]
                else:
                    out[a, b] += s[a] * s[b]
    return out


@njit(cache=True)
def _npp_window_integral(t_jumps, x_jumps, bounds, duration):
    """``sum_{p != q} x_p x_q |(t_p + I_a) ∩ (t_q + I_b) ∩ [0, T]|``."""
    nb = bounds.size - 1
    out = np.zeros((nb, nb))
    span = bounds[-1] - bounds[0]
    nj = t_jumps.size
    for p in range(nj):
        tp = t_jumps[p]
        for qq in range(nj):
            if qq == p:
                continue
            tq = t_jumps[qq]
            if tq - tp >= span:
                break
            if tp - tq >= span:
                continue
            w = x_jumps[p] * x_jumps[qq]
            for a in range(nb):
                lo_a = tp + bounds[a]
                hi_a = tp + bounds[a + 1]
                if lo_a >= duration:
                    break
                for b in range(nb):
                    lo_b = tq + bounds[b]
                    hi_b = tq + bounds[b + 1]
                    if lo_b >= hi_a:
                        break
                    if hi_b <= lo_a:
                        continue
                    lo = max(lo_a, lo_b)
                    hi = min(hi_a, hi_b, duration)
                    if hi > lo:
                        out[a, b] += w * (hi - lo)
    return out


@njit(cache=True)
def _window_integral_kernel(t_source, w_source, bounds, duration):
    nb = bounds.size - 1
    out = np.zeros(nb)
    for m in range(t_source.size):
        t = t_source[m]
        for k in range(nb):
            lo = t + bounds[k]
            if lo >= duration:
                break
            hi = min(t + bounds[k + 1], duration)
            out[k] += w_source[m] * (hi - lo)
    return out


def _window_integral(t_source, w_source, bounds, duration):
    """``B_k = sum_m v_m |(s_m + lo_k, s_m + hi_k] ∩ [0, T]|``."""
    return _window_integral_kernel(np.ascontiguousarray(t_source, dtype=float),
                                   np.ascontiguousarray(w_source, dtype=float),
                                   np.ascontiguousarray(bounds, dtype=float), float(duration))


def _as_bounds(grid_or_bounds) -> np.ndarray:
    if isinstance(grid_or_bounds, TimeGrid):
        return np.asarray(grid_or_bounds.bounds)
    b = np.ascontiguousarray(grid_or_bounds, dtype=float)
    if b.ndim != 1 or b.size < 2:
        raise ConfigError("need at least one lag bin")
    if np.any(np.diff(b) <= 0):
        raise DataError("lag bins must have positive width")
    if b[0] < 0:
        raise ConfigError("lag bins must start at a non-negative lag")
    return b


# ---------------------------------------------------------------------------
# samples


@dataclass
class Sample:
    """One session: per-type event times and the price path on ``[0, duration]``."""

    events: list
    jump_times: np.ndarray
    jump_sizes: np.ndarray
    duration: float

    def __post_init__(self):
        self.events = [np.ascontiguousarray(e, dtype=float) for e in self.events]
        self.jump_times = np.ascontiguousarray(self.jump_times, dtype=float)
        self.jump_sizes = np.ascontiguousarray(self.jump_sizes, dtype=float)
        for e in self.events:
            if e.size and np.any(np.diff(e) < 0):
                raise DataError("event times must be sorted within a session")
        if self.duration <= 0:
            raise DataError("session duration must be positive")

    @property
    def n_types(self) -> int:
        return len(self.events)

    @classmethod
    def from_session(cls, session, path=None) -> "Sample":
        """Build from an ingest ``SessionSeries`` and ``PricePath``."""
        duration = session.duration
        if path is not None:
            duration = max(duration, path.duration)
            jt, js = path.times, path.sizes
        else:
            jt = js = np.zeros(0)
        return cls(session.by_type(), jt, js, duration)


def _samples(samples) -> list[Sample]:
    if isinstance(samples, Sample):
        return [samples]
    samples = list(samples)
    if not samples:
        raise DataError("need at least one session")
    return samples


def _teff(durations, centers):
    d = np.asarray(durations, dtype=float)
    return np.clip(d[:, None] - np.asarray(centers)[None, :], 0.0, None).sum(axis=0)


# ---------------------------------------------------------------------------
# the accumulator

_ACCUMULATORS = ("T", "n_sessions", "counts", "price_sums", "nn_a", "nn_b", "np_a", "np_b",
                 "np2_a", "np2_b", "npp_a", "npp_b", "pp_a", "pp_b", "teff_h", "teff_p",
                 "teff_pp")


@dataclass(eq=False)
class MomentSet:
    """Mergeable raw sums behind every empirical moment.

    Derived attributes (``Lambda``, ``Delta2``, ``chi_nn`` ...) are computed
    on demand. ``chi_*`` are values on the grid points; ``chi_*_bins`` the
    per-interval estimates.
    """

    hawkes_grid: TimeGrid
    price_grid: TimeGrid
    n_types: int
    T: float = 0.0
    n_sessions: int = 0
    counts: np.ndarray = None          # (d,)
    price_sums: np.ndarray = None      # (5,): sum of x^k, k = 0..4
    nn_a: np.ndarray = None            # (d, d, nH)
    nn_b: np.ndarray = None            # (d, nH), source-type window integrals
    np_a: np.ndarray = None            # (d, nP)
    np_b: np.ndarray = None            # (nP,)
    np2_a: np.ndarray = None
    np2_b: np.ndarray = None
    npp_a: np.ndarray = None           # (d, nP, nP)
    npp_b: np.ndarray = None           # (nP, nP)
    pp_a: np.ndarray = None            # (nP,)
    pp_b: np.ndarray = None
    teff_h: np.ndarray = None
    teff_p: np.ndarray = None
    teff_pp: np.ndarray = None
    center: bool = True
    edge_correction: bool = True
    symmetric: bool = False
    with_npp: bool = True

    def __post_init__(self):
        d, nh, npn = self.n_types, len(self.hawkes_grid), len(self.price_grid)
        shapes = {"counts": (d,), "price_sums": (5,), "nn_a": (d, d, nh), "nn_b": (d, nh),
                  "np_a": (d, npn), "np_b": (npn,), "np2_a": (d, npn), "np2_b": (npn,),
                  "npp_a": (d, npn, npn), "npp_b": (npn, npn), "pp_a": (npn,), "pp_b": (npn,),
                  "teff_h": (nh,), "teff_p": (npn,), "teff_pp": (npn, npn)}
        for name, shape in shapes.items():
            val = getattr(self, name)
            if val is None:
                setattr(self, name, np.zeros(shape))
            else:
                val = np.asarray(val, dtype=float)
                if val.shape != shape:
                    raise DataError(f"{name} has shape {val.shape}, expected {shape}")
                setattr(self, name, val)

    # -- construction -------------------------------------------------------
    @classmethod
    def from_sample(cls, sample: Sample, hawkes_grid: TimeGrid, price_grid: TimeGrid,
                    with_npp: bool = True, **options) -> "MomentSet":
        d = sample.n_types
        bh = np.asarray(hawkes_grid.bounds)
        bp = np.asarray(price_grid.bounds)
        T = sample.duration
        ev = sample.events
        x = sample.jump_sizes
        tj = sample.jump_times
        nh, npn = bh.size - 1, bp.size - 1
        ms = cls(hawkes_grid, price_grid, d, with_npp=with_npp, **options)
        ms.T = float(T)
        ms.n_sessions = 1
        ms.counts = np.array([e.size for e in ev], dtype=float)
        ms.price_sums = np.array([np.sum(x ** k) for k in range(5)], dtype=float)
        for j in range(d):
            ones_j = np.ones(ev[j].size)
            ms.nn_b[j] = _window_integral(ev[j], ones_j, bh, T)
            for i in range(d):
                ms.nn_a[i, j] = _pair_bin_sums(ev[i], np.ones(ev[i].size), ev[j], ones_j, bh)
        x2 = x * x
        ms.np_b = _window_integral(tj, x, bp, T)
        ms.np2_b = _window_integral(tj, x2, bp, T)
        for i in range(d):
            ones_i = np.ones(ev[i].size)
            ms.np_a[i] = _pair_bin_sums(ev[i], ones_i, tj, x, bp)
            ms.np2_a[i] = _pair_bin_sums(ev[i], ones_i, tj, x2, bp)
            if with_npp:
                ms.npp_a[i] = _npp_sums(ev[i], tj, x, bp)
        if with_npp:
            ms.npp_b = _npp_window_integral(tj, x, bp, T)
        ms.pp_a = _pair_bin_sums(tj, x2, tj, x2, bp)
        ms.pp_b = ms.np2_b.copy()
        ch = hawkes_grid.centers
        cp = price_grid.centers
        ms.teff_h = _teff([T], ch)
        ms.teff_p = _teff([T], cp)
        ms.teff_pp = np.clip(T - np.maximum(cp[:, None], cp[None, :]), 0.0, None)
        return ms

    def _check_compatible(self, other: "MomentSet"):
        if (self.n_types != other.n_types
                or self.hawkes_grid.digest() != other.hawkes_grid.digest()
                or self.price_grid.digest() != other.price_grid.digest()):
            raise ConfigError("cannot merge moment sets built on different grids or type sets")
        if (self.center, self.edge_correction, self.symmetric, self.with_npp) != \
                (other.center, other.edge_correction, other.symmetric, other.with_npp):
            raise ConfigError("cannot merge moment sets with different estimator options")

    def merge(self, other: "MomentSet") -> "MomentSet":
        self._check_compatible(other)
        out = self.copy()
        for name in _ACCUMULATORS:
            setattr(out, name, getattr(self, name) + getattr(other, name))
        return out

    __add__ = merge

    def copy(self) -> "MomentSet":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        for name in _ACCUMULATORS:
            v = kw[name]
            kw[name] = v.copy() if isinstance(v, np.ndarray) else v
        return MomentSet(**kw)

    def with_options(self, **options) -> "MomentSet":
        out = self.copy()
        for k, v in options.items():
            if k not in ("center", "edge_correction", "symmetric"):
                raise ConfigError(f"unknown option {k}")
            setattr(out, k, bool(v))
        return out

    # -- scalar means ---------------------------------------------------------
    def _require_time(self):
        if self.T <= 0:
            raise DataError("zero observation time")

    @property
    def Lambda(self) -> np.ndarray:
        self._require_time()
        lam = self.counts / self.T
        return 0.5 * (lam + lam[::-1]) if self.symmetric else lam

    def Delta(self, k: int) -> float:
        self._require_time()
        if self.symmetric and k % 2 == 1:
            return 0.0
        return float(self.price_sums[k] / self.T)

    Delta1 = property(lambda self: self.Delta(1))
    Delta2 = property(lambda self: self.Delta(2))
    Delta3 = property(lambda self: self.Delta(3))
    Delta4 = property(lambda self: self.Delta(4))

    # -- raw (unsymmetrized) bin estimates -----------------------------------
    def _norm(self, teff):
        return teff if self.edge_correction else np.full_like(teff, self.T)

    def _raw(self):
        self._require_time()
        lam = self.counts / self.T
        d2 = self.price_sums[2] / self.T
        wh = self.hawkes_grid.widths
        wp = self.price_grid.widths
        nh = self._norm(self.teff_h) * wh
        npn = self._norm(self.teff_p) * wp
        npp = self._norm(self.teff_pp) * np.outer(wp, wp)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.center:
                nn = (self.nn_a - lam[:, None, None] * self.nn_b[None, :, :]) / nh
                np1 = (self.np_a - lam[:, None] * self.np_b[None, :]) / npn
                np2 = (self.np2_a - lam[:, None] * self.np2_b[None, :]) / npn
                nppv = (self.npp_a - lam[:, None, None] * self.npp_b[None]) / npp
                pp = (self.pp_a - d2 * self.pp_b) / npn
            else:
                nn = self.nn_a / nh - np.outer(lam, lam)[:, :, None]
                np1 = self.np_a / npn
                np2 = self.np2_a / npn - lam[:, None] * d2
                nppv = self.npp_a / npp
                pp = self.pp_a / npn - d2 * d2
        # pairs beyond every session length carry no information
        for arr, teff in ((nn, self.teff_h), (np1, self.teff_p), (np2, self.teff_p),
                          (nppv, self.teff_pp), (pp, self.teff_p)):
            arr[..., teff <= 0] = 0.0
        nppv = 0.5 * (nppv + np.swapaxes(nppv, -1, -2))
        return {"nn": nn, "np": np1, "np2": np2, "npp": nppv, "pp": pp}

    def _derived(self):
        raw = self._raw()
        if not self.symmetric:
            return raw
        d = self.n_types
        m = np.arange(d)[::-1]
        return {
            "nn": 0.5 * (raw["nn"] + raw["nn"][m][:, m]),
            "np": 0.5 * (raw["np"] - raw["np"][m]),
            "np2": 0.5 * (raw["np2"] + raw["np2"][m]),
            "npp": 0.5 * (raw["npp"] + raw["npp"][m]),
            "pp": raw["pp"],
        }

    @property
    def chi_nn_bins(self):
        return self._derived()["nn"]

    @property
    def chi_np_bins(self):
        return self._derived()["np"]

    @property
    def chi_np2_bins(self):
        return self._derived()["np2"]

    @property
    def chi_npp_bins(self):
        return self._derived()["npp"]

    @property
    def chi_p2p2_bins(self):
        return self._derived()["pp"]

    # -- values on the grid points -------------------------------------------
    @property
    def chi_nn(self):
        return self.hawkes_grid.to_points(self.chi_nn_bins)

    @property
    def chi_np(self):
        return self.price_grid.to_points(self.chi_np_bins)

    @property
    def chi_np2(self):
        return self.price_grid.to_points(self.chi_np2_bins)

    @property
    def chi_npp(self):
        g = self.price_grid
        return g.to_points(g.to_points(self.chi_npp_bins, axis=-1), axis=-2)

    @property
    def chi_p2p2(self):
        return self.price_grid.to_points(self.chi_p2p2_bins)

    # -- serialization -------------------------------------------------------
    def options(self) -> dict:
        return {"center": self.center, "edge_correction": self.edge_correction,
                "symmetric": self.symmetric, "with_npp": self.with_npp}

    def save(self, directory: str, provenance: str | None = None) -> list[str]:
        """Write accumulators (``moments.npz``) and the finalized CSV tables.

        ``provenance`` is stored as an extra string entry of the archive.
        """
        os.makedirs(directory, exist_ok=True)
        written = []

        def put(name, text):
            path = os.path.join(directory, name)
            with open(path, "w", newline="") as fh:
                fh.write(text)
            written.append(path)

        arrays = {name: np.asarray(getattr(self, name), dtype=float) for name in _ACCUMULATORS}
        if provenance is not None:
            arrays["provenance"] = np.array(provenance)
        npz = os.path.join(directory, "moments.npz")
        write_npz(npz, arrays)
        written.append(npz)
        put("hawkes_grid.csv", self.hawkes_grid.to_csv())
        put("price_grid.csv", self.price_grid.to_csv())
        meta = dict(self.options(), n_types=self.n_types,
                    hawkes_origin=self.hawkes_grid.origin, price_origin=self.price_grid.origin)
        put("moments_meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
        put("scalars.csv", self.scalars_csv())
        tH, tP = self.hawkes_grid.points, self.price_grid.points
        put("chi_nn.csv", _table(("i", "j", "t"), (range(self.n_types), range(self.n_types), tH),
                                 self.chi_nn))
        put("chi_np.csv", _table(("i", "t"), (range(self.n_types), tP), self.chi_np))
        put("chi_np2.csv", _table(("i", "t"), (range(self.n_types), tP), self.chi_np2))
        put("chi_npp.csv", _table(("i", "t", "x"), (range(self.n_types), tP, tP), self.chi_npp))
        put("chi_p2p2.csv", _table(("t",), (tP,), self.chi_p2p2))
        return written

    def scalars_csv(self) -> str:
        buf = io.StringIO()
        buf.write("name,value\n")
        buf.write(f"T,{float(self.T)!r}\n")
        buf.write(f"n_sessions,{self.n_sessions}\n")
        for i, lam in enumerate(self.Lambda):
            buf.write(f"Lambda_{i},{float(lam)!r}\n")
        for k in (1, 2, 3, 4):
            buf.write(f"Delta_{k},{float(self.Delta(k))!r}\n")
        return buf.getvalue()

    @classmethod
    def load(cls, directory: str) -> "MomentSet":
        try:
            with open(os.path.join(directory, "moments_meta.json")) as fh:
                meta = json.load(fh)
            with open(os.path.join(directory, "hawkes_grid.csv")) as fh:
                hg = TimeGrid.from_csv(fh.read(), origin=meta["hawkes_origin"])
            with open(os.path.join(directory, "price_grid.csv")) as fh:
                pg = TimeGrid.from_csv(fh.read(), origin=meta["price_origin"])
            with np.load(os.path.join(directory, "moments.npz")) as data:
                arrays = {name: data[name] for name in _ACCUMULATORS}
        except FileNotFoundError as exc:
            raise DataError(f"missing moment artifact: {exc.filename}") from None
        arrays["T"] = float(arrays["T"])
        arrays["n_sessions"] = int(arrays["n_sessions"])
        return cls(hg, pg, int(meta["n_types"]), center=meta["center"],
                   edge_correction=meta["edge_correction"], symmetric=meta["symmetric"],
                   with_npp=meta["with_npp"], **arrays)


def write_npz(path: str, arrays: dict) -> None:
    """``.npz`` archive with fixed member timestamps, so identical data gives identical bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def _table(names, axes, values) -> str:
    buf = io.StringIO()
    buf.write(",".join(names) + ",value\n")
    values = np.asarray(values)
    for idx in np.ndindex(values.shape):
        keys = []
        for ax, k in zip(axes, idx):
            v = list(ax)[k] if not isinstance(ax, np.ndarray) else ax[k]
            keys.append(repr(float(v)) if isinstance(ax, np.ndarray) else str(v))
        buf.write(",".join(keys) + f",{float(values[idx])!r}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# estimator functions


def estimate_moments(samples, hawkes_grid: TimeGrid, price_grid: TimeGrid,
                     with_npp: bool = True, **options) -> MomentSet:
    """Fold every session into one :class:`MomentSet`."""
    total = None
    for s in _samples(samples):
        ms = MomentSet.from_sample(s, hawkes_grid, price_grid, with_npp=with_npp, **options)
        total = ms if total is None else total.merge(ms)
    return total


def estimate_means(samples):
    """``(Lambda, Delta_2, Delta_3, Delta_4, T)`` pooled over sessions."""
    samples = _samples(samples)
    T = sum(s.duration for s in samples)
    if T <= 0:
        raise DataError("zero observation time")
    d = samples[0].n_types
    counts = np.zeros(d)
    sums = np.zeros(5)
    for s in samples:
        counts += [e.size for e in s.events]
        sums += [np.sum(s.jump_sizes ** k) for k in range(5)]
    return counts / T, sums[2] / T, sums[3] / T, sums[4] / T, T


def _bins_setup(samples, grid_or_bounds):
    samples = _samples(samples)
    bounds = _as_bounds(grid_or_bounds)
    durations = [s.duration for s in samples]
    T = float(sum(durations))
    if T <= 0:
        raise DataError("zero observation time")
    centers = 0.5 * (bounds[1:] + bounds[:-1])
    return samples, bounds, T, _teff(durations, centers), np.diff(bounds)


def estimate_chi_nn(samples, grid_or_bounds, center=True, edge_correction=True):
    """Event-event covariance density per lag bin, shape ``(d, d, n_bins)``.

    Entry ``[i, j, k]`` counts type-``i`` events that follow a type-``j``
    event by a lag in bin ``k``.
    """
    samples, bounds, T, teff, width = _bins_setup(samples, grid_or_bounds)
    d = samples[0].n_types
    a = np.zeros((d, d, width.size))
    b = np.zeros((d, width.size))
    counts = np.zeros(d)
    for s in samples:
        counts += [e.size for e in s.events]
        for j in range(d):
            b[j] += _window_integral(s.events[j], np.ones(s.events[j].size), bounds, s.duration)
            for i in range(d):
                a[i, j] += _pair_bin_sums(s.events[i], np.ones(s.events[i].size),
                                          s.events[j], np.ones(s.events[j].size), bounds)
    lam = counts / T
    norm = (teff if edge_correction else T) * width
    if center:
        return (a - lam[:, None, None] * b[None]) / norm
    return a / norm - np.outer(lam, lam)[:, :, None]


def _estimate_np_power(samples, grid_or_bounds, power, center, edge_correction):
    samples, bounds, T, teff, width = _bins_setup(samples, grid_or_bounds)
    d = samples[0].n_types
    a = np.zeros((d, width.size))
    b = np.zeros(width.size)
    counts = np.zeros(d)
    sum_w = 0.0
    for s in samples:
        w = s.jump_sizes ** power
        sum_w += float(np.sum(w))
        counts += [e.size for e in s.events]
        b += _window_integral(s.jump_times, w, bounds, s.duration)
        for i in range(d):
            a[i] += _pair_bin_sums(s.events[i], np.ones(s.events[i].size), s.jump_times, w, bounds)
    lam = counts / T
    norm = (teff if edge_correction else T) * width
    if center:
        return (a - lam[:, None] * b[None]) / norm
    mean = sum_w / T if power == 2 else 0.0
    return a / norm - lam[:, None] * mean


def estimate_chi_np(samples, grid_or_bounds, center=True, edge_correction=True):
    """Event-price covariance density at positive lags (event after jump)."""
    return _estimate_np_power(samples, grid_or_bounds, 1, center, edge_correction)


def estimate_chi_np2(samples, grid_or_bounds, center=True, edge_correction=True):
    """Event-squared-price covariance density at positive lags."""
    return _estimate_np_power(samples, grid_or_bounds, 2, center, edge_correction)


def estimate_chi_npp(samples, grid_or_bounds, center=True, edge_correction=True):
    """Event/price-pair covariance density, shape ``(d, n_bins, n_bins)``.

    Every ordered pair of distinct jumps ``(p, q)`` preceding an event at
    lags ``(t, x)`` contributes ``dP_p dP_q`` to cell ``(t, x)``.
    """
    samples, bounds, T, _, width = _bins_setup(samples, grid_or_bounds)
    d = samples[0].n_types
    nb = width.size
    a = np.zeros((d, nb, nb))
    b = np.zeros((nb, nb))
    counts = np.zeros(d)
    centers = 0.5 * (bounds[1:] + bounds[:-1])
    cmax = np.maximum(centers[:, None], centers[None, :])
    teff = np.zeros((nb, nb))
    for s in samples:
        counts += [e.size for e in s.events]
        teff += np.clip(s.duration - cmax, 0.0, None)
        if center:
            b += _npp_window_integral(s.jump_times, s.jump_sizes, bounds, s.duration)
        for i in range(d):
            a[i] += _npp_sums(s.events[i], s.jump_times, s.jump_sizes, bounds)
    lam = counts / T
    norm = (teff if edge_correction else T) * np.outer(width, width)
    out = (a - lam[:, None, None] * b[None]) / norm if center else a / norm
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def estimate_chi_p2p2(samples, grid_or_bounds, center=True, edge_correction=True):
    """Autocovariance density of squared price jumps, self pairs excluded."""
    samples, bounds, T, teff, width = _bins_setup(samples, grid_or_bounds)
    a = np.zeros(width.size)
    b = np.zeros(width.size)
    sum2 = 0.0
    for s in samples:
        x2 = s.jump_sizes ** 2
        sum2 += float(np.sum(x2))
        a += _pair_bin_sums(s.jump_times, x2, s.jump_times, x2, bounds)
        b += _window_integral(s.jump_times, x2, bounds, s.duration)
    d2 = sum2 / T
    norm = (teff if edge_correction else T) * width
    return (a - d2 * b) / norm if center else a / norm - d2 * d2


def symmetrize_bid_ask(ms: MomentSet) -> MomentSet:
    """Average every moment with its bid-ask mirror image.

    The mirror maps type ``i`` onto ``d - 1 - i`` and flips the sign of odd
    powers of the price increments.
    """
    return ms.with_options(symmetric=True)


def jackknife_stderr(moment_sets: Sequence[MomentSet], attr: str) -> np.ndarray:
    """Session-level (delete-one) jackknife standard error of a derived moment."""
    sets = list(moment_sets)
    n = len(sets)
    if n < 2:
        raise DataError("jackknife needs at least two sessions")
    total = sets[0]
    for s in sets[1:]:
        total = total.merge(s)
    reps = []
    for k in range(n):
        rest = None
        for j, s in enumerate(sets):
            if j != k:
                rest = s if rest is None else rest.merge(s)
        reps.append(np.asarray(getattr(rest, attr), dtype=float))
    reps = np.array(reps)
    return np.sqrt((n - 1) / n * np.sum((reps - reps.mean(axis=0)) ** 2, axis=0))


# ---------------------------------------------------------------------------
# smoothing fits


@dataclass
class PowerLawFit:
    """``A (1 + t/B)^(-C)`` fitted on the logarithm of the data."""

    A: float
    B: float
    C: float
    rms: float

    def __call__(self, t):
        return self.A * (1.0 + np.asarray(t, dtype=float) / self.B) ** (-self.C)


def fit_p2p2_powerlaw(t, values, max_nfev: int = 2000) -> PowerLawFit:
    """Least squares of ``log chi`` against ``log A - C log(1 + t/B)``.

    Only nodes with positive values enter the fit; they must be a majority.
    Several starting scales ``B`` are tried and the best converged fit kept.
    """
    t = np.asarray(t, dtype=float)
    values = np.asarray(values, dtype=float)
    if t.shape != values.shape:
        raise DataError("times and values differ in length")
    pos = values > 0
    if pos.sum() * 2 <= values.size or pos.sum() < 3:
        raise DataError("power-law fit needs positive values on a majority of nodes")
    tp, y = t[pos], np.log(values[pos])

    def resid(p):
        logA, logB, C = p
        return logA - C * np.log1p(tp / np.exp(logB)) - y

    def jac(p):
        logA, logB, C = p
        B = np.exp(logB)
        u = tp / B
        return np.column_stack((np.ones_like(tp), C * u / (1 + u), -np.log1p(u)))

    best, trace = None, []
    span = np.geomspace(max(tp.min(), 1e-6), tp.max(), 7)
    for B0 in span:
        slope = np.polyfit(np.log1p(tp / B0), y, 1)[0]
        x0 = np.array([y[0], np.log(B0), max(-slope, 0.0)])
        sol = least_squares(resid, x0, jac=jac, method="lm", xtol=1e-15, ftol=1e-15,
                            gtol=1e-15, max_nfev=max_nfev)
        cost = float(np.sum(sol.fun ** 2))
        trace.append(cost)
        if sol.success and (best is None or cost < best[1]):
            best = (sol.x, cost)
    if best is None:
        raise NumericalError(f"power-law fit did not converge; residual trace {trace}")
    logA, logB, C = best[0]
    rms = float(np.sqrt(best[1] / tp.size))
    return PowerLawFit(float(np.exp(logA)), float(np.exp(logB)), float(C), rms)


@dataclass
class LogPolyFit:
    """``sign * exp(P(log t))`` on ``[t_lo, t_hi]`` with polynomial ``P``."""

    coefficients: np.ndarray       # increasing powers of log t
    sign: float
    t_lo: float
    t_hi: float
    rms: float

    def __call__(self, t):
        lt = np.log(np.asarray(t, dtype=float))
        return self.sign * np.exp(np.polynomial.polynomial.polyval(lt, self.coefficients))


@dataclass
class PiecewiseLogPoly:
    pieces: list = field(default_factory=list)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for k, piece in enumerate(self.pieces):
            hi = self.pieces[k + 1].t_lo if k + 1 < len(self.pieces) else np.inf
            mask = (t < hi) if k == 0 else (t >= piece.t_lo) & (t < hi)
            out = np.where(mask, piece(t), out)
        return out

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean([p.rms ** 2 for p in self.pieces])))


def _fit_one(t, v, degree):
    deg = min(degree, t.size - 1)
    lt = np.log(t)
    y = np.log(np.abs(v))
    coef = np.polynomial.polynomial.polyfit(lt, y, deg)
    res = np.polynomial.polynomial.polyval(lt, coef) - y
    sign = float(np.sign(v[0]))
    return LogPolyFit(coef, sign, float(t[0]), float(t[-1]), float(np.sqrt(np.mean(res ** 2))))


def fit_log_polynomial(t, values, degree: int = 5, on_sign_change: str = "raise"):
    """Polynomial fit of ``log|chi|`` in ``log t`` with the sign carried.

    ``on_sign_change`` is ``"raise"`` (a :class:`DataError` when the curve
    changes sign) or ``"split"`` (one fit per constant-sign run of nodes).
    Zero values are not representable on a log scale and are rejected.
    """
    t = np.asarray(t, dtype=float)
    values = np.asarray(values, dtype=float)
    if t.shape != values.shape or t.ndim != 1:
        raise DataError("times and values must be aligned 1-d arrays")
    if np.any(t <= 0):
        raise DataError("log-polynomial fit needs positive times")
    if degree < 0:
        raise ConfigError("degree must be non-negative")
    if np.any(values == 0):
        raise DataError("log-polynomial fit needs non-zero values")
    sign = np.sign(values)
    breaks = np.flatnonzero(sign[1:] != sign[:-1]) + 1
    if breaks.size == 0:
        return _fit_one(t, values, degree)
    if on_sign_change == "raise":
        raise DataError(f"curve changes sign at t={float(t[breaks[0]])!r}")
    if on_sign_change != "split":
        raise ConfigError("on_sign_change must be 'raise' or 'split'")
    pieces = [_fit_one(t[a:b], values[a:b], degree)
              for a, b in zip(np.r_[0, breaks], np.r_[breaks, t.size])]
    return PiecewiseLogPoly(pieces)


def smooth_curve(t, values, degree: int = 5):
    """Smoothed copy of a signed curve; nodes with zero value are kept as zero."""
    values = np.asarray(values, dtype=float)
    nz = values != 0
    out = np.zeros_like(values)
    if nz.sum() == 0:
        return out
    fit = fit_log_polynomial(np.asarray(t)[nz], values[nz], degree, on_sign_change="split")
    out[nz] = fit(np.asarray(t)[nz])
    return out


@dataclass
class SmoothedMoments:
    """Smoothed price-grid moments; the event-event covariances are left raw."""

    powerlaw: PowerLawFit | None
    chi_np: np.ndarray
    chi_np2: np.ndarray
    chi_p2p2: np.ndarray
    degree: int


def smooth_moments(ms: MomentSet, degree: int = 5) -> SmoothedMoments:
    t = ms.price_grid.points
    chi_np = np.array([smooth_curve(t, c, degree) for c in ms.chi_np])
    chi_np2 = np.array([smooth_curve(t, c, degree) for c in ms.chi_np2])
    try:
        pl = fit_p2p2_powerlaw(t, ms.chi_p2p2)
        pp = pl(t)
    except DataError:
        pl, pp = None, ms.chi_p2p2.copy()
    return SmoothedMoments(pl, chi_np, chi_np2, pp, degree)
