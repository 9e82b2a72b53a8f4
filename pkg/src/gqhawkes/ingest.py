"""Order-book event streams, micro-price, surprise price and intraday rescaling.

Event types follow the canonical order

    0: (C, bid)  1: (LO, bid)  2: (MO, bid)  3: (MO, ask)  4: (LO, ask)  5: (C, ask)

so that relabeling bid <-> ask maps type ``i`` onto ``5 - i``.
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .grids import TimeGrid, table_rows

EVENT_TYPES: tuple[tuple[str, str], ...] = (
    ("C", "b"), ("LO", "b"), ("MO", "b"), ("MO", "a"), ("LO", "a"), ("C", "a"),
)
N_TYPES = len(EVENT_TYPES)
KINDS = ("C", "LO", "MO")
SIDES = ("b", "a")
CSV_COLUMNS = ("time_s", "kind", "side", "volume", "best_bid_ticks", "best_ask_ticks",
               "vol_bid", "vol_ask")
JUMP_TOL = 1e-9
_INDEX = {ks: i for i, ks in enumerate(EVENT_TYPES)}


def type_index(kind: str, side: str) -> int:
    try:
        return _INDEX[(kind, side)]
    except KeyError:
        raise DataError(f"unknown event type ({kind!r}, {side!r})") from None


def mirror_index(i, n_types: int = N_TYPES):
    """Bid-ask mirror of a type index (works elementwise on arrays)."""
    return n_types - 1 - np.asarray(i) if np.ndim(i) else n_types - 1 - int(i)


@dataclass(frozen=True)
class OrderBookEvent:
    time: float
    kind: str
    side: str
    volume: int
    best_bid: int
    best_ask: int
    vol_bid: int
    vol_ask: int

    @property
    def type_index(self) -> int:
        return type_index(self.kind, self.side)


@dataclass
class SessionSeries:
    """One trading session of best-quote events, stored column-wise.

    ``duration`` is the observation span ``[0, duration]`` of the session; it
    defaults to the last event time.
    """

    time: np.ndarray
    types: np.ndarray
    volume: np.ndarray
    best_bid: np.ndarray
    best_ask: np.ndarray
    vol_bid: np.ndarray
    vol_ask: np.ndarray
    duration: float
    name: str = ""
    rejected: list = field(default_factory=list)
    n_types: int = N_TYPES

    def __len__(self):
        return self.time.size

    @property
    def n_rejected(self) -> int:
        return len(self.rejected)

    def times_of(self, i: int) -> np.ndarray:
        return self.time[self.types == i]

    def by_type(self) -> list[np.ndarray]:
        return [self.times_of(i) for i in range(self.n_types)]

    def events(self) -> Iterator[OrderBookEvent]:
        for n in range(len(self)):
            kind, side = EVENT_TYPES[self.types[n]]
            yield OrderBookEvent(float(self.time[n]), kind, side, int(self.volume[n]),
                                 int(self.best_bid[n]), int(self.best_ask[n]),
                                 int(self.vol_bid[n]), int(self.vol_ask[n]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(CSV_COLUMNS) + "\n")
        for n in range(len(self)):
            kind, side = EVENT_TYPES[self.types[n]]
            buf.write(f"{float(self.time[n])!r},{kind},{side},{self.volume[n]},{self.best_bid[n]},"
                      f"{self.best_ask[n]},{self.vol_bid[n]},{self.vol_ask[n]}\n")
        return buf.getvalue()


def session_from_times(times_by_type: Sequence[np.ndarray], duration: float,
                       name: str = "") -> SessionSeries:
    """Bare event session (no book state) from per-type time arrays."""
    times = np.concatenate([np.asarray(t, dtype=float) for t in times_by_type])
    types = np.concatenate([np.full(len(t), i, dtype=np.int64)
                            for i, t in enumerate(times_by_type)])
    order = np.argsort(times, kind="stable")
    n = times.size
    ones = np.ones(n, dtype=np.int64)
    return SessionSeries(times[order], types[order], ones, np.zeros(n, np.int64), ones.copy(),
                         ones.copy(), ones.copy(), float(duration), name,
                         n_types=len(times_by_type))


def _open_text(source) -> tuple[Iterable[str], str]:
    if hasattr(source, "read"):
        return source, getattr(source, "name", "<stream>")
    if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        return open(source, newline=""), os.fspath(source)
    if isinstance(source, str) and "\n" in source:
        return io.StringIO(source), "<text>"
    raise DataError(f"cannot read session from {source!r}")


def _csv_rows(fh) -> Iterator[tuple[int, list[str]]]:
    """``(line_number, cells)`` of a plain comma-separated stream, skipping ``#`` lines."""
    for lineno, line in enumerate(fh, start=1):
        if line.startswith("#"):
            continue
        yield lineno, line.rstrip("\r\n").split(",")


def parse_session(source, name: str | None = None, duration: float | None = None) -> SessionSeries:
    """Parse one session CSV.

    Crossed books and malformed rows are rejected and recorded as
    ``(line_number, reason)``; a timestamp smaller than its predecessor is a
    hard error naming the offending line.
    """
    fh, label = _open_text(source)
    try:
        reader = _csv_rows(fh)
        try:
            _, header = next(reader)
            header = [h.strip() for h in header]
        except StopIteration:
            raise DataError(f"{label}: empty file") from None
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{label}: missing columns {missing}")
        col = {c: header.index(c) for c in CSV_COLUMNS}
        rows, rejected = [], []
        last_t = -np.inf
        for lineno, row in reader:
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                t = float(row[col["time_s"]])
                kind = row[col["kind"]].strip()
                side = row[col["side"]].strip()
                vol = int(row[col["volume"]])
                bid = int(row[col["best_bid_ticks"]])
                ask = int(row[col["best_ask_ticks"]])
                vb = int(row[col["vol_bid"]])
                va = int(row[col["vol_ask"]])
            except (ValueError, IndexError) as exc:
                rejected.append((lineno, f"malformed row: {exc}"))
                continue
            if not np.isfinite(t) or t < 0:
                rejected.append((lineno, "invalid time"))
                continue
            if t < last_t:
                raise DataError(f"{label}: line {lineno}: time {float(t)!r} precedes previous "
                                f"event at {float(last_t)!r} (non-monotone timestamps)")
            if (kind, side) not in _INDEX:
                rejected.append((lineno, f"unknown event type ({kind}, {side})"))
                continue
            if vol <= 0 or vb < 0 or va < 0:
                rejected.append((lineno, "non-positive volume"))
                continue
            if ask <= bid:
                rejected.append((lineno, "crossed book (best_ask <= best_bid)"))
                continue
            last_t = t
            rows.append((t, _INDEX[(kind, side)], vol, bid, ask, vb, va))
    finally:
        if fh is not source:
            fh.close()
    data = np.array(rows, dtype=float).reshape(-1, 7)
    times = data[:, 0].copy()
    span = float(times[-1]) if times.size else 0.0
    if duration is None:
        duration = span
    elif duration < span:
        raise DataError(f"{label}: duration {duration} shorter than last event time {span}")
    as_int = data[:, 1:].astype(np.int64)
    return SessionSeries(times, as_int[:, 0], as_int[:, 1], as_int[:, 2], as_int[:, 3],
                         as_int[:, 4], as_int[:, 5], float(duration),
                         name if name is not None else os.path.basename(label), rejected)


# ---------------------------------------------------------------------------
# price paths

@dataclass
class PricePath:
    """Jump times and sizes of a pure-jump price process on ``[0, duration]``."""

    times: np.ndarray
    sizes: np.ndarray
    duration: float
    label: str = "micro"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.sizes = np.asarray(self.sizes, dtype=float)
        if self.times.shape != self.sizes.shape:
            raise DataError("jump times and sizes differ in length")
        if self.times.size and np.any(np.diff(self.times) <= 0):
            raise DataError("price jump times must be strictly increasing")
        if self.times.size and (self.times[0] < 0 or self.times[-1] > self.duration):
            raise DataError("price jumps outside the session span")

    def __len__(self):
        return self.times.size

    def moment(self, k: int) -> float:
        """``Delta_k``: sum of k-th powers of the jumps per unit time."""
        if self.duration <= 0:
            raise DataError("zero observation time")
        return float(np.sum(self.sizes ** k) / self.duration)

    def mirrored(self) -> "PricePath":
        return replace(self, sizes=-self.sizes)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("time_s,dP\n")
        for t, d in zip(self.times, self.sizes):
            buf.write(f"{float(t)!r},{float(d)!r}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, source, duration: float | None = None, label: str = "micro") -> "PricePath":
        fh, name = _open_text(source)
        try:
            reader = _csv_rows(fh)
            header = [h.strip() for h in next(reader, (0, []))[1]]
            if header[:2] != ["time_s", "dP"]:
                raise DataError(f"{name}: expected header time_s,dP")
            try:
                data = np.array([[float(r[0]), float(r[1])] for _, r in reader if r and r[0]],
                                dtype=float)
            except (ValueError, IndexError) as exc:
                raise DataError(f"{name}: malformed price row ({exc})") from None
        finally:
            if fh is not source:
                fh.close()
        data = data.reshape(-1, 2)
        if duration is None:
            duration = float(data[-1, 0]) if data.size else 0.0
        return cls(data[:, 0], data[:, 1], float(duration), label)


def micro_price_values(session: SessionSeries) -> np.ndarray:
    vb = session.vol_bid.astype(float)
    va = session.vol_ask.astype(float)
    total = vb + va
    bad = np.flatnonzero(total <= 0)
    if bad.size:
        raise DataError(f"zero total best volume at event index {bad[0]}")
    return (va * session.best_bid + vb * session.best_ask) / total


def micro_price(session: SessionSeries) -> PricePath:
    """Jumps of the volume-weighted mid-price, in ticks.

    A jump is emitted whenever the value moves by more than ``1e-9`` ticks
    from the last emitted level. Events sharing a timestamp are collapsed so
    the path keeps strictly increasing jump times.
    """
    if len(session) == 0:
        return PricePath(np.zeros(0), np.zeros(0), session.duration)
    values = micro_price_values(session)
    times = session.time
    # keep the last state of every timestamp
    last_of_time = np.append(times[1:] != times[:-1], True)
    values, times = values[last_of_time], times[last_of_time]
    jt, js = [], []
    level = values[0]
    for t, v in zip(times[1:], values[1:]):
        if abs(v - level) > JUMP_TOL:
            jt.append(t)
            js.append(v - level)
            level = v
    return PricePath(np.array(jt), np.array(js), session.duration, "micro")


# ---------------------------------------------------------------------------
# autocorrelation and surprise price

@dataclass
class AutocorrKernel:
    """Correlation of price increments, piecewise constant on lag bins.

    ``values[k]`` applies to lags in ``(bounds[k], bounds[k+1]]``; the kernel
    vanishes beyond the last bound. ``pairs[k]`` counts the increment pairs
    behind each value.
    """

    bounds: np.ndarray
    values: np.ndarray
    pairs: np.ndarray

    @property
    def max_lag(self) -> float:
        return float(self.bounds[-1])

    def __call__(self, lag) -> np.ndarray:
        lag = np.asarray(lag, dtype=float)
        k = np.searchsorted(self.bounds, lag, side="left") - 1
        inside = (k >= 0) & (k < self.values.size) & (lag > self.bounds[0])
        return np.where(inside, self.values[np.clip(k, 0, self.values.size - 1)], 0.0)

    def truncated(self, max_lag: float) -> "AutocorrKernel":
        keep = self.bounds[1:] <= max_lag + 1e-12
        n = int(np.sum(keep))
        return AutocorrKernel(self.bounds[:n + 1], self.values[:n], self.pairs[:n])


def estimate_autocorr(paths: PricePath | Sequence[PricePath], bounds,
                      max_lag: float | None = None) -> AutocorrKernel:
    """Pooled correlation of jump sizes at lags binned by ``bounds``.

    For every bin the value is the mean of ``(x_p - m)(x_q - m)`` over all
    ordered pairs of jumps of the same session whose lag falls in the bin,
    divided by the variance of the jumps (``m`` is their mean).

    ``bounds`` may be a :class:`TimeGrid` (its estimation intervals are used).
    """
    from .moments import _pair_bin_sums  # local import: moments depends on ingest

    if isinstance(bounds, TimeGrid):
        bounds = bounds.bounds
    bounds = np.asarray(bounds, dtype=float)
    if max_lag is not None:
        bounds = bounds[bounds <= max_lag + 1e-12]
    if bounds.size < 2 or np.any(np.diff(bounds) <= 0):
        raise ConfigError("autocorrelation bins need increasing bounds")
    if isinstance(paths, PricePath):
        paths = [paths]
    sizes = np.concatenate([p.sizes for p in paths]) if paths else np.zeros(0)
    if sizes.size < 2:
        raise DataError("need at least two price jumps")
    mean = sizes.mean()
    var = np.mean((sizes - mean) ** 2)
    if var <= 0:
        raise DataError("zero variance of price increments")
    sums = np.zeros(bounds.size - 1)
    counts = np.zeros(bounds.size - 1)
    for p in paths:
        x = p.sizes - mean
        sums += _pair_bin_sums(p.times, x, p.times, x, bounds)
        counts += _pair_bin_sums(p.times, np.ones_like(x), p.times, np.ones_like(x), bounds)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(counts > 0, sums / np.where(counts > 0, counts, 1) / var, 0.0)
    return AutocorrKernel(bounds, np.clip(values, -1.0, 1.0), counts)


def surprise_price(path: PricePath, rho: AutocorrKernel) -> PricePath:
    """Subtract the linear predictor ``sum_{s<t} rho(t - s) dP_s`` from every jump."""
    from .moments import _past_weighted_sum

    pred = _past_weighted_sum(path.times, path.sizes, rho.bounds, rho.values)
    sizes = path.sizes - pred
    return PricePath(path.times.copy(), sizes, path.duration, "surprise")


def martingale_check(paths: Sequence[PricePath], tol: float | None = None) -> dict:
    """Compare the pooled mean increment rate with a tolerance.

    The default tolerance is three standard errors, ``3 sqrt(Delta_2 / T)``.
    """
    T = sum(p.duration for p in paths)
    if T <= 0:
        raise DataError("zero observation time")
    d1 = sum(float(np.sum(p.sizes)) for p in paths) / T
    d2 = sum(float(np.sum(p.sizes ** 2)) for p in paths) / T
    if tol is None:
        tol = 3.0 * np.sqrt(d2 / T)
    return {"delta1": d1, "tolerance": float(tol), "ok": bool(abs(d1) <= tol)}


# ---------------------------------------------------------------------------
# intraday profile

@dataclass
class IntradayProfile:
    bin_width: float
    rates: np.ndarray

    @property
    def span(self) -> float:
        return self.bin_width * self.rates.size

    @property
    def mean_rate(self) -> float:
        return float(np.mean(self.rates))

    def clock(self, t) -> np.ndarray:
        """Rescaled time ``tau(t) = int_0^t rate(s) / <rate> ds``."""
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > self.span * (1 + 1e-12)):
            raise DataError(f"time outside the profile coverage [0, {self.span}]")
        edges = self.bin_width * np.arange(self.rates.size + 1)
        cum = np.concatenate(([0.0], np.cumsum(self.rates * self.bin_width))) / self.mean_rate
        return np.interp(t, edges, cum)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("bin_start_s,rate\n")
        for k, r in enumerate(self.rates):
            buf.write(f"{float(k * self.bin_width)!r},{float(r)!r}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "IntradayProfile":
        data = np.array([[float(a), float(b)] for a, b in table_rows(text)]).reshape(-1, 2)
        width = data[1, 0] - data[0, 0] if len(data) > 1 else np.nan
        return cls(float(width), data[:, 1])


def build_intraday_profile(sessions: Sequence[SessionSeries], bin_width: float = 300.0) -> IntradayProfile:
    """Average total event rate per intraday bin.

    Counts are pooled over sessions and divided by the total time the
    sessions spend in each bin, so a short final bin is not under-weighted.
    """
    if not sessions:
        raise DataError("need at least one session")
    if bin_width <= 0:
        raise ConfigError("bin width must be positive")
    span = max(s.duration for s in sessions)
    n_bins = max(int(np.ceil(span / bin_width - 1e-12)), 1)
    edges = bin_width * np.arange(n_bins + 1)
    counts = np.zeros(n_bins)
    exposure = np.zeros(n_bins)
    for s in sessions:
        k = np.clip((s.time // bin_width).astype(np.int64), 0, n_bins - 1)
        counts += np.bincount(k, minlength=n_bins)
        exposure += np.clip(s.duration - edges[:-1], 0.0, bin_width)
    empty = np.flatnonzero((counts == 0) | (exposure == 0))
    if empty.size:
        raise DataError(f"intraday bin starting at {edges[empty[0]]} s has no events")
    return IntradayProfile(float(bin_width), counts / exposure)


def rescale_time(obj, profile: IntradayProfile):
    """Map a session or price path onto the activity clock of ``profile``."""
    if isinstance(obj, SessionSeries):
        return replace(obj, time=profile.clock(obj.time), duration=float(profile.clock(obj.duration)))
    if isinstance(obj, PricePath):
        new_t = profile.clock(obj.times)
        return PricePath(new_t, obj.sizes.copy(), float(profile.clock(obj.duration)), obj.label)
    raise ConfigError(f"cannot rescale {type(obj).__name__}")
