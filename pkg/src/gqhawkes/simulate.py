"""Synthetic GQ-Hawkes sessions driven by an exogenous martingale price.

The event intensity of type ``i`` is

    lambda^i(t) = alpha0^i + sum_k int phi^{ik}(t-s) dN^k_s + int L^i(t-s) dP_s
                  + K_d^i sum_s psi(t-s) dP_s^2 + K_1^i (sum_s Z(t-s) dP_s)^2

with every kernel a sum of exponentials, so each term is a Markov state
updated recursively at jumps. Events are drawn by Ogata thinning against a
bound that is non-increasing between jumps.
"""
from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field

import numpy as np
import yaml
from numba import njit
from scipy.optimize import least_squares, minimize, nnls

from .errors import ConfigError, DataError, NumericalError
from .ingest import EVENT_TYPES, KINDS, PricePath, SessionSeries

# ---------------------------------------------------------------------------
# kernels


@dataclass(frozen=True)
class ExpKernel:
    """``f(t) = sum_j weights[j] * exp(-rates[j] t)`` for ``t > 0``."""

    weights: tuple = ()
    rates: tuple = ()

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        r = tuple(float(x) for x in self.rates)
        if len(w) != len(r):
            raise ConfigError("exponential kernel: weights and rates differ in length")
        if any(x <= 0 for x in r):
            raise ConfigError("exponential kernel rates must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "rates", r)

    @classmethod
    def single(cls, norm: float, rate: float) -> "ExpKernel":
        """``norm * rate * exp(-rate t)``, whose integral is ``norm``."""
        return cls((norm * rate,), (rate,))

    @property
    def w(self) -> np.ndarray:
        return np.array(self.weights, dtype=float)

    @property
    def r(self) -> np.ndarray:
        return np.array(self.rates, dtype=float)

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape)
        for w, r in zip(self.weights, self.rates):
            out += w * np.exp(-r * t)
        return np.where(t > 0, out, 0.0)

    @property
    def norm(self) -> float:
        return float(np.sum(self.w / self.r)) if self.weights else 0.0

    @property
    def square_norm(self) -> float:
        if not self.weights:
            return 0.0
        w, r = self.w, self.r
        return float(np.sum(np.outer(w, w) / (r[:, None] + r[None, :])))

    def scaled(self, c: float) -> "ExpKernel":
        return ExpKernel(tuple(c * w for w in self.weights), self.rates)

    def to_dict(self) -> dict:
        return {"weights": list(self.weights), "rates": list(self.rates)}


def fit_exponential_sum(f, n_terms: int = 5, t_min: float = 0.1, t_max: float = 1000.0,
                        n_points: int = 400) -> tuple[ExpKernel, float]:
    """Approximate a positive decaying kernel by ``n_terms`` exponentials.

    Fits the log-ratio of model and target on log-spaced points of
    ``[t_min, t_max]`` by least squares, then refines towards the minimax
    relative error through increasingly high ``L^q`` norms. Several
    log-spaced rate ladders serve as starting points (weights from NNLS).

    Returns
    -------
    kernel : ExpKernel
    max_rel_error : float
        Maximum relative error over the fitting points.
    """
    t = np.geomspace(t_min, t_max, n_points)
    y = np.asarray(f(t), dtype=float)
    if np.any(y <= 0) or not np.all(np.isfinite(y)):
        raise ConfigError("kernel to approximate must be positive and finite on the fit range")

    def model(p):
        return np.exp(-np.outer(t, np.exp(p[:n_terms]))) @ np.exp(p[n_terms:])

    def resid(p):
        return np.log(model(p) / y)

    best = None
    for stretch in (1.0, 3.0, 1.0 / 3.0, 2.0):
        rates = np.geomspace(1.0 / (t_max * stretch), stretch / t_min, n_terms)
        w, _ = nnls(np.exp(-np.outer(t, rates)) / y[:, None], np.ones_like(t))
        p = np.concatenate([np.log(rates), np.log(np.maximum(w, 1e-8 * w.max()))])
        p = least_squares(resid, p, method="trf", xtol=1e-15, ftol=1e-15, max_nfev=20_000).x
        for q in (8, 32, 128):
            m = max(float(np.max(np.abs(resid(p)))), 1e-300)
            p = minimize(lambda x: m * np.sum((resid(x) / m) ** q) ** (1.0 / q), p,
                         method="BFGS").x
        err = float(np.max(np.abs(model(p) / y - 1.0)))
        if best is None or err < best[1]:
            best = (p, err)
    p, err = best
    order = np.argsort(p[:n_terms])
    kern = ExpKernel(tuple(np.exp(p[n_terms:][order])), tuple(np.exp(p[:n_terms][order])))
    return kern, err


def _kernel_from_config(spec, what: str) -> ExpKernel:
    """Kernel from a config entry: ``{norm, rate}``, ``{weights, rates}``,
    ``{power_law: {amplitude, exponent, scale}}`` or ``0``/``null``."""
    if spec is None or spec == 0:
        return ExpKernel()
    if not isinstance(spec, dict):
        raise ConfigError(f"{what}: expected a mapping, got {spec!r}")
    if "norm" in spec:
        return ExpKernel.single(float(spec["norm"]), float(spec["rate"]))
    if "weights" in spec:
        return ExpKernel(tuple(spec["weights"]), tuple(spec["rates"]))
    if "power_law" in spec:
        pl = spec["power_law"]
        a, b, s = float(pl["amplitude"]), float(pl["exponent"]), float(pl.get("scale", 1.0))
        kern, err = fit_exponential_sum(lambda t: a * (1.0 + t / s) ** (-b))
        if err > 0.05:
            raise ConfigError(f"{what}: power law not representable by 5 exponentials "
                              f"(max relative error {err:.3g})")
        return kern
    raise ConfigError(f"{what}: unknown kernel specification {sorted(spec)}")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class PriceModel:
    """Compound Poisson price: jumps at rate ``rate``; ``law`` is ``pm1`` (``±size``) or ``gauss``."""

    rate: float = 1.0
    law: str = "pm1"
    size: float = 1.0

    def __post_init__(self):
        if self.rate < 0:
            raise ConfigError("price jump rate must be non-negative")
        if self.law not in ("pm1", "gauss"):
            raise ConfigError(f"unknown jump law {self.law!r} (use pm1 or gauss)")
        if self.size <= 0:
            raise ConfigError("jump size must be positive")

    def Delta(self, k: int) -> float:
        """Closed-form ``Delta_k = rate * E[J^k]`` (``size`` is the std for ``gauss``)."""
        if k % 2:
            return 0.0
        if self.law == "pm1":
            return self.rate * self.size ** k
        # Gaussian: E[J^k] = (k-1)!! s^k
        return self.rate * float(np.prod(np.arange(k - 1, 0, -2))) * self.size ** k


@dataclass
class BookModel:
    """Toy best-queue depth: LO add, C and MO remove volume; relaxes to ``base_depth``."""

    base_depth: float = 100.0
    relax_time: float = 10.0
    levels: int = 8

    def __post_init__(self):
        if self.base_depth <= 0 or self.relax_time <= 0 or self.levels < 1:
            raise ConfigError("book model parameters must be positive")


@dataclass
class SimConfig:
    alpha0: np.ndarray
    phi: list                       # d x d ExpKernel
    L: list                         # d ExpKernel
    K_d: np.ndarray
    psi: ExpKernel
    K_1: np.ndarray
    Z: ExpKernel
    price: PriceModel = field(default_factory=PriceModel)
    duration: float = 1000.0
    n_sessions: int = 1
    seed: int = 0
    volume: np.ndarray | None = None
    intensity_cap: float = 1e7
    book: BookModel = field(default_factory=BookModel)
    trace_every: int = 0

    def __post_init__(self):
        self.alpha0 = np.asarray(self.alpha0, dtype=float)
        d = self.alpha0.size
        self.K_d = np.broadcast_to(np.asarray(self.K_d, dtype=float), (d,)).copy()
        self.K_1 = np.broadcast_to(np.asarray(self.K_1, dtype=float), (d,)).copy()
        if self.volume is None:
            self.volume = np.full(d, 10.0)
        self.volume = np.broadcast_to(np.asarray(self.volume, dtype=float), (d,)).copy()
        if len(self.phi) != d or any(len(row) != d for row in self.phi):
            raise ConfigError(f"phi must be a {d}x{d} table of kernels")
        if len(self.L) != d:
            raise ConfigError(f"L must list {d} kernels")
        if np.any(self.alpha0 < 0):
            raise ConfigError("base rates must be non-negative")
        if np.any(self.volume <= 0):
            raise ConfigError("order volumes must be positive")
        if self.duration <= 0 or self.n_sessions < 1:
            raise ConfigError("duration and n_sessions must be positive")
        if np.any(self.K_d != 0) and self.psi.norm <= 0:
            raise ConfigError("K_d set but psi is empty")
        if np.any(self.K_1 != 0) and self.Z.square_norm <= 0:
            raise ConfigError("K_1 set but Z is empty")
        rho = self.spectral_radius
        if rho >= 1:
            raise ConfigError(f"unstable Hawkes part: spectral radius {rho:.4g} >= 1")

    @property
    def n_types(self) -> int:
        return self.alpha0.size

    @property
    def phi_norms(self) -> np.ndarray:
        return np.array([[k.norm for k in row] for row in self.phi])

    @property
    def L_norms(self) -> np.ndarray:
        return np.array([k.norm for k in self.L])

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.phi_norms))))

    @property
    def diag_norms(self) -> np.ndarray:
        """``||K_d^i||`` of the full diagonal ``K_d psi + K_1 Z^2``."""
        return self.K_d * self.psi.norm + self.K_1 * self.Z.square_norm

    def session_config(self, **changes) -> "SimConfig":
        from dataclasses import replace
        return replace(self, **changes)

    # -- YAML ------------------------------------------------------------

    @classmethod
    def from_dict(cls, cfg: dict) -> "SimConfig":
        try:
            alpha0 = np.asarray(cfg["alpha0"], dtype=float)
            d = alpha0.size
            phi_spec = cfg.get("phi") or [[None] * d for _ in range(d)]
            phi = [[_kernel_from_config(e, f"phi[{i}][{k}]") for k, e in enumerate(row)]
                   for i, row in enumerate(phi_spec)]
            L_spec = cfg.get("L") or [None] * d
            L = [_kernel_from_config(e, f"L[{i}]") for i, e in enumerate(L_spec)]
            psi = _normalized(_kernel_from_config(cfg.get("psi"), "psi"), "psi")
            Z = _normalized(_kernel_from_config(cfg.get("Z"), "Z"), "Z")
            price = PriceModel(**(cfg.get("price") or {}))
            book = BookModel(**(cfg.get("book") or {}))
            return cls(alpha0, phi, L, cfg.get("K_d", 0.0), psi, cfg.get("K_1", 0.0), Z,
                       price, float(cfg.get("duration", 1000.0)), int(cfg.get("n_sessions", 1)),
                       int(cfg.get("seed", 0)), cfg.get("volume"),
                       float(cfg.get("intensity_cap", 1e7)), book,
                       int(cfg.get("trace_every", 0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid simulation config: {exc!r}") from None

    @classmethod
    def load(cls, path: str) -> "SimConfig":
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
        if not isinstance(cfg, dict):
            raise ConfigError(f"{path}: expected a mapping at top level")
        return cls.from_dict(cfg.get("simulate", cfg))

    def to_dict(self) -> dict:
        return {
            "alpha0": self.alpha0.tolist(),
            "phi": [[k.to_dict() for k in row] for row in self.phi],
            "L": [k.to_dict() for k in self.L],
            "K_d": self.K_d.tolist(), "psi": self.psi.to_dict(),
            "K_1": self.K_1.tolist(), "Z": self.Z.to_dict(),
            "price": {"rate": self.price.rate, "law": self.price.law, "size": self.price.size},
            "duration": self.duration, "n_sessions": self.n_sessions, "seed": self.seed,
            "volume": self.volume.tolist(), "intensity_cap": self.intensity_cap,
            "book": {"base_depth": self.book.base_depth, "relax_time": self.book.relax_time,
                     "levels": self.book.levels},
            "trace_every": self.trace_every,
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _normalized(kern: ExpKernel, which: str) -> ExpKernel:
    """Rescale ``psi`` to unit integral or ``Z`` to unit square integral."""
    if not kern.weights:
        return kern
    if which == "psi":
        n = kern.norm
        if n <= 0:
            raise ConfigError("psi must have a positive integral")
        return kern.scaled(1.0 / n)
    return kern.scaled(1.0 / math.sqrt(kern.square_norm))


def analytic_moments(cfg: SimConfig) -> np.ndarray:
    """Mean intensities from ``Lambda = alpha0 + ||phi|| Lambda + ||K_d|| Delta2``."""
    d = cfg.n_types
    A = np.eye(d) - cfg.phi_norms
    if abs(np.linalg.det(A)) < 1e-14:
        raise NumericalError("I - ||phi|| is singular")
    return np.linalg.solve(A, cfg.alpha0 + cfg.diag_norms * cfg.price.Delta(2))


# ---------------------------------------------------------------------------
# price


def simulate_price(rate: float, law: str, duration: float, seed, size: float = 1.0) -> PricePath:
    """Compound Poisson martingale on ``[0, duration]``.

    ``seed`` is anything accepted by :func:`numpy.random.default_rng`.
    """
    model = PriceModel(rate, law, size)
    rng = np.random.default_rng(seed)
    n = rng.poisson(model.rate * duration) if model.rate > 0 else 0
    times = np.sort(rng.uniform(0.0, duration, n))
    if n and np.any(np.diff(times) <= 0):
        times = _separate_ties(times)
    if law == "pm1":
        sizes = np.where(rng.random(n) < 0.5, -size, size)
    else:
        sizes = rng.normal(0.0, size, n)
    return PricePath(times, sizes.astype(float), float(duration), "simulated")


def _separate_ties(times: np.ndarray) -> np.ndarray:
    out = times.copy()
    for n in range(1, out.size):
        if out[n] <= out[n - 1]:
            out[n] = np.nextafter(out[n - 1], np.inf)
    return out


# ---------------------------------------------------------------------------
# thinning


@njit(cache=True)
def _thinning(seed, duration, alpha0, ph_i, ph_k, ph_w, ph_r, l_i, l_w, l_r,
              ps_w, ps_r, z_w, z_r, K_d, K_1, jump_t, jump_x, cap, trace_every):
    np.random.seed(seed)
    d = alpha0.size
    s_ph = np.zeros(ph_w.size)
    s_l = np.zeros(l_w.size)
    s_ps = np.zeros(ps_w.size)
    s_z = np.zeros(z_w.size)
    cap_n = 1024
    ev_t = np.empty(cap_n)
    ev_k = np.empty(cap_n, np.int64)
    n_ev = 0
    tr_t = np.empty(16)
    tr_l = np.empty((16, d))
    n_tr = 0
    lam = np.empty(d)
    bnd = np.empty(d)
    n_clip = 0
    n_cand = 0
    t = 0.0
    jp = 0
    nj = jump_t.size
    status = 0
    while True:
        # upper bound, non-increasing until the next jump of N or P
        for i in range(d):
            bnd[i] = alpha0[i]
        for m in range(ph_w.size):
            bnd[ph_i[m]] += abs(ph_w[m] * s_ph[m])
        for m in range(l_w.size):
            bnd[l_i[m]] += abs(l_w[m] * s_l[m])
        sig = 0.0
        for m in range(ps_w.size):
            sig += abs(ps_w[m] * s_ps[m])
        mu = 0.0
        for m in range(z_w.size):
            mu += abs(z_w[m] * s_z[m])
        B = 0.0
        for i in range(d):
            bnd[i] += abs(K_d[i]) * sig + abs(K_1[i]) * mu * mu
            if bnd[i] > 0:
                B += bnd[i]
        if B > cap:
            status = 1
            break
        t_stop = jump_t[jp] if jp < nj else duration
        dt = np.inf
        if B > 0:
            dt = -math.log(1.0 - np.random.random()) / B
        step = dt if t + dt < t_stop else t_stop - t
        for m in range(ph_w.size):
            s_ph[m] *= math.exp(-ph_r[m] * step)
        for m in range(l_w.size):
            s_l[m] *= math.exp(-l_r[m] * step)
        for m in range(ps_w.size):
            s_ps[m] *= math.exp(-ps_r[m] * step)
        for m in range(z_w.size):
            s_z[m] *= math.exp(-z_r[m] * step)
        if t + dt >= t_stop:
            t = t_stop
            if jp >= nj:
                break
            x = jump_x[jp]
            for m in range(l_w.size):
                s_l[m] += x
            for m in range(ps_w.size):
                s_ps[m] += x * x
            for m in range(z_w.size):
                s_z[m] += x
            jp += 1
            continue
        t += dt
        n_cand += 1
        # exact intensity
        for i in range(d):
            lam[i] = alpha0[i]
        for m in range(ph_w.size):
            lam[ph_i[m]] += ph_w[m] * s_ph[m]
        for m in range(l_w.size):
            lam[l_i[m]] += l_w[m] * s_l[m]
        sig = 0.0
        for m in range(ps_w.size):
            sig += ps_w[m] * s_ps[m]
        mu = 0.0
        for m in range(z_w.size):
            mu += z_w[m] * s_z[m]
        total = 0.0
        clipped = False
        for i in range(d):
            lam[i] += K_d[i] * sig + K_1[i] * mu * mu
            if lam[i] < 0:
                lam[i] = 0.0
                clipped = True
            total += lam[i]
        if clipped:
            n_clip += 1
        u = np.random.random() * B
        if u >= total:
            continue
        acc = 0.0
        k = d - 1
        for i in range(d):
            acc += lam[i]
            if u < acc:
                k = i
                break
        if n_ev == ev_t.size:
            ev_t2 = np.empty(2 * ev_t.size)
            ev_k2 = np.empty(2 * ev_t.size, np.int64)
            ev_t2[:n_ev] = ev_t
            ev_k2[:n_ev] = ev_k
            ev_t = ev_t2
            ev_k = ev_k2
        ev_t[n_ev] = t
        ev_k[n_ev] = k
        n_ev += 1
        if trace_every > 0 and n_ev % trace_every == 0:
            if n_tr == tr_t.size:
                tr_t2 = np.empty(2 * tr_t.size)
                tr_l2 = np.empty((2 * tr_t.size, d))
                tr_t2[:n_tr] = tr_t
                tr_l2[:n_tr] = tr_l
                tr_t = tr_t2
                tr_l = tr_l2
            tr_t[n_tr] = t
            tr_l[n_tr] = lam
            n_tr += 1
        for m in range(ph_w.size):
            if ph_k[m] == k:
                s_ph[m] += 1.0
    return status, t, B, ev_t[:n_ev], ev_k[:n_ev], n_clip, n_cand, tr_t[:n_tr], tr_l[:n_tr]


def _flatten(cfg: SimConfig):
    ph_i, ph_k, ph_w, ph_r = [], [], [], []
    for i, row in enumerate(cfg.phi):
        for k, kern in enumerate(row):
            for w, r in zip(kern.weights, kern.rates):
                ph_i.append(i), ph_k.append(k), ph_w.append(w), ph_r.append(r)
    l_i, l_w, l_r = [], [], []
    for i, kern in enumerate(cfg.L):
        for w, r in zip(kern.weights, kern.rates):
            l_i.append(i), l_w.append(w), l_r.append(r)
    ints = lambda a: np.asarray(a, dtype=np.int64)
    flt = lambda a: np.asarray(a, dtype=float)
    return (ints(ph_i), ints(ph_k), flt(ph_w), flt(ph_r), ints(l_i), flt(l_w), flt(l_r),
            cfg.psi.w, cfg.psi.r, cfg.Z.w, cfg.Z.r)


@dataclass
class SimOutput:
    times: np.ndarray
    types: np.ndarray
    volumes: np.ndarray
    price: PricePath
    duration: float
    n_types: int
    n_clipped: int = 0
    n_candidates: int = 0
    trace_times: np.ndarray | None = None
    trace_intensity: np.ndarray | None = None
    name: str = ""

    def by_type(self) -> list[np.ndarray]:
        return [self.times[self.types == i] for i in range(self.n_types)]

    @property
    def rates(self) -> np.ndarray:
        return np.bincount(self.types, minlength=self.n_types) / self.duration

    def price_levels(self, t: np.ndarray) -> np.ndarray:
        """Price just before ``t`` (cumulative jumps strictly before)."""
        idx = np.searchsorted(self.price.times, t, side="left")
        cum = np.concatenate([[0.0], np.cumsum(self.price.sizes)])
        return cum[idx]


def simulate_events(cfg: SimConfig, path: PricePath, seed=None, name: str = "") -> SimOutput:
    """Thinning simulation of the event types given the exogenous price path."""
    if path.duration < cfg.duration:
        raise DataError("price path shorter than the simulation horizon")
    if seed is None:
        seed = cfg.seed
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    numba_seed = int(ss.generate_state(1, dtype=np.uint32)[0])
    flat = _flatten(cfg)
    status, t, B, ev_t, ev_k, n_clip, n_cand, tr_t, tr_l = _thinning(
        numba_seed, float(cfg.duration), cfg.alpha0, *flat[:7], *flat[7:],
        cfg.K_d, cfg.K_1, path.times, path.sizes, float(cfg.intensity_cap), int(cfg.trace_every))
    if status:
        raise NumericalError(f"runaway intensity: bound {B:.4g} exceeds cap "
                             f"{cfg.intensity_cap:.4g} at t={t:.6g} s after {ev_t.size} events")
    rng = np.random.default_rng(ss.spawn(1)[0])
    # order volumes: geometric around the configured means
    means = cfg.volume[ev_k]
    vols = rng.geometric(1.0 / means).astype(np.int64) if ev_k.size else np.zeros(0, np.int64)
    return SimOutput(ev_t.copy(), ev_k.copy(), vols, path, float(cfg.duration), cfg.n_types,
                     int(n_clip), int(n_cand), tr_t.copy() if cfg.trace_every else None,
                     tr_l.copy() if cfg.trace_every else None, name)


def session_seeds(seed: int, session: int) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
    """Independent (price, events) substreams of session ``session``."""
    ss = np.random.SeedSequence([int(seed), int(session)])
    return tuple(ss.spawn(2))


def simulate_session(cfg: SimConfig, session: int = 0) -> SimOutput:
    s_price, s_events = session_seeds(cfg.seed, session)
    path = simulate_price(cfg.price.rate, cfg.price.law, cfg.duration, s_price, cfg.price.size)
    return simulate_events(cfg, path, s_events, name=f"session{session:03d}")


def simulate(cfg: SimConfig) -> list[SimOutput]:
    return [simulate_session(cfg, s) for s in range(cfg.n_sessions)]


# ---------------------------------------------------------------------------
# toy book and CSV output


_KIND_SIGN = {"LO": 1.0, "C": -1.0, "MO": -1.0}


def _side_of(type_idx: int, n_types: int) -> int:
    """0 for bid, 1 for ask (first half of the types are bid-side)."""
    if n_types == len(EVENT_TYPES):
        return 0 if EVENT_TYPES[type_idx][1] == "b" else 1
    return 0 if type_idx < n_types // 2 else 1


def _kind_sign(type_idx: int, n_types: int) -> float:
    if n_types == len(EVENT_TYPES):
        return _KIND_SIGN[EVENT_TYPES[type_idx][0]]
    return 1.0


@njit(cache=True)
def _depth_path(ev_t, ev_side, ev_dv, base, relax, sample_t):
    """Best-queue depth per side at ``sample_t`` (state just before each sample)."""
    q = np.array([base, base])
    out = np.empty((sample_t.size, 2))
    last = 0.0
    n = 0
    for s in range(sample_t.size):
        ts = sample_t[s]
        while n < ev_t.size and ev_t[n] < ts:
            dt = ev_t[n] - last
            f = math.exp(-dt / relax)
            q[0] = base + (q[0] - base) * f
            q[1] = base + (q[1] - base) * f
            q[ev_side[n]] = max(q[ev_side[n]] + ev_dv[n], 1.0)
            last = ev_t[n]
            n += 1
        f = math.exp(-(ts - last) / relax)
        out[s, 0] = max(base + (q[0] - base) * f, 1.0)
        out[s, 1] = max(base + (q[1] - base) * f, 1.0)
    return out


def toy_depth(sim: SimOutput, book: BookModel, sample_t: np.ndarray) -> np.ndarray:
    """Best-queue volumes ``(n, 2)`` (bid, ask) under the toy book model."""
    side = np.array([_side_of(k, sim.n_types) for k in range(sim.n_types)], dtype=np.int64)
    sign = np.array([_kind_sign(k, sim.n_types) for k in range(sim.n_types)])
    dv = sign[sim.types] * sim.volumes
    return _depth_path(sim.times, side[sim.types], dv.astype(float), float(book.base_depth),
                       float(book.relax_time), np.asarray(sample_t, dtype=float))


def book_snapshots_csv(sim: SimOutput, book: BookModel, dt: float = 1.0, p0: int = 10_000) -> str:
    """Level data ``time_s,side,level_ticks,volume`` on a regular grid.

    The best level holds the toy queue; deeper levels hold ``base_depth``.
    """
    t = np.arange(dt, sim.duration + 0.5 * dt, dt)
    t = t[t <= sim.duration]
    depth = toy_depth(sim, book, t)
    bid = p0 + np.floor(sim.price_levels(t)).astype(np.int64)
    base = int(round(book.base_depth))
    buf = io.StringIO()
    buf.write("time_s,side,level_ticks,volume\n")
    for n, tn in enumerate(t):
        for lev in range(book.levels):
            vb = int(round(depth[n, 0])) if lev == 0 else base
            va = int(round(depth[n, 1])) if lev == 0 else base
            buf.write(f"{float(tn)!r},b,{bid[n] - lev},{vb}\n")
            buf.write(f"{float(tn)!r},a,{bid[n] + 1 + lev},{va}\n")
    return buf.getvalue()


def to_session(sim: SimOutput, book: BookModel | None = None, p0: int = 10_000) -> SessionSeries:
    """Session in the ingest layout; quotes follow the simulated price, queues the toy book."""
    book = book or BookModel()
    n = sim.times.size
    bid = p0 + np.floor(sim.price_levels(sim.times)).astype(np.int64)
    depth = toy_depth(sim, book, sim.times) if n else np.zeros((0, 2))
    q = np.maximum(np.rint(depth), 1).astype(np.int64)
    return SessionSeries(sim.times.copy(), sim.types.astype(np.int64), sim.volumes.copy(),
                         bid, bid + 1, q[:, 0].copy(), q[:, 1].copy(), sim.duration, sim.name,
                         n_types=sim.n_types)


def session_csv(sim: SimOutput, book: BookModel | None = None) -> str:
    """Event CSV in the ingest format (six-type configs only)."""
    if sim.n_types != len(EVENT_TYPES):
        raise ConfigError(f"the event CSV layout needs {len(EVENT_TYPES)} event types, "
                          f"config has {sim.n_types}")
    return to_session(sim, book).to_csv()


def write_outputs(cfg: SimConfig, outputs: list[SimOutput], directory: str) -> list[str]:
    """Write ``<name>.csv`` (events), ``<name>.price.csv`` and ``<name>.book.csv`` per session."""
    os.makedirs(directory, exist_ok=True)
    written = []
    for sim in outputs:
        for suffix, text in ((".csv", session_csv(sim, cfg.book)),
                             (".price.csv", sim.price.to_csv()),
                             (".book.csv", book_snapshots_csv(sim, cfg.book))):
            path = os.path.join(directory, sim.name + suffix)
            with open(path, "w", newline="") as fh:
                fh.write(text)
            written.append(path)
    return written
