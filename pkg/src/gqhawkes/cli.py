"""Command-line driver for the calibration pipeline.

Stages communicate only through files in ``<out>/<stage>/``::

    simulate    synthetic sessions (events, price, book snapshots)
    preprocess  parsed sessions, price paths, average volumes
    moments     mean rates, price moments and covariances
    calibrate   full route: phi, L, K_d (and K), alpha0
    effective   resolvent and effective kernels Lbar, Kbar_d, Kbar
    zumbach     rank-one-plus-diagonal split of the quadratic kernels
    liquidity   signals, effective spread tail, lagged correlations, flux
    report      tables and plot-ready CSVs

Every stage writes ``manifest.json`` (tool version, config hash, grid hash,
upstream manifests and SHA-256 of every output). A stage refuses to run when
an upstream manifest is missing, when an artifact listed in it changed, or
when the configuration it was produced with differs from the current one.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import glob
import hashlib
import json
import logging
import os
import shutil
import sys
from importlib.metadata import PackageNotFoundError, version as _pkg_version

import numpy as np
import yaml

from .errors import ConfigError, DataError, GQHawkesError, NumericalError
from .grids import TimeGrid, build_grid, quad_integrate, table_rows

log = logging.getLogger("gqhawkes")

try:
    __version__ = _pkg_version("gqhawkes")
except PackageNotFoundError:  # pragma: no cover - running from a source tree
    __version__ = "0.0.0"

STAGES = ("simulate", "preprocess", "moments", "calibrate", "effective", "zumbach",
          "liquidity", "report")
PIPELINE = STAGES[1:]

# configuration sections each stage depends on (cumulative along the pipeline)
_SECTIONS = {
    "simulate": ("simulate",),
    "preprocess": ("input", "preprocess"),
    "moments": ("input", "preprocess", "grids", "moments"),
    "calibrate": ("input", "preprocess", "grids", "moments", "calibrate"),
    "effective": ("input", "preprocess", "grids", "moments", "calibrate"),
    "zumbach": ("input", "preprocess", "grids", "moments", "calibrate", "zumbach"),
    "liquidity": ("input", "preprocess", "grids", "moments", "calibrate", "zumbach",
                  "liquidity"),
    "report": ("input", "preprocess", "grids", "moments", "calibrate", "zumbach",
               "liquidity", "report"),
}
_UPSTREAM = {
    "simulate": (),
    "preprocess": (),
    "moments": ("preprocess",),
    "calibrate": ("moments",),
    "effective": ("moments", "calibrate"),
    "zumbach": ("calibrate", "effective"),
    "liquidity": ("preprocess", "moments", "calibrate", "zumbach"),
    "report": ("preprocess", "moments", "calibrate", "effective", "zumbach", "liquidity"),
}

DEFAULTS = {
    "out": "out",
    "input": {"sessions": None, "books": None},
    "preprocess": {"price": "auto", "autocorr_max_lag": 60.0, "autocorr_bins": 30,
                   "rescale": False, "profile_bin": 300.0, "martingale_tol": None},
    "grids": {
        "hawkes": {"t_min": 0.002, "t_switch": 0.1, "t_max": 200.0, "n_linear": 10,
                   "n_log": 30, "origin": 0.0},
        "price": {"t_min": 0.1, "t_switch": 2.0, "t_max": 1000.0, "n_linear": 8,
                  "n_log": 32, "origin": 0.0},
    },
    "moments": {"center": True, "edge_correction": True, "symmetric": True, "npp": True},
    "calibrate": {"cutoff": 1000.0, "smoothing": False, "smoothing_degree": 5,
                  "route": "both", "ridge": 0.0},
    "zumbach": {"smooth_offdiag": False},
    "liquidity": {"v_best": None, "dt": 1.0, "max_lag": 60.0, "lag_step": 5.0,
                  "side_weight": "mean", "tail_fraction": 0.1, "alpha": 0.01,
                  "kernel_types": None},
    "report": {"instrument": "instrument"},
    "simulate": None,
}
ROUTES = ("full", "effective", "both")


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    """Read a YAML pipeline config, fill defaults and apply command-line overrides.

    Relative input paths are resolved against the directory of the config file.
    """
    raw = {}
    base_dir = os.getcwd()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            try:
                raw = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: invalid YAML ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a mapping at top level")
        base_dir = os.path.dirname(os.path.abspath(path))
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {unknown}")
    cfg = _merge(DEFAULTS, raw)
    for key, value in (overrides or {}).items():
        section, _, name = key.partition(".")
        if name:
            if cfg.get(section) is None:
                cfg[section] = {}
            cfg[section][name] = value
        else:
            cfg[section] = value
    for key in ("sessions", "books"):
        pat = cfg["input"].get(key)
        if pat and not os.path.isabs(pat):
            cfg["input"][key] = os.path.normpath(os.path.join(base_dir, pat))
    if cfg["out"] and not os.path.isabs(cfg["out"]):
        cfg["out"] = os.path.normpath(os.path.join(base_dir if path else os.getcwd(), cfg["out"]))
    if not cfg["input"].get("sessions") and cfg.get("simulate"):
        # analyse the simulator output when no market data is configured
        cfg["input"]["sessions"] = os.path.join(cfg["out"], "simulate", "*.csv")
    _validate(cfg)
    cfg["_base"] = base_dir
    return cfg


def _validate(cfg: dict) -> None:
    cal = cfg["calibrate"]
    if cal["route"] not in ROUTES:
        raise ConfigError(f"route must be one of {ROUTES}, got {cal['route']!r}")
    try:
        cal["cutoff"] = float(cal["cutoff"])
    except (TypeError, ValueError):
        raise ConfigError("cutoff must be a number") from None
    if cal["cutoff"] <= 0:
        raise ConfigError("cutoff must be positive")
    if cfg["preprocess"]["price"] not in ("auto", "companion", "micro", "surprise"):
        raise ConfigError("preprocess.price must be auto, companion, micro or surprise")
    if cfg["liquidity"]["side_weight"] not in ("mean", "sum"):
        raise ConfigError("liquidity.side_weight must be mean or sum")
    if cfg["liquidity"]["dt"] <= 0 or cfg["liquidity"]["lag_step"] <= 0:
        raise ConfigError("liquidity.dt and liquidity.lag_step must be positive")
    for name in ("hawkes", "price"):
        g = cfg["grids"][name]
        missing = [k for k in ("t_min", "t_switch", "t_max", "n_linear", "n_log") if k not in g]
        if missing:
            raise ConfigError(f"grids.{name}: missing {missing}")


def _portable(cfg: dict, path: str) -> str:
    """``path`` relative to the config directory (as recorded in artifacts)."""
    return os.path.relpath(path, cfg.get("_base", os.getcwd()))


def _resolve(cfg: dict, path: str) -> str:
    return os.path.normpath(os.path.join(cfg.get("_base", os.getcwd()), path))


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(cfg: dict, stage: str) -> str:
    """SHA-256 (first 16 hex digits) of the config sections ``stage`` depends on."""
    relevant = {k: cfg.get(k) for k in _SECTIONS[stage]}
    if "input" in relevant:
        # input locations are hashed relative to the config file, so a moved
        # project directory keeps its hashes
        relevant["input"] = {k: (_portable(cfg, v) if isinstance(v, str) else v)
                             for k, v in relevant["input"].items()}
    return hashlib.sha256(_canonical(relevant).encode()).hexdigest()[:16]


def make_grids(cfg: dict) -> tuple[TimeGrid, TimeGrid]:
    def one(spec):
        return build_grid(float(spec["t_min"]), float(spec["t_switch"]), float(spec["t_max"]),
                          int(spec["n_linear"]), int(spec["n_log"]),
                          float(spec.get("origin", 0.0)))
    return one(cfg["grids"]["hawkes"]), one(cfg["grids"]["price"])


def grid_hash(cfg: dict) -> str:
    hg, pg = make_grids(cfg)
    return hashlib.sha256((hg.digest() + pg.digest()).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# provenance and manifests


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Stage:
    """Output directory of one stage: stamps artifacts and writes the manifest."""

    def __init__(self, cfg: dict, name: str):
        self.cfg = cfg
        self.name = name
        self.dir = os.path.join(cfg["out"], name)
        self.config_hash = config_hash(cfg, name)
        self.grid_hash = grid_hash(cfg)
        self.outputs: list[str] = []
        self.inputs: dict[str, str] = {}
        self.upstream: dict[str, str] = {}

    @property
    def stamp(self) -> str:
        return (f"gqhawkes {__version__} stage={self.name} config={self.config_hash} "
                f"grids={self.grid_hash}")

    @property
    def provenance(self) -> dict:
        return {"tool": "gqhawkes", "version": __version__, "stage": self.name,
                "config_hash": self.config_hash, "grid_hash": self.grid_hash}

    def prepare(self) -> None:
        if os.path.isdir(self.dir):
            shutil.rmtree(self.dir)
        os.makedirs(self.dir)

    def path(self, name: str) -> str:
        return os.path.join(self.dir, name)

    def write_text(self, name: str, text: str) -> str:
        """Write a CSV/YAML artifact with a leading ``#`` provenance line."""
        path = self.path(name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(f"# {self.stamp}\n")
            fh.write(text)
        self.outputs.append(path)
        return path

    def write_json(self, name: str, payload: dict) -> str:
        payload = dict(payload)
        payload["provenance"] = self.provenance
        path = self.path(name)
        with open(path, "w") as fh:
            fh.write(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
        self.outputs.append(path)
        return path

    def adopt(self, paths) -> None:
        """Stamp files written by library code and register them as outputs."""
        for path in paths:
            if path.endswith(".json"):
                with open(path) as fh:
                    payload = json.load(fh)
                os.remove(path)
                self.write_json(os.path.relpath(path, self.dir), payload)
            elif path.endswith(".npz"):
                self.outputs.append(path)
            else:
                with open(path) as fh:
                    text = fh.read()
                os.remove(path)
                self.write_text(os.path.relpath(path, self.dir), text)

    def finish(self) -> str:
        manifest = {
            "stage": self.name, "tool_version": __version__,
            "config_hash": self.config_hash, "grid_hash": self.grid_hash,
            "upstream": dict(sorted(self.upstream.items())),
            "inputs": {_portable(self.cfg, k): v for k, v in sorted(self.inputs.items())},
            "outputs": {os.path.relpath(p, self.dir): _sha256(p) for p in sorted(set(self.outputs))},
        }
        path = self.path("manifest.json")
        with open(path, "w") as fh:
            fh.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        log.info("%s: wrote %d artifacts to %s", self.name, len(manifest["outputs"]), self.dir)
        return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def require(cfg: dict, stage: str, upstream: str) -> dict:
    """Check the artifacts of ``upstream`` are present, intact and current.

    Returns the upstream manifest; raises :class:`DataError` otherwise.
    """
    d = os.path.join(cfg["out"], upstream)
    mpath = os.path.join(d, "manifest.json")
    if not os.path.exists(mpath):
        raise DataError(f"{stage}: missing artifact {mpath}; run `gqhawkes {upstream}` first")
    with open(mpath) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError:
            raise DataError(f"{stage}: corrupt manifest {mpath}; rerun `gqhawkes {upstream}`") from None
    missing = [os.path.join(d, n) for n in manifest.get("outputs", {})
               if not os.path.exists(os.path.join(d, n))]
    if missing:
        raise DataError(f"{stage}: missing artifacts from {upstream}: " + ", ".join(missing))
    changed = [n for n, h in manifest["outputs"].items() if _sha256(os.path.join(d, n)) != h]
    if changed:
        raise DataError(f"{stage}: stale manifest in {d}: {', '.join(changed)} changed since "
                        f"`gqhawkes {upstream}` ran; rerun it")
    current = config_hash(cfg, upstream)
    if manifest.get("config_hash") != current:
        raise DataError(f"{stage}: stale manifest in {d}: it was produced with config hash "
                        f"{manifest.get('config_hash')} but the current config hashes to "
                        f"{current}; rerun `gqhawkes {upstream}`")
    if manifest.get("grid_hash") != grid_hash(cfg):
        raise DataError(f"{stage}: stale manifest in {d}: grids changed; rerun `gqhawkes {upstream}`")
    for sub in _UPSTREAM[upstream]:
        up = os.path.join(cfg["out"], sub, "manifest.json")
        if os.path.exists(up) and manifest["upstream"].get(sub) not in (None, _sha256(up)):
            raise DataError(f"{stage}: stale manifest in {d}: `{sub}` was rerun after "
                            f"`{upstream}`; rerun `gqhawkes {upstream}`")
    return manifest


def _check_upstream(cfg: dict, st: Stage) -> None:
    for up in _UPSTREAM[st.name]:
        require(cfg, st.name, up)
        st.upstream[up] = _sha256(os.path.join(cfg["out"], up, "manifest.json"))


def _read(cfg, stage, name) -> str:
    path = os.path.join(cfg["out"], stage, name)
    if not os.path.exists(path):
        raise DataError(f"missing artifact {path}")
    with open(path) as fh:
        return fh.read()


def _read_json(cfg, stage, name) -> dict:
    return json.loads(_read(cfg, stage, name))


def _read_table(cfg, stage, name) -> np.ndarray:
    """Last column of a stamped CSV table as floats."""
    return np.array([float(r[-1]) for r in table_rows(_read(cfg, stage, name))])


# ---------------------------------------------------------------------------
# stages


def cmd_simulate(cfg: dict) -> None:
    """Simulate sessions (events, price path, toy book) from the `simulate` section."""
    from .simulate import SimConfig, simulate, write_outputs

    if not cfg.get("simulate"):
        raise ConfigError("the config has no `simulate` section")
    sim_cfg = SimConfig.from_dict(cfg["simulate"])
    st = Stage(cfg, "simulate")
    st.prepare()
    outputs = simulate(sim_cfg)
    st.adopt(write_outputs(sim_cfg, outputs, st.dir))
    st.write_text("config.yaml", sim_cfg.dump())
    st.write_json("summary.json", {
        "sessions": [{"name": o.name, "n_events": int(o.times.size), "n_clipped": int(o.n_clipped),
                      "rates": o.rates.tolist()} for o in outputs],
        "spectral_radius": sim_cfg.spectral_radius,
    })
    st.finish()


def _session_files(cfg: dict) -> list[str]:
    pattern = cfg["input"].get("sessions")
    if not pattern:
        raise ConfigError("input.sessions is not set")
    files = sorted(f for f in glob.glob(pattern)
                   if not f.endswith((".price.csv", ".book.csv", ".events.csv")))
    if not files:
        raise ConfigError(f"input.sessions matches no files: {pattern}")
    return files


def _stem(path: str) -> str:
    base = os.path.basename(path)
    return base[:-4] if base.endswith(".csv") else base


def _book_file(cfg: dict, session_file: str) -> str | None:
    pattern = cfg["input"].get("books")
    if pattern:
        stem = _stem(session_file)
        hits = [f for f in sorted(glob.glob(pattern)) if os.path.basename(f).startswith(stem + ".")]
        return hits[0] if hits else None
    cand = session_file[:-4] + ".book.csv"
    return cand if os.path.exists(cand) else None


def cmd_preprocess(cfg: dict) -> None:
    """Parse sessions, build the price paths and session-level summaries."""
    from .ingest import (build_intraday_profile, estimate_autocorr, martingale_check,
                         micro_price, parse_session, PricePath, rescale_time, surprise_price)
    from .liquidity import VolumeTable

    pp = cfg["preprocess"]
    files = _session_files(cfg)
    st = Stage(cfg, "preprocess")
    sessions, paths, sources = [], [], []
    for f in files:
        st.inputs[f] = _sha256(f)
        s = parse_session(f, name=_stem(f))
        companion = f[:-4] + ".price.csv"
        mode = pp["price"]
        if mode == "auto":
            mode = "companion" if os.path.exists(companion) else "surprise"
        if mode == "companion":
            if not os.path.exists(companion):
                raise DataError(f"missing companion price file {companion}")
            st.inputs[companion] = _sha256(companion)
            p = PricePath.from_csv(companion, label="companion")
            T = max(s.duration, p.duration)
            s = parse_session(f, name=_stem(f), duration=T)
            p = PricePath(p.times, p.sizes, T, p.label)
        else:
            p = micro_price(s)
        sessions.append(s)
        paths.append(p)
        sources.append(mode)
    autocorr = None
    if "surprise" in sources:
        bounds = np.linspace(0.0, float(pp["autocorr_max_lag"]), int(pp["autocorr_bins"]) + 1)
        autocorr = estimate_autocorr([p for p, m in zip(paths, sources) if m == "surprise"], bounds)
        paths = [surprise_price(p, autocorr) if m == "surprise" else p
                 for p, m in zip(paths, sources)]
    profile = None
    if pp["rescale"]:
        profile = build_intraday_profile(sessions, float(pp["profile_bin"]))
        sessions = [rescale_time(s, profile) for s in sessions]
        paths = [rescale_time(p, profile) for p in paths]
    st.prepare()
    for s, p in zip(sessions, paths):
        st.write_text(f"sessions/{s.name}.events.csv", s.to_csv())
        st.write_text(f"sessions/{s.name}.price.csv", p.to_csv())
    st.write_json("sessions.json", {"sessions": [
        {"name": s.name, "source": _portable(cfg, f), "duration": s.duration, "n_events": int(s.time.size),
         "n_jumps": int(p.times.size), "price": m, "rejected": [list(r) for r in s.rejected]}
        for s, p, m, f in zip(sessions, paths, sources, files)]})
    if autocorr is not None:
        buf = ["lo,hi,rho,pairs\n"]
        for k in range(autocorr.values.size):
            buf.append(f"{float(autocorr.bounds[k])!r},{float(autocorr.bounds[k + 1])!r},"
                       f"{float(autocorr.values[k])!r},{int(autocorr.pairs[k])}\n")
        st.write_text("autocorr.csv", "".join(buf))
    if profile is not None:
        st.write_text("profile.csv", profile.to_csv())
    mart = martingale_check(paths, pp.get("martingale_tol"))
    if not mart["ok"]:
        log.warning("price increments have a drift beyond tolerance: %r", mart)
    st.write_json("martingale.json", mart)
    st.write_json("volumes.json", {"volumes": VolumeTable.from_sessions(sessions).to_dict()})
    st.finish()


def _load_sessions(cfg: dict):
    from .ingest import PricePath, parse_session

    meta = _read_json(cfg, "preprocess", "sessions.json")["sessions"]
    d = os.path.join(cfg["out"], "preprocess", "sessions")
    out = []
    for m in meta:
        s = parse_session(os.path.join(d, m["name"] + ".events.csv"), name=m["name"],
                          duration=m["duration"])
        p = PricePath.from_csv(os.path.join(d, m["name"] + ".price.csv"), duration=m["duration"],
                               label=m["price"])
        out.append((s, p, _resolve(cfg, m["source"])))
    return out


def cmd_moments(cfg: dict) -> None:
    """Estimate means and binned covariances on the Hawkes and price grids."""
    from .moments import Sample, estimate_moments

    st = Stage(cfg, "moments")
    _check_upstream(cfg, st)
    hg, pg = make_grids(cfg)
    mo = cfg["moments"]
    samples = [Sample.from_session(s, p) for s, p, _ in _load_sessions(cfg)]
    ms = estimate_moments(samples, hg, pg, with_npp=bool(mo["npp"]), center=bool(mo["center"]),
                          edge_correction=bool(mo["edge_correction"]),
                          symmetric=bool(mo["symmetric"]))
    st.prepare()
    st.adopt(ms.save(st.dir, provenance=st.stamp))
    st.finish()


def _smoothed(cfg, ms):
    cal = cfg["calibrate"]
    if not cal["smoothing"]:
        return None
    from .moments import smooth_moments
    return smooth_moments(ms, int(cal["smoothing_degree"]))


def cmd_calibrate(cfg: dict) -> None:
    """Solve for the bare kernels phi, L, K_d (and K) and the base rates."""
    from .calibrate import calibrate, event_covariance_residual
    from .moments import MomentSet

    st = Stage(cfg, "calibrate")
    _check_upstream(cfg, st)
    cal = cfg["calibrate"]
    ms = MomentSet.load(os.path.join(cfg["out"], "moments"))
    full_K = cal["route"] in ("full", "both") and ms.with_npp
    ks = calibrate(ms, cutoff=cal["cutoff"], smoothed=_smoothed(cfg, ms), full_K=full_K,
                   ridge=float(cal["ridge"]))
    # how much of the event-event covariance the neglected price terms carry
    ks.diagnostics["event_covariance_residual"] = event_covariance_residual(
        ms, ks.phi, ks.L, ks.K_d, ks.K)
    if ks.diagnostics["negative_alpha0"]:
        log.warning("negative base rates for types %s", ks.diagnostics["negative_alpha0"])
    st.prepare()
    st.adopt(ks.save(st.dir))
    st.finish()


def _load_kernels(cfg):
    from .calibrate import KernelSet
    hg, pg = make_grids(cfg)
    return KernelSet.load(os.path.join(cfg["out"], "calibrate"), hg.origin, pg.origin)


def cmd_effective(cfg: dict) -> None:
    """Compute the resolvent and the effective kernels Lbar, Kbar_d, Kbar."""
    from .calibrate import spectral_radius
    from .effective import bare_from_effective, effective_kernels, resolvent
    from .moments import MomentSet

    st = Stage(cfg, "effective")
    _check_upstream(cfg, st)
    cal = cfg["calibrate"]
    cutoff = cal["cutoff"]
    ms = MomentSet.load(os.path.join(cfg["out"], "moments"))
    ks = _load_kernels(cfg)
    R = resolvent(ks.phi)
    ek = effective_kernels(ms, _smoothed(cfg, ms))
    pg = ms.price_grid
    d = ks.n_types
    st.prepare()
    lines = ["i,j,t,value\n"]
    for i in range(d):
        for j in range(d):
            for n, t in enumerate(R.grid.points):
                lines.append(f"{i},{j},{float(t)!r},{float(R.values[i, j, n])!r}\n")
    st.write_text("resolvent.csv", "".join(lines))
    for name, arr in (("Lbar.csv", ek.Lbar), ("Kbar_d.csv", ek.Kbar_d)):
        lines = ["i,t,value\n"]
        for i in range(d):
            for n, t in enumerate(pg.points):
                lines.append(f"{i},{float(t)!r},{float(arr[i, n])!r}\n")
        st.write_text(name, "".join(lines))
    if ek.Kbar is not None:
        lines = ["i,t,x,value\n"]
        for i in range(d):
            for a, t in enumerate(pg.points):
                for b, x in enumerate(pg.points):
                    lines.append(f"{i},{float(t)!r},{float(x)!r},{float(ek.Kbar[i, a, b])!r}\n")
        st.write_text("Kbar.csv", "".join(lines))
    pn = ks.phi.norms(cutoff)
    rho = spectral_radius(pn)
    Lbar_n = quad_integrate(ek.Lbar, pg, cutoff)
    Kbar_d_n = quad_integrate(ek.Kbar_d, pg, cutoff)
    summary = {
        "cutoff": cutoff, "spectral_radius": rho,
        "resolvent_norms": R.norms(cutoff),
        "Lbar_norms": Lbar_n, "Kbar_d_norms": Kbar_d_n,
        "bare_L_norms": bare_from_effective(Lbar_n, pn),
        "bare_K_d_norms": bare_from_effective(Kbar_d_n, rho),
        "residual": ek.residual, "condition": ek.condition,
    }
    if cal["route"] == "both":
        K_d_n = quad_integrate(ks.K_d, pg, cutoff)
        with np.errstate(divide="ignore", invalid="ignore"):
            summary["consistency_Kd"] = (Kbar_d_n * (1.0 - rho) / K_d_n).tolist()
        summary["full_K_d_norms"] = K_d_n
        summary["full_L_norms"] = quad_integrate(ks.L, pg, cutoff)
    st.write_json("summary.json", summary)
    st.finish()


def _surface(cfg, stage, name, d, n) -> np.ndarray:
    return _read_table(cfg, stage, name).reshape(d, n, n)


def _diag_table(cfg, stage, name, d, n) -> np.ndarray:
    return _read_table(cfg, stage, name).reshape(d, n)


def cmd_zumbach(cfg: dict) -> None:
    """Split the quadratic surfaces into volatility and rank-one trend parts."""
    from .calibrate import spectral_radius
    from .effective import bare_from_effective, with_diagonal, zumbach_decompose

    st = Stage(cfg, "zumbach")
    _check_upstream(cfg, st)
    cal = cfg["calibrate"]
    cutoff = cal["cutoff"]
    ks = _load_kernels(cfg)
    pg = ks.price_grid
    d, n = ks.n_types, len(pg)
    rho = spectral_radius(ks.phi.norms(cutoff))
    smooth = bool(cfg["zumbach"]["smooth_offdiag"])
    st.prepare()
    payload = {"cutoff": cutoff, "spectral_radius": rho, "route": cal["route"]}
    eff = bare = None
    if cal["route"] in ("effective", "both"):
        if not os.path.exists(os.path.join(cfg["out"], "effective", "Kbar.csv")):
            raise DataError("zumbach: effective/Kbar.csv missing (moments.npp disabled?)")
        Kbar = with_diagonal(_surface(cfg, "effective", "Kbar.csv", d, n),
                             _diag_table(cfg, "effective", "Kbar_d.csv", d, n))
        eff = zumbach_decompose(Kbar, pg, cutoff, smooth_offdiag=smooth)
        st.adopt(eff.save(st.dir))
        # the per-type split is re-stamped under a distinct name below
        payload["Kbar_d"] = eff.K_d
        payload["Kbar_1"] = eff.K_1
        payload["K_d_from_effective"] = bare_from_effective(eff.K_d, rho)
        payload["K_1_from_effective"] = bare_from_effective(eff.K_1, rho)
        payload["effective"] = eff.strengths()
    if cal["route"] in ("full", "both"):
        if ks.K is None:
            raise DataError("zumbach: calibrate/K.csv missing (moments.npp disabled?)")
        K = with_diagonal(ks.K, ks.K_d)
        bare = zumbach_decompose(K, pg, cutoff, smooth_offdiag=smooth)
        payload["K_d"] = bare.K_d
        payload["K_1"] = bare.K_1
        payload["full"] = bare.strengths()
        if eff is None:
            st.adopt(bare.save(st.dir))
            payload["Kbar_d"] = bare.K_d / (1.0 - rho)
            payload["Kbar_1"] = bare.K_1 / (1.0 - rho)
        else:
            lines = ["i,t,Z,psi\n"]
            for i in range(d):
                for k, t in enumerate(pg.points):
                    lines.append(f"{i},{float(t)!r},{float(bare.Z[i, k])!r},"
                                 f"{float(bare.psi[i, k])!r}\n")
            st.write_text("full_kernels.csv", "".join(lines))
            with np.errstate(divide="ignore", invalid="ignore"):
                payload["consistency_K1"] = (eff.K_1 * (1.0 - rho) / bare.K_1).tolist()
    # strengths.json from ZumbachDecomposition.save is replaced by the combined summary
    st.outputs = [p for p in st.outputs if not p.endswith("strengths.json")]
    st.write_json("strengths.json", payload)
    st.finish()


def cmd_liquidity(cfg: dict) -> None:
    """Signals, effective spread statistics, correlations and liquidity flux."""
    from .liquidity import (SurvivalTail, VolumeTable, empirical_survival, causality_asymmetry, correlations_csv,
                            default_v_best, lagged_correlation, liquidity_flux, pooled_kernel,
                            read_books, signals, spread_series, survival_tail)
    from .moments import MomentSet

    st = Stage(cfg, "liquidity")
    _check_upstream(cfg, st)
    lq = cfg["liquidity"]
    cutoff = cfg["calibrate"]["cutoff"]
    _, pg = make_grids(cfg)
    strengths = _read_json(cfg, "zumbach", "strengths.json")
    d = len(strengths["Kbar_d"])
    Z_vals = np.array([float(r[-1]) for r in table_rows(_read(cfg, "zumbach", "zumbach.csv"))])
    psi_vals = np.array([float(r[-1]) for r in table_rows(_read(cfg, "zumbach", "psi.csv"))])
    types = lq["kernel_types"]
    Zk = pooled_kernel(pg, Z_vals.reshape(d, -1), "Z", types, cutoff)
    psik = pooled_kernel(pg, psi_vals.reshape(d, -1), "psi", types, cutoff)
    ms = MomentSet.load(os.path.join(cfg["out"], "moments"))
    vols = _read_json(cfg, "preprocess", "volumes.json")["volumes"]
    from .ingest import EVENT_TYPES
    volumes = VolumeTable(np.array([vols[f"{k}_{s}"] for k, s in EVENT_TYPES]))
    flux = liquidity_flux(strengths["Kbar_d"], strengths["Kbar_1"], volumes, ms.Delta2,
                          lq["side_weight"])
    dt = float(lq["dt"])
    lag_steps = np.arange(-int(round(lq["max_lag"] / lq["lag_step"])),
                          int(round(lq["max_lag"] / lq["lag_step"])) + 1) * int(round(lq["lag_step"] / dt))
    sess = _load_sessions(cfg)
    sig_rows, seffs, mu2, sig2, ratio = ["session,t,sigma2,mu,mu2,T,seff\n"], [], [], [], []
    have_books = True
    book_sets = []
    for s, p, source in sess:
        bf = _book_file(cfg, source)
        if bf is None:
            have_books = False
            book_sets.append(None)
        else:
            st.inputs[bf] = _sha256(bf)
            book_sets.append(read_books(bf))
    v_best = lq["v_best"]
    if have_books and v_best is None:
        v_best = default_v_best([b for bs in book_sets for b in bs])
    st.prepare()
    for (s, p, _), books in zip(sess, book_sets):
        t = np.arange(dt, s.duration + 0.5 * dt, dt)
        t = t[t <= s.duration]
        sg = signals(p, psik, Zk, sample_t=t)
        if books is not None:
            sg.seff = spread_series(books, v_best, t)
        T = sg.ratio
        seff = sg.seff if sg.seff is not None else np.full(t.shape, np.nan)
        for k in range(t.size):
            sig_rows.append(f"{s.name},{float(t[k])!r},{float(sg.sigma2[k])!r},{float(sg.mu[k])!r},"
                            f"{float(sg.mu2[k])!r},{float(T[k])!r},{float(seff[k])!r}\n")
        seffs.append(seff)
        mu2.append(sg.mu2)
        sig2.append(sg.sigma2)
        ratio.append(T)
    st.write_text("signals.csv", "".join(sig_rows))
    out = {"v_best": v_best, "Delta2": ms.Delta2}
    if have_books:
        pooled = np.concatenate([x[np.isfinite(x)] for x in seffs])
        vals, surv = empirical_survival(pooled)
        st.write_text("survival.csv", SurvivalTail(vals, surv, np.nan, np.nan, 0).to_csv())
        try:
            tail = survival_tail(pooled, float(lq["tail_fraction"]))
            out["tail_exponent"], out["tail_stderr"] = tail.exponent, tail.stderr
        except DataError as exc:
            log.warning("effective spread tail not fitted: %s", exc)
            out["tail_exponent"], out["tail_note"] = None, str(exc)
        try:
            C_mu, per = lagged_correlation(mu2, seffs, lag_steps, return_sessions=True)
            C_sig = lagged_correlation(sig2, seffs, lag_steps)
            C_T = lagged_correlation(ratio, seffs, lag_steps)
        except DataError as exc:
            log.warning("lagged correlations undefined: %s", exc)
            out["correlations_note"] = str(exc)
            nan = np.full(lag_steps.size, np.nan)
            C_mu = C_sig = C_T = nan
            per = None
        st.write_text("correlations.csv", correlations_csv(lag_steps * dt, C_mu, C_sig, C_T))
        if per is not None and len(sess) >= 2:
            out["zumbach_asymmetry"] = causality_asymmetry(per, lag_steps, float(lq["alpha"]))
    else:
        log.warning("no book snapshots: effective spread, tail and correlations skipped")
        out["books"] = "missing"
    st.write_json("summary.json", out)
    st.write_json("flux.json", flux.to_dict())
    st.finish()


def cmd_report(cfg: dict) -> None:
    """Write the summary tables and plot-ready CSVs."""
    from . import report
    from .calibrate import solve_base_rate, spectral_radius
    from .effective import zumbach_decompose, with_diagonal
    from .ingest import EVENT_TYPES
    from .liquidity import FLUX_SIGN
    from .moments import MomentSet

    st = Stage(cfg, "report")
    _check_upstream(cfg, st)
    inst = str(cfg["report"]["instrument"])
    ms = MomentSet.load(os.path.join(cfg["out"], "moments"))
    ks = _load_kernels(cfg)
    pg = ks.price_grid
    d, n = ks.n_types, len(pg)
    strengths = _read_json(cfg, "zumbach", "strengths.json")
    vols = _read_json(cfg, "preprocess", "volumes.json")["volumes"]
    volumes = np.array([vols[f"{k}_{s}"] for k, s in EVENT_TYPES])
    st.prepare()
    st.write_text("table1_volumes.csv", report.volumes_table(volumes, inst))
    st.write_text("table2_contributions.csv", report.contributions_table(
        strengths["Kbar_d"], strengths["Kbar_1"], volumes, ms.Delta2, inst))
    # table 3: ratios at several cut-offs
    eff_dir = os.path.join(cfg["out"], "effective")
    Kbar_d_s = _diag_table(cfg, "effective", "Kbar_d.csv", d, n)
    Kbar = None
    if os.path.exists(os.path.join(eff_dir, "Kbar.csv")):
        Kbar = with_diagonal(_surface(cfg, "effective", "Kbar.csv", d, n), Kbar_d_s)
    alpha0, flow, Ktr, Kbtr, Kb1, Kbd = {}, {}, {}, {}, {}, {}
    rho = spectral_radius(ks.phi.norms(cfg["calibrate"]["cutoff"]))
    for c in report.CUTOFFS:
        pn = ks.phi.norms(c)
        kd_n = quad_integrate(ks.K_d, pg, c)
        alpha0[c] = solve_base_rate(ms.Lambda, pn, kd_n, ms.Delta2, c)
        flow[c] = pn @ ms.Lambda
        Ktr[c] = kd_n
        Kbtr[c] = quad_integrate(Kbar_d_s, pg, c)
        if Kbar is not None:
            z = zumbach_decompose(Kbar, pg, c, smooth_offdiag=bool(cfg["zumbach"]["smooth_offdiag"]))
            Kb1[c], Kbd[c] = z.K_1, z.K_d
        else:
            Kb1[c], Kbd[c] = np.full(d, np.nan), Kbtr[c]
    rows = report.ratio_rows(ms.Lambda, alpha0, flow, Ktr, Kbtr, Kb1, Kbd, rho, ms.Delta2)
    st.write_text("table3_ratios.csv", report.ratio_table(rows))
    st.write_text("fig1_phi_norms.csv", report.phi_norms_csv(ks.phi.norms(cfg["calibrate"]["cutoff"])))
    flux = _read_json(cfg, "liquidity", "flux.json")
    w = 0.5 if cfg["liquidity"]["side_weight"] == "mean" else 1.0
    vol_part = np.array([strengths["Kbar_d"][i] * volumes[i] * ms.Delta2 * w for i in range(d)])
    zum_part = np.array([strengths["Kbar_1"][i] * volumes[i] * ms.Delta2 * w for i in range(d)])
    signs = np.array([FLUX_SIGN[k] for k, _ in EVENT_TYPES], dtype=float)
    st.write_text("fig6_flux.csv", report.flux_bars_csv(vol_part, zum_part, signs))
    for target, (stage, name) in sorted(report.FIGURE_SOURCES.items()):
        src = os.path.join(cfg["out"], stage, name)
        if not os.path.exists(src):
            continue
        text = "".join(ln for ln in _read(cfg, stage, name).splitlines(True) if not ln.startswith("#"))
        st.write_text(target, text)
    st.write_json("summary.json", {
        "instrument": inst, "J": flux["J"], "spectral_radius": rho,
        "Lambda": ms.Lambda, "Delta2": ms.Delta2,
        "quadratic_share": float(np.sum(Ktr[report.CUTOFFS[-1]]) * ms.Delta2 / np.sum(ms.Lambda)),
        "exogenous_share": float(np.sum(alpha0[report.CUTOFFS[-1]]) / np.sum(ms.Lambda)),
    })
    st.finish()


COMMANDS = {
    "simulate": cmd_simulate, "preprocess": cmd_preprocess, "moments": cmd_moments,
    "calibrate": cmd_calibrate, "effective": cmd_effective, "zumbach": cmd_zumbach,
    "liquidity": cmd_liquidity, "report": cmd_report,
}


def cmd_pipeline(cfg: dict) -> None:
    """Run every analysis stage in order (simulation first when it feeds the inputs)."""
    if cfg.get("simulate") and cfg["input"]["sessions"].startswith(
            os.path.join(cfg["out"], "simulate") + os.sep):
        cmd_simulate(cfg)
    for name in PIPELINE:
        COMMANDS[name](cfg)


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gqhawkes", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML pipeline configuration")
    common.add_argument("--out", help="output directory (overrides `out`)")
    common.add_argument("--cutoff", type=float, help="kernel cut-off in seconds (default 1000)")
    common.add_argument("--no-smoothing", action="store_true", help="use raw covariances")
    common.add_argument("--route", choices=ROUTES, help="calibration route")
    common.add_argument("--seed", type=int, help="simulation seed (unsigned 64-bit)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("pipeline",):
        fn = cmd_pipeline if name == "pipeline" else COMMANDS[name]
        sub.add_parser(name, parents=[common], help=(fn.__doc__ or name).strip().split("\n")[0])
    return parser


def _overrides(args) -> dict:
    out = {}
    if args.out is not None:
        out["out"] = os.path.abspath(args.out)
    if args.cutoff is not None:
        out["calibrate.cutoff"] = args.cutoff
    if args.no_smoothing:
        out["calibrate.smoothing"] = False
    if args.route is not None:
        out["calibrate.route"] = args.route
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        out["simulate.seed"] = args.seed
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.command == "pipeline":
            cmd_pipeline(cfg)
        else:
            COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"gqhawkes: configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"gqhawkes: data error: {exc}", file=sys.stderr)
        return 3
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"gqhawkes: numerical failure: {exc}", file=sys.stderr)
        return 4
    except GQHawkesError as exc:  # pragma: no cover - all subclasses handled above
        print(f"gqhawkes: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
