"""Summary tables and plot-ready data in the layouts of the calibration report.

Tables
------
* volumes: average order size per event type;
* contributions: ``V Tr Kbar Delta2``, ``V Kbar_1 Delta2``, ``V Kbar_d Delta2`` per order kind;
* ratios: base rate, quadratic and Hawkes contributions at several cut-offs.

Only CSV text is produced; rendering is left to the user's plotting tool.
"""
from __future__ import annotations

import io
from typing import Mapping, Sequence

import numpy as np

from .ingest import EVENT_TYPES, KINDS

TABLE_KINDS = ("C", "LO", "MO")
CUTOFFS = (10.0, 100.0, 1000.0)

# plot-ready files: report name -> (stage directory, artifact)
FIGURE_SOURCES = {
    "fig1_phi.csv": ("calibrate", "phi.csv"),
    "fig2_L.csv": ("calibrate", "L.csv"),
    "fig2_K_d.csv": ("calibrate", "K_d.csv"),
    "fig2_K.csv": ("calibrate", "K.csv"),
    "fig3_Lbar.csv": ("effective", "Lbar.csv"),
    "fig3_Kbar_d.csv": ("effective", "Kbar_d.csv"),
    "fig3_Kbar.csv": ("effective", "Kbar.csv"),
    "fig4_survival.csv": ("liquidity", "survival.csv"),
    "fig4_correlations.csv": ("liquidity", "correlations.csv"),
    "fig5_Z.csv": ("zumbach", "zumbach.csv"),
    "fig5_psi.csv": ("zumbach", "psi.csv"),
}


def _fmt(x) -> str:
    return repr(float(x))


def kind_average(values, types: Sequence = EVENT_TYPES) -> dict:
    """Average a per-type vector over the bid and ask sides of each order kind."""
    values = np.asarray(values, dtype=float)
    out = {}
    for kind in KINDS:
        idx = [i for i, (k, _) in enumerate(types) if k == kind]
        out[kind] = float(np.mean(values[idx])) if idx else float("nan")
    return out


def volumes_table(volumes, instrument: str = "instrument") -> str:
    """One row per instrument, one column per event type in canonical order."""
    buf = io.StringIO()
    buf.write("instrument," + ",".join(f"V_{k}_{s}" for k, s in EVENT_TYPES) + "\n")
    buf.write(instrument + "," + ",".join(_fmt(v) for v in volumes) + "\n")
    return buf.getvalue()


def contributions_table(Kbar_d, Kbar_1, volumes, Delta2: float,
                        instrument: str = "instrument") -> str:
    """Shares per second attributable to the quadratic feedback, per order kind."""
    vd = kind_average(np.asarray(volumes) * np.asarray(Kbar_d) * Delta2)
    v1 = kind_average(np.asarray(volumes) * np.asarray(Kbar_1) * Delta2)
    buf = io.StringIO()
    buf.write("quantity,instrument," + ",".join(TABLE_KINDS) + "\n")
    rows = (("V_TrKbar_Delta2", {k: vd[k] + v1[k] for k in TABLE_KINDS}),
            ("V_Kbar1_Delta2", v1), ("V_Kbard_Delta2", vd))
    for name, vals in rows:
        buf.write(f"{name},{instrument}," + ",".join(_fmt(vals[k]) for k in TABLE_KINDS) + "\n")
    return buf.getvalue()


def ratio_rows(Lambda, alpha0: Mapping[float, np.ndarray], hawkes_flow: Mapping[float, np.ndarray],
               K_trace: Mapping[float, np.ndarray] | None, Kbar_trace: Mapping[float, np.ndarray],
               Kbar_1: Mapping[float, np.ndarray], Kbar_d: Mapping[float, np.ndarray],
               phi_total: float, Delta2: float) -> list[tuple[str, float, dict]]:
    """Rows ``(quantity, cutoff, {kind: value})`` of the ratio table.

    Each mapping is keyed by cut-off and holds one value per event type:
    ``alpha0``, ``hawkes_flow = sum_j ||phi_ij|| Lambda^j``, the bare and
    effective diagonal traces, and the effective Zumbach/volatility
    strengths. Bare strengths are approximated by ``(1 - ||phi||)`` times
    the effective ones.
    """
    Lambda = np.asarray(Lambda, dtype=float)
    rows = []

    def add(name, per_cutoff):
        for c in sorted(per_cutoff):
            rows.append((name, c, kind_average(per_cutoff[c])))

    add("alpha0/Lambda", {c: alpha0[c] / Lambda for c in alpha0})
    if K_trace is not None:
        add("Delta2*TrK/Lambda", {c: Delta2 * K_trace[c] / Lambda for c in K_trace})
    add("Delta2*TrKbar/Lambda", {c: Delta2 * Kbar_trace[c] / Lambda for c in Kbar_trace})
    add("alpha0/HawkesFlow", {c: alpha0[c] / hawkes_flow[c] for c in alpha0})
    f = 1.0 - phi_total
    add("Delta2*K1/HawkesFlow", {c: Delta2 * f * Kbar_1[c] / hawkes_flow[c] for c in Kbar_1})
    add("Delta2*Kd/HawkesFlow", {c: Delta2 * f * Kbar_d[c] / hawkes_flow[c] for c in Kbar_d})
    add("Delta2*Kbar1/Lambda", {c: Delta2 * Kbar_1[c] / Lambda for c in Kbar_1})
    add("Delta2*Kbard/Lambda", {c: Delta2 * Kbar_d[c] / Lambda for c in Kbar_d})
    return rows


def ratio_table(rows) -> str:
    buf = io.StringIO()
    buf.write("quantity,cutoff_s," + ",".join(TABLE_KINDS) + "\n")
    for name, c, vals in rows:
        buf.write(f"{name},{_fmt(c)}," + ",".join(_fmt(vals[k]) for k in TABLE_KINDS) + "\n")
    return buf.getvalue()


def phi_norms_csv(norms) -> str:
    norms = np.atleast_2d(norms)
    buf = io.StringIO()
    buf.write("i,j,norm\n")
    for i in range(norms.shape[0]):
        for j in range(norms.shape[1]):
            buf.write(f"{i},{j},{_fmt(norms[i, j])}\n")
    return buf.getvalue()


def flux_bars_csv(per_type_vol, per_type_zum, signs) -> str:
    """Per-kind volatility and Zumbach contributions with their liquidity sign."""
    vol = kind_average(per_type_vol)
    zum = kind_average(per_type_zum)
    sign = kind_average(signs)
    buf = io.StringIO()
    buf.write("kind,volatility,zumbach,total,sign\n")
    for k in TABLE_KINDS:
        buf.write(f"{k},{_fmt(vol[k])},{_fmt(zum[k])},{_fmt(vol[k] + zum[k])},{_fmt(sign[k])}\n")
    return buf.getvalue()
