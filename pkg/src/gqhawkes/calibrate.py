"""Kernel calibration from empirical moments.

The solvers discretize the causal Wiener-Hopf-type equations on the grid
nodes (piecewise-C1 rule for the convolutions, see
:func:`gqhawkes.grids.convolution_matrix`) and solve the resulting dense
linear systems directly. Norms ``||f||`` are grid quadratures truncated at a
configurable cut-off.
"""
from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ConfigError, DataError, NumericalError
from .grids import TimeGrid, convolution_matrix, quad_integrate, sampled, table_rows

DEFAULT_CUTOFF = 1000.0


@dataclass
class HawkesKernel:
    """``phi[i, k, n]``: rate boost of type ``i`` per past type-``k`` event at lag ``t_n``."""

    values: np.ndarray
    grid: TimeGrid
    residual: float = 0.0
    condition: float = 1.0

    @property
    def n_types(self) -> int:
        return self.values.shape[0]

    def norms(self, cutoff: float | None = DEFAULT_CUTOFF) -> np.ndarray:
        return quad_integrate(self.values, self.grid, cutoff)

    def spectral_radius(self, cutoff: float | None = DEFAULT_CUTOFF) -> float:
        return spectral_radius(self, cutoff)


@dataclass
class PriceKernels:
    """Linear kernels ``L[i, n]`` and quadratic diagonals ``K_d[i, n]`` on the price grid."""

    L: np.ndarray
    K_d: np.ndarray
    grid: TimeGrid
    residual: float = 0.0
    condition: float = 1.0


# ---------------------------------------------------------------------------
# Hawkes kernel


def _conv_blocks(grid: TimeGrid, chi: np.ndarray) -> np.ndarray:
    """``C[k, j]``: matrix of ``f -> int f(s) chi^{kj}(t - s) ds`` on the grid.

    Negative lags use ``chi^{kj}(-t) = chi^{jk}(t)``.
    """
    d = chi.shape[0]
    pts = grid.points
    blocks = np.empty((d, d, pts.size, pts.size))
    for k in range(d):
        for j in range(d):
            g = sampled(grid, chi[k, j], negative=chi[j, k])
            blocks[k, j] = convolution_matrix(pts, g, pts, g_points=pts)
    return blocks


def _solve_dense(A, B, what: str, ridge: float = 0.0):
    if ridge:
        A = A + ridge * np.eye(A.shape[0])
    cond = float(np.linalg.cond(A))
    if not np.isfinite(cond) or cond > 1e14:
        raise NumericalError(f"{what}: singular system (condition number {cond:.3g})")
    try:
        lu = scipy.linalg.lu_factor(A, check_finite=True)
    except (ValueError, scipy.linalg.LinAlgError) as exc:
        raise NumericalError(f"{what}: {exc} (condition number {cond:.3g})") from None
    X = scipy.linalg.lu_solve(lu, B)
    resid = float(np.linalg.norm(A @ X - B) / max(np.linalg.norm(B), 1e-300))
    return X, cond, resid


def solve_hawkes(chi_nn: np.ndarray, Lambda: np.ndarray, grid: TimeGrid,
                 ridge: float = 0.0) -> HawkesKernel:
    """Solve ``chi^{ij}(t) = Lambda^j phi^{ij}(t) + sum_k int phi^{ik}(s) chi^{kj}(t-s) ds``.

    The equations for different rows ``i`` share one ``(d n) x (d n)``
    matrix, so a single factorization serves all of them.

    Parameters
    ----------
    chi_nn : ndarray, shape (d, d, n)
        Covariance densities at the grid points (positive lags).
    Lambda : ndarray, shape (d,)
    grid : TimeGrid
    ridge : float
        Optional Tikhonov term added to the diagonal.
    """
    chi_nn = np.asarray(chi_nn, dtype=float)
    Lambda = np.asarray(Lambda, dtype=float)
    d, d2, n = chi_nn.shape
    if d != d2 or n != len(grid) or Lambda.shape != (d,):
        raise DataError("chi_nn must have shape (d, d, len(grid)) and Lambda shape (d,)")
    blocks = _conv_blocks(grid, chi_nn)
    # unknown vector of row i: (k, n) -> phi^{ik}(t_n); equation index (j, m)
    A = np.zeros((d * n, d * n))
    for j in range(d):
        for k in range(d):
            A[j * n:(j + 1) * n, k * n:(k + 1) * n] = blocks[k, j]
        A[j * n:(j + 1) * n, j * n:(j + 1) * n] += Lambda[j] * np.eye(n)
    B = chi_nn.reshape(d, d * n).T          # column i holds (j, m) -> chi^{ij}(t_m)
    X, cond, resid = _solve_dense(A, B, "Hawkes system", ridge)
    phi = X.T.reshape(d, d, n)
    return HawkesKernel(phi, grid, resid, cond)


def spectral_radius(phi, cutoff: float | None = DEFAULT_CUTOFF) -> float:
    """Largest eigenvalue modulus of the kernel-norm matrix."""
    norms = phi.norms(cutoff) if isinstance(phi, HawkesKernel) else np.asarray(phi, dtype=float)
    return float(np.max(np.abs(np.linalg.eigvals(np.atleast_2d(norms)))))


# ---------------------------------------------------------------------------
# price kernels


def phi_convolve(phi: HawkesKernel, chi: np.ndarray, price_grid: TimeGrid) -> np.ndarray:
    """``(phi * chi)^i(t) = sum_k int phi^{ik}(s) chi^k(t - s) ds`` on the price grid.

    ``chi`` (shape ``(d, n_price)``) vanishes at negative lags.
    """
    d = phi.n_types
    hp = phi.grid.points
    pp = price_grid.points
    mats = [convolution_matrix(hp, sampled(price_grid, chi[k]), pp,
                               support=phi.grid.t_max, g_points=pp) for k in range(d)]
    out = np.zeros((d, pp.size))
    for i in range(d):
        for k in range(d):
            out[i] += mats[k] @ phi.values[i, k]
    return out


def _quadratic_system(chi_p2p2, price_grid, gamma):
    pts = price_grid.points
    C = convolution_matrix(pts, sampled(price_grid, chi_p2p2, symmetric=True), pts, g_points=pts)
    return gamma * np.eye(pts.size) + C


def solve_L_Kd(chi_np, chi_np2, chi_p2p2, Delta2: float, Delta3: float, Delta4: float,
               phi: HawkesKernel | None, price_grid: TimeGrid, ridge: float = 0.0) -> PriceKernels:
    """Linear kernels and quadratic diagonals from the event-price covariances.

    With ``g1 = chi_NP - phi*chi_NP`` and ``g2 = chi_NP2 - phi*chi_NP2``,

        (Delta4 - Delta3^2/Delta2) K_d(t) + int chi_P2P2(t - s) K_d(s) ds
            = g2(t) - (Delta3/Delta2) g1(t),
        L(t) = (g1(t) - Delta3 K_d(t)) / Delta2.

    ``phi=None`` drops the Hawkes convolutions (effective kernels).
    """
    chi_np = np.atleast_2d(np.asarray(chi_np, dtype=float))
    chi_np2 = np.atleast_2d(np.asarray(chi_np2, dtype=float))
    chi_p2p2 = np.asarray(chi_p2p2, dtype=float)
    if Delta2 <= 0:
        raise DataError("Delta2 must be positive")
    gamma = Delta4 - Delta3 ** 2 / Delta2
    if gamma <= 0:
        raise NumericalError(f"degenerate jump distribution: Delta4 - Delta3^2/Delta2 = {float(gamma)!r}")
    if chi_np.shape != chi_np2.shape or chi_np.shape[1] != len(price_grid):
        raise DataError("chi_np and chi_np2 must have shape (d, len(price_grid))")
    g1, g2 = chi_np.copy(), chi_np2.copy()
    if phi is not None:
        g1 -= phi_convolve(phi, chi_np, price_grid)
        g2 -= phi_convolve(phi, chi_np2, price_grid)
    A = _quadratic_system(chi_p2p2, price_grid, gamma)
    rhs = (g2 - (Delta3 / Delta2) * g1).T
    Kd, cond, resid = _solve_dense(A, rhs, "quadratic diagonal system", ridge)
    Kd = Kd.T
    L = (g1 - Delta3 * Kd) / Delta2
    return PriceKernels(L, Kd, price_grid, resid, cond)


def _shift_matrix(points: np.ndarray, shift: float) -> np.ndarray:
    """Rows: linear interpolation weights of ``f(t_m - shift)`` on ``points``.

    Flat below the first point for positive arguments, zero for arguments
    ``<= 0`` or beyond the last point.
    """
    x = points - shift
    n = points.size
    mat = np.zeros((n, n))
    ok = (x > 0) & (x <= points[-1])
    xc = np.clip(x, points[0], points[-1])
    idx = np.clip(np.searchsorted(points, xc, side="right") - 1, 0, n - 2)
    frac = (xc - points[idx]) / (points[idx + 1] - points[idx])
    rows = np.flatnonzero(ok)
    mat[rows, idx[rows]] = 1.0 - frac[rows]
    mat[rows, idx[rows] + 1] += frac[rows]
    return mat


def diagonal_shift_convolve(phi: HawkesKernel, surface: np.ndarray, price_grid: TimeGrid,
                            cutoff: float | None = None) -> np.ndarray:
    """``sum_k int phi^{ik}(s) S^k(t - s, x - s) ds`` by Hawkes-grid quadrature."""
    pts = price_grid.points
    w = phi.grid.clipped_weights(cutoff)
    d = phi.n_types
    out = np.zeros((d,) + surface.shape[1:])
    for n, s in enumerate(phi.grid.points):
        P = _shift_matrix(pts, s)
        shifted = np.einsum("ab,kbc,dc->kad", P, surface, P)
        out += w[n] * np.einsum("ik,kab->iab", phi.values[:, :, n], shifted)
    return out


def solve_full_K(chi_npp: np.ndarray, phi: HawkesKernel | None, Delta2: float,
                 price_grid: TimeGrid) -> np.ndarray:
    """``K^i(t,x) = [chi_NPP^i(t,x) - sum_k int phi^{ik}(s) chi_NPP^k(t-s,x-s) ds] / (2 Delta2^2)``."""
    chi_npp = np.asarray(chi_npp, dtype=float)
    if Delta2 <= 0:
        raise DataError("Delta2 must be positive")
    num = chi_npp.copy()
    if phi is not None:
        num -= diagonal_shift_convolve(phi, chi_npp, price_grid)
    K = num / (2.0 * Delta2 ** 2)
    return 0.5 * (K + np.swapaxes(K, -1, -2))


def solve_base_rate(Lambda, phi: HawkesKernel | np.ndarray, K_d_norms, Delta2: float,
                    cutoff: float | None = DEFAULT_CUTOFF) -> np.ndarray:
    """``alpha0^i = Lambda^i - sum_k ||phi^{ik}|| Lambda^k - ||K_d^i|| Delta2``.

    ``phi`` may be a kernel or its norm matrix; ``K_d_norms`` the vector of
    ``||K_d^i||``.
    """
    Lambda = np.asarray(Lambda, dtype=float)
    pn = phi.norms(cutoff) if isinstance(phi, HawkesKernel) else np.atleast_2d(phi)
    return Lambda - pn @ Lambda - np.asarray(K_d_norms, dtype=float) * Delta2


def decoupling_diagnostic(phi_norms, K_d_norms, Lambda, Delta2: float) -> float:
    """``sum_i ||K_d^i|| Delta2 / sum_{i,k} ||phi^{ik}|| Lambda^k``."""
    den = float(np.sum(np.atleast_2d(phi_norms) @ np.asarray(Lambda, dtype=float)))
    if den == 0:
        raise NumericalError("decoupling diagnostic undefined: no Hawkes activity")
    return float(np.sum(K_d_norms) * Delta2 / den)


def event_covariance_residual(ms, phi: HawkesKernel, L, K_d, K) -> dict:
    """Residual of the full event-event equation under fitted kernels.

    Returns the RMS (over Hawkes-grid nodes) of the complete residual and of
    the price-driven terms that the decoupled Hawkes equation neglects.
    """
    hg, pg = ms.hawkes_grid, ms.price_grid
    t = hg.points
    s = pg.points
    w = pg.weights
    d = ms.n_types
    chi = ms.chi_nn
    lam = ms.Lambda
    hawkes = np.zeros_like(chi)
    blocks = _conv_blocks(hg, chi)
    for i in range(d):
        for j in range(d):
            hawkes[i, j] = lam[j] * phi.values[i, j] + sum(blocks[k, j] @ phi.values[i, k]
                                                           for k in range(d))
    chi_np, chi_np2, chi_npp = ms.chi_np, ms.chi_np2, ms.chi_npp
    price = np.zeros_like(chi)
    for m, tm in enumerate(t):
        lag = s - tm
        ok = lag > 0
        np_at = np.where(ok, np.array([pg.evaluate(c, lag) for c in chi_np]), 0.0)
        np2_at = np.where(ok, np.array([pg.evaluate(c, lag) for c in chi_np2]), 0.0)
        P = _shift_matrix(s, tm)
        npp_at = np.einsum("ab,kbc,dc->kad", P, chi_npp, P) if K is not None else None
        for i in range(d):
            for j in range(d):
                val = np.sum(w * L[i] * np_at[j]) + np.sum(w * K_d[i] * np2_at[j])
                if K is not None:
                    off = K[i] * npp_at[j]
                    np.fill_diagonal(off, 0.0)
                    val += w @ off @ w
                price[i, j, m] = val
    full = chi - hawkes - price
    return {"rms_full": float(np.sqrt(np.mean(full ** 2))),
            "rms_neglected": float(np.sqrt(np.mean(price ** 2))),
            "rms_chi": float(np.sqrt(np.mean(chi ** 2)))}


# ---------------------------------------------------------------------------
# kernel set


@dataclass
class KernelSet:
    phi: HawkesKernel
    L: np.ndarray
    K_d: np.ndarray
    K: np.ndarray | None
    alpha0: np.ndarray
    price_grid: TimeGrid
    cutoff: float = DEFAULT_CUTOFF
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_types(self) -> int:
        return self.phi.n_types

    def summary(self) -> dict:
        pn = self.phi.norms(self.cutoff)
        return {
            "cutoff": self.cutoff,
            "phi_norms": pn.tolist(),
            "spectral_radius": spectral_radius(pn),
            "L_norms": quad_integrate(self.L, self.price_grid, self.cutoff).tolist(),
            "K_d_norms": quad_integrate(self.K_d, self.price_grid, self.cutoff).tolist(),
            "alpha0": self.alpha0.tolist(),
            "hawkes_grid": self.phi.grid.digest(),
            "price_grid": self.price_grid.digest(),
            "diagnostics": self.diagnostics,
        }

    def save(self, directory: str) -> list[str]:
        os.makedirs(directory, exist_ok=True)
        out = []

        def put(name, text):
            path = os.path.join(directory, name)
            with open(path, "w", newline="") as fh:
                fh.write(text)
            out.append(path)

        d = self.n_types
        th, tp = self.phi.grid.points, self.price_grid.points
        buf = io.StringIO()
        buf.write("i,j,t,value\n")
        for i in range(d):
            for j in range(d):
                for n, t in enumerate(th):
                    buf.write(f"{i},{j},{float(t)!r},{float(self.phi.values[i, j, n])!r}\n")
        put("phi.csv", buf.getvalue())
        for name, arr in (("L.csv", self.L), ("K_d.csv", self.K_d)):
            buf = io.StringIO()
            buf.write("i,t,value\n")
            for i in range(d):
                for n, t in enumerate(tp):
                    buf.write(f"{i},{float(t)!r},{float(arr[i, n])!r}\n")
            put(name, buf.getvalue())
        if self.K is not None:
            buf = io.StringIO()
            buf.write("i,t,x,value\n")
            for i in range(d):
                for a, t in enumerate(tp):
                    for b, x in enumerate(tp):
                        buf.write(f"{i},{float(t)!r},{float(x)!r},{float(self.K[i, a, b])!r}\n")
            put("K.csv", buf.getvalue())
        buf = io.StringIO()
        buf.write("i,alpha0\n")
        for i, a in enumerate(self.alpha0):
            buf.write(f"{i},{float(a)!r}\n")
        put("alpha0.csv", buf.getvalue())
        put("hawkes_grid.csv", self.phi.grid.to_csv())
        put("price_grid.csv", self.price_grid.to_csv())
        put("summary.json", json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return out

    @classmethod
    def load(cls, directory: str, hawkes_origin: float = 0.0, price_origin: float = 0.0) -> "KernelSet":
        def read(name):
            path = os.path.join(directory, name)
            if not os.path.exists(path):
                raise DataError(f"missing kernel artifact: {path}")
            with open(path) as fh:
                return fh.read()

        hg = TimeGrid.from_csv(read("hawkes_grid.csv"), hawkes_origin)
        pg = TimeGrid.from_csv(read("price_grid.csv"), price_origin)
        summary = json.loads(read("summary.json"))

        def table(text, ncols):
            rows = table_rows(text)
            return np.array([float(r[-1]) for r in rows]), rows

        vals, rows = table(read("phi.csv"), 4)
        d = int(round(np.sqrt(len(rows) / len(hg))))
        phi = HawkesKernel(vals.reshape(d, d, len(hg)), hg)
        L = table(read("L.csv"), 3)[0].reshape(d, len(pg))
        Kd = table(read("K_d.csv"), 3)[0].reshape(d, len(pg))
        K = None
        if os.path.exists(os.path.join(directory, "K.csv")):
            K = table(read("K.csv"), 4)[0].reshape(d, len(pg), len(pg))
        alpha0 = table(read("alpha0.csv"), 2)[0]
        return cls(phi, L, Kd, K, alpha0, pg, summary["cutoff"], summary.get("diagnostics", {}))


def calibrate(ms, cutoff: float = DEFAULT_CUTOFF, smoothed=None, full_K: bool = True,
              ridge: float = 0.0) -> KernelSet:
    """Full route: Hawkes kernel, then price kernels, then the base rate."""
    phi = solve_hawkes(ms.chi_nn, ms.Lambda, ms.hawkes_grid, ridge=ridge)
    chi_np = smoothed.chi_np if smoothed is not None else ms.chi_np
    chi_np2 = smoothed.chi_np2 if smoothed is not None else ms.chi_np2
    chi_pp = smoothed.chi_p2p2 if smoothed is not None else ms.chi_p2p2
    pk = solve_L_Kd(chi_np, chi_np2, chi_pp, ms.Delta2, ms.Delta3, ms.Delta4, phi,
                    ms.price_grid, ridge=ridge)
    K = solve_full_K(ms.chi_npp, phi, ms.Delta2, ms.price_grid) if full_K else None
    kd_norms = quad_integrate(pk.K_d, ms.price_grid, cutoff)
    alpha0 = solve_base_rate(ms.Lambda, phi, kd_norms, ms.Delta2, cutoff)
    pn = phi.norms(cutoff)
    diag = {
        "hawkes_condition": phi.condition,
        "hawkes_residual": phi.residual,
        "price_condition": pk.condition,
        "price_residual": pk.residual,
        "decoupling": decoupling_diagnostic(pn, kd_norms, ms.Lambda, ms.Delta2),
        "negative_alpha0": [int(i) for i in np.flatnonzero(alpha0 < 0)],
        "negative_phi_norms": int(np.sum(pn < -0.02)),
        "alpha0_over_Lambda": {str(c): (solve_base_rate(
            ms.Lambda, phi, quad_integrate(pk.K_d, ms.price_grid, c), ms.Delta2, c)
            / ms.Lambda).tolist() for c in (10.0, 100.0, 1000.0)},
    }
    return KernelSet(phi, pk.L, pk.K_d, K, alpha0, ms.price_grid, cutoff, diag)
