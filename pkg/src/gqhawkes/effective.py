"""Resolvent, effective kernels and the rank-one (Zumbach) factorization.

Effective kernels absorb every Hawkes-propagated descendant of a price
move: ``Lbar = (delta + R) * L`` and ``Kbar = (delta + R) * K`` with the
resolvent ``R = sum_{n>=1} phi^{*n}``. They solve the moment equations
stripped of their Hawkes convolution terms.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import median_filter
from scipy.optimize import minimize

from .calibrate import (DEFAULT_CUTOFF, HawkesKernel, PriceKernels, solve_L_Kd,
                        spectral_radius)
from .errors import ConfigError, DataError, NumericalError
from .grids import TimeGrid, convolution_matrix, quad_integrate, sampled


# ---------------------------------------------------------------------------
# resolvent


@dataclass
class Resolvent:
    values: np.ndarray        # (d, d, n) on the Hawkes grid
    grid: TimeGrid
    order: int

    def norms(self, cutoff: float | None = None) -> np.ndarray:
        return quad_integrate(self.values, self.grid, cutoff)


def causal_convolution_matrix(grid: TimeGrid, g_values: np.ndarray) -> np.ndarray:
    """Matrix of ``f -> int_0^t g(t - s) f(s) ds`` on ``grid``, mass-conserving.

    Each column is rescaled so that the quadrature norm of the output equals
    the product of the input norms, up to the part of the output pushed
    beyond the last grid point. This keeps norm identities such as
    ``||phi * f|| = ||phi|| ||f||`` exact on the grid.
    """
    pts = grid.points
    C = convolution_matrix(pts, sampled(grid, g_values), pts, g_points=pts)
    w = grid.weights
    target = np.array([w[n] * (grid.clipped_weights(pts[-1] - pts[n] + grid.origin) @ g_values)
                       for n in range(pts.size)])
    have = w @ C
    ok = np.abs(have) > 0.5 * np.abs(target)
    scale = np.where(ok & (have != 0), target / np.where(have == 0, 1.0, have), 1.0)
    return C * scale[None, :]


def resolvent(phi: HawkesKernel, tol: float = 1e-6, n_max: int = 10_000) -> Resolvent:
    """Partial sums of ``phi^{*n}`` until the added term is below ``tol`` (relative)."""
    rho = spectral_radius(phi, cutoff=None)
    if rho >= 1:
        raise NumericalError(f"resolvent series diverges: spectral radius {rho:.4g} >= 1")
    d, _, n = phi.values.shape
    grid = phi.grid
    conv = [[causal_convolution_matrix(grid, phi.values[i, k]) for k in range(d)]
            for i in range(d)]
    R = phi.values.copy()
    term = phi.values.copy()
    order = 1
    if not np.any(R):
        return Resolvent(R, grid, 0)
    while True:
        new = np.zeros_like(term)
        for i in range(d):
            for j in range(d):
                for k in range(d):
                    new[i, j] += conv[i][k] @ term[k, j]
        term = new
        R += term
        order += 1
        size = np.max(quad_integrate(np.abs(term), grid))
        scale = max(np.max(quad_integrate(np.abs(R), grid)), 1e-300)
        if size <= tol * scale:
            break
        if order >= n_max:
            raise NumericalError(f"resolvent not converged after {n_max} terms "
                                 f"(last relative term {size / scale:.3g})")
    return Resolvent(R, grid, order)


# ---------------------------------------------------------------------------
# effective kernels


def solve_effective_L_Kd(chi_np, chi_np2, chi_p2p2, Delta2, Delta3, Delta4,
                         price_grid: TimeGrid, ridge: float = 0.0) -> PriceKernels:
    """Effective ``Lbar`` and ``Kbar_d``: the price-kernel equations without Hawkes terms."""
    return solve_L_Kd(chi_np, chi_np2, chi_p2p2, Delta2, Delta3, Delta4, None, price_grid, ridge)


def effective_K(chi_npp, Delta2: float) -> np.ndarray:
    """``Kbar = chi_NPP / (2 Delta2^2)``, symmetrized."""
    if Delta2 <= 0:
        raise DataError("Delta2 must be positive")
    K = np.asarray(chi_npp, dtype=float) / (2.0 * Delta2 ** 2)
    return 0.5 * (K + np.swapaxes(K, -1, -2))


def with_diagonal(surface: np.ndarray, diagonal: np.ndarray) -> np.ndarray:
    """Copy of ``surface`` whose diagonal is replaced by ``diagonal`` (per type)."""
    out = np.array(surface, dtype=float, copy=True)
    idx = np.arange(out.shape[-1])
    out[..., idx, idx] = diagonal
    return out


# ---------------------------------------------------------------------------
# weighted rank-one factorization


def _offdiag_objective(M, v, s):
    E = M - s * np.outer(v, v)
    np.fill_diagonal(E, 0.0)
    return float(np.sum(E * E))


def _em_rank_one(M, v0, s0, max_iter, tol):
    """Fill-in iteration: replace the missing diagonal by the model, take the top eigenpair."""
    v, s = v0.copy(), s0
    history = [_offdiag_objective(M, v, s)]
    for _ in range(max_iter):
        F = M.copy()
        np.fill_diagonal(F, s * v * v)
        evals, evecs = np.linalg.eigh(F)
        k = int(np.argmax(np.abs(evals)))
        lam = evals[k]
        s = 1.0 if lam >= 0 else -1.0
        v = np.sqrt(abs(lam)) * evecs[:, k]
        history.append(_offdiag_objective(M, v, s))
        if abs(history[-2] - history[-1]) <= tol * max(history[-2], 1e-300):
            break
    return v, s, history


def _objective(M, s):
    """Off-diagonal loss at fixed sign with its gradient and Hessian."""
    mask = 1.0 - np.eye(M.shape[0])

    def fun(x):
        E = (M - s * np.outer(x, x)) * mask
        return float(np.sum(E * E))

    def jac(x):
        E = (M - s * np.outer(x, x)) * mask
        return -4.0 * s * (E @ x)

    def hess(x):
        E = (M - s * np.outer(x, x)) * mask
        H = -4.0 * s * E
        H += 4.0 * (np.outer(x, x) * mask)
        H += 4.0 * np.diag((x * x) @ mask)
        return H

    return fun, jac, hess


def _descend(M, v, s, maxiter=500):
    """Cheap quasi-Newton descent used to move random starts into a basin."""
    fun, jac, _ = _objective(M, s)
    res = minimize(fun, v, jac=jac, method="L-BFGS-B", options={"maxiter": maxiter})
    return res.x, float(res.fun)


def _polish(M, v, s, gtol=1e-12, maxiter=500):
    """Newton (trust-region) refinement of ``sum_{m!=n} (M - s v v^T)^2`` at fixed sign."""
    fun, jac, hess = _objective(M, s)
    res = minimize(fun, v, jac=jac, hess=hess, method="trust-exact",
                   options={"gtol": gtol, "maxiter": maxiter})
    return res.x, float(res.fun), float(np.linalg.norm(jac(res.x)))


def weighted_rank_one(K: np.ndarray, weights: np.ndarray, max_iter: int = 500,
                      tol: float = 1e-10, n_starts: int = 4, n_random: int = 8):
    """Minimize ``sum_{m != n} w_m w_n (K_mn - c z_m z_n)^2`` over ``(c, z)``.

    Returns ``(c, z, objective, info)`` with ``z`` normalized to
    ``sum w z^2 = 1``. The sign of ``c`` is free. Starting points are the
    leading eigenvectors (both signs of eigenvalue) of the weighted
    off-diagonal matrix; each start runs the fill-in iteration and is then
    polished by Newton steps. ``n_random`` further seeded random starts per
    sign go straight to the Newton polish, since the objective can have
    several local minima.
    """
    K = np.asarray(K, dtype=float)
    w = np.asarray(weights, dtype=float)
    n = K.shape[0]
    if K.shape != (n, n) or w.shape != (n,):
        raise DataError("surface must be square and aligned with the weights")
    if np.any(w <= 0):
        raise DataError("weights must be positive")
    sw = np.sqrt(w)
    M = sw[:, None] * K * sw[None, :]
    np.fill_diagonal(M, 0.0)
    M = 0.5 * (M + M.T)
    scale = float(np.max(np.abs(M)))
    if scale == 0.0:
        return 0.0, np.ones(n) / np.sqrt(np.sum(w)), 0.0, {"starts": 0, "history": [0.0],
                                                            "grad_norm": 0.0}
    Mn = M / scale
    evals, evecs = np.linalg.eigh(Mn)
    order = np.argsort(-np.abs(evals))
    starts = []
    for k in order[:n_starts]:
        starts.append((np.sqrt(abs(evals[k])) * evecs[:, k], 1.0 if evals[k] >= 0 else -1.0))
    k_pos, k_neg = int(np.argmax(evals)), int(np.argmin(evals))
    for k in (k_pos, k_neg):
        if evals[k] != 0:
            starts.append((np.sqrt(abs(evals[k])) * evecs[:, k], 1.0 if evals[k] > 0 else -1.0))
    starts = [_em_rank_one(Mn, v0, s0, max_iter, tol) for v0, s0 in starts]
    rng = np.random.default_rng(0)
    for s0 in (1.0, -1.0):
        cand = []
        for _ in range(n_random):
            v0 = rng.normal(size=n) / np.sqrt(n)
            v, f = _descend(Mn, v0, s0)
            if np.all(np.isfinite(v)) and np.max(np.abs(v)) < 1e3:
                cand.append((f, v, [_offdiag_objective(Mn, v0, s0), f]))
        # only the two lowest basins per sign are worth a Newton polish
        cand.sort(key=lambda c: c[0])
        starts += [(v, s0, hist) for _, v, hist in cand[:2]]
    best = None
    stuck = None
    for v, s, hist in starts:
        v, f, g = _polish(Mn, v, s)
        if g > 1e-6 * max(1.0, np.sqrt(f)) and not np.max(np.abs(v)) < 1e2:
            # no stationary point along this start: the factor runs off to
            # infinity. (A bounded factor with a larger gradient is a flat
            # valley where Newton stalls; it is kept.)
            if stuck is None or f < stuck[2]:
                stuck = (v, s, f, g, hist)
            continue
        if best is None or f < best[2]:
            best = (v, s, f, g, hist)
    if best is None:
        v, s, f, g, hist = stuck
        raise NumericalError(f"rank-one fit did not converge: gradient norm {g:.3g}; "
                             f"objective history {[h * scale ** 2 for h in hist[-5:]]}")
    v, s, f, g, hist = best
    norm2 = float(np.sum(v * v))
    if norm2 == 0.0:
        return 0.0, np.ones(n) / np.sqrt(np.sum(w)), f * scale ** 2, {
            "starts": len(starts), "history": [h * scale ** 2 for h in hist], "grad_norm": g}
    y = v / np.sqrt(norm2)                  # unit vector in the weighted space
    c = s * norm2 * scale
    z = y / sw                              # sum w z^2 = 1
    info = {"starts": len(starts), "history": [h * scale ** 2 for h in hist], "grad_norm": g}
    return c, z, f * scale ** 2, info


@dataclass
class ZumbachDecomposition:
    """Per type: ``Kbar(s,u) ≈ Kbar_d psi(s) 1{s=u} + Kbar_1 Z(s) Z(u)``."""

    K_d: np.ndarray           # (d,)
    K_1: np.ndarray           # (d,)
    psi: np.ndarray           # (d, n)
    Z: np.ndarray             # (d, n)
    grid: TimeGrid
    cutoff: float
    residual: np.ndarray      # (d,) weighted off-diagonal RMS
    next_eigenvalue: np.ndarray
    negative_psi: list = field(default_factory=list)
    smoothing: str = "none"
    objective: np.ndarray = None

    @property
    def trace(self) -> np.ndarray:
        return self.K_d + self.K_1

    def reconstruct(self, i: int) -> np.ndarray:
        K = self.K_1[i] * np.outer(self.Z[i], self.Z[i])
        idx = np.arange(K.shape[0])
        K[idx, idx] += self.K_d[i] * self.psi[i]
        return K

    def strengths(self) -> dict:
        return {"cutoff": self.cutoff, "K_d": self.K_d.tolist(), "K_1": self.K_1.tolist(),
                "residual_rms": self.residual.tolist(),
                "next_eigenvalue": self.next_eigenvalue.tolist(),
                "negative_psi_nodes": self.negative_psi, "offdiag_smoothing": self.smoothing}

    def save(self, directory: str, extra: dict | None = None) -> list[str]:
        os.makedirs(directory, exist_ok=True)
        out = []
        t = self.grid.points
        for name, arr, col in (("zumbach.csv", self.Z, "Z"), ("psi.csv", self.psi, "psi")):
            path = os.path.join(directory, name)
            with open(path, "w", newline="") as fh:
                fh.write(f"i,t,{col}\n")
                for i in range(arr.shape[0]):
                    for n, tn in enumerate(t):
                        fh.write(f"{i},{float(tn)!r},{float(arr[i, n])!r}\n")
            out.append(path)
        payload = self.strengths()
        if extra:
            payload.update(extra)
        path = os.path.join(directory, "strengths.json")
        with open(path, "w") as fh:
            fh.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        out.append(path)
        return out


def zumbach_decompose(Kbar: np.ndarray, grid: TimeGrid, cutoff: float = DEFAULT_CUTOFF,
                      smooth_offdiag: bool = False, max_iter: int = 500,
                      tol: float = 1e-10) -> ZumbachDecomposition:
    """Rank-one-plus-diagonal factorization of symmetric surfaces.

    Parameters
    ----------
    Kbar : ndarray, shape (d, n, n) or (n, n)
        Symmetric surfaces whose diagonals hold the quadratic diagonal
        kernels (see :func:`with_diagonal`).
    grid : TimeGrid
        Price grid; its weights define the least-squares measure.
    cutoff : float
        Cut-off of the normalization integrals ``int psi = int Z^2 = 1``.
    smooth_offdiag : bool
        Apply a 3x3 median filter to the off-diagonal before fitting.
    """
    Kbar = np.asarray(Kbar, dtype=float)
    single = Kbar.ndim == 2
    if single:
        Kbar = Kbar[None]
    d, n, _ = Kbar.shape
    if n != len(grid):
        raise DataError("surface size does not match the grid")
    w = grid.weights
    wc = grid.clipped_weights(cutoff)
    if np.sum(wc) <= 0:
        raise ConfigError("cut-off leaves no quadrature weight")
    K_d = np.zeros(d)
    K_1 = np.zeros(d)
    psi = np.zeros((d, n))
    Z = np.zeros((d, n))
    resid = np.zeros(d)
    nxt = np.zeros(d)
    obj = np.zeros(d)
    negative = []
    idx = np.arange(n)
    for i in range(d):
        S = 0.5 * (Kbar[i] + Kbar[i].T)
        diag = S[idx, idx].copy()
        if smooth_offdiag:
            S = median_filter(S, size=3, mode="nearest")
            S = 0.5 * (S + S.T)
        c, z, f, info = weighted_rank_one(S, w, max_iter=max_iter, tol=tol)
        # normalize Z on the cut-off measure
        nz = float(np.sum(wc * z * z))
        if c != 0.0 and nz > 0:
            Zi = z / np.sqrt(nz)
            k1 = c * nz
        else:
            Zi = np.ones(n) / np.sqrt(np.sum(wc))
            k1 = 0.0
        if Zi[0] < 0:
            Zi = -Zi
        vol = diag - k1 * Zi * Zi
        kd = float(np.sum(wc * vol))
        if kd == 0.0:
            raise NumericalError(f"type {i}: no diagonal mass, volatility kernel undefined")
        K_d[i], K_1[i], Z[i], psi[i] = kd, k1, Zi, vol / kd
        neg = np.flatnonzero(psi[i] < 0)
        if neg.size:
            negative.append({"type": i, "nodes": neg.tolist()})
        sw = np.sqrt(w)
        E = S - k1 * np.outer(Zi, Zi)
        E[idx, idx] = 0.0
        resid[i] = float(np.sqrt(np.sum(np.outer(w, w) * E * E) / max(np.sum(np.outer(w, w)) - np.sum(w * w), 1e-300)))
        F = sw[:, None] * E * sw[None, :]
        ev = np.linalg.eigvalsh(F)
        nxt[i] = float(ev[np.argmax(np.abs(ev))])
        obj[i] = f
    out = ZumbachDecomposition(K_d, K_1, psi, Z, grid, cutoff, resid, nxt, negative,
                               "median3x3" if smooth_offdiag else "none", obj)
    return out


def bare_from_effective(effective_strengths, phi_norm) -> np.ndarray:
    """Map effective strengths to bare ones with ``(I - ||phi||)``.

    ``phi_norm`` is either a scalar total norm (the ``1 - ||phi||`` factor)
    or a ``d x d`` norm matrix, in which case ``K = (I - ||phi||) Kbar``
    componentwise over event types.
    """
    eff = np.asarray(effective_strengths, dtype=float)
    pn = np.asarray(phi_norm, dtype=float)
    if pn.ndim == 0:
        if pn >= 1:
            raise NumericalError("total Hawkes norm must be below one")
        return (1.0 - pn) * eff
    if spectral_radius(pn) >= 1:
        raise NumericalError("spectral radius of the Hawkes norms must be below one")
    return (np.eye(pn.shape[0]) - pn) @ eff


@dataclass
class EffectiveKernels:
    Lbar: np.ndarray
    Kbar_d: np.ndarray
    Kbar: np.ndarray | None
    grid: TimeGrid
    residual: float = 0.0
    condition: float = 1.0


def effective_kernels(ms, smoothed=None) -> EffectiveKernels:
    chi_np = smoothed.chi_np if smoothed is not None else ms.chi_np
    chi_np2 = smoothed.chi_np2 if smoothed is not None else ms.chi_np2
    chi_pp = smoothed.chi_p2p2 if smoothed is not None else ms.chi_p2p2
    pk = solve_effective_L_Kd(chi_np, chi_np2, chi_pp, ms.Delta2, ms.Delta3, ms.Delta4,
                              ms.price_grid)
    Kbar = effective_K(ms.chi_npp, ms.Delta2) if ms.with_npp else None
    return EffectiveKernels(pk.L, pk.K_d, Kbar, ms.price_grid, pk.residual, pk.condition)
