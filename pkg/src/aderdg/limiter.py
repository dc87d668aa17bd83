"""A posteriori sub-cell limiter: detection, scatter/gather, WENO3, and the
sub-grid ADER finite-volume step.

Detection combines two independent criteria evaluated on a fixed sample set
(tensor quadrature nodes plus an equidistant lattice including corners):
physical admissibility of the candidate and a relaxed discrete maximum
principle against the Voronoi neighborhood at the previous time level,
with relaxation delta = max(delta0, eps * (max - min)).

Troubled cells are recomputed on a (2N+1)^d sub-grid with a third-order
ADER-WENO finite-volume scheme whose time step equals the main-grid DG step
(the sub-grid size makes both CFL limits coincide). The reconstruction is the
symmetrized dimension-by-dimension WENO (average of the x-then-y and y-then-x
sweeps) so that mirrored data produces exactly mirrored reconstructions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import predictor
from .basis import BasisTables, apply_axis, build_tables
from .corrector import rusanov, time_avg

WENO_EPS = 1e-14
WENO_POWER = 4
WENO_LINEAR_CENTER = 100.0
WENO_LINEAR_SIDE = 1.0

_sub_tables: dict[int, BasisTables] = {}


def sub_grid_tables(dim: int) -> BasisTables:
    """Degree-2 tables used by the sub-grid predictor (one per dimension)."""
    if dim not in _sub_tables:
        _sub_tables[dim] = build_tables(2, dim)
    return _sub_tables[dim]


class SubgridDataError(RuntimeError):
    """Sub-grid input averages are inadmissible; the scheme cannot continue."""


@dataclass(frozen=True)
class LimiterParams:
    """Relaxed-DMP parameters; delta0 and eps are the recommended values."""

    delta0: float = 1e-4
    eps: float = 1e-3
    dmp_vars: tuple | None = None  # per-variable toggle; None = all variables

    def var_mask(self, nvars: int) -> np.ndarray:
        if self.dmp_vars is None:
            return np.ones(nvars, dtype=bool)
        return np.asarray(self.dmp_vars, dtype=bool)


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

def sample_states(dofs: np.ndarray, tables: BasisTables) -> np.ndarray:
    """Polynomial values on the detection sample set, flattened per cell."""
    vals = apply_axis(tables.sample_mat, dofs, -2)
    if tables.dim == 2:
        vals = apply_axis(tables.sample_mat, vals, -3)
        vals = vals.reshape(vals.shape[:-3] + (-1, vals.shape[-1]))
    return vals


def sample_minmax(dofs: np.ndarray, tables: BasisTables):
    """Per-variable (min, max) of the polynomial over the sample set."""
    vals = sample_states(dofs, tables)
    return vals.min(axis=-2), vals.max(axis=-2)


def dmp_bounds(own_dofs: np.ndarray, neighbor_dofs: list, params: LimiterParams,
               tables: BasisTables):
    """Relaxed DMP bounds from the cell and its Voronoi neighbors at t^n.

    Returns (lo, hi) arrays of shape (nvar,). The neighbor list must contain
    at least the cell itself.
    """
    if len(neighbor_dofs) == 0:
        raise ValueError("empty Voronoi neighborhood")
    mins, maxs = sample_minmax(own_dofs[None], tables)
    lo, hi = mins[0], maxs[0]
    for nb in neighbor_dofs:
        m, M = sample_minmax(nb[None], tables)
        lo = np.minimum(lo, m[0])
        hi = np.maximum(hi, M[0])
    delta = np.maximum(params.delta0, params.eps * (hi - lo))
    return lo - delta, hi + delta


def relax_bounds(lo: np.ndarray, hi: np.ndarray, params: LimiterParams):
    """Apply delta = max(delta0, eps*(hi-lo)) to raw min/max arrays."""
    delta = np.maximum(params.delta0, params.eps * (hi - lo))
    return lo - delta, hi + delta


def detect(candidate: np.ndarray, bounds, system, tables: BasisTables,
           params: LimiterParams, predictor_failed: bool = False) -> int:
    """Limiter status beta for one candidate: 1 = troubled, 0 = accepted.

    Never raises; the two criteria (positivity, relaxed DMP) are independent.
    """
    if predictor_failed:
        return 1
    vals = sample_states(candidate[None], tables)[0]
    if not np.all(np.isfinite(vals)):
        return 1
    if not np.all(system.admissible(vals)):
        return 1
    lo, hi = bounds
    mask = params.var_mask(vals.shape[-1])
    vmin = vals.min(axis=0)
    vmax = vals.max(axis=0)
    if np.any((vmin < lo) & mask) or np.any((vmax > hi) & mask):
        return 1
    return 0


# ---------------------------------------------------------------------------
# Scatter / gather
# ---------------------------------------------------------------------------

def scatter(dofs: np.ndarray, tables: BasisTables) -> np.ndarray:
    """L2 projection of the DG polynomial onto (2N+1)^d sub-cell averages."""
    out = apply_axis(tables.scatter1, dofs, -2)
    if tables.dim == 2:
        out = apply_axis(tables.scatter1, out, -3)
    return out


def gather(subs: np.ndarray, tables: BasisTables) -> np.ndarray:
    """Constrained least-squares reconstruction of DG DOFs from sub-averages.

    gather(scatter(u)) == u for degree-N data; the cell mean is preserved
    exactly for arbitrary averages.
    """
    out = apply_axis(tables.gather1, subs, -2)
    if tables.dim == 2:
        out = apply_axis(tables.gather1, out, -3)
    return out


# ---------------------------------------------------------------------------
# WENO3 reconstruction on the sub-grid
# ---------------------------------------------------------------------------

def weno3_nodal(vm: np.ndarray, v0: np.ndarray, vp: np.ndarray,
                tables2: BasisTables) -> np.ndarray:
    """Third-order CWENO value table from a 3-average window.

    One central degree-2 stencil and two one-sided degree-1 stencils with
    linear weights 100/1/1 (normalized), eps 1e-14, power 4 and Jiang-Shu
    smoothness measures. The central polynomial is the rescaled
    (parabola - sum of side polynomials) / central weight, so the smooth-case
    blend reproduces the full parabola exactly (third order, no clipping of
    extrema). Returns the blend at the 3 Gauss points of the center sub-cell,
    shape (..., 3); conserves the center average and is exact on linear data.
    """
    lam_sum = WENO_LINEAR_CENTER + 2.0 * WENO_LINEAR_SIDE
    lam_c = WENO_LINEAR_CENTER / lam_sum
    lam_s = WENO_LINEAR_SIDE / lam_sum
    # Optimal parabola matching all three averages, in powers of (xi - 1/2).
    b_opt = 0.5 * (vp - vm)
    c_opt = 0.5 * (vm - 2.0 * v0 + vp)
    a_opt = v0 - c_opt / 12.0
    # One-sided linear stencils.
    bl = v0 - vm
    br = vp - v0
    # Rescaled central polynomial: lam_c*pc + lam_s*(pl + pr) == parabola.
    ac = (a_opt - 2.0 * lam_s * v0) / lam_c
    bc = (b_opt - lam_s * (bl + br)) / lam_c
    cc = c_opt / lam_c
    si_c = b_opt * b_opt + (13.0 / 3.0) * (c_opt * c_opt)
    si_l = bl * bl
    si_r = br * br
    wc = lam_c / (si_c + WENO_EPS) ** WENO_POWER
    wl = lam_s / (si_l + WENO_EPS) ** WENO_POWER
    wr = lam_s / (si_r + WENO_EPS) ** WENO_POWER
    den = wc + (wl + wr)
    wc, wl, wr = wc / den, wl / den, wr / den
    a = wc * ac + (wl + wr) * v0
    b = wc * bc + (wl * bl + wr * br)
    c = wc * cc
    t = tables2.nodes - 0.5
    vals = a[..., None] + b[..., None] * t + c[..., None] * (t * t)
    return vals


def _parabola_right(v0, v1, v2):
    """Parabola matching cell averages over [0,1], [1,2], [2,3], coefficients
    in powers of (xi - 1/2): returns (a, b, c)."""
    c = 0.5 * (v0 - 2.0 * v1 + v2)
    b = 0.5 * (-3.0 * v0 + 4.0 * v1 - v2)
    a = v0 - c / 12.0
    return a, b, c


def weno3_nodal5(vmm, vm, v0, vp, vpp, tables2: BasisTables) -> np.ndarray:
    """Equal-degree WENO3 from a 5-average window (sub-grid FV reconstruction).

    Three 3-cell parabola stencils (left/central/right) blended with linear
    weights 1/100/1, eps 1e-14, power 4 and Jiang-Shu indicators. Every
    stencil is third-order accurate on smooth data, so the blend keeps design
    order regardless of the nonlinear weights (no critical-point order loss);
    near jumps the smooth-sided stencil takes over. Conserves the center
    average; exact on quadratic data.
    """
    ar, br, cr = _parabola_right(v0, vp, vpp)
    am, bm, cm = _parabola_right(v0, vm, vmm)  # mirrored window
    al, bl, cl = am, -bm, cm
    bc = 0.5 * (vp - vm)
    cc = 0.5 * (vm - 2.0 * v0 + vp)
    ac = v0 - cc / 12.0
    si_c = bc * bc + (13.0 / 3.0) * (cc * cc)
    si_l = bl * bl + (13.0 / 3.0) * (cl * cl)
    si_r = br * br + (13.0 / 3.0) * (cr * cr)
    wc = WENO_LINEAR_CENTER / (si_c + WENO_EPS) ** WENO_POWER
    wl = WENO_LINEAR_SIDE / (si_l + WENO_EPS) ** WENO_POWER
    wr = WENO_LINEAR_SIDE / (si_r + WENO_EPS) ** WENO_POWER
    den = wc + (wl + wr)
    wc, wl, wr = wc / den, wl / den, wr / den
    a = wc * ac + (wl * al + wr * ar)
    b = wc * bc + (wl * bl + wr * br)
    c = wc * cc + (wl * cl + wr * cr)
    t = tables2.nodes - 0.5
    return a[..., None] + b[..., None] * t + c[..., None] * (t * t)


def _recon_last(arr: np.ndarray, tables2: BasisTables) -> np.ndarray:
    """Sub-grid WENO3 along the second-to-last axis (cells), nvar last.

    arr: (..., n, nvar) -> (..., n-4, 3, nvar) nodal values per window center.
    """
    vmm = arr[..., :-4, :]
    vm = arr[..., 1:-3, :]
    v0 = arr[..., 2:-2, :]
    vp = arr[..., 3:-1, :]
    vpp = arr[..., 4:, :]
    vals = weno3_nodal5(vmm, vm, v0, vp, vpp, tables2)  # (..., n-4, nvar, 3)
    return np.moveaxis(vals, -1, -2)


def reconstruct_1d(v_ext: np.ndarray, tables2: BasisTables) -> np.ndarray:
    """1D sweep: (..., n, nvar) averages -> (..., n-4, 3, nvar) nodal."""
    return _recon_last(v_ext, tables2)


def reconstruct_2d(v_ext: np.ndarray, tables2: BasisTables) -> np.ndarray:
    """Symmetrized dimension-by-dimension WENO3 in 2D.

    v_ext: (nb, Ex, Ey, nvar) -> (nb, Ex-4, Ey-4, 3, 3, nvar) with node axes
    (x-node, y-node). The average of the two sweep orders commutes with the
    x<->y transpose exactly, preserving mirror symmetry through the limiter.
    """
    # x then y
    rx = _recon_last(np.moveaxis(v_ext, 1, -2), tables2)        # (nb, Ey, Ex-4, 3x, nv)
    rxy = _recon_last(np.moveaxis(rx, 1, -2), tables2)          # (nb, Ex-4, 3x, Ey-4, 3y, nv)
    a = np.swapaxes(rxy, 2, 3)                                  # (nb, Ex-4, Ey-4, 3x, 3y, nv)
    # y then x
    ry = _recon_last(v_ext, tables2)                            # (nb, Ex, Ey-4, 3y, nv)
    ryx = _recon_last(np.moveaxis(ry, 1, -2), tables2)          # (nb, Ey-4, 3y, Ex-4, 3x, nv)
    b = np.transpose(ryx, (0, 3, 1, 4, 2, 5))                   # (nb, Ex-4, Ey-4, 3x, 3y, nv)
    return 0.5 * (a + b)


# ---------------------------------------------------------------------------
# Sub-grid ADER-WENO finite-volume step
# ---------------------------------------------------------------------------

def _sub_predict(nodal: np.ndarray, averages: np.ndarray, system,
                 tables2: BasisTables, h_sub, dt: float):
    """Degree-2 space-time predictors for a flat batch of sub-cells.

    Sub-cells whose reconstruction or predictor is inadmissible anywhere the
    flux will be evaluated (space-time nodes AND the face traces feeding the
    Riemann solver) fall back to the constant space-time extension of their
    average, which is admissible whenever the averages are.
    Returns (qhat, n_fallback).
    """
    qhat, ok, _ = predictor.predict(nodal, system, tables2, h_sub, dt)
    if np.all(ok):
        return qhat, 0
    bad = ~ok
    const = averages[bad]
    if not np.all(system.admissible(const)):
        raise SubgridDataError("inadmissible sub-cell average fed to the sub-grid scheme")
    shape = qhat.shape[1:]
    qhat[bad] = const[(slice(None),) + (None,) * (len(shape) - 1)]
    return qhat, int(bad.sum())


def subcell_fv_step_1d(v_ext: np.ndarray, system, dt: float, h_sub: float,
                       override_lo=None, override_hi=None):
    """One ADER-WENO3 FV step on a 1D sub-grid.

    v_ext: (nb, Ns+6, nvar) averages with three ghost layers per side. Returns
    (v_new (nb, Ns, nvar), gbar (nb, Ns+1, nvar) time-averaged face fluxes,
    n_fallback). override_lo/hi replace the outermost face fluxes (used when a
    cell boundary must consume an externally fixed flux).
    """
    tables2 = sub_grid_tables(1)
    nb, ext, nv = v_ext.shape
    ns = ext - 6
    nodal = reconstruct_1d(v_ext, tables2)          # (nb, Ns+2, 3, nv)
    flat = nodal.reshape(-1, 3, nv)
    avgs = v_ext[:, 2:-2, :].reshape(-1, nv)
    qhat, nfb = _sub_predict(flat, avgs, system, tables2, h_sub, dt)
    qhat = qhat.reshape(nb, ns + 2, 3, 3, nv)
    tr0 = np.tensordot(qhat, tables2.phi0, axes=([2], [0]))  # (nb, Ns+2, 3t, nv)
    tr1 = np.tensordot(qhat, tables2.phi1, axes=([2], [0]))
    g = rusanov(system, tr1[:, :-1], tr0[:, 1:], 0)          # (nb, Ns+1, 3t, nv)
    gbar = time_avg(g, tables2)
    if override_lo is not None:
        gbar[:, 0] = override_lo
    if override_hi is not None:
        gbar[:, -1] = override_hi
    v_new = v_ext[:, 3:-3, :] - (dt / h_sub) * (gbar[:, 1:] - gbar[:, :-1])
    return v_new, gbar, nfb


def _xfaces_from_qhat(qhat: np.ndarray, system, tables2: BasisTables) -> np.ndarray:
    """Time- and face-averaged Rusanov fluxes through the x faces of a
    reconstructed sub-grid batch qhat (nb, Cx, Cy, 3x, 3y, 3t, nv); fluxes are
    returned for faces between consecutive x cells at interior y rows."""
    q = qhat[:, :, 1:-1]
    tr0 = np.tensordot(q, tables2.phi0, axes=([3], [0]))     # (nb, Cx, Ns, 3y, 3t, nv)
    tr1 = np.tensordot(q, tables2.phi1, axes=([3], [0]))
    g = rusanov(system, tr1[:, :-1], tr0[:, 1:], 0)          # (nb, Cx-1, Ns, 3y, 3t, nv)
    return np.einsum("j,a,cfgjav->cfgv", tables2.weights, tables2.weights, g)


def subcell_fv_fluxes_2d(v_ext: np.ndarray, system, dt: float, h_sub):
    """Reconstruction, sub-predictors and all face fluxes of a 2D sub-grid
    batch; v_ext is (nb, Ns+6, Ns+6, nvar) with three ghost layers per side.

    Returns (gx (nb, Ns+1, Ns, nvar), gy (nb, Ns, Ns+1, nvar), n_fallback):
    time-averaged fluxes through the x and y faces bordering interior
    sub-cells. The y fluxes run through the x kernel on xy-mirrored data, so
    mirrored inputs give bitwise mirrored fluxes.
    """
    tables2 = sub_grid_tables(2)
    nb, ext, _, nv = v_ext.shape
    ns = ext - 6
    hx, hy = (h_sub, h_sub) if np.isscalar(h_sub) else h_sub
    nodal = reconstruct_2d(v_ext, tables2)          # (nb, Ns+2, Ns+2, 3, 3, nv)
    flat = nodal.reshape(-1, 3, 3, nv)
    avgs = v_ext[:, 2:-2, 2:-2, :].reshape(-1, nv)
    qhat, nfb = _sub_predict(flat, avgs, system, tables2, (hx, hy), dt)
    qhat = qhat.reshape(nb, ns + 2, ns + 2, 3, 3, 3, nv)
    gx = _xfaces_from_qhat(qhat, system, tables2)    # (nb, Ns+1, Ns, nv)
    sys_t, perm = system.xy_swapped()
    qm = np.swapaxes(np.swapaxes(qhat, 1, 2), 3, 4)[..., perm]
    gy = _xfaces_from_qhat(qm, sys_t, tables2)[..., perm]
    gy = np.swapaxes(gy, 1, 2)                       # (nb, Ns, Ns+1, nv)
    return gx, gy, nfb


def subcell_fv_update_2d(v_ext: np.ndarray, gx: np.ndarray, gy: np.ndarray,
                         dt: float, h_sub):
    """Conservative FV update of the interior sub-averages from face fluxes.

    Returns (v_new (nb, Ns, Ns, nvar), outer flux dict keyed by (axis, side))
    so callers can ledger exactly what crossed the cell boundary.
    """
    hx, hy = (h_sub, h_sub) if np.isscalar(h_sub) else h_sub
    v0 = v_ext[:, 3:-3, 3:-3, :]
    dx_term = (dt / hx) * (gx[:, 1:] - gx[:, :-1])
    dy_term = (dt / hy) * (gy[:, :, 1:] - gy[:, :, :-1])
    v_new = v0 - (dx_term + dy_term)
    outer = {
        (0, 0): gx[:, 0], (0, 1): gx[:, -1],
        (1, 0): gy[:, :, 0], (1, 1): gy[:, :, -1],
    }
    return v_new, outer


def subcell_fv_step_2d(v_ext: np.ndarray, system, dt: float, h_sub,
                       overrides: dict | None = None):
    """One ADER-WENO3 FV step on a 2D sub-grid (fluxes then update).

    overrides maps (axis, side) to (nb, Ns, nvar) arrays of time-averaged
    fluxes imposed on the outer faces (used for level-jump faces that keep
    the mortar DG flux). Returns (v_new, outer flux dict, n_fallback).
    """
    gx, gy, nfb = subcell_fv_fluxes_2d(v_ext, system, dt, h_sub)
    if overrides:
        if (0, 0) in overrides:
            gx[:, 0] = overrides[(0, 0)]
        if (0, 1) in overrides:
            gx[:, -1] = overrides[(0, 1)]
        if (1, 0) in overrides:
            gy[:, :, 0] = overrides[(1, 0)]
        if (1, 1) in overrides:
            gy[:, :, -1] = overrides[(1, 1)]
    v_new, outer = subcell_fv_update_2d(v_ext, gx, gy, dt, h_sub)
    return v_new, outer, nfb
