"""Fully discrete one-step DG update: CFL bound, Rusanov fluxes, volume and
surface terms, and the mortar rule for nonconforming (level-jump) faces.

All quantities here are normalized so that a candidate reads

    u_new = u - sum_axes (dt/dx_axis) * (surface_axis - volume_axis)

with face fluxes entering as TIME-AVERAGED tables (the dt factor is explicit
in the update). Nonconforming faces use the fine sub-faces as master: one
shared flux per sub-face, so conservation across the face is exact to
roundoff by construction.
"""

from __future__ import annotations

import numpy as np

from .basis import BasisTables, apply_axis


def cfl_bound(system, dofs: np.ndarray, tables: BasisTables, h: float, cfl: float) -> np.ndarray:
    """Per-cell timestep bound cfl * h / (d (2N+1) |lambda_max|).

    dofs: batch of nodal solutions; the cell signal speed is the max over its
    nodes. h is the (smallest) cell edge length.
    """
    lam = system.max_signal_speed(dofs)
    lam = lam.max(axis=tuple(range(1, lam.ndim)))
    denom = tables.dim * (2 * tables.n_degree + 1)
    return cfl * h / (denom * lam)


def rusanov(system, qm: np.ndarray, qp: np.ndarray, axis: int) -> np.ndarray:
    """Local Lax-Friedrichs flux between left (qm) and right (qp) trace tables.

    Inadmissible trace states yield NaN entries rather than raising; the a
    posteriori detector downstream treats non-finite candidates as troubled.
    """
    with np.errstate(all="ignore"):
        fm, sm = system.flux_speed(qm, axis)
        fp, sp = system.flux_speed(qp, axis)
        s = np.maximum(sm, sp)
        return 0.5 * (fm + fp) - 0.5 * s[..., None] * (qp - qm)


def time_avg(table: np.ndarray, tables: BasisTables) -> np.ndarray:
    """Integrate a (..., nt, nvar) face table over the unit time interval."""
    return np.einsum("a,...av->...v", tables.weights, table)


def lift(gbar: np.ndarray, tables: BasisTables, axis: int, side: int) -> np.ndarray:
    """Surface contribution of a time-averaged face flux onto the cell DOFs.

    gbar: (nc, nvar) for d=1 faces, (nc, n1, nvar) for d=2 (values at the face
    nodes of the perpendicular axis). Returned with full DOF shape; the caller
    applies the (dt/dx) scaling and the outward-normal sign (+ for the upper
    face, - for the lower face).
    """
    phi = (tables.phi1 if side else tables.phi0) / tables.weights
    if tables.dim == 1:
        return phi[None, :, None] * gbar[:, None, :]
    if axis == 0:
        return phi[None, :, None, None] * gbar[:, None, :, :]
    return phi[None, None, :, None] * gbar[:, :, None, :]


def volume(qhat: np.ndarray, system, tables: BasisTables, k) -> np.ndarray:
    """Volume term sum_axes (dt/dx_axis) * M^-1 K^T F_axis(q), from the
    space-time predictor, already scaled by (dt/dx) per axis."""
    k = np.atleast_1d(np.asarray(k, dtype=float))
    if tables.dim == 1:
        f = time_avg(system.flux(qhat, 0), tables)
        return k[0] * apply_axis(tables.kxi, f, 1)
    fx, fy = system.flux_pair(qhat)
    return (k[0] * apply_axis(tables.kxi, time_avg(fx, tables), 1)
            + k[1] * apply_axis(tables.kxi, time_avg(fy, tables), 2))


def surface_pair(system, tables: BasisTables, trace_m: np.ndarray, trace_p: np.ndarray, axis: int) -> np.ndarray:
    """Time-averaged Rusanov flux of two face trace tables."""
    return time_avg(rusanov(system, trace_m, trace_p, axis), tables)


def candidate_update(dofs: np.ndarray, qhat: np.ndarray, neighbor_traces: dict,
                     system, tables: BasisTables, dx, dt: float) -> np.ndarray:
    """One-step DG candidate for a batch of cells given neighbor face traces.

    neighbor_traces maps (axis, side) to the neighbor trace table on that face
    (side 0: neighbor below, its upper trace; side 1: neighbor above, its
    lower trace). Missing faces are a contract violation.
    """
    from .predictor import face_trace

    d = tables.dim
    scale = np.atleast_1d(np.asarray(dx, dtype=float))
    k = [dt / scale[a] for a in range(d)]
    delta = -volume(qhat, system, tables, k)
    for a in range(d):
        for side in (0, 1):
            if (a, side) not in neighbor_traces:
                raise KeyError(f"missing neighbor predictor on face (axis={a}, side={side})")
            own = face_trace(qhat, tables, a, side)
            other = neighbor_traces[(a, side)]
            if side == 1:
                gbar = surface_pair(system, tables, own, other, a)
                delta += k[a] * lift(gbar, tables, a, 1)
            else:
                gbar = surface_pair(system, tables, other, own, a)
                delta -= k[a] * lift(gbar, tables, a, 0)
    return dofs - delta


def face_flux_nonconforming(system, tables: BasisTables, coarse_trace: np.ndarray,
                            fine_traces: list, axis: int, fine_on_low_side: bool,
                            rfactor: int):
    """Mortar fluxes across a level jump (|delta level| = 1 only).

    coarse_trace: (n1, nt, nvar) trace of the coarse cell on the shared face,
    already restricted in time to the sub-interval being integrated.
    fine_traces: r tables (n1, nt, nvar), one per fine sub-face, ordered by
    lateral offset. Fine faces are the quadrature masters: each sub-face flux
    is computed on the fine nodes against the coarse trace evaluated at mapped
    points, and the coarse cell receives the sum of the sub-face integrals.

    Returns (sub_fluxes, coarse_equiv): the per-sub-face Rusanov tables (fine
    side consumes them directly) and the equivalent time-averaged nodal
    profile for the coarse face, normalized so that lift() with the coarse
    cell geometry applies unchanged.
    """
    if len(fine_traces) != rfactor:
        raise ValueError("level jump greater than one across a face")
    n1 = tables.n1
    sub_fluxes = []
    accum = np.zeros((n1,) + fine_traces[0].shape[-1:])
    for off in range(rfactor):
        emat = tables.child_eval(rfactor, off)
        mapped = apply_axis(emat, coarse_trace, axis=0)
        if fine_on_low_side:
            g = rusanov(system, fine_traces[off], mapped, axis)
        else:
            g = rusanov(system, mapped, fine_traces[off], axis)
        sub_fluxes.append(g)
        gbar = time_avg(g, tables)
        accum += emat.T @ (tables.weights[:, None] * gbar)
    coarse_equiv = accum / (rfactor * tables.weights[:, None])
    return sub_fluxes, coarse_equiv
