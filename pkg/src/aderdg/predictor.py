"""Element-local space-time predictor.

Solves the in-cell weak space-time problem by Picard iteration, producing for
each cell a space-time polynomial q that ignores the neighbors. The corrector
and the sub-grid finite-volume scheme both consume its face traces, so there
is a single predictor implementation with two clients (degree N on the main
grid, degree 2 on the sub-grid).

Array shapes (batch axis mandatory):
    d=1: dofs (nc, n1, nvar)        -> qhat (nc, n1, nt, nvar)
    d=2: dofs (nc, n1, n1, nvar)    -> qhat (nc, n1, n1, nt, nvar)
with nt = n1 time nodes. All iteration work shrinks to the still-unconverged
subset of the batch each sweep; constant cells drop out после one sweep.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .basis import BasisTables, apply_axis
from .systems import EulerSystem

REL_TOL = 1e-12


class PredictorFailure(RuntimeError):
    """The Picard iteration produced a non-finite or inadmissible state.

    The driver maps this to limiter activation instead of crashing.
    """


def predict(dofs: np.ndarray, system, tables: BasisTables, dx, dt: float):
    """Run the space-time predictor on a batch of cells.

    dx: cell edge lengths, scalar (d=1) or (dx, dy).
    Returns (qhat, ok, iterations): ok is False for cells whose predictor
    failed (non-finite or inadmissible space-time values); those entries are
    left as the constant-in-time extension of the input.
    """
    dofs = np.asarray(dofs, dtype=float)
    d = tables.dim
    n1 = tables.n1
    nc = dofs.shape[0]
    scale = np.atleast_1d(np.asarray(dx, dtype=float))
    k = [dt / scale[a] for a in range(d)]

    if _kernels.HAVE_NUMBA and d == 2 and type(system) is EulerSystem:
        out, ok = _kernels.euler_predict_2d(
            np.ascontiguousarray(dofs), tables.diff, tables.time_inv,
            tables.weights, tables.phi0, tables.phi1,
            k[0], k[1], system.gamma, REL_TOL, tables.n_degree + 2)
        return out, ok, tables.n_degree + 2

    # Constant-in-time initial guess; time axis inserted before nvar.
    q = np.repeat(np.expand_dims(dofs, -2), n1, axis=-2)
    base = tables.phi0[:, None] * np.expand_dims(dofs, -2)  # phi_b(0) * u
    w_t = tables.weights[:, None]
    iA = tables.time_inv

    out = np.empty_like(q)
    idx = np.arange(nc)
    red = tuple(range(1, q.ndim))
    iterations = 0
    with np.errstate(all="ignore"):
        # Axis terms are summed pairwise before subtracting so that x<->y
        # mirrored inputs give bitwise mirrored results. Inadmissible
        # intermediates are allowed to go NaN; they surface as failures below.
        for _ in range(tables.n_degree + 2):
            iterations += 1
            if d == 1:
                rhs = base - (k[0] * w_t) * apply_axis(tables.diff, system.flux(q, 0), 1)
            else:
                fx, fy = system.flux_pair(q)
                rhs = base - ((k[0] * w_t) * apply_axis(tables.diff, fx, 1)
                              + (k[1] * w_t) * apply_axis(tables.diff, fy, 2))
            q_new = apply_axis(iA, rhs, -2)
            resid = np.abs(q_new - q).max(axis=red)
            norm = np.abs(q_new).max(axis=red)
            keep = (resid > REL_TOL * (1.0 + norm)) & np.isfinite(resid)
            if not keep.any():
                out[idx] = q_new
                idx = idx[:0]
                break
            if keep.all():
                q = q_new
            else:
                done = ~keep
                out[idx[done]] = q_new[done]
                idx = idx[keep]
                q = q_new[keep]
                base = base[keep]
        if idx.size:
            out[idx] = q

        ok = np.all(np.isfinite(out), axis=red)
        adm = system.admissible(out)
        ok &= np.all(adm, axis=tuple(range(1, adm.ndim)))
        # Face traces feed the Riemann solver; an extrapolated trace can be
        # inadmissible even when every space-time node is fine, so failure
        # detection must cover them too.
        for a in range(d):
            for phi in (tables.phi0, tables.phi1):
                tr = np.tensordot(out, phi, axes=([1 + a], [0]))
                tadm = system.admissible(tr)
                ok &= np.all(tadm, axis=tuple(range(1, tadm.ndim)))
    if not np.all(ok):
        bad = ~ok
        out[bad] = np.repeat(np.expand_dims(dofs[bad], -2), n1, axis=-2)
    return out, ok, iterations


def residual(qhat: np.ndarray, dofs: np.ndarray, system, tables: BasisTables, dx, dt: float):
    """Max-norm residual of the weak space-time system at qhat, per cell.

    Certificate used by the tests: a converged predictor must satisfy the
    discrete equations it was solved from.
    """
    d = tables.dim
    scale = np.atleast_1d(np.asarray(dx, dtype=float))
    lhs = apply_axis(tables.time_op, qhat, -2)
    rhs = tables.phi0[:, None] * np.expand_dims(dofs, -2)
    w_t = tables.weights[:, None]
    terms = [
        (dt / scale[a] * w_t) * apply_axis(tables.diff, system.flux(qhat, a), 1 + a)
        for a in range(d)
    ]
    rhs = rhs - (terms[0] if d == 1 else terms[0] + terms[1])
    res = np.abs(lhs - rhs).max(axis=tuple(range(1, qhat.ndim)))
    norm = np.abs(qhat).max(axis=tuple(range(1, qhat.ndim)))
    return res / (1.0 + norm)


def face_trace(qhat: np.ndarray, tables: BasisTables, axis: int, side: int) -> np.ndarray:
    """Trace of q on a cell face: side 0 is the lower face, 1 the upper.

    Returns the state table at the tensor product of face spatial nodes and
    temporal nodes: (nc, nt, nvar) for d=1, (nc, n1, nt, nvar) for d=2. The
    caller integrates in time with the temporal weights.
    """
    phi = tables.phi1 if side else tables.phi0
    moved = np.moveaxis(qhat, 1 + axis, -1)
    return moved @ phi


def time_slice(qhat: np.ndarray, tables: BasisTables, tau: float) -> np.ndarray:
    """Spatial DOFs of q at reference time tau (exact polynomial evaluation)."""
    row = tables.lagrange(np.array([tau]))[0]
    return np.moveaxis(qhat, -2, -1) @ row


def time_restrict(qhat: np.ndarray, tables: BasisTables, r: int, m: int) -> np.ndarray:
    """Re-express q on temporal sub-interval m of an r-fold split as its own
    [0,1] space-time polynomial (exact; used by local time stepping)."""
    return apply_axis(tables.child_eval(r, m), qhat, axis=-2)


def st_eval(qhat: np.ndarray, tables: BasisTables, xi_pts, tau_pts) -> np.ndarray:
    """Evaluate q at arbitrary (space, time) reference points (test helper)."""
    xi = np.atleast_2d(np.asarray(xi_pts, dtype=float))
    tau = np.atleast_1d(np.asarray(tau_pts, dtype=float))
    lt = tables.lagrange(tau)
    if tables.dim == 1:
        lx = tables.lagrange(xi[:, 0])
        return np.einsum("pi,pa,ciav->cpv", lx, lt, qhat)
    lx = tables.lagrange(xi[:, 0])
    ly = tables.lagrange(xi[:, 1])
    return np.einsum("pi,pj,pa,cijav->cpv", lx, ly, lt, qhat)
