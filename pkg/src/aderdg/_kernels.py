"""Optional numba kernels for the hottest inner loop (the Euler space-time
predictor). Everything here mirrors the numpy implementation in predictor.py
op-for-op: axis terms are combined pairwise and component sums are written in
commutative pairs, so xy-mirrored inputs still produce bitwise mirrored
results. Set ADERDG_NO_NUMBA=1 to force the numpy path.
"""

from __future__ import annotations

import os

import numpy as np

HAVE_NUMBA = False
if not os.environ.get("ADERDG_NO_NUMBA"):
    try:
        os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
        from numba import njit, prange

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover
        HAVE_NUMBA = False

if HAVE_NUMBA:

    @njit(cache=True, parallel=True, fastmath=False)
    def euler_predict_2d(dofs, diff, iA, w, phi0, phi1, kx, ky, gamma, tol, max_iter):
        nc, n1 = dofs.shape[0], dofs.shape[1]
        nt = n1
        gm1 = gamma - 1.0
        out = np.empty((nc, n1, n1, nt, 4))
        ok = np.ones(nc, np.bool_)
        for c in prange(nc):
            u = dofs[c]
            q = np.empty((n1, n1, nt, 4))
            for i in range(n1):
                for j in range(n1):
                    for b in range(nt):
                        for v in range(4):
                            q[i, j, b, v] = u[i, j, v]
            fx = np.empty((n1, n1, nt, 4))
            fy = np.empty((n1, n1, nt, 4))
            rhs = np.empty((n1, n1, nt, 4))
            qn = np.empty((n1, n1, nt, 4))
            good = True
            for _ in range(max_iter):
                for i in range(n1):
                    for j in range(n1):
                        for b in range(nt):
                            rho = q[i, j, b, 0]
                            m1 = q[i, j, b, 1]
                            m2 = q[i, j, b, 2]
                            en = q[i, j, b, 3]
                            vx = m1 / rho
                            vy = m2 / rho
                            p = gm1 * (en - 0.5 * (m1 * vx + m2 * vy))
                            fx[i, j, b, 0] = m1
                            fx[i, j, b, 1] = m1 * vx + p
                            fx[i, j, b, 2] = m2 * vx
                            fx[i, j, b, 3] = (en + p) * vx
                            fy[i, j, b, 0] = m2
                            fy[i, j, b, 1] = m1 * vy
                            fy[i, j, b, 2] = m2 * vy + p
                            fy[i, j, b, 3] = (en + p) * vy
                for i in range(n1):
                    for j in range(n1):
                        for b in range(nt):
                            for v in range(4):
                                sx = 0.0
                                sy = 0.0
                                for m in range(n1):
                                    sx += diff[i, m] * fx[m, j, b, v]
                                    sy += diff[j, m] * fy[i, m, b, v]
                                rhs[i, j, b, v] = phi0[b] * u[i, j, v] - w[b] * (
                                    kx * sx + ky * sy)
                maxdiff = 0.0
                maxq = 0.0
                for i in range(n1):
                    for j in range(n1):
                        for a in range(nt):
                            for v in range(4):
                                acc = 0.0
                                for b in range(nt):
                                    acc += iA[a, b] * rhs[i, j, b, v]
                                d = abs(acc - q[i, j, a, v])
                                if d > maxdiff:
                                    maxdiff = d
                                aq = abs(acc)
                                if aq > maxq:
                                    maxq = aq
                                qn[i, j, a, v] = acc
                tmp = q
                q = qn
                qn = tmp
                if not np.isfinite(maxdiff):
                    good = False
                    break
                if maxdiff <= tol * (1.0 + maxq):
                    break
            # admissibility at all space-time nodes
            if good:
                for i in range(n1):
                    for j in range(n1):
                        for b in range(nt):
                            rho = q[i, j, b, 0]
                            m1 = q[i, j, b, 1]
                            m2 = q[i, j, b, 2]
                            en = q[i, j, b, 3]
                            if not (np.isfinite(rho) and np.isfinite(m1)
                                    and np.isfinite(m2) and np.isfinite(en)):
                                good = False
                            elif rho <= 0.0:
                                good = False
                            elif gm1 * (en - 0.5 * (m1 * m1 + m2 * m2) / rho) <= 0.0:
                                good = False
            # admissibility of the four face traces
            if good:
                for side in range(4):
                    for jj in range(n1):
                        for b in range(nt):
                            rho = 0.0
                            m1 = 0.0
                            m2 = 0.0
                            en = 0.0
                            for m in range(n1):
                                if side == 0:
                                    ph = phi0[m]
                                    r0, r1, r2, r3 = q[m, jj, b, 0], q[m, jj, b, 1], q[m, jj, b, 2], q[m, jj, b, 3]
                                elif side == 1:
                                    ph = phi1[m]
                                    r0, r1, r2, r3 = q[m, jj, b, 0], q[m, jj, b, 1], q[m, jj, b, 2], q[m, jj, b, 3]
                                elif side == 2:
                                    ph = phi0[m]
                                    r0, r1, r2, r3 = q[jj, m, b, 0], q[jj, m, b, 1], q[jj, m, b, 2], q[jj, m, b, 3]
                                else:
                                    ph = phi1[m]
                                    r0, r1, r2, r3 = q[jj, m, b, 0], q[jj, m, b, 1], q[jj, m, b, 2], q[jj, m, b, 3]
                                rho += ph * r0
                                m1 += ph * r1
                                m2 += ph * r2
                                en += ph * r3
                            if rho <= 0.0 or not np.isfinite(rho):
                                good = False
                            elif gm1 * (en - 0.5 * (m1 * m1 + m2 * m2) / rho) <= 0.0:
                                good = False
            if good:
                for i in range(n1):
                    for j in range(n1):
                        for b in range(nt):
                            for v in range(4):
                                out[c, i, j, b, v] = q[i, j, b, v]
            else:
                ok[c] = False
                for i in range(n1):
                    for j in range(n1):
                        for b in range(nt):
                            for v in range(4):
                                out[c, i, j, b, v] = u[i, j, v]
        return out, ok
