"""PDE systems: compressible Euler, GLM-cleaned ideal MHD, linear advection.

All operations are pure and vectorized: state arrays have shape (..., nvar)
and every function broadcasts over the leading axes. The 2D planar convention
is used throughout; 1D problems run as 2D strips with a passive y direction.

Euler conserved variables (nvar=4):   rho, rho*u, rho*v, E
MHD conserved variables   (nvar=9):   rho, rho*u, rho*v, rho*w, E,
                                      Bx, By, Bz, psi (divergence-cleaning scalar)
MHD uses Gaussian units: magnetic pressure B^2/(8 pi), tension B_i B_j/(4 pi).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FOUR_PI = 4.0 * np.pi
EIGHT_PI = 8.0 * np.pi


class AdmissibilityError(ValueError):
    """A state violated a physical positivity constraint.

    Carries which constraint failed and the offending value; detection treats
    this as a signal, not a crash.
    """

    def __init__(self, constraint: str, value: float):
        self.constraint = constraint
        self.value = float(value)
        super().__init__(f"inadmissible state: {constraint} = {value:.6g} (must be > 0)")


@dataclass(frozen=True)
class EulerSystem:
    """Ideal-gas Euler equations in 2D."""

    gamma: float = 1.4

    @property
    def nvars(self) -> int:
        return 4

    def pressure(self, u: np.ndarray) -> np.ndarray:
        rho = u[..., 0]
        kin = 0.5 * (u[..., 1] ** 2 + u[..., 2] ** 2) / rho
        return (self.gamma - 1.0) * (u[..., 3] - kin)

    def flux(self, u: np.ndarray, axis: int) -> np.ndarray:
        p = self.pressure(u)
        vn = u[..., 1 + axis] / u[..., 0]
        f = u * vn[..., None]
        f[..., 1 + axis] += p
        f[..., 3] += p * vn
        return f

    def max_signal_speed(self, u: np.ndarray) -> np.ndarray:
        """max over axes of |v_axis| + c, with c = sqrt(gamma p / rho)."""
        rho = u[..., 0]
        p = self.pressure(u)
        c = np.sqrt(self.gamma * p / rho)
        vmax = np.maximum(np.abs(u[..., 1]), np.abs(u[..., 2])) / rho
        return vmax + c


    def flux_speed(self, u: np.ndarray, axis: int):
        """Directional flux and max signal speed sharing one pressure solve."""
        rho = u[..., 0]
        p = self.pressure(u)
        vn = u[..., 1 + axis] / rho
        f = u * vn[..., None]
        f[..., 1 + axis] += p
        f[..., 3] += p * vn
        c = np.sqrt(self.gamma * p / rho)
        vmax = np.maximum(np.abs(u[..., 1]), np.abs(u[..., 2])) / rho
        return f, vmax + c

    def flux_pair(self, u: np.ndarray):
        """Both directional fluxes from a single pressure evaluation."""
        rho = u[..., 0]
        p = self.pressure(u)
        vx = u[..., 1] / rho
        vy = u[..., 2] / rho
        fx = u * vx[..., None]
        fx[..., 1] += p
        fx[..., 3] += p * vx
        fy = u * vy[..., None]
        fy[..., 2] += p
        fy[..., 3] += p * vy
        return fx, fy

    def admissible(self, u: np.ndarray) -> np.ndarray:
        """Elementwise admissibility: rho > 0, p > 0 and finite. Never raises."""
        with np.errstate(all="ignore"):
            ok = np.all(np.isfinite(u), axis=-1)
            rho = np.where(ok, u[..., 0], 1.0)
            good_rho = rho > 0.0
            safe = np.where(good_rho, rho, 1.0)
            kin = 0.5 * (u[..., 1] ** 2 + u[..., 2] ** 2) / safe
            p = (self.gamma - 1.0) * (u[..., 3] - kin)
        return ok & good_rho & (p > 0.0)

    def cons_to_prim(self, u: np.ndarray) -> np.ndarray:
        """(rho, rho u, rho v, E) -> (rho, u, v, p); raises on rho<=0 or p<=0."""
        u = np.asarray(u, dtype=float)
        rho = u[..., 0]
        if np.any(~(rho > 0.0)):
            raise AdmissibilityError("rho", np.min(rho))
        w = np.empty_like(u)
        w[..., 0] = rho
        w[..., 1] = u[..., 1] / rho
        w[..., 2] = u[..., 2] / rho
        w[..., 3] = self.pressure(u)
        if np.any(~(w[..., 3] > 0.0)):
            raise AdmissibilityError("p", np.min(w[..., 3]))
        return w

    def prim_to_cons(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        rho, p = w[..., 0], w[..., 3]
        if np.any(~(rho > 0.0)):
            raise AdmissibilityError("rho", np.min(rho))
        if np.any(~(p > 0.0)):
            raise AdmissibilityError("p", np.min(p))
        u = np.empty_like(w)
        u[..., 0] = rho
        u[..., 1] = rho * w[..., 1]
        u[..., 2] = rho * w[..., 2]
        u[..., 3] = p / (self.gamma - 1.0) + 0.5 * rho * (w[..., 1] ** 2 + w[..., 2] ** 2)
        return u

    def reflect(self, u: np.ndarray, axis: int) -> np.ndarray:
        """Mirror the normal velocity for a reflective wall."""
        out = u.copy()
        out[..., 1 + axis] = -out[..., 1 + axis]
        return out

    def xy_swapped(self):
        """System seen in the frame with x and y exchanged, plus the state
        component permutation (an involution) realizing the swap."""
        return self, np.array([0, 2, 1, 3])


@dataclass(frozen=True)
class GlmMhdSystem:
    """Ideal MHD with hyperbolic GLM divergence cleaning at speed ch."""

    gamma: float = 1.4
    ch: float = 4.0

    @property
    def nvars(self) -> int:
        return 9

    def pressure(self, u: np.ndarray) -> np.ndarray:
        rho = u[..., 0]
        kin = 0.5 * (u[..., 1] ** 2 + u[..., 2] ** 2 + u[..., 3] ** 2) / rho
        mag = (u[..., 5] ** 2 + u[..., 6] ** 2 + u[..., 7] ** 2) / EIGHT_PI
        return (self.gamma - 1.0) * (u[..., 4] - kin - mag)

    def flux(self, u: np.ndarray, axis: int) -> np.ndarray:
        rho = u[..., 0]
        v = u[..., 1:4] / rho[..., None]
        B = u[..., 5:8]
        psi = u[..., 8]
        p = self.pressure(u)
        b2 = np.sum(B * B, axis=-1)
        ptot = p + b2 / EIGHT_PI
        vn = v[..., axis]
        Bn = B[..., axis]
        vB = np.sum(v * B, axis=-1)
        f = np.empty_like(u)
        f[..., 0] = rho * vn
        for j in range(3):
            f[..., 1 + j] = rho * vn * v[..., j] - Bn * B[..., j] / FOUR_PI
        f[..., 1 + axis] += ptot
        f[..., 4] = (u[..., 4] + ptot) * vn - vB * Bn / FOUR_PI
        for j in range(3):
            f[..., 5 + j] = vn * B[..., j] - v[..., j] * Bn
        f[..., 5 + axis] += psi
        f[..., 8] = self.ch**2 * Bn
        return f

    def fast_speed(self, u: np.ndarray, axis: int) -> np.ndarray:
        """Fast magnetosonic speed along the given axis."""
        rho = u[..., 0]
        p = self.pressure(u)
        a2 = self.gamma * p / rho
        b2 = (u[..., 5] ** 2 + u[..., 6] ** 2 + u[..., 7] ** 2) / (FOUR_PI * rho)
        bn2 = u[..., 5 + axis] ** 2 / (FOUR_PI * rho)
        s = a2 + b2
        disc = np.sqrt(np.maximum(s * s - 4.0 * a2 * bn2, 0.0))
        return np.sqrt(0.5 * (s + disc))

    def max_signal_speed(self, u: np.ndarray) -> np.ndarray:
        """max(|v_axis| + c_fast over axes x,y, ch)."""
        rho = u[..., 0]
        lam = np.maximum(
            np.abs(u[..., 1]) / rho + self.fast_speed(u, 0),
            np.abs(u[..., 2]) / rho + self.fast_speed(u, 1),
        )
        return np.maximum(lam, self.ch)


    def flux_speed(self, u: np.ndarray, axis: int):
        """Directional flux and the direction-max signal speed (incl. ch)."""
        return self.flux(u, axis), self.max_signal_speed(u)

    def flux_pair(self, u: np.ndarray):
        return self.flux(u, 0), self.flux(u, 1)

    def admissible(self, u: np.ndarray) -> np.ndarray:
        with np.errstate(all="ignore"):
            ok = np.all(np.isfinite(u), axis=-1)
            rho = np.where(ok, u[..., 0], 1.0)
            good_rho = rho > 0.0
            safe = np.where(good_rho, rho, 1.0)
            kin = 0.5 * (u[..., 1] ** 2 + u[..., 2] ** 2 + u[..., 3] ** 2) / safe
            mag = (u[..., 5] ** 2 + u[..., 6] ** 2 + u[..., 7] ** 2) / EIGHT_PI
            p = (self.gamma - 1.0) * (u[..., 4] - kin - mag)
        return ok & good_rho & (p > 0.0)

    def cons_to_prim(self, u: np.ndarray) -> np.ndarray:
        """-> (rho, u, v, w, p, Bx, By, Bz, psi); raises on rho<=0 or p<=0."""
        u = np.asarray(u, dtype=float)
        rho = u[..., 0]
        if np.any(~(rho > 0.0)):
            raise AdmissibilityError("rho", np.min(rho))
        w = u.copy()
        w[..., 1:4] = u[..., 1:4] / rho[..., None]
        w[..., 4] = self.pressure(u)
        if np.any(~(w[..., 4] > 0.0)):
            raise AdmissibilityError("p", np.min(w[..., 4]))
        return w

    def prim_to_cons(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        rho, p = w[..., 0], w[..., 4]
        if np.any(~(rho > 0.0)):
            raise AdmissibilityError("rho", np.min(rho))
        if np.any(~(p > 0.0)):
            raise AdmissibilityError("p", np.min(p))
        u = w.copy()
        u[..., 1:4] = rho[..., None] * w[..., 1:4]
        kin = 0.5 * rho * np.sum(w[..., 1:4] ** 2, axis=-1)
        mag = np.sum(w[..., 5:8] ** 2, axis=-1) / EIGHT_PI
        u[..., 4] = p / (self.gamma - 1.0) + kin + mag
        return u

    def reflect(self, u: np.ndarray, axis: int) -> np.ndarray:
        """Mirror the normal velocity and the normal field component."""
        out = u.copy()
        out[..., 1 + axis] = -out[..., 1 + axis]
        out[..., 5 + axis] = -out[..., 5 + axis]
        return out

    def xy_swapped(self):
        return self, np.array([0, 2, 1, 3, 4, 6, 5, 7, 8])


@dataclass(frozen=True)
class LinearAdvection:
    """Scalar linear advection with constant speed; the linear-flux test hook.

    Exact solution u0(x - a t) makes this the oracle for predictor/corrector
    order checks and for the sub-grid FV convergence study.
    """

    speed: tuple[float, float] = (1.0, 0.0)

    @property
    def nvars(self) -> int:
        return 1

    def flux(self, u: np.ndarray, axis: int) -> np.ndarray:
        return self.speed[axis] * u

    def max_signal_speed(self, u: np.ndarray) -> np.ndarray:
        s = max(abs(self.speed[0]), abs(self.speed[1]))
        return np.full(u.shape[:-1], s)


    def flux_speed(self, u: np.ndarray, axis: int):
        return self.flux(u, axis), self.max_signal_speed(u)

    def flux_pair(self, u: np.ndarray):
        return self.flux(u, 0), self.flux(u, 1)

    def admissible(self, u: np.ndarray) -> np.ndarray:
        return np.all(np.isfinite(u), axis=-1)

    def cons_to_prim(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u, dtype=float)

    def prim_to_cons(self, w: np.ndarray) -> np.ndarray:
        return np.asarray(w, dtype=float)

    def reflect(self, u: np.ndarray, axis: int) -> np.ndarray:
        return u.copy()

    def xy_swapped(self):
        return LinearAdvection((self.speed[1], self.speed[0])), np.array([0])


def is_admissible(system, u) -> bool:
    """True iff every state in u satisfies the positivity constraints."""
    return bool(np.all(system.admissible(np.asarray(u, dtype=float))))
