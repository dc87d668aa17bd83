"""Nodal tensor-product Gauss-Legendre bases and precomputed element matrices.

Everything lives on the reference element [0,1]^d. Physical cell sizes enter
only through the dx/dt scalings applied by the predictor and corrector, never
through the tables themselves.

DOF layout conventions used across the package:
    d=1 element solution:  (..., n1, nvar)
    d=2 element solution:  (..., n1, n1, nvar)       axes (x-node, y-node)
    space-time predictor:  one extra time-node axis before nvar
with n1 = N + 1 nodes per axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_DEGREE = 9


class SetupError(ValueError):
    """Raised when a projection or table build gets unusable input."""


def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the n-point Gauss-Legendre rule on [0,1].

    Newton iteration on P_n with Chebyshev initial guesses, tolerance 1e-15.
    Weights sum to 1 (unit reference measure).
    """
    if n < 1:
        raise ValueError(f"need at least one quadrature point, got {n}")
    k = np.arange(n)
    x = -np.cos(np.pi * (k + 0.75) / (n + 0.5))  # guesses on [-1,1]
    for _ in range(100):
        p0 = np.ones_like(x)
        p1 = x.copy()
        if n == 1:
            p0, p1 = np.zeros_like(x), x.copy()
            pn, pm = x, np.ones_like(x)
        else:
            for m in range(2, n + 1):
                p0, p1 = p1, ((2 * m - 1) * x * p1 - (m - 1) * p0) / m
            pn, pm = p1, p0
        dpn = n * (x * pn - pm) / (x * x - 1.0)
        dx = pn / dpn
        x -= dx
        if np.max(np.abs(dx)) < 1e-15:
            break
    p0 = np.ones_like(x)
    p1 = x.copy()
    for m in range(2, n + 1):
        p0, p1 = p1, ((2 * m - 1) * x * p1 - (m - 1) * p0) / m
    pn, pm = (p1, p0) if n > 1 else (x, np.ones_like(x))
    dpn = n * (x * pn - pm) / (x * x - 1.0)
    w = 2.0 / ((1.0 - x * x) * dpn * dpn)
    return 0.5 * (x + 1.0), 0.5 * w


def lagrange_matrix(nodes: np.ndarray, points: np.ndarray) -> np.ndarray:
    """L[p, l] = phi_l(points[p]) for the Lagrange basis on the given nodes."""
    pts = np.atleast_1d(np.asarray(points, dtype=float))
    n = len(nodes)
    out = np.ones((len(pts), n))
    for l in range(n):
        for m in range(n):
            if m != l:
                out[:, l] *= (pts - nodes[m]) / (nodes[l] - nodes[m])
    return out


def lagrange_diff_matrix(nodes: np.ndarray, points: np.ndarray) -> np.ndarray:
    """D[p, l] = phi_l'(points[p])."""
    pts = np.atleast_1d(np.asarray(points, dtype=float))
    n = len(nodes)
    out = np.zeros((len(pts), n))
    for l in range(n):
        for k in range(n):
            if k == l:
                continue
            term = np.ones(len(pts)) / (nodes[l] - nodes[k])
            for m in range(n):
                if m != l and m != k:
                    term *= (pts - nodes[m]) / (nodes[l] - nodes[m])
            out[:, l] += term
    return out


@dataclass
class BasisTables:
    """Precomputed 1D operators shared by the predictor, corrector and limiter.

    All d-dimensional operators are applied axis by axis from these factors.
    """

    n_degree: int
    dim: int
    nodes: np.ndarray            # (N+1,) Gauss-Legendre nodes on [0,1]
    weights: np.ndarray          # (N+1,) weights, sum 1; nodal mass diagonal
    diff: np.ndarray             # diff[i,j] = phi_j'(xi_i)
    stiff: np.ndarray            # stiff[k,l] = int phi_k' phi_l
    phi0: np.ndarray             # phi_l(0)
    phi1: np.ndarray             # phi_l(1)
    time_op: np.ndarray          # predictor time operator, see predict()
    time_inv: np.ndarray         # its inverse
    kxi: np.ndarray              # kxi[s,i] = w_i diff[i,s] / w_s (volume term)
    scatter1: np.ndarray         # (2N+1, N+1): sub-cell averages of the basis
    gather1: np.ndarray          # (N+1, 2N+1): constrained LSQ inverse of scatter1
    sample_pts: np.ndarray       # 1D detection sample points (nodes+lattice+{0,.5,1})
    sample_mat: np.ndarray       # basis evaluated at sample_pts
    _child_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n1(self) -> int:
        return self.n_degree + 1

    @property
    def n_sub(self) -> int:
        return 2 * self.n_degree + 1

    def lagrange(self, points) -> np.ndarray:
        return lagrange_matrix(self.nodes, points)

    def child_eval(self, r: int, offset: int) -> np.ndarray:
        """E[i,l] = phi_l((offset + xi_i)/r): parent basis at child nodes.

        Interpolating a degree-N polynomial at the child's nodes equals its
        L2 projection onto the child box, exactly.
        """
        key = ("eval", r, offset)
        if key not in self._child_cache:
            self._child_cache[key] = self.lagrange((offset + self.nodes) / r)
        return self._child_cache[key]

    def child_project(self, r: int, offset: int) -> np.ndarray:
        """P[k,q]: accumulate child-nodal data into the parent L2 projection.

        parent_dofs = sum over children of child_project(r,c) @ child_dofs.
        Exact when the children jointly represent one degree-N polynomial;
        always preserves the volume-weighted mean.
        """
        key = ("proj", r, offset)
        if key not in self._child_cache:
            E = self.child_eval(r, offset)
            self._child_cache[key] = (self.weights[None, :] * E.T) / (
                r * self.weights[:, None]
            )
        return self._child_cache[key]

    def child_means(self, r: int) -> np.ndarray:
        """M[c,l]: mean of phi_l over child box c of an r-fold split."""
        key = ("means", r)
        if key not in self._child_cache:
            rows = [
                self.weights @ self.lagrange((c + self.nodes) / r) for c in range(r)
            ]
            self._child_cache[key] = np.array(rows)
        return self._child_cache[key]

    def subinterval_avg(self, n_pieces: int) -> np.ndarray:
        """A[i,l]: average of phi_l over [i/n, (i+1)/n]; rows sum to 1."""
        key = ("avg", n_pieces)
        if key not in self._child_cache:
            rows = [
                self.weights @ self.lagrange((i + self.nodes) / n_pieces)
                for i in range(n_pieces)
            ]
            self._child_cache[key] = np.array(rows)
        return self._child_cache[key]


def _gather_matrix(scatter: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Constrained least-squares inverse of the scatter matrix.

    Minimizes ||scatter @ u - v|| subject to the cell mean being preserved
    exactly (weights @ u == mean(v)); the constraint is eliminated, so the
    result is a single linear map v -> u.
    """
    ns, n1 = scatter.shape
    w = weights
    mean_of_v = np.full((1, ns), 1.0 / ns)
    u0 = np.outer(w / (w @ w), mean_of_v)  # particular solution of w@u = mean(v)
    # Orthonormal basis of the nullspace of w^T.
    _, _, vt = np.linalg.svd(w[None, :])
    Z = vt[1:].T  # (n1, n1-1)
    AZ = scatter @ Z
    corr = Z @ np.linalg.pinv(AZ) @ (np.eye(ns) - scatter @ u0)
    return u0 + corr


def build_tables(n_degree: int, dim: int) -> BasisTables:
    """Build all element matrices for polynomial degree N and dimension d.

    Quadrature exactness (degree 2N+1), mass diagonality and scatter row sums
    are the correctness invariants; see the test suite.
    """
    if not 0 <= n_degree <= MAX_DEGREE:
        raise ValueError(f"polynomial degree must be in [0, {MAX_DEGREE}], got {n_degree}")
    if dim not in (1, 2):
        raise ValueError(f"dimension must be 1 or 2, got {dim}")
    nodes, weights = gauss_legendre(n_degree + 1)
    diff = lagrange_diff_matrix(nodes, nodes)
    phi0 = lagrange_matrix(nodes, np.array([0.0]))[0]
    phi1 = lagrange_matrix(nodes, np.array([1.0]))[0]
    # stiff[k,l] = int phi_k' phi_l = w_l phi_k'(xi_l); degree 2N-1, rule exact.
    stiff = np.einsum("l,lk->kl", weights, diff)
    # Predictor time operator: A[a,b] = phi_a(1) phi_b(1) - int phi_a' phi_b.
    time_op = np.outer(phi1, phi1) - stiff
    time_inv = np.linalg.inv(time_op)
    kxi = (weights[:, None] * diff).T / weights[:, None]
    ns = 2 * n_degree + 1
    scatter1 = np.array(
        [weights @ lagrange_matrix(nodes, (i + nodes) / ns) for i in range(ns)]
    )
    gather1 = _gather_matrix(scatter1, weights)
    pts = np.concatenate([nodes, np.linspace(0.0, 1.0, 2 * n_degree + 2), [0.0, 0.5, 1.0]])
    sample_pts = np.unique(np.round(pts, 14))
    sample_mat = lagrange_matrix(nodes, sample_pts)
    return BasisTables(
        n_degree=n_degree,
        dim=dim,
        nodes=nodes,
        weights=weights,
        diff=diff,
        stiff=stiff,
        phi0=phi0,
        phi1=phi1,
        time_op=time_op,
        time_inv=time_inv,
        kxi=kxi,
        scatter1=scatter1,
        gather1=gather1,
        sample_pts=sample_pts,
        sample_mat=sample_mat,
    )


def apply_axis(mat: np.ndarray, arr: np.ndarray, axis: int) -> np.ndarray:
    """Contract mat[p, n] against the given axis of arr (sized n)."""
    moved = np.moveaxis(arr, axis, -1)
    out = moved @ mat.T
    return np.moveaxis(out, -1, axis)


def eval_dg(dofs: np.ndarray, tables: BasisTables, x_ref) -> np.ndarray:
    """Evaluate the nodal polynomial at reference points in [0,1]^d.

    dofs: (..., n1, nvar) or (..., n1, n1, nvar); x_ref: (d,) or (npts, d).
    Returns (..., nvar) or (..., npts, nvar).
    """
    x = np.atleast_2d(np.asarray(x_ref, dtype=float))
    single = np.asarray(x_ref).ndim == 1
    if tables.dim == 1:
        lx = tables.lagrange(x[:, 0])  # (npts, n1)
        out = np.einsum("pi,...iv->...pv", lx, dofs)
    else:
        lx = tables.lagrange(x[:, 0])
        ly = tables.lagrange(x[:, 1])
        out = np.einsum("pi,pj,...ijv->...pv", lx, ly, dofs)
    return out[..., 0, :] if single else out


def ref_nodes(tables: BasisTables) -> np.ndarray:
    """Tensor grid of reference nodes, shape (n1, n1, d) for d=2, (n1, 1) for d=1."""
    if tables.dim == 1:
        return tables.nodes[:, None]
    gx, gy = np.meshgrid(tables.nodes, tables.nodes, indexing="ij")
    return np.stack([gx, gy], axis=-1)


def project_function(f, tables: BasisTables, lo, hi) -> np.ndarray:
    """Nodal interpolation of f on the cell [lo, hi]^d; exact for degree <= N.

    f maps physical coordinate arrays to state vectors: f(x) for d=1 with x of
    shape (m,), f(x, y) for d=2, returning (..., nvar).
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if tables.dim == 1:
        x = lo[0] + tables.nodes * (hi[0] - lo[0])
        vals = np.asarray(f(x), dtype=float)
    else:
        grid = ref_nodes(tables)
        x = lo[0] + grid[..., 0] * (hi[0] - lo[0])
        y = lo[1] + grid[..., 1] * (hi[1] - lo[1])
        vals = np.asarray(f(x, y), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise SetupError("initial data returned a non-finite value on the cell")
    return vals


def cell_mean(dofs: np.ndarray, tables: BasisTables) -> np.ndarray:
    """Exact mean of the polynomial over the cell, shape (..., nvar)."""
    w = tables.weights
    if tables.dim == 1:
        return np.einsum("i,...iv->...v", w, dofs)
    return np.einsum("i,j,...ijv->...v", w, w, dofs)
