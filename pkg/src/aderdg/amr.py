"""Cell-by-cell adaptive Cartesian mesh with statuses, refinement estimator,
conservative solution transfer, limiter-aware projection/averaging and the
local-time-stepping schedule.

The tree is implicit in the per-level integer lattices: a position is active
(stored), covered by an active ancestor (virtual-child territory, status +1),
or covered by active descendants (virtual mother, status -1). Because any two
Voronoi-adjacent active cells differ by at most one level, every ownership
query resolves with O(1) lattice lookups. Virtual data (restricted polynomials,
aggregated means, projected sub-cell averages) is computed on demand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import limiter as lim
from .basis import BasisTables, apply_axis, cell_mean
from .corrector import cfl_bound

STATUS_ACTIVE = 0
STATUS_VIRTUAL_MOTHER = -1
STATUS_VIRTUAL_CHILD = 1


class MeshRuleViolation(RuntimeError):
    """An operation would break a mesh invariant (balance, statuses, beta)."""


@dataclass(frozen=True)
class AmrParams:
    """Adaptation controls; thresholds follow the recommended ranges."""

    lmax: int = 0
    rfactor: int = 3
    chi_ref: float = 0.25
    chi_rec: float = 0.1
    eps_filter: float = 0.01
    halo: int = 1
    estimator: str = "lohner"          # or "density_below"
    density_threshold: float = 0.75
    indicator_var: int = 0             # component fed to the estimator

    def __post_init__(self):
        if self.lmax > 0:
            if self.rfactor < 2:
                raise ValueError("refinement factor must be >= 2")
            if not self.chi_rec < self.chi_ref:
                raise ValueError("need chi_rec < chi_ref")


@dataclass
class AmrCell:
    """View of one tree node (for dumps, audits and tests)."""

    cell_id: int
    level: int
    ij: tuple
    status: int
    beta: int
    box: tuple  # (x0, y0, x1, y1)


class Level:
    """Active-cell storage for one refinement level (compact batch arrays)."""

    def __init__(self, dims, cell_size):
        self.dims = dims
        self.cell_size = cell_size          # (dx, dy)
        self.positions: list[tuple] = []
        self.index: dict[tuple, int] = {}
        self.sol = None                     # (nc, n1, n1, nvar)
        self.beta = np.zeros(0, dtype=np.int8)
        self.sub: dict[tuple, np.ndarray] = {}

    @property
    def n_active(self) -> int:
        return len(self.positions)

    def set_cells(self, cells: dict):
        """Replace the active set; cells maps position -> solution DOFs."""
        self.positions = sorted(cells.keys())
        self.index = {p: k for k, p in enumerate(self.positions)}
        if self.positions:
            self.sol = np.stack([cells[p] for p in self.positions])
        else:
            self.sol = None
        old_beta = getattr(self, "_beta_map", {})
        self.beta = np.array([old_beta.get(p, 0) for p in self.positions], dtype=np.int8)

    def stash_beta(self):
        self._beta_map = {p: int(b) for p, b in zip(self.positions, self.beta)}


class Mesh:
    """Adaptive Cartesian mesh over a rectangular domain.

    bc maps sides 'x-','x+','y-','y+' to 'periodic' | 'transmissive' |
    'reflective'; periodic sides must be paired.
    """

    def __init__(self, origin, extent, base_dims, system, tables: BasisTables,
                 params: AmrParams, bc: dict):
        self.origin = np.asarray(origin, dtype=float)
        self.extent = np.asarray(extent, dtype=float)
        self.base_dims = tuple(base_dims)
        self.system = system
        self.tables = tables
        self.params = params
        self.bc = dict(bc)
        for a, (mn, pl) in enumerate((("x-", "x+"), ("y-", "y+"))):
            if (self.bc[mn] == "periodic") != (self.bc[pl] == "periodic"):
                raise ValueError(f"periodic boundary must be paired on axis {a}")
        self.periodic = (self.bc["x-"] == "periodic", self.bc["y-"] == "periodic")
        r = params.rfactor if params.lmax > 0 else 1
        self.rfactor = r
        self.levels = []
        for ell in range(params.lmax + 1):
            dims = (base_dims[0] * r**ell, base_dims[1] * r**ell)
            size = (self.extent[0] / dims[0], self.extent[1] / dims[1])
            self.levels.append(Level(dims, size))
        self.fallback_count = 0

    # -- geometry ----------------------------------------------------------

    def cell_box(self, ell, pos):
        dx, dy = self.levels[ell].cell_size
        x0 = self.origin[0] + pos[0] * dx
        y0 = self.origin[1] + pos[1] * dy
        return (x0, y0, x0 + dx, y0 + dy)

    # -- tree queries ------------------------------------------------------

    def wrap(self, ell, i, j):
        """Apply periodic wrapping; returns (i, j, inside) where inside is
        False when the position falls outside a non-periodic boundary."""
        nx, ny = self.levels[ell].dims
        if self.periodic[0]:
            i %= nx
        if self.periodic[1]:
            j %= ny
        inside = 0 <= i < nx and 0 <= j < ny
        return i, j, inside

    def owner(self, ell, i, j):
        """Resolve who provides data at (ell, i, j): ('active'|'coarse'|
        'fine', level, position) or ('outside', side info)."""
        i, j, inside = self.wrap(ell, i, j)
        if not inside:
            return ("outside", ell, (i, j))
        if (i, j) in self.levels[ell].index:
            return ("active", ell, (i, j))
        r = self.rfactor
        if ell > 0 and (i // r, j // r) in self.levels[ell - 1].index:
            return ("coarse", ell - 1, (i // r, j // r))
        if ell + 1 < len(self.levels):
            return ("fine", ell + 1, (i * r, j * r))
        raise MeshRuleViolation(f"unresolvable position (level {ell}, {i},{j})")

    def status(self, ell, pos):
        """Tree status of a position: 0 active, -1 virtual mother, +1 virtual
        child (covered by an active ancestor)."""
        if pos in self.levels[ell].index:
            return STATUS_ACTIVE
        r = self.rfactor
        i, j = pos
        e, pi, pj = ell, i, j
        while e > 0:
            e -= 1
            pi //= r
            pj //= r
            if (pi, pj) in self.levels[e].index:
                return STATUS_VIRTUAL_CHILD
        return STATUS_VIRTUAL_MOTHER

    def active_ancestor(self, ell, pos):
        r = self.rfactor
        e, (i, j) = ell, pos
        while e > 0:
            e -= 1
            i //= r
            j //= r
            if (i, j) in self.levels[e].index:
                return e, (i, j)
        return None

    # -- virtual data ------------------------------------------------------

    def dg_view(self, ell, pos):
        """DG DOFs of the cell at (ell, pos): stored, restricted from the
        active ancestor, or L2-projected from active descendants."""
        lev = self.levels[ell]
        if pos in lev.index:
            return lev.sol[lev.index[pos]]
        anc = self.active_ancestor(ell, pos)
        if anc is not None:
            return self._restrict_from(anc[0], anc[1], ell, pos)
        return self._project_children_dg(ell, pos)

    def _restrict_from(self, ea, pa, ell, pos):
        """Restrict the ancestor polynomial at (ea, pa) to the sub-box of
        (ell, pos); exact for degree-N data."""
        r = self.rfactor
        sol = self.levels[ea].sol[self.levels[ea].index[pa]]
        path = []
        e, ci, cj = ell, pos[0], pos[1]
        while e > ea:
            path.append((ci % r, cj % r))
            ci //= r
            cj //= r
            e -= 1
        for ox, oy in reversed(path):
            sol = apply_axis(self.tables.child_eval(r, ox), sol, 0)
            sol = apply_axis(self.tables.child_eval(r, oy), sol, 1)
        return sol

    def _project_children_dg(self, ell, pos):
        r = self.rfactor
        tb = self.tables
        n1 = tb.n1
        out = np.zeros((n1, n1, self.system.nvars))
        for ox in range(r):
            for oy in range(r):
                child = self.dg_view(ell + 1, (pos[0] * r + ox, pos[1] * r + oy))
                t = apply_axis(tb.child_project(r, ox), child, 0)
                out += apply_axis(tb.child_project(r, oy), t, 1)
        return out

    def mean_view(self, ell, pos):
        return cell_mean(self.dg_view(ell, pos), self.tables)

    def beta_view(self, ell, pos):
        """Limiter flag with inheritance: virtual children inherit from the
        active mother; a virtual mother is troubled iff any descendant is."""
        lev = self.levels[ell]
        if pos in lev.index:
            return int(lev.beta[lev.index[pos]])
        anc = self.active_ancestor(ell, pos)
        if anc is not None:
            lev_a = self.levels[anc[0]]
            return int(lev_a.beta[lev_a.index[anc[1]]])
        r = self.rfactor
        return int(any(
            self.beta_view(ell + 1, (pos[0] * r + ox, pos[1] * r + oy))
            for ox in range(r) for oy in range(r)
        ))

    def subcell_view(self, ell, pos):
        """Sub-cell averages representing the cell at (ell, pos): fresh FV
        data when troubled, scatter of the DG polynomial when not, projected
        (WENO) or averaged across levels for virtual positions."""
        lev = self.levels[ell]
        if pos in lev.index:
            if pos in lev.sub:
                return lev.sub[pos]
            return lim.scatter(lev.sol[lev.index[pos]], self.tables)
        anc = self.active_ancestor(ell, pos)
        if anc is not None:
            ea, pa = anc
            lev_a = self.levels[ea]
            if pa in lev_a.sub:
                data = lev_a.sub[pa]
                r = self.rfactor
                e, (i, j) = ell, pos
                path = []
                while e > ea:
                    path.append((i % r, j % r))
                    i //= r
                    j //= r
                    e -= 1
                for off in reversed(path):
                    data = limiter_project(data, self.rfactor, off)
                return data
            return lim.scatter(self._restrict_from(ea, pa, ell, pos), self.tables)
        r = self.rfactor
        kids = [[self.subcell_view(ell + 1, (pos[0] * r + ox, pos[1] * r + oy))
                 for oy in range(r)] for ox in range(r)]
        return limiter_average(kids, r)

    def cell_view(self, ell, pos) -> AmrCell:
        nx = self.levels[ell].dims[0]
        cid = ell * 10**9 + pos[1] * nx + pos[0]
        return AmrCell(cid, ell, tuple(pos), self.status(ell, pos),
                       self.beta_view(ell, pos), self.cell_box(ell, pos))

    # -- conserved totals ----------------------------------------------------

    def conserved_totals(self):
        tot = np.zeros(self.system.nvars)
        for lev in self.levels:
            if lev.n_active == 0:
                continue
            area = lev.cell_size[0] * lev.cell_size[1]
            means = cell_mean(lev.sol, self.tables)
            tot += area * means.sum(axis=0)
        return tot

    def active_count(self):
        return sum(lev.n_active for lev in self.levels)

    # -- audits -------------------------------------------------------------

    def audit(self):
        """Check tiling, 2:1 balance and status consistency; raises on
        violation (used by tests and debug runs)."""
        r = self.rfactor
        lmax = len(self.levels) - 1
        unit = 0
        for ell, lev in enumerate(self.levels):
            unit += lev.n_active * (r ** (2 * (lmax - ell)))
        want = self.base_dims[0] * self.base_dims[1] * r ** (2 * lmax)
        if unit != want:
            raise MeshRuleViolation(f"active cells do not tile the domain ({unit} != {want})")
        for ell, lev in enumerate(self.levels):
            for pos in lev.positions:
                if self.active_ancestor(ell, pos) is not None:
                    raise MeshRuleViolation("active cell below an active ancestor")
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        if di == dj == 0:
                            continue
                        kind, e, p = self.owner(ell, pos[0] + di, pos[1] + dj)
                        if kind == "fine":
                            # ensure the fine region is exactly one level down
                            if self.status(e, p) not in (STATUS_ACTIVE,):
                                raise MeshRuleViolation(
                                    f"level jump > 1 next to (lv{ell}, {pos})")
        return True

    def dump(self, path):
        """Plain-text mesh dump: one line per tree node (active cells and
        virtual mothers), columns id level status beta x0 y0 x1 y1."""
        lines = ["# id level status beta x0 y0 x1 y1"]
        seen = set()
        for ell, lev in enumerate(self.levels):
            for pos in lev.positions:
                seen.add((ell, pos))
                e, (i, j) = ell, pos
                while e > 0:
                    e -= 1
                    i //= self.rfactor
                    j //= self.rfactor
                    seen.add((e, (i, j)))
        for ell, pos in sorted(seen):
            c = self.cell_view(ell, pos)
            lines.append(
                f"{c.cell_id} {c.level} {c.status} {c.beta} "
                f"{c.box[0]:.12g} {c.box[1]:.12g} {c.box[2]:.12g} {c.box[3]:.12g}"
            )
        text = "\n".join(lines) + "\n"
        with open(path, "w") as fh:
            fh.write(text)
        return text


# ---------------------------------------------------------------------------
# Mesh construction and solution transfer
# ---------------------------------------------------------------------------

def build_mesh(origin, extent, base_dims, system, tables, params, bc) -> Mesh:
    mesh = Mesh(origin, extent, base_dims, system, tables, params, bc)
    lev0 = mesh.levels[0]
    cells = {}
    for j in range(base_dims[1]):
        for i in range(base_dims[0]):
            cells[(i, j)] = np.zeros((tables.n1, tables.n1, system.nvars))
    lev0._beta_map = {}
    lev0.set_cells(cells)
    return mesh


def refine_cells(mesh: Mesh, marked: dict):
    """Refine active cells; marked maps level -> iterable of positions.

    Children DOFs are the restriction (== exact L2 projection) of the mother
    polynomial; troubled mothers hand their sub-cell data to the children via
    the WENO projection and the children inherit beta = 1.
    """
    r = mesh.rfactor
    tb = mesh.tables
    for ell in sorted(marked):
        pos_list = sorted(set(marked[ell]))
        if not pos_list:
            continue
        if ell + 1 >= len(mesh.levels):
            raise MeshRuleViolation("cannot refine past lmax")
        lev, fine = mesh.levels[ell], mesh.levels[ell + 1]
        lev.stash_beta()
        fine.stash_beta()
        parent_cells = {p: lev.sol[lev.index[p]] for p in lev.positions}
        child_cells = {p: fine.sol[fine.index[p]] for p in fine.positions}
        for pos in pos_list:
            if pos not in lev.index:
                raise MeshRuleViolation(f"refining non-active cell {pos} at level {ell}")
            sol = parent_cells.pop(pos)
            beta = lev._beta_map.pop(pos, 0)
            sub = lev.sub.pop(pos, None)
            for ox in range(r):
                for oy in range(r):
                    cpos = (pos[0] * r + ox, pos[1] * r + oy)
                    child = apply_axis(tb.child_eval(r, ox), sol, 0)
                    child = apply_axis(tb.child_eval(r, oy), child, 1)
                    child_cells[cpos] = child
                    fine._beta_map[cpos] = beta
                    if beta and sub is not None:
                        fine.sub[cpos] = limiter_project(sub, r, (ox, oy))
        lev.set_cells(parent_cells)
        fine.set_cells(child_cells)


def recoarsen_families(mesh: Mesh, parents: dict):
    """Merge complete families back into their mothers; parents maps level of
    the PARENT -> iterable of parent positions. Troubled children are a rule
    violation (callers must never mark them)."""
    r = mesh.rfactor
    tb = mesh.tables
    for ell in sorted(parents, reverse=True):
        plist = sorted(set(parents[ell]))
        if not plist:
            continue
        lev, fine = mesh.levels[ell], mesh.levels[ell + 1]
        lev.stash_beta()
        fine.stash_beta()
        parent_cells = {p: lev.sol[lev.index[p]] for p in lev.positions}
        child_cells = {p: fine.sol[fine.index[p]] for p in fine.positions}
        for pos in plist:
            acc = np.zeros((tb.n1, tb.n1, mesh.system.nvars))
            for ox in range(r):
                for oy in range(r):
                    cpos = (pos[0] * r + ox, pos[1] * r + oy)
                    if cpos not in fine.index:
                        raise MeshRuleViolation("recoarsening an incomplete family")
                    if fine._beta_map.get(cpos, 0):
                        raise MeshRuleViolation("recoarsening a troubled cell")
                    t = apply_axis(tb.child_project(r, ox), child_cells.pop(cpos), 0)
                    acc += apply_axis(tb.child_project(r, oy), t, 1)
                    fine._beta_map.pop(cpos, None)
                    fine.sub.pop(cpos, None)
            parent_cells[pos] = acc
            lev._beta_map[pos] = 0
        lev.set_cells(parent_cells)
        fine.set_cells(child_cells)


# ---------------------------------------------------------------------------
# Limiter-aware AMR data movement (sub-cell averages across levels)
# ---------------------------------------------------------------------------

def _project_axis(avgs: np.ndarray, rfactor: int, offset: int, axis: int) -> np.ndarray:
    """WENO-reconstruct mother sub-averages along one axis and average the
    reconstruction over the sub-cells of child `offset`; edge sub-cells use
    the available one-sided linear stencil."""
    t2 = lim.sub_grid_tables(1)
    arr = np.moveaxis(avgs, axis, -2)            # (..., Ns, nvar)
    ns = arr.shape[-2]
    vm = np.concatenate([arr[..., :1, :], arr[..., :-1, :]], axis=-2)
    vp = np.concatenate([arr[..., 1:, :], arr[..., -1:, :]], axis=-2)
    nodal = lim.weno3_nodal(vm, v0=arr, vp=vp, tables2=t2)   # (..., Ns, nvar, 3)
    # one-sided linear at the two edge sub-cells
    t = t2.nodes - 0.5
    lo = arr[..., 0, :, None] + (arr[..., 1, :] - arr[..., 0, :])[..., None] * t
    hi = arr[..., -1, :, None] + (arr[..., -1, :] - arr[..., -2, :])[..., None] * t
    nodal = np.concatenate([lo[..., None, :, :], nodal[..., 1:-1, :, :],
                            hi[..., None, :, :]], axis=-3)
    rows = t2.subinterval_avg(rfactor)           # (r, 3)
    fidx = offset * ns + np.arange(ns)
    picked = np.take(nodal, fidx // rfactor, axis=-3)    # (..., Ns, nvar, 3)
    out = np.einsum("...kvq,kq->...kv", picked, rows[fidx % rfactor])
    return np.moveaxis(out, -2, axis)


def limiter_project(sub: np.ndarray, rfactor: int, offset) -> np.ndarray:
    """Project mother sub-cell averages onto one virtual child's sub-grid.

    WENO3 reconstruction of the mother sub-grid, averaged over the child's
    sub-cell boxes (which always nest inside single mother sub-cells).
    Conservative and exact on linear data; both axis orders are averaged so
    the operator commutes with the x<->y transpose.
    """
    ox, oy = offset
    a = _project_axis(_project_axis(sub, rfactor, ox, 0), rfactor, oy, 1)
    b = _project_axis(_project_axis(sub, rfactor, oy, 1), rfactor, ox, 0)
    return 0.5 * (a + b)


def limiter_average(children, rfactor: int) -> np.ndarray:
    """Aggregate the r x r children sub-grids onto the mother sub-grid.

    Coarse sub-cell boundaries always align with fine sub-cell boundaries
    (j*r in fine units), so each mother sub-average is the plain mean of an
    r x r block of fine sub-averages; conservative to roundoff.
    """
    rows = [np.concatenate([children[ox][oy] for oy in range(rfactor)], axis=1)
            for ox in range(rfactor)]
    full = np.concatenate(rows, axis=0)          # (r*Ns, r*Ns, nvar)
    ns = children[0][0].shape[0]
    blocked = full.reshape(ns, rfactor, ns, rfactor, -1)
    return blocked.mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# Refinement estimator and marking
# ---------------------------------------------------------------------------

def estimator_chi(mesh: Mesh, ell: int, pos) -> float:
    """Second/first-difference smoothness estimator of the indicator variable.

    Discrete form on the same-level 3x3 neighborhood of cell means (virtual
    positions supply restricted/aggregated means):

        chi^2 = sum_{k,l} D2_{kl}^2 /
                sum_{k,l} (|d+_k| + |d-_k| + eps*(|m(+e_l)| + 2|m| + |m(-e_l)|))^2

    with D2_kk the second difference along k, D2_kl (k != l) the standard
    4-point cross difference, and d+-_k the one-sided first differences.
    Zero for globally constant or linear data.
    """
    var = mesh.params.indicator_var
    m = {}
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            i, j, inside = mesh.wrap(ell, pos[0] + di, pos[1] + dj)
            if not inside:
                m[(di, dj)] = None
            else:
                m[(di, dj)] = float(mesh.mean_view(ell, (i, j))[var])
    c = m[(0, 0)]
    for k in list(m):
        if m[k] is None:
            m[k] = c  # zero-gradient estimator closure at walls
    d2 = {
        (0, 0): m[(1, 0)] - 2 * c + m[(-1, 0)],
        (1, 1): m[(0, 1)] - 2 * c + m[(0, -1)],
        (0, 1): 0.25 * (m[(1, 1)] - m[(1, -1)] - m[(-1, 1)] + m[(-1, -1)]),
    }
    d2[(1, 0)] = d2[(0, 1)]
    dplus = (m[(1, 0)] - c, m[(0, 1)] - c)
    dminus = (c - m[(-1, 0)], c - m[(0, -1)])
    filt = (abs(m[(1, 0)]) + 2 * abs(c) + abs(m[(-1, 0)]),
            abs(m[(0, 1)]) + 2 * abs(c) + abs(m[(0, -1)]))
    num = 0.0
    den = 0.0
    eps = mesh.params.eps_filter
    for k in (0, 1):
        for l in (0, 1):
            num += d2[(k, l)] ** 2
            den += (abs(dplus[k]) + abs(dminus[k]) + eps * filt[l]) ** 2
    if den == 0.0:
        return 0.0
    return float(np.sqrt(num / den))


def mark_cells(mesh: Mesh):
    """Produce refine/recoarsen mark sets following the rule order: estimator
    marks, shock-anticipation halo, balance-induced refinement, then
    recoarsening restricted by family unanimity, beta flags and balance."""
    params = mesh.params
    refine: set = set()
    want_rec: set = set()
    for ell, lev in enumerate(mesh.levels):
        for pos in lev.positions:
            if params.estimator == "density_below":
                mean = mesh.mean_view(ell, pos)[params.indicator_var]
                hot = mean < params.density_threshold
                cold = not hot
            else:
                chi = estimator_chi(mesh, ell, pos)
                hot = chi > params.chi_ref
                cold = chi < params.chi_rec
            if hot and ell < params.lmax:
                refine.add((ell, pos))
            elif cold and ell > 0:
                want_rec.add((ell, pos))

    # Shock-anticipation halo around refine-marked cells.
    for _ in range(params.halo):
        extra = set()
        for ell, pos in refine:
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    if di == dj == 0:
                        continue
                    kind, e, p = mesh.owner(ell, pos[0] + di, pos[1] + dj)
                    if kind == "active" and e < params.lmax:
                        extra.add((e, p))
                    elif kind == "coarse" and e < params.lmax:
                        extra.add((e, p))
        refine |= extra

    # Balance-induced refinement: coarser active Voronoi neighbors of a cell
    # being refined must refine as well.
    changed = True
    while changed:
        changed = False
        for ell, pos in list(refine):
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    if di == dj == 0:
                        continue
                    kind, e, p = mesh.owner(ell, pos[0] + di, pos[1] + dj)
                    if kind == "coarse" and (e, p) not in refine:
                        refine.add((e, p))
                        changed = True
    want_rec -= refine

    # Recoarsening: full families of unanimous, untroubled cells whose merge
    # keeps the 2:1 balance (checked against the post-refinement mesh).
    r = mesh.rfactor
    recoarsen = {}
    for ell in range(len(mesh.levels) - 1, 0, -1):
        fams = {}
        for (e, pos) in want_rec:
            if e != ell:
                continue
            fams.setdefault((pos[0] // r, pos[1] // r), []).append(pos)
        for parent, members in fams.items():
            if len(members) != r * r:
                continue
            lev = mesh.levels[ell]
            if any(lev.beta[lev.index[p]] for p in members):
                continue
            ok = True
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    if di == dj == 0:
                        continue
                    kind, e2, p2 = mesh.owner(ell - 1, parent[0] + di, parent[1] + dj)
                    if kind == "outside":
                        continue
                    if kind == "fine":
                        ok = False
                    elif kind == "active" and (e2, p2) in refine:
                        if e2 == ell:
                            ok = False
                    # membership of neighbors in recoarsen sets is immaterial:
                    # merging neighbors at the same level keeps |dl| <= 1
            if ok:
                recoarsen.setdefault(ell - 1, []).append(parent)
    refine_by_level = {}
    for ell, pos in refine:
        refine_by_level.setdefault(ell, []).append(pos)
    return refine_by_level, recoarsen


def adapt(mesh: Mesh):
    """One estimator/mark/refine/recoarsen cycle; returns (n_refined,
    n_recoarsened) family counts."""
    if mesh.params.lmax == 0:
        return 0, 0
    refine_by_level, recoarsen_by_level = mark_cells(mesh)
    nref = sum(len(v) for v in refine_by_level.values())
    refine_cells(mesh, refine_by_level)
    # re-validate balance after refinement: drop merges that now violate it
    safe = {}
    for ell, plist in recoarsen_by_level.items():
        keep = []
        for parent in plist:
            ok = all(
                p in mesh.levels[ell + 1].index
                for p in [(parent[0] * mesh.rfactor + ox, parent[1] * mesh.rfactor + oy)
                          for ox in range(mesh.rfactor) for oy in range(mesh.rfactor)]
            )
            if not ok:
                continue
            blocked = False
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    if di == dj == 0:
                        continue
                    kind, _, _ = mesh.owner(ell, parent[0] + di, parent[1] + dj)
                    if kind == "fine":
                        blocked = True
            if not blocked:
                keep.append(parent)
        if keep:
            safe[ell] = keep
    nrec = sum(len(v) for v in safe.values())
    recoarsen_families(mesh, safe)
    return nref, nrec


# ---------------------------------------------------------------------------
# Timesteps and the local-time-stepping plan
# ---------------------------------------------------------------------------

def compute_timestep(mesh: Mesh, cfl: float, lts: bool):
    """Per-level timesteps. Global mode: one dt (the min over active cells)
    for every level. LTS mode: dt_l = r * dt_{l+1}, anchored so every cell
    satisfies its own CFL bound (equals the finest level's min when the
    finest level is binding)."""
    occupied = [ell for ell, lev in enumerate(mesh.levels) if lev.n_active > 0]
    bounds = {}
    for ell in occupied:
        lev = mesh.levels[ell]
        h = min(lev.cell_size)
        b = cfl_bound(mesh.system, lev.sol, mesh.tables, h, cfl)
        bounds[ell] = float(b.min())
    if not bounds:
        raise RuntimeError("empty mesh")
    if any(not np.isfinite(v) or v <= 0 for v in bounds.values()):
        raise RuntimeError("degenerate signal speeds: no positive timestep")
    lmax_occ = max(occupied)
    r = mesh.rfactor
    if not lts:
        dt = min(bounds.values())
        return {ell: dt for ell in occupied}
    dt_fine = min(bounds[ell] * r ** (ell - lmax_occ) for ell in occupied)
    return {ell: dt_fine * r ** (lmax_occ - ell) for ell in occupied}


def lts_schedule(occupied_levels, rfactor: int, lts: bool):
    """Deterministic execution plan for one coarsest-level step.

    Entries are ('predict'|'update', level, t0_frac, dt_frac) with times in
    units of the coarsest occupied level's step. Each finer level appears r
    times per parent step under LTS (once otherwise), and all levels are
    synchronized at the end of the plan.
    """
    levels = sorted(occupied_levels)
    if not levels:
        return []
    plan = []

    def rec(ell, t0, dtf):
        plan.append(("predict", ell, t0, dtf))
        deeper = [e for e in levels if e > ell]
        if deeper:
            nxt = deeper[0]
            nsub = rfactor ** (nxt - ell) if lts else 1
            for m in range(nsub):
                rec(nxt, t0 + m * dtf / nsub, dtf / nsub)
        plan.append(("update", ell, t0, dtf))

    rec(levels[0], 0.0, 1.0)
    return plan
