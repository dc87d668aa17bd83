"""Time-marching driver: one-step predictor/corrector with a posteriori
sub-cell limiting on the adaptive mesh, global or local time stepping.

A coarse step executes the plan from amr.lts_schedule. Each level's 'predict'
phase computes relaxed-DMP bounds from t^n data and the space-time predictors
for its interval; each 'update' phase assembles face fluxes (conforming faces
pairwise, level jumps via the fine-master mortar rule, domain boundaries via
ghost traces), forms candidates, runs detection, recomputes troubled cells on
their sub-grids and reconciles the fluxes of their conforming faces so that
limiting never breaks global conservation.

Floating-point symmetry: x and y contributions combine pairwise and the y
kernels run on xy-mirrored views, so mirror-symmetric data evolves bitwise
symmetrically (checked by the explosion-problem tests).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import amr, limiter as lim
from .basis import apply_axis, lagrange_matrix
from .corrector import lift, rusanov, time_avg, volume
from .limiter import LimiterParams
from .predictor import face_trace, predict, time_slice

KIND_SAME, KIND_BOUNDARY, KIND_COARSE, KIND_FINE = 0, 1, 2, 3


@dataclass
class SolverConfig:
    cfl: float = 0.9
    lts: bool = False
    limiter: LimiterParams = field(default_factory=LimiterParams)
    limiter_on: bool = True
    adapt_every: int = 1
    static_mesh: bool = False


@dataclass
class StepRecord:
    step: int
    t: float
    dt: float
    n_limited: int
    max_limited_frac: float
    totals: np.ndarray
    n_active: int


@dataclass
class RunReport:
    records: list = field(default_factory=list)
    initial_totals: np.ndarray | None = None
    fallbacks: int = 0
    adapt_events: int = 0

    @property
    def n_steps(self):
        return len(self.records)

    def max_limited_count(self):
        return max((r.n_limited for r in self.records), default=0)

    def max_limited_frac(self):
        return max((r.max_limited_frac for r in self.records), default=0.0)

    def conservation_drift(self):
        """Max drift of each conserved total over the run, relative to the
        characteristic magnitude of the conserved quantities (zero initial
        totals, e.g. momentum, are normalized by the largest component)."""
        if not self.records or self.initial_totals is None:
            return np.zeros(0)
        scale = np.max(np.abs(self.initial_totals)) + 1e-300
        ref = np.maximum(np.abs(self.initial_totals), scale)
        worst = np.zeros_like(self.initial_totals)
        for r in self.records:
            worst = np.maximum(worst, np.abs(r.totals - self.initial_totals) / ref)
        return worst


def _pad_index_matrix(pairs, nc, fill):
    """(cell, source) pairs -> padded (nc, m) index matrix plus valid mask."""
    lists = [[] for _ in range(nc)]
    for c, s in pairs:
        lists[c].append(s)
    m = max((len(l) for l in lists), default=0)
    if m == 0:
        return None, None
    idx = np.full((nc, m), fill, dtype=np.int64)
    mask = np.zeros((nc, m), dtype=bool)
    for c, l in enumerate(lists):
        idx[c, : len(l)] = l
        mask[c, : len(l)] = True
    return idx, mask


class _LevelCache:
    pass


def build_caches(mesh: amr.Mesh):
    """Connectivity index arrays for every occupied level."""
    r = mesh.rfactor
    caches = {}
    for ell, lev in enumerate(mesh.levels):
        if lev.n_active == 0:
            continue
        c = _LevelCache()
        nc = lev.n_active
        pairs = {0: [], 1: []}
        kind = {(a, s): np.full(nc, KIND_BOUNDARY, dtype=np.int8)
                for a in (0, 1) for s in (0, 1)}
        slot = {(a, s): np.full(nc, -1, dtype=np.int64)
                for a in (0, 1) for s in (0, 1)}
        offs = {(a, s): np.zeros(nc, dtype=np.int64) for a in (0, 1) for s in (0, 1)}
        nbr_same, nbr_coarse, nbr_fine = [], [], []
        for pos in lev.positions:
            k = lev.index[pos]
            i, j = pos
            for a, s, (di, dj) in ((0, 1, (1, 0)), (0, 0, (-1, 0)),
                                   (1, 1, (0, 1)), (1, 0, (0, -1))):
                knd, e, p = mesh.owner(ell, i + di, j + dj)
                if knd == "active":
                    kind[(a, s)][k] = KIND_SAME
                    slot[(a, s)][k] = mesh.levels[e].index[p]
                    if s == 1:
                        pairs[a].append((k, mesh.levels[e].index[p]))
                elif knd == "coarse":
                    kind[(a, s)][k] = KIND_COARSE
                    slot[(a, s)][k] = mesh.levels[e].index[p]
                    offs[(a, s)][k] = (j % r) if a == 0 else (i % r)
                elif knd == "fine":
                    kind[(a, s)][k] = KIND_FINE
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    if di == dj == 0:
                        continue
                    knd, e, p = mesh.owner(ell, i + di, j + dj)
                    if knd == "active":
                        nbr_same.append((k, mesh.levels[e].index[p]))
                    elif knd == "coarse":
                        nbr_coarse.append((k, mesh.levels[e].index[p]))
                    elif knd == "fine":
                        fl = mesh.levels[e]
                        ox_r = (r - 1,) if di < 0 else ((0,) if di > 0 else tuple(range(r)))
                        oy_r = (r - 1,) if dj < 0 else ((0,) if dj > 0 else tuple(range(r)))
                        for ox in ox_r:
                            for oy in oy_r:
                                fp = (p[0] + ox, p[1] + oy)
                                nbr_fine.append((k, fl.index[fp]))
        c.pairs = {a: np.array(sorted(set(v)), dtype=np.int64).reshape(-1, 2)
                   for a, v in pairs.items()}
        c.kind, c.slot, c.offs = kind, slot, offs
        c.jump = {}
        for a in (0, 1):
            for s in (0, 1):
                ks = np.where(kind[(a, s)] == KIND_COARSE)[0]
                for off in range(r):
                    rows = ks[offs[(a, s)][ks] == off]
                    if rows.size:
                        c.jump[(a, s, off)] = np.stack(
                            [rows, slot[(a, s)][rows]], axis=1)
        c.same_idx, c.same_mask = _pad_index_matrix(sorted(set(nbr_same)), nc, 0)
        c.coarse_idx, c.coarse_mask = _pad_index_matrix(sorted(set(nbr_coarse)), nc, 0)
        c.fine_idx, c.fine_mask = _pad_index_matrix(sorted(set(nbr_fine)), nc, 0)
        caches[ell] = c
    return caches


class Solver:
    """Drives a mesh forward in time; pure numpy, single-threaded."""

    def __init__(self, mesh: amr.Mesh, config: SolverConfig | None = None,
                 diag_stream=None):
        self.mesh = mesh
        self.system = mesh.system
        self.tables = mesh.tables
        self.cfg = config or SolverConfig()
        self.t = 0.0
        self.step_count = 0
        self.caches = build_caches(mesh)
        self.diag = diag_stream
        self.report = RunReport(initial_totals=mesh.conserved_totals())
        self._coarse_subface_cache = {}

    # -- public entry points -------------------------------------------------

    def run(self, t_final: float, max_steps: int = 10**7):
        while self.t < t_final - 1e-13 and self.step_count < max_steps:
            self.advance(t_final)
        return self.report

    def advance(self, t_final: float):
        """One coarse step (all levels synchronized afterwards)."""
        mesh = self.mesh
        dts = amr.compute_timestep(mesh, self.cfg.cfl, self.cfg.lts)
        occupied = sorted(dts)
        coarsest = occupied[0]
        if self.t + dts[coarsest] > t_final:
            scale = (t_final - self.t) / dts[coarsest]
            dts = {ell: dt * scale for ell, dt in dts.items()}
        plan = amr.lts_schedule(occupied, mesh.rfactor, self.cfg.lts)
        state = {
            "dts": dts, "qhat": {}, "ok": {}, "bounds": {}, "interval": {},
            "jump_surf": {}, "jump_raw": {}, "fine_snap": {}, "limited": [],
        }
        for kind, ell, t0, dtf in plan:
            if kind == "predict":
                self._phase_predict(ell, t0, dtf, state)
            else:
                self._phase_update(ell, t0, dtf, state)
        self.t += dts[coarsest]
        self.step_count += 1
        n_lim = sum(n for (_, n, _) in state["limited"])
        frac = max((n / max(na, 1) for (_, n, na) in state["limited"]), default=0.0)
        rec = StepRecord(self.step_count, self.t, dts[coarsest], n_lim, frac,
                         mesh.conserved_totals(), mesh.active_count())
        self.report.records.append(rec)
        self.report.fallbacks = mesh.fallback_count
        if self.diag is not None:
            tot = " ".join(f"{v:.12e}" for v in rec.totals)
            self.diag.write(
                f"step {rec.step} t {rec.t:.9e} dt {rec.dt:.6e} "
                f"n_limited {rec.n_limited} active {rec.n_active} totals {tot}\n")
        if (not self.cfg.static_mesh and mesh.params.lmax > 0
                and self.step_count % self.cfg.adapt_every == 0):
            nref, nrec = amr.adapt(mesh)
            if nref or nrec:
                self.report.adapt_events += nref + nrec
                self.caches = build_caches(mesh)

    # -- phases ----------------------------------------------------------------

    def _phase_predict(self, ell, t0, dtf, state):
        mesh, lev = self.mesh, self.mesh.levels[ell]
        state["interval"][ell] = (t0, dtf)
        if ell + 1 < len(mesh.levels) and mesh.levels[ell + 1].n_active:
            fine = mesh.levels[ell + 1]
            state["fine_snap"][ell] = (fine.sol, dict(fine.sub), fine.beta)
        if self.cfg.limiter_on:
            state["bounds"][ell] = self._dmp_bounds(ell, t0, dtf, state)
        qhat, ok, _ = predict(lev.sol, self.system, self.tables,
                              lev.cell_size, state["dts"][ell])
        state["qhat"][ell] = qhat
        state["ok"][ell] = ok
        state["jump_surf"][ell] = np.zeros_like(lev.sol)
        # mortar flux profiles accumulated by FINER levels for cells of THIS
        # level; lifetime matches jump_surf (one interval of this level)
        state["jump_raw"][ell] = []

    def _dmp_bounds(self, ell, t0, dtf, state):
        mesh, lev = self.mesh, self.mesh.levels[ell]
        tb = self.tables
        cache = self.caches[ell]
        mins, maxs = lim.sample_minmax(lev.sol, tb)
        lo, hi = mins.copy(), maxs.copy()
        if cache.same_idx is not None:
            g_lo = np.where(cache.same_mask[..., None], mins[cache.same_idx], np.inf)
            g_hi = np.where(cache.same_mask[..., None], maxs[cache.same_idx], -np.inf)
            lo = np.minimum(lo, g_lo.min(axis=1))
            hi = np.maximum(hi, g_hi.max(axis=1))
        if cache.fine_idx is not None:
            fine = mesh.levels[ell + 1]
            fmin, fmax = lim.sample_minmax(fine.sol, tb)
            g_lo = np.where(cache.fine_mask[..., None], fmin[cache.fine_idx], np.inf)
            g_hi = np.where(cache.fine_mask[..., None], fmax[cache.fine_idx], -np.inf)
            lo = np.minimum(lo, g_lo.min(axis=1))
            hi = np.maximum(hi, g_hi.max(axis=1))
        if cache.coarse_idx is not None:
            if self.cfg.lts and (ell - 1) in state["qhat"]:
                ct0, cdt = state["interval"][ell - 1]
                cmin = cmax = None
                for frac in (0.0, 0.5, 1.0):
                    tau = float(np.clip((t0 - ct0 + frac * dtf) / cdt, 0.0, 1.0))
                    sl = time_slice(state["qhat"][ell - 1], tb, tau)
                    m_, x_ = lim.sample_minmax(sl, tb)
                    cmin = m_ if cmin is None else np.minimum(cmin, m_)
                    cmax = x_ if cmax is None else np.maximum(cmax, x_)
            else:
                cmin, cmax = lim.sample_minmax(mesh.levels[ell - 1].sol, tb)
            g_lo = np.where(cache.coarse_mask[..., None], cmin[cache.coarse_idx], np.inf)
            g_hi = np.where(cache.coarse_mask[..., None], cmax[cache.coarse_idx], -np.inf)
            lo = np.minimum(lo, g_lo.min(axis=1))
            hi = np.maximum(hi, g_hi.max(axis=1))
        return lim.relax_bounds(lo, hi, self.cfg.limiter)

    def _phase_update(self, ell, t0, dtf, state):
        mesh, lev = self.mesh, self.mesh.levels[ell]
        cache = self.caches[ell]
        sys, tb = self.system, self.tables
        nc, n1, nv = lev.n_active, tb.n1, sys.nvars
        dt = state["dts"][ell]
        dx, dy = lev.cell_size
        qhat = state["qhat"][ell]

        traces = {(a, s): face_trace(qhat, tb, a, s) for a in (0, 1) for s in (0, 1)}
        gbuf = {(a, s): np.zeros((nc, n1, nv)) for a in (0, 1) for s in (0, 1)}

        for a in (0, 1):
            pr = cache.pairs[a]
            if pr.size:
                g = time_avg(rusanov(sys, traces[(a, 1)][pr[:, 0]],
                                     traces[(a, 0)][pr[:, 1]], a), tb)
                gbuf[(a, 1)][pr[:, 0]] = g
                gbuf[(a, 0)][pr[:, 1]] = g

        for a in (0, 1):
            for s in (0, 1):
                slots = np.where(cache.kind[(a, s)] == KIND_BOUNDARY)[0]
                if not slots.size:
                    continue
                bc = mesh.bc[("x-", "x+")[s] if a == 0 else ("y-", "y+")[s]]
                own = traces[(a, s)][slots]
                ghost = sys.reflect(own, a) if bc == "reflective" else own
                if s == 1:
                    g = time_avg(rusanov(sys, own, ghost, a), tb)
                else:
                    g = time_avg(rusanov(sys, ghost, own, a), tb)
                gbuf[(a, s)][slots] = g

        # level-jump faces: this level is the fine quadrature master
        r_t = mesh.rfactor if self.cfg.lts else 1
        for (a, s, off), rec in cache.jump.items():
            fs, cs = rec[:, 0], rec[:, 1]
            ct0, cdt = state["interval"][ell - 1]
            cq = state["qhat"][ell - 1][cs]
            if self.cfg.lts:
                m = int(round((t0 - ct0) / dtf))
                cq = apply_axis(tb.child_eval(r_t, m), cq, -2)
            ctr = face_trace(cq, tb, a, 1 - s)
            emat = tb.child_eval(mesh.rfactor, off)
            ctr = apply_axis(emat, ctr, 1)
            if s == 1:
                g = rusanov(sys, traces[(a, 1)][fs], ctr, a)
            else:
                g = rusanov(sys, ctr, traces[(a, 0)][fs], a)
            gb = time_avg(g, tb)
            gbuf[(a, s)][fs] = gb
            equiv = np.einsum("jk,fjv->fkv", emat * tb.weights[:, None], gb)
            equiv /= mesh.rfactor * tb.weights[None, :, None] * r_t
            csl = mesh.levels[ell - 1].cell_size
            kc = state["dts"][ell - 1] / csl[a]
            sgn = 1.0 if (1 - s) == 1 else -1.0
            np.add.at(state["jump_surf"][ell - 1], cs,
                      sgn * kc * lift(equiv, tb, a, 1 - s))
            state["jump_raw"][ell - 1].append((a, s, off, rec, gb / r_t))

        kx, ky = dt / dx, dt / dy
        surf_x = kx * (lift(gbuf[(0, 1)], tb, 0, 1) - lift(gbuf[(0, 0)], tb, 0, 0))
        surf_y = ky * (lift(gbuf[(1, 1)], tb, 1, 1) - lift(gbuf[(1, 0)], tb, 1, 0))
        vol = volume(qhat, sys, tb, (kx, ky))
        cand = lev.sol - ((surf_x + surf_y) - vol) - state["jump_surf"][ell]

        if self.cfg.limiter_on:
            lo, hi = state["bounds"][ell]
            beta = self._detect(cand, lo, hi, state["ok"][ell])
        else:
            beta = np.zeros(nc, dtype=np.int8)
        state["limited"].append((ell, int(beta.sum()), mesh.active_count()))

        new_sub: dict = {}
        if beta.any():
            cand = self._recompute_troubled(ell, t0, dtf, state, beta, cand,
                                            gbuf, new_sub)
        lev.sol = cand
        lev.beta = beta
        lev.sub = new_sub

    def _detect(self, cand, lo, hi, ok):
        tb, sys = self.tables, self.system
        vals = lim.sample_states(cand, tb)
        with np.errstate(all="ignore"):
            finite = np.all(np.isfinite(vals), axis=(1, 2))
            adm = np.all(sys.admissible(vals), axis=1)
            vmin = vals.min(axis=1)
            vmax = vals.max(axis=1)
        mask = self.cfg.limiter.var_mask(vals.shape[-1])
        dmp_ok = (np.all((vmin >= lo) | ~mask, axis=1)
                  & np.all((vmax <= hi) | ~mask, axis=1))
        good = finite & adm & dmp_ok & ok
        return (~good).astype(np.int8)

    # -- troubled-cell machinery -------------------------------------------------

    def _recompute_troubled(self, ell, t0, dtf, state, beta, cand, gbuf, new_sub):
        mesh, lev = self.mesh, self.mesh.levels[ell]
        tb, sys = self.tables, self.system
        ns = tb.n_sub
        slots = np.where(beta == 1)[0]
        n_t = len(slots)
        nv = sys.nvars
        row_of = {int(k): r for r, k in enumerate(slots)}

        ext = np.zeros((n_t, ns + 6, ns + 6, nv))
        # one vectorized scatter of the whole level feeds most ghost blocks
        level_scatter = lim.scatter(lev.sol, tb)
        block_cache: dict = {(ell, p[0], p[1]):
                             (lev.sub[p] if p in lev.sub else level_scatter[kk])
                             for p, kk in lev.index.items()}
        for row, k in enumerate(slots):
            ext[row] = self._extended_subaverages(ell, lev.positions[k], t0, state,
                                                  block_cache)

        h_sub = (lev.cell_size[0] / ns, lev.cell_size[1] / ns)
        dt = state["dts"][ell]
        gx, gy, nfb = lim.subcell_fv_fluxes_2d(ext, sys, dt, h_sub)
        mesh.fallback_count += nfb

        # jump faces keep the mortar DG flux (integrated over the sub-faces)
        for row, k in enumerate(slots):
            for a in (0, 1):
                for s in (0, 1):
                    knd = self.caches[ell].kind[(a, s)][k]
                    if knd == KIND_COARSE:
                        val = np.einsum("sn,nv->sv", tb.scatter1, gbuf[(a, s)][k])
                    elif knd == KIND_FINE:
                        val = self._coarse_jump_subfaces(ell, int(k), a, s, state)
                    else:
                        continue
                    if a == 0 and s == 0:
                        gx[row, 0] = val
                    elif a == 0:
                        gx[row, -1] = val
                    elif s == 0:
                        gy[row, :, 0] = val
                    else:
                        gy[row, :, -1] = val

        # shared faces of two troubled cells: copy one flux to both rows
        for a in (0, 1):
            pr = self.caches[ell].pairs[a]
            for kl, kr in pr:
                if beta[kl] and beta[kr]:
                    rl, rr = row_of[int(kl)], row_of[int(kr)]
                    if a == 0:
                        gx[rr, 0] = gx[rl, -1]
                    else:
                        gy[rr, :, 0] = gy[rl, :, -1]

        vnew, outer = lim.subcell_fv_update_2d(ext, gx, gy, dt, h_sub)
        bad = ~np.all(sys.admissible(vnew), axis=(1, 2))
        if bad.any():
            mesh.fallback_count += int(bad.sum())

        for row, k in enumerate(slots):
            pos = lev.positions[k]
            new_sub[pos] = vnew[row]
            cand[k] = lim.gather(vnew[row], tb)

        self._reconcile(ell, state, beta, cand, gbuf, slots, row_of, outer)
        return cand

    def _reconcile(self, ell, state, beta, cand, gbuf, slots, row_of, outer):
        """Replace the DG flux with the sub-grid FV flux on conforming faces
        of troubled cells; untroubled neighbors get the lifted difference so
        both sides consume identical fluxes (exact conservation)."""
        lev = self.mesh.levels[ell]
        tb = self.tables
        ns = tb.n_sub
        dt = state["dts"][ell]
        cache = self.caches[ell]
        for row, k in enumerate(slots):
            for a in (0, 1):
                d_ax = lev.cell_size[a]
                for s in (0, 1):
                    if cache.kind[(a, s)][k] != KIND_SAME:
                        continue
                    k2 = int(cache.slot[(a, s)][k])
                    if beta[k2]:
                        continue
                    gbar_fv = outer[(a, s)][row]          # (Ns, nv) sub-face means
                    equiv = (tb.scatter1.T @ gbar_fv) / (ns * tb.weights[:, None])
                    delta = equiv - gbuf[(a, s)][k]
                    s2 = 1 - s
                    sgn = 1.0 if s2 == 1 else -1.0
                    patch = sgn * (dt / d_ax) * lift(delta[None], tb, a, s2)[0]
                    cand[k2] -= patch

    def _coarse_jump_subfaces(self, ell, k, a, s, state):
        """Sub-face integrals (over this coarse cell's sub-grid) of the mortar
        fluxes its fine neighbors computed across the shared face."""
        mesh = self.mesh
        tb = self.tables
        r = mesh.rfactor
        ns = tb.n_sub
        nv = self.system.nvars
        profiles = np.zeros((r, tb.n1, nv))
        for (af, sf, off, rec, gb) in state["jump_raw"].get(ell, []):
            if af != a or sf != (1 - s):
                continue
            hit = np.where(rec[:, 1] == k)[0]
            for h in hit:
                profiles[off] += gb[h]
        M = self._coarse_subface_matrix(ns, r, tb)
        return np.einsum("jok,okv->jv", M, profiles)

    def _coarse_subface_matrix(self, ns, r, tb):
        """M[j, o, n]: contribution of fine-face-o nodal value n to the mean
        mortar flux over coarse sub-face j (exact polynomial integration of
        the piecewise-nodal profile over the overlap intervals)."""
        key = (ns, r, tb.n1)
        if key not in self._coarse_subface_cache:
            M = np.zeros((ns, r, tb.n1))
            for j in range(ns):
                lo_c, hi_c = j / ns, (j + 1) / ns
                for o in range(r):
                    a_ = max(0.0, lo_c * r - o)
                    b_ = min(1.0, hi_c * r - o)
                    if b_ - a_ <= 1e-14:
                        continue
                    pts = a_ + tb.nodes * (b_ - a_)
                    row = tb.weights @ lagrange_matrix(tb.nodes, pts)
                    M[j, o] = (ns / r) * (b_ - a_) * row
            self._coarse_subface_cache[key] = M
        return self._coarse_subface_cache[key]

    # -- ghost sub-averages -------------------------------------------------------

    def _extended_subaverages(self, ell, pos, t0, state, block_cache=None):
        """(Ns+6, Ns+6, nvar) sub-averages: the troubled cell plus three ghost
        layers per side fetched from same-level neighbor views at the interval
        start (virtual children/mothers across level jumps, BC transforms at
        the domain boundary). block_cache shares fetched neighbor blocks
        between adjacent troubled cells within one phase."""
        tb = self.tables
        ns = tb.n_sub
        nv = self.system.nvars
        if block_cache is None:
            block_cache = {}
        out = np.empty((ns + 6, ns + 6, nv))
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if di == 0 and dj == 0:
                    block = self._sub_block(ell, pos[0], pos[1], t0, state, block_cache)
                else:
                    block = self._neighbor_block(ell, pos, di, dj, t0, state, block_cache)
                xs = {-1: slice(0, 3), 0: slice(3, 3 + ns), 1: slice(3 + ns, 6 + ns)}[di]
                ys = {-1: slice(0, 3), 0: slice(3, 3 + ns), 1: slice(3 + ns, 6 + ns)}[dj]
                bx = {-1: slice(ns - 3, ns), 0: slice(0, ns), 1: slice(0, 3)}[di]
                by = {-1: slice(ns - 3, ns), 0: slice(0, ns), 1: slice(0, 3)}[dj]
                out[xs, ys] = block[bx, by]
        return out

    def _neighbor_block(self, ell, pos, di, dj, t0, state, block_cache):
        """Same-level (Ns, Ns) sub-average block of the neighbor at offset
        (di, dj), honoring periodic wrap and boundary-condition ghosts."""
        mesh = self.mesh
        i2, j2, inside = mesh.wrap(ell, pos[0] + di, pos[1] + dj)
        if inside:
            return self._sub_block(ell, i2, j2, t0, state, block_cache)
        nx, ny = mesh.levels[ell].dims
        out_x = not (0 <= i2 < nx)
        out_y = not (0 <= j2 < ny)
        if out_x:
            base = self._neighbor_block(ell, pos, 0, dj, t0, state, block_cache)
            side = 1 if di > 0 else 0
            bc = mesh.bc["x+" if side else "x-"]
            return self._bc_extend(base, 0, side, bc)
        if out_y:
            base = self._neighbor_block(ell, pos, di, 0, t0, state, block_cache)
            side = 1 if dj > 0 else 0
            bc = mesh.bc["y+" if side else "y-"]
            return self._bc_extend(base, 1, side, bc)
        raise AssertionError("unreachable")

    def _bc_extend(self, block, axis, side, bc):
        """Ghost block beyond a wall: constant extrapolation (transmissive) or
        mirror with flipped normal components (reflective). Blocks are indexed
        so that slicing by the caller picks the correct ghost layers."""
        if bc == "reflective":
            ghost = self.system.reflect(np.flip(block, axis=axis), axis)
            return ghost
        if axis == 0:
            edge = block[-1:] if side == 1 else block[:1]
            return np.broadcast_to(edge, block.shape).copy()
        edge = block[:, -1:] if side == 1 else block[:, :1]
        return np.broadcast_to(edge, block.shape).copy()

    def _sub_block(self, ell, i, j, t0, state, block_cache=None):
        """(Ns, Ns) sub-averages representing the same-level position (i, j)
        at this level's interval start: stored FV data or scatter for active
        cells, predictor-sliced virtual children below coarser actives,
        aggregated snapshots above finer actives."""
        if block_cache is not None:
            key = (ell, i, j)
            hit = block_cache.get(key)
            if hit is None:
                hit = self._sub_block_impl(ell, i, j, t0, state)
                block_cache[key] = hit
            return hit
        return self._sub_block_impl(ell, i, j, t0, state)

    def _sub_block_impl(self, ell, i, j, t0, state):
        mesh = self.mesh
        tb = self.tables
        r = mesh.rfactor
        lev = mesh.levels[ell]
        if (i, j) in lev.index:
            k = lev.index[(i, j)]
            if (i, j) in lev.sub:
                return lev.sub[(i, j)]
            return lim.scatter(lev.sol[k], tb)
        parent = (i // r, j // r)
        if ell > 0 and parent in mesh.levels[ell - 1].index:
            plev = mesh.levels[ell - 1]
            pk = plev.index[parent]
            off = (i % r, j % r)
            if plev.beta[pk] and parent in plev.sub:
                return amr.limiter_project(plev.sub[parent], r, off)
            if self.cfg.lts and (ell - 1) in state["qhat"]:
                ct0, cdt = state["interval"][ell - 1]
                tau = float(np.clip((t0 - ct0) / cdt, 0.0, 1.0))
                dofs = time_slice(state["qhat"][ell - 1][pk:pk + 1], tb, tau)[0]
            else:
                dofs = plev.sol[pk]
            child = apply_axis(tb.child_eval(r, off[0]), dofs, 0)
            child = apply_axis(tb.child_eval(r, off[1]), child, 1)
            return lim.scatter(child, tb)
        # finer actives cover this position: aggregate the snapshot taken at
        # this level's interval start
        snap = state["fine_snap"].get(ell)
        fine = mesh.levels[ell + 1]
        sol_s, sub_s, beta_s = snap if snap is not None else (fine.sol, fine.sub, fine.beta)
        kids = []
        for ox in range(r):
            col = []
            for oy in range(r):
                fp = (i * r + ox, j * r + oy)
                fk = fine.index[fp]
                if beta_s[fk] and fp in sub_s:
                    col.append(sub_s[fp])
                else:
                    col.append(lim.scatter(sol_s[fk], tb))
            kids.append(col)
        return amr.limiter_average(kids, r)
