"""Full-space OPF and SCOPF instances as NLP callback bundles.

Variables are ordered (theta, vm, pg, qg) for a single-scenario OPF. For
SCOPF the vector is partitioned into per-scenario local blocks followed by
one shared global block; the non-anticipatory coupling (PV voltages and
non-reference active power equal across scenarios) is realized by column
sharing rather than extra equality rows, which gives the per-scenario KKT
blocks their bordered block-diagonal shape.

All inequality constraints use the one-sided form h(x) <= 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import powerflow as pf
from .grid_model import (
    AdmittanceMatrix,
    Contingency,
    GridCase,
    IslandingError,
    ValidationError,
    apply_contingency,
    build_admittance,
)

FIXED_RELAX = 1e-12  # half-width of the bound box used to pin a variable


class DimensionMismatch(Exception):
    pass


@dataclass(frozen=True)
class VariablePartition:
    """Local/global column layout of a (SC)OPF variable vector."""

    local_slices: tuple[slice, ...]  # one per scenario, contiguous, first
    global_slice: slice  # shared columns, placed last
    n_scenarios: int  # N_c + 1

    @property
    def n(self) -> int:
        return self.global_slice.stop


@dataclass(frozen=True)
class ArrowheadLayout:
    """Index sets carving the reduced KKT matrix into arrowhead blocks.

    Row/column indices refer to the slack-reduced KKT vector ordered
    (x, lambda_g, lambda_h). Every constraint row is local to exactly one
    scenario; only shared variable columns form the corner block.
    """

    scenario_rows: tuple[np.ndarray, ...]
    corner_rows: np.ndarray

    @property
    def dim(self) -> int:
        return sum(len(r) for r in self.scenario_rows) + len(self.corner_rows)


@dataclass
class NlpProblem:
    n: int
    n_g: int
    n_h: int
    lb: np.ndarray
    ub: np.ndarray
    x0: np.ndarray
    f: Callable[[np.ndarray], float]
    grad_f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    h: Callable[[np.ndarray], np.ndarray]
    jac_g: Callable[[np.ndarray], sp.csr_matrix]
    jac_h: Callable[[np.ndarray], sp.csr_matrix]
    hess_lagrangian: Callable[[np.ndarray, np.ndarray, np.ndarray], sp.csr_matrix]
    partition: VariablePartition | None = None
    layout: ArrowheadLayout | None = None
    name: str = "nlp"
    meta: dict = field(default_factory=dict)

    def kkt_layout(self) -> ArrowheadLayout:
        if self.layout is None:
            raise ValueError("problem carries no arrowhead layout")
        return self.layout


def lagrangian_hessian(problem: NlpProblem, x, lam_g, lam_h) -> sp.csr_matrix:
    """Exact Hessian of f - lam_g' g - lam_h' h at x."""
    x = np.asarray(x, dtype=float)
    lam_g = np.asarray(lam_g, dtype=float)
    lam_h = np.asarray(lam_h, dtype=float)
    if x.shape != (problem.n,) or lam_g.shape != (problem.n_g,) \
            or lam_h.shape != (problem.n_h,):
        raise DimensionMismatch("bad shapes for Hessian evaluation")
    return problem.hess_lagrangian(x, lam_g, lam_h)


@dataclass(frozen=True)
class _ScenarioMap:
    """Column maps from bus/generator arrays into the global variable vector."""

    grid: GridCase
    Y: AdmittanceMatrix
    th: np.ndarray  # (n_b,)
    vm: np.ndarray  # (n_b,)
    p: np.ndarray  # (n_g,)
    q: np.ndarray  # (n_g,)
    g_rows: slice
    h_rows: slice
    lines: np.ndarray  # rated in-service branch indices of that grid


def _pin(lb, ub, i, value):
    lb[i] = value - FIXED_RELAX
    ub[i] = value + FIXED_RELAX


def _cost_terms(grid: GridCase):
    base = grid.base_mva
    a = np.array([g.cost_a for g in grid.generators]) * base**2
    b = np.array([g.cost_b for g in grid.generators]) * base
    c = np.array([g.cost_c for g in grid.generators])
    live = np.array([bool(g.status) for g in grid.generators])
    return a * live, b * live, c * live


def _scenario_callbacks(sm: _ScenarioMap, x):
    grid = sm.grid
    th = x[sm.th]
    vm = x[sm.vm]
    pg = x[sm.p]
    qg = x[sm.q]
    return grid, th, vm, pg, qg


def _scenario_g(sm: _ScenarioMap, x) -> np.ndarray:
    grid, th, vm, pg, qg = _scenario_callbacks(sm, x)
    c = pf.complex_mismatch(grid, sm.Y, vm, th, pg, qg)
    return np.concatenate([c.real, c.imag])


def _scenario_h(sm: _ScenarioMap, x) -> np.ndarray:
    grid, th, vm, pg, qg = _scenario_callbacks(sm, x)
    h, _ = pf.line_flow_h(grid, sm.Y, vm, th)
    return h


def _gen_incidence(grid: GridCase) -> sp.csr_matrix:
    gbus = grid.gen_bus_positions()
    live = np.array([g.status for g in grid.generators], dtype=float)
    return sp.csr_matrix(
        (live, (gbus, np.arange(grid.n_g))), shape=(grid.n_b, grid.n_g)
    )


def _scenario_jac_g(sm: _ScenarioMap, x, n: int) -> sp.csr_matrix:
    grid, th, vm, pg, qg = _scenario_callbacks(sm, x)
    V = vm * np.exp(1j * th)
    ds_dva, ds_dvm = pf.dsbus_dv(sm.Y.ybus, V)
    cg = _gen_incidence(grid)
    nb, ng = grid.n_b, grid.n_g
    zero = sp.csr_matrix((nb, ng))
    rows = sp.bmat(
        [
            [ds_dva.real, ds_dvm.real, -cg, zero],
            [ds_dva.imag, ds_dvm.imag, zero, -cg],
        ],
        format="coo",
    )
    cols = np.concatenate([sm.th, sm.vm, sm.p, sm.q])
    out = sp.csr_matrix(
        (rows.data, (rows.row, cols[rows.col])), shape=(2 * nb, n)
    )
    return out


def _scenario_jac_h(sm: _ScenarioMap, x, n: int) -> sp.csr_matrix:
    grid, th, vm, pg, qg = _scenario_callbacks(sm, x)
    jac, _ = pf.line_flow_jacobian(grid, sm.Y, vm, th)
    jac = sp.coo_matrix(jac)
    cols = np.concatenate([sm.th, sm.vm])
    return sp.csr_matrix(
        (jac.data, (jac.row, cols[jac.col])), shape=(jac.shape[0], n)
    )


def _scenario_hess(sm: _ScenarioMap, x, lam_g_rows, lam_h_rows, n) -> sp.coo_matrix:
    """Scatter -(lam' d2g + lam' d2h) of one scenario into global coordinates."""
    grid, th, vm, pg, qg = _scenario_callbacks(sm, x)
    nb = grid.n_b
    V = vm * np.exp(1j * th)
    lam_re, lam_im = -lam_g_rows[:nb], -lam_g_rows[nb:]
    h_aa, h_av, h_vv = pf.weighted_mismatch_hessian(sm.Y, V, lam_re, lam_im)
    if len(sm.lines) and lam_h_rows is not None and len(lam_h_rows):
        f_aa, f_av, f_vv = pf.weighted_flow_hessian(
            grid, sm.Y, V, -lam_h_rows, sm.lines
        )
        h_aa = h_aa + f_aa
        h_av = h_av + f_av
        h_vv = h_vv + f_vv
    blocks = sp.bmat([[h_aa, h_av], [h_av.T, h_vv]], format="coo")
    cols = np.concatenate([sm.th, sm.vm])
    return sp.coo_matrix(
        (blocks.data, (cols[blocks.row], cols[blocks.col])), shape=(n, n)
    )


def _build(grid: GridCase, scenarios: list[GridCase], shared: bool,
           name: str) -> NlpProblem:
    """Common constructor for OPF (one scenario, no sharing) and SCOPF."""
    nb, ng = grid.n_b, grid.n_g
    part = pf.make_partition(grid)
    ref = part.ref
    pv = part.pv
    gbus = grid.gen_bus_positions()
    live = np.array([g.status for g in grid.generators], dtype=bool)
    ref_gen = (gbus == ref) & live

    n_sc = len(scenarios)
    maps: list[_ScenarioMap] = []
    local_slices = []
    col = 0
    pending = []  # per scenario: partial maps with -1 where shared

    pv_set = set(pv.tolist())
    for sc in scenarios:
        start = col
        th = np.arange(col, col + nb)
        col += nb
        vm = np.full(nb, -1, dtype=int)
        loc_v = [b for b in range(nb) if not (shared and b in pv_set)]
        vm[loc_v] = np.arange(col, col + len(loc_v))
        col += len(loc_v)
        p = np.full(ng, -1, dtype=int)
        q = np.full(ng, -1, dtype=int)
        if shared:
            # local block ordered (theta, v, q, p_ref); shared columns last
            q[:] = np.arange(col, col + ng)
            col += ng
            loc_p = np.flatnonzero(ref_gen)
            p[loc_p] = np.arange(col, col + len(loc_p))
            col += len(loc_p)
        else:
            # plain OPF ordering (theta, v, p, q)
            p[:] = np.arange(col, col + ng)
            col += ng
            q[:] = np.arange(col, col + ng)
            col += ng
        local_slices.append(slice(start, col))
        pending.append((sc, th, vm, p, q))

    global_start = col
    if shared:
        vm_shared = {int(b): col + i for i, b in enumerate(pv)}
        col += len(pv)
        p_shared_gens = np.flatnonzero(~ref_gen)
        p_shared = {int(j): col + i for i, j in enumerate(p_shared_gens)}
        col += len(p_shared_gens)
    n = col
    partition = VariablePartition(
        local_slices=tuple(local_slices),
        global_slice=slice(global_start, n),
        n_scenarios=n_sc,
    )

    g_off = 0
    h_off = 0
    g_sizes, h_sizes = [], []
    for sc, th, vm, p, q in pending:
        if shared:
            for b, slot in vm_shared.items():
                vm[b] = slot
            for j, slot in p_shared.items():
                p[j] = slot
        Y = build_admittance(sc)
        lines = pf.rated_lines(sc)
        nh_c = 2 * len(lines)
        maps.append(
            _ScenarioMap(
                grid=sc, Y=Y, th=th, vm=vm, p=p, q=q,
                g_rows=slice(g_off, g_off + 2 * nb),
                h_rows=slice(h_off, h_off + nh_c),
                lines=lines,
            )
        )
        g_sizes.append(2 * nb)
        h_sizes.append(nh_c)
        g_off += 2 * nb
        h_off += nh_c
    n_g_total, n_h_total = g_off, h_off

    # Bounds and start point.
    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    x0 = np.zeros(n)
    for sm in maps:
        for b in range(nb):
            bus = grid.buses[b]
            x0[sm.th[b]] = bus.va0
            lb[sm.vm[b]] = bus.vmin
            ub[sm.vm[b]] = bus.vmax
            x0[sm.vm[b]] = bus.vm0
        _pin(lb, ub, sm.th[ref], grid.buses[ref].va0)
        for j, g in enumerate(grid.generators):
            lb[sm.p[j]], ub[sm.p[j]] = g.pmin, g.pmax
            lb[sm.q[j]], ub[sm.q[j]] = g.qmin, g.qmax
            x0[sm.p[j]] = np.clip(g.pg0, g.pmin, g.pmax)
            x0[sm.q[j]] = np.clip(g.qg0, g.qmin, g.qmax)
            if not g.status:
                _pin(lb, ub, sm.p[j], 0.0)
                _pin(lb, ub, sm.q[j], 0.0)

    # Objective over the nominal scenario only.
    a_c, b_c, c_c = _cost_terms(grid)
    p0 = maps[0].p

    def f(x):
        p = x[p0]
        return float(np.sum(a_c * p * p + b_c * p + c_c))

    def grad_f(x):
        out = np.zeros(n)
        out[p0] = 2 * a_c * x[p0] + b_c
        return out

    def g_fun(x):
        return np.concatenate([_scenario_g(sm, x) for sm in maps])

    def h_fun(x):
        if n_h_total == 0:
            return np.zeros(0)
        return np.concatenate([_scenario_h(sm, x) for sm in maps])

    def jac_g(x):
        return sp.csr_matrix(sp.vstack([_scenario_jac_g(sm, x, n) for sm in maps]))

    def jac_h(x):
        if n_h_total == 0:
            return sp.csr_matrix((0, n))
        return sp.csr_matrix(sp.vstack([_scenario_jac_h(sm, x, n) for sm in maps]))

    def hess(x, lam_g, lam_h):
        H = sp.coo_matrix((n, n))
        diag = np.zeros(n)
        diag[p0] += 2 * a_c
        for sm in maps:
            lg = lam_g[sm.g_rows]
            lh = lam_h[sm.h_rows] if n_h_total else None
            H = H + _scenario_hess(sm, x, lg, lh, n)
        H = H + sp.diags(diag)
        return sp.csr_matrix((H + H.T) * 0.5)

    # Arrowhead layout over the reduced KKT vector (x, lam_g, lam_h).
    scen_rows = []
    for k, sm in enumerate(maps):
        ls = local_slices[k]
        rows = np.concatenate([
            np.arange(ls.start, ls.stop),
            n + np.arange(sm.g_rows.start, sm.g_rows.stop),
            n + n_g_total + np.arange(sm.h_rows.start, sm.h_rows.stop),
        ])
        scen_rows.append(rows)
    corner = np.arange(global_start, n)
    layout = ArrowheadLayout(
        scenario_rows=tuple(scen_rows), corner_rows=corner
    )

    return NlpProblem(
        n=n, n_g=n_g_total, n_h=n_h_total, lb=lb, ub=ub, x0=x0,
        f=f, grad_f=grad_f, g=g_fun, h=h_fun,
        jac_g=jac_g, jac_h=jac_h, hess_lagrangian=hess,
        partition=partition, layout=layout, name=name,
        meta={"base_mva": grid.base_mva, "n_scenarios": n_sc,
              "maps": maps, "grid": grid},
    )


def build_opf(grid: GridCase) -> NlpProblem:
    """Full-space OPF over (theta, vm, pg, qg) with cost-minimizing objective."""
    return _build(grid, [grid], shared=False, name=f"opf-{grid.name}")


def build_scopf(grid: GridCase, contingencies: list[Contingency]) -> NlpProblem:
    """Full-space SCOPF: nominal plus one replicated block per contingency.

    Contingencies must be pre-screened; an islanding outage raises. Duplicate
    outages are rejected (set semantics).
    """
    seen = set()
    for c in contingencies:
        if c.outaged_branch in seen:
            raise ValidationError(
                f"duplicate contingency for branch {c.outaged_branch}"
            )
        seen.add(c.outaged_branch)
    scenarios = [grid]
    for c in contingencies:
        scenarios.append(apply_contingency(grid, c))  # raises IslandingError
    labels = ",".join(str(c.outaged_branch) for c in contingencies)
    return _build(grid, scenarios, shared=True,
                  name=f"scopf-{grid.name}-[{labels}]")
