"""Reduced-space OPF/SCOPF: optimize only the controls u = (v at PV buses,
p of PV-bus generators); the network states follow from per-scenario Newton
power flows, so the power balance equations are satisfied implicitly.

Gradients of the objective, the line-flow constraints, the state-bound
constraints, and the lumped (smooth-max) constraints are evaluated with the
adjoint method: one transposed-Jacobian solve per scalar function, reusing
a single factorization of g11' per scenario and point. Second derivatives
are approximated by L-BFGS inside the interior-point driver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import ipm_core, powerflow as pf
from .grid_model import Contingency, GridCase, apply_contingency, build_admittance
from .opf_problems import NlpProblem, _cost_terms
from .quasi_newton import LbfgsHistory, lbfgs_apply, lbfgs_matrix, lbfgs_update

__all__ = [
    "ReducedProblem", "build_reduced", "evaluate_states",
    "objective_gradient_adjoint", "constraint_gradient_adjoint",
    "bound_gradients_adjoint", "lumped_value", "lumped_gradient",
    "lbfgs_apply", "lbfgs_update", "LbfgsHistory", "lbfgs_matrix",
    "reduced_nlp", "reduced_solve", "EmptyLumpSet",
]


class EmptyLumpSet(Exception):
    pass


@dataclass
class ScenarioState:
    """Cached PF solution and derivative factorizations for one scenario."""

    vm: np.ndarray
    va: np.ndarray
    pg: np.ndarray
    qg: np.ndarray
    blocks: pf.PfJacobianBlocks | None = None
    g11t_factor: object = None
    ds_dva: sp.csr_matrix | None = None
    ds_dvm: sp.csr_matrix | None = None
    g_u: tuple | None = None  # cached (dg1/du, dg2/du)


@dataclass
class ReducedProblem:
    base: GridCase
    grids: list[GridCase]
    admittances: list
    part: pf.PfPartition
    lump: bool = True
    smoothing: float = 0.1
    lump_threshold: float = 5.0
    pf_tol: float = 1e-10
    pf_max_iter: int = 25
    stats: dict = field(default_factory=lambda: {
        "pf_solves": 0, "g11_factorizations": 0, "adjoint_solves": 0,
    })
    _cache_key: bytes | None = None
    _cache: list[ScenarioState] | None = None
    _alpha: dict = field(default_factory=dict)  # frozen per (scenario, class)

    @property
    def n_scenarios(self) -> int:
        return len(self.grids)

    @property
    def n_u(self) -> int:
        return self.part.n_pv + len(self.part.pv_gens)

    def split_u(self, u: np.ndarray):
        return u[: self.part.n_pv], u[self.part.n_pv:]

    def u_bounds(self):
        grid = self.base
        lo = [grid.buses[b].vmin for b in self.part.pv]
        hi = [grid.buses[b].vmax for b in self.part.pv]
        lo += [grid.generators[j].pmin for j in self.part.pv_gens]
        hi += [grid.generators[j].pmax for j in self.part.pv_gens]
        return np.array(lo), np.array(hi)

    def u_start(self):
        grid = self.base
        v = [grid.buses[b].vm0 for b in self.part.pv]
        p = [grid.generators[j].pg0 for j in self.part.pv_gens]
        return np.array(v + p)

    def bounded_states(self):
        """(labels, lower, upper) of the states carrying box constraints:
        v at PQ buses, then REF-generator p and q, then PV-generator q."""
        grid = self.base
        labels, lo, hi = [], [], []
        for b in self.part.pq:
            labels.append(("v_pq", int(b)))
            lo.append(grid.buses[b].vmin)
            hi.append(grid.buses[b].vmax)
        for j in self.part.ref_gens:
            labels.append(("p_gen", int(j)))
            lo.append(grid.generators[j].pmin)
            hi.append(grid.generators[j].pmax)
        for j in self.part.ref_gens:
            labels.append(("q_gen", int(j)))
            lo.append(grid.generators[j].qmin)
            hi.append(grid.generators[j].qmax)
        for j in self.part.pv_gens:
            labels.append(("q_gen", int(j)))
            lo.append(grid.generators[j].qmin)
            hi.append(grid.generators[j].qmax)
        return labels, np.array(lo), np.array(hi)


def build_reduced(grid: GridCase, contingencies: list[Contingency] | None = None,
                  lump: bool = True, smoothing: float = 0.1,
                  pf_tol: float = 1e-10) -> ReducedProblem:
    contingencies = contingencies or []
    grids = [grid] + [apply_contingency(grid, c) for c in contingencies]
    return ReducedProblem(
        base=grid, grids=grids,
        admittances=[build_admittance(g) for g in grids],
        part=pf.make_partition(grid), lump=lump, smoothing=smoothing,
        pf_tol=pf_tol,
    )


def evaluate_states(rp: ReducedProblem, u: np.ndarray) -> list[ScenarioState]:
    """Refresh (or fetch) the per-scenario PF solutions at controls u.

    A diverging power flow surfaces as an evaluation error so the line
    search can reject the trial controls.
    """
    key = np.asarray(u, dtype=float).tobytes()
    if rp._cache_key == key and rp._cache is not None:
        return rp._cache
    v_pv, p_pv = rp.split_u(np.asarray(u, dtype=float))
    states = []
    for grid, Y in zip(rp.grids, rp.admittances):
        x0 = None
        if rp._cache is not None:
            prev = rp._cache[len(states)]
            x0 = (prev.vm, prev.va)
        try:
            sol = pf.newton_pf(grid, Y, controls=(v_pv, p_pv), tol=rp.pf_tol,
                               max_iter=rp.pf_max_iter, x0=x0, part=rp.part)
        except (pf.PfDivergence, pf.SingularJacobian) as e:
            raise ipm_core.EvalError(
                f"power flow failed for scenario {len(states)}: {e}") from e
        rp.stats["pf_solves"] += 1
        states.append(ScenarioState(vm=sol.vm, va=sol.va, pg=sol.pg, qg=sol.qg))
    rp._cache_key = key
    rp._cache = states
    return states


def _ensure_derivatives(rp: ReducedProblem, c: int, st: ScenarioState):
    if st.blocks is not None:
        return
    grid, Y = rp.grids[c], rp.admittances[c]
    st.blocks = pf.pf_jacobian(grid, Y, st.vm, st.va, rp.part)
    V = st.vm * np.exp(1j * st.va)
    st.ds_dva, st.ds_dvm = pf.dsbus_dv(Y.ybus, V)
    st.g11t_factor = spla.splu(sp.csc_matrix(st.blocks.g11.T))
    rp.stats["g11_factorizations"] += 1


def _adjoint_solve(rp: ReducedProblem, st: ScenarioState, rhs: np.ndarray):
    rp.stats["adjoint_solves"] += 1
    return st.g11t_factor.solve(rhs)


def _g_wrt_u(rp: ReducedProblem, st: ScenarioState):
    """Rows (g1; g2) of dg/du: derivative w.r.t. v_PV columns, and the
    constant -incidence block of the PV-generator active powers."""
    if st.g_u is not None:
        return st.g_u
    part = rp.part
    dvm = st.ds_dvm[:, part.pv]

    def rows(mat, buses, kind):
        block = mat[buses, :] if len(np.atleast_1d(buses)) else mat[:0, :]
        return block.real if kind == "re" else block.imag

    g1_v = sp.vstack([rows(dvm, part.pv, "re"), rows(dvm, part.pq, "re"),
                      rows(dvm, part.pq, "im")])
    g2_v = sp.vstack([rows(dvm, [part.ref], "re"), rows(dvm, [part.ref], "im"),
                      rows(dvm, part.pv, "im")])
    # dg1/dp_pv: -1 on the Re-row of the generator's bus (first n_pv rows)
    n_pv, npq = part.n_pv, part.n_pq
    cols, rows_ = [], []
    bus_row = {int(b): i for i, b in enumerate(part.pv)}
    gbus = rp.base.gen_bus_positions()
    for k, j in enumerate(part.pv_gens):
        rows_.append(bus_row[int(gbus[j])])
        cols.append(k)
    g1_p = sp.csr_matrix(
        (-np.ones(len(cols)), (rows_, cols)),
        shape=(n_pv + 2 * npq, len(part.pv_gens)),
    )
    g2_p = sp.csr_matrix((2 + n_pv, len(part.pv_gens)))
    g1_u = sp.hstack([sp.csr_matrix(g1_v), g1_p], format="csr")
    g2_u = sp.hstack([sp.csr_matrix(g2_v), g2_p], format="csr")
    st.g_u = (g1_u, g2_u)
    return st.g_u


def _ref_cost_sensitivity(rp: ReducedProblem, st: ScenarioState):
    """d(objective)/d(total REF active power) with capacity-share split."""
    grid = rp.base
    a, b, _ = _cost_terms(grid)
    rg = rp.part.ref_gens
    if len(rg) == 0:
        return 0.0
    lo = np.array([grid.generators[j].pmin for j in rg])
    hi = np.array([grid.generators[j].pmax for j in rg])
    span = hi - lo
    share = span / span.sum() if span.sum() > 0 else np.full(len(rg), 1.0 / len(rg))
    marg = 2.0 * a[rg] * st.pg[rg] + b[rg]
    return float(marg @ share)


def objective_gradient_adjoint(rp: ReducedProblem, u: np.ndarray) -> np.ndarray:
    """df/du by the adjoint method; with nominal-only costing a single
    adjoint system is solved regardless of the number of contingencies."""
    states = evaluate_states(rp, u)
    st = states[0]
    _ensure_derivatives(rp, 0, st)
    part = rp.part
    grid = rp.base
    a, b, _ = _cost_terms(grid)

    grad = np.zeros(rp.n_u)
    _, p_pv = rp.split_u(np.asarray(u, dtype=float))
    grad[part.n_pv:] = 2.0 * a[part.pv_gens] * p_pv + b[part.pv_gens]

    w_ref = _ref_cost_sensitivity(rp, st)
    # lam2 = df/dx2 has its only nonzero on the Re g_REF slot, so the adjoint
    # right-hand side needs just the first column of g21'.
    rhs = -np.asarray(st.blocks.g21[0].todense()).ravel() * w_ref
    lam1 = _adjoint_solve(rp, st, rhs)
    g1_u, g2_u = _g_wrt_u(rp, st)
    lam2_g2u = w_ref * np.asarray(g2_u[0].todense()).ravel()
    grad += lam1 @ g1_u + lam2_g2u
    return grad


def _state_rows(rp: ReducedProblem, c: int) -> tuple:
    """Indices of the bounded states inside (x1, x2) slot coordinates."""
    part = rp.part
    n_th = part.n_pv + part.n_pq
    rows = []
    for b in part.pq:
        rows.append(("x1", n_th + int(np.where(part.pq == b)[0][0])))
    for _ in part.ref_gens:
        rows.append(("x2", 0))  # p_REF slot
    for _ in part.ref_gens:
        rows.append(("x2", 1))  # q_REF slot
    bus_row = {int(b): i for i, b in enumerate(part.pv)}
    gbus = rp.base.gen_bus_positions()
    for j in part.pv_gens:
        rows.append(("x2", 2 + bus_row[int(gbus[j])]))
    return rows


def bound_gradients_adjoint(rp: ReducedProblem, u: np.ndarray,
                            scenario: int = 0) -> np.ndarray:
    """Dense n_x-by-n_u sensitivity of the bounded states; upper and lower
    bound gradients are +/- the same rows, so n_x adjoint solves suffice."""
    states = evaluate_states(rp, u)
    st = states[scenario]
    _ensure_derivatives(rp, scenario, st)
    part = rp.part
    g1_u, g2_u = _g_wrt_u(rp, st)
    g21 = st.blocks.g21

    rows = _state_rows(rp, scenario)
    out = np.zeros((len(rows), rp.n_u))
    n1 = part.x1_dim
    rhs = np.zeros((n1, len(rows)))
    direct = np.zeros((len(rows), rp.n_u))
    for i, (kind, slot) in enumerate(rows):
        if kind == "x1":
            # c(x) = x1_slot: dc/dx1 = e_slot, lam2 = 0
            rhs[slot, i] = -1.0
        else:
            # c(x) = x2_slot: lam2 = e_slot, g11' lam1 = -g21' e_slot
            rhs[:, i] = -np.asarray(g21[slot].todense()).ravel()
            direct[i] = np.asarray(g2_u[slot].todense()).ravel()
    lam1 = _adjoint_solve(rp, st, rhs)
    if lam1.ndim == 1:
        lam1 = lam1[:, None]
    sens = lam1.T @ g1_u + direct

    # Rows for per-generator quantities recovered from a bus total scale by
    # the generator's capacity share of the disaggregation.
    grid = rp.base
    gens = grid.generators

    def shares(idx_list, lo_attr, hi_attr):
        spans = np.array([getattr(gens[j], hi_attr) - getattr(gens[j], lo_attr)
                          for j in idx_list])
        if len(idx_list) <= 1:
            return np.ones(len(idx_list))
        if spans.sum() <= 0:
            return np.full(len(idx_list), 1.0 / len(idx_list))
        return spans / spans.sum()

    scale = np.ones(len(rows))
    k = part.n_pq
    rg = list(part.ref_gens)
    scale[k : k + len(rg)] = shares(rg, "pmin", "pmax")
    k += len(rg)
    scale[k : k + len(rg)] = shares(rg, "qmin", "qmax")
    k += len(rg)
    gbus = grid.gen_bus_positions()
    for idx, j in enumerate(part.pv_gens):
        same = [jj for jj in part.pv_gens if gbus[jj] == gbus[j]]
        if len(same) > 1:
            sh = shares(same, "qmin", "qmax")
            scale[k + idx] = sh[same.index(j)]
    return sens * scale[:, None]


def constraint_gradient_adjoint(rp: ReducedProblem, u: np.ndarray,
                                scenario: int, line_index: int) -> np.ndarray:
    """dh_i/du for one line-flow limit function of one scenario."""
    states = evaluate_states(rp, u)
    st = states[scenario]
    _ensure_derivatives(rp, scenario, st)
    grid, Y = rp.grids[scenario], rp.admittances[scenario]
    grad_x1, grad_vpv = pf.line_flow_h_grad(grid, Y, st.vm, st.va, line_index,
                                            rp.part)
    lam1 = _adjoint_solve(rp, st, -grad_x1)
    g1_u, _ = _g_wrt_u(rp, st)
    out = lam1 @ g1_u
    out[: rp.part.n_pv] += grad_vpv
    return out


def line_rows_jacobian(rp: ReducedProblem, u: np.ndarray,
                       scenario: int) -> np.ndarray:
    """All rate-scaled line-limit gradients of one scenario at once: the
    adjoint systems share the factorization and batch their right-hand
    sides, which is how the per-scenario gradient work parallelizes."""
    states = evaluate_states(rp, u)
    st = states[scenario]
    _ensure_derivatives(rp, scenario, st)
    grid, Y = rp.grids[scenario], rp.admittances[scenario]
    jac, lines = pf.line_flow_jacobian(grid, Y, st.vm, st.va)
    if len(lines) == 0:
        return np.zeros((0, rp.n_u))
    rate2 = np.array([grid.branches[k].rate_a ** 2 for k in lines])
    scale = np.concatenate([rate2, rate2])
    jac = sp.diags(1.0 / scale) @ jac
    part = rp.part
    nb = grid.n_b
    cols = np.concatenate([part.theta_slots(), nb + part.vm_slots()])
    dh_dx1 = jac[:, cols].toarray()
    lam1 = _adjoint_solve(rp, st, -dh_dx1.T)
    if lam1.ndim == 1:
        lam1 = lam1[:, None]
    g1_u, _ = _g_wrt_u(rp, st)
    rows = lam1.T @ g1_u
    rows[:, : part.n_pv] += jac[:, nb + part.pv].toarray()
    return rows


def lumped_value(h: np.ndarray, alpha: float) -> float:
    """Smooth over-approximation alpha*ln(sum exp(h/alpha)) of max(h),
    evaluated shift-stably."""
    if len(h) == 0:
        raise EmptyLumpSet("no constraints to lump")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    m = float(np.max(h))
    return m + alpha * float(np.log(np.sum(np.exp((h - m) / alpha))))


def lumped_weights(h: np.ndarray, alpha: float) -> np.ndarray:
    """exp(h_l/alpha)/Q, the gradient weights of the lumped constraint."""
    m = float(np.max(h))
    e = np.exp((h - m) / alpha)
    return e / e.sum()


def select_alpha(h_scaled: np.ndarray, smoothing: float = 0.1,
                 threshold: float = 5.0) -> float:
    """Smoothing scale rule: rescale by the maximum only when the rate-scaled
    constraints are large enough to threaten overflow."""
    m = float(np.max(h_scaled)) if len(h_scaled) else 0.0
    if m > threshold:
        return smoothing * m
    return smoothing


def _scenario_line_data(rp: ReducedProblem, c: int, st: ScenarioState):
    grid, Y = rp.grids[c], rp.admittances[c]
    h, lines = pf.line_flow_h(grid, Y, st.vm, st.va)
    rate2 = np.array([grid.branches[k].rate_a ** 2 for k in lines])
    scale = np.concatenate([rate2, rate2]) if len(lines) else np.zeros(0)
    return h / scale if len(lines) else h, lines


def _lump_classes(grid: GridCase, lines: np.ndarray):
    """Group the stacked h-rows by the line's rating class."""
    rates = np.array([grid.branches[k].rate_a for k in lines])
    classes = {}
    for idx, r in enumerate(rates):
        rows = classes.setdefault(float(r), [])
        rows.append(idx)  # from-end row
        rows.append(idx + len(lines))  # to-end row
    return {r: np.array(v, dtype=int) for r, v in sorted(classes.items())}


def lumped_gradient(rp: ReducedProblem, u: np.ndarray, scenario: int,
                    alpha: float, rows: np.ndarray | None = None) -> np.ndarray:
    """dc/du of the lumped constraint via a single adjoint solve."""
    states = evaluate_states(rp, u)
    st = states[scenario]
    _ensure_derivatives(rp, scenario, st)
    grid, Y = rp.grids[scenario], rp.admittances[scenario]
    h_scaled, lines = _scenario_line_data(rp, scenario, st)
    if len(h_scaled) == 0:
        raise EmptyLumpSet("scenario has no rated lines")
    if rows is None:
        rows = np.arange(len(h_scaled))
    w = lumped_weights(h_scaled[rows], alpha)

    jac, _ = pf.line_flow_jacobian(grid, Y, st.vm, st.va)
    rate2 = np.array([grid.branches[k].rate_a ** 2 for k in lines])
    scale = np.concatenate([rate2, rate2])
    weighted = (sp.diags(w / scale[rows]) @ jac[rows]).sum(axis=0)
    weighted = np.asarray(weighted).ravel()
    nb = grid.n_b
    d_va, d_vm = weighted[:nb], weighted[nb:]
    part = rp.part
    grad_x1 = np.concatenate([d_va[part.theta_slots()], d_vm[part.vm_slots()]])
    lam1 = _adjoint_solve(rp, st, -grad_x1)
    g1_u, _ = _g_wrt_u(rp, st)
    out = lam1 @ g1_u
    out[: part.n_pv] += d_vm[part.pv]
    return out


# ---------------------------------------------------------------------------
# NLP assembly over the controls


def _constraint_layout(rp: ReducedProblem, states):
    """Per-scenario rows: lumped or explicit line constraints, then state
    bound pairs (upper, lower)."""
    layout = []
    for c, st in enumerate(states):
        h_scaled, lines = _scenario_line_data(rp, c, st)
        if rp.lump and len(lines):
            classes = _lump_classes(rp.grids[c], lines)
            for r, rows in classes.items():
                key = (c, r)
                if key not in rp._alpha:
                    rp._alpha[key] = select_alpha(h_scaled[rows],
                                                  rp.smoothing,
                                                  rp.lump_threshold)
                layout.append(("lump", c, rows, rp._alpha[key]))
        else:
            for i in range(len(h_scaled)):
                layout.append(("line", c, i, None))
        labels, lo, hi = rp.bounded_states()
        for i in range(len(labels)):
            layout.append(("state_hi", c, i, hi[i]))
            layout.append(("state_lo", c, i, lo[i]))
    return layout


def _state_values(rp: ReducedProblem, c: int, st: ScenarioState) -> np.ndarray:
    part = rp.part
    vals = [st.vm[part.pq]]
    vals.append(st.pg[part.ref_gens])
    vals.append(st.qg[part.ref_gens])
    vals.append(st.qg[part.pv_gens])
    return np.concatenate([np.atleast_1d(v) for v in vals])


def reduced_nlp(rp: ReducedProblem) -> NlpProblem:
    """Wrap the reduced problem as an NLP over u with h(u) <= 0 rows."""
    lb, ub = rp.u_bounds()
    u0 = np.clip(rp.u_start(), lb, ub)
    states0 = evaluate_states(rp, u0)
    layout = _constraint_layout(rp, states0)
    n_h = len(layout)
    a, b, c_c = _cost_terms(rp.base)
    part = rp.part

    def f(u):
        states = evaluate_states(rp, u)
        _, p_pv = rp.split_u(np.asarray(u, dtype=float))
        pg = states[0].pg.copy()
        pg[part.pv_gens] = p_pv
        return float(np.sum(a * pg * pg + b * pg + c_c))

    def grad_f(u):
        return objective_gradient_adjoint(rp, u)

    def h(u):
        states = evaluate_states(rp, u)
        out = np.zeros(n_h)
        cached_states = {}
        for i, (kind, c, arg, extra) in enumerate(layout):
            st = states[c]
            if kind == "lump":
                h_scaled, _ = _scenario_line_data(rp, c, st)
                out[i] = lumped_value(h_scaled[arg], extra)
            elif kind == "line":
                h_scaled, _ = _scenario_line_data(rp, c, st)
                out[i] = h_scaled[arg]
            else:
                if c not in cached_states:
                    cached_states[c] = _state_values(rp, c, st)
                x = cached_states[c][arg]
                out[i] = (x - extra) if kind == "state_hi" else (extra - x)
        return out

    def jac_h(u):
        rows = np.zeros((n_h, rp.n_u))
        bound_rows = {}
        line_rows = {}
        for i, (kind, c, arg, extra) in enumerate(layout):
            if kind == "lump":
                rows[i] = lumped_gradient(rp, u, c, extra, rows=arg)
            elif kind == "line":
                if c not in line_rows:
                    line_rows[c] = line_rows_jacobian(rp, u, c)
                rows[i] = line_rows[c][arg]
            else:
                if c not in bound_rows:
                    bound_rows[c] = bound_gradients_adjoint(rp, u, c)
                sign = 1.0 if kind == "state_hi" else -1.0
                rows[i] = sign * bound_rows[c][arg]
        return sp.csr_matrix(rows)

    def g(u):
        return np.zeros(0)

    def jac_g(u):
        return sp.csr_matrix((0, rp.n_u))

    def hess(u, lam_g, lam_h):
        # second derivatives are never exact in reduced space
        return sp.csr_matrix((rp.n_u, rp.n_u))

    return NlpProblem(
        n=rp.n_u, n_g=0, n_h=n_h, lb=lb, ub=ub, x0=u0,
        f=f, grad_f=grad_f, g=g, h=h, jac_g=jac_g, jac_h=jac_h,
        hess_lagrangian=hess, name=f"reduced-{rp.base.name}",
        meta={"reduced": rp, "layout": layout},
    )


def reduced_solve(rp: ReducedProblem, options: ipm_core.IpmOptions | None = None,
                  ) -> ipm_core.SolveResult:
    """Drive the interior-point method on the reduced problem with an
    L-BFGS Hessian; every trial point re-solves the scenario power flows."""
    from dataclasses import replace

    problem = reduced_nlp(rp)
    opt = options or ipm_core.IpmOptions()
    if opt.hessian_mode != "lbfgs":
        opt = replace(opt, hessian_mode="lbfgs")
    return ipm_core.solve(problem, opt, backend=ipm_core.DIRECT_FULL)
