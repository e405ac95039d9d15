"""AC power flow: mismatch equations, partitioned Jacobians, Newton solver,
and branch flow limit functions with derivatives.

Voltages are polar throughout. The mismatch vector follows the partitioned
row ordering g = (g1, g2) with

    g1 = (Re g_PV, Re g_PQ, Im g_PQ)      paired with x1 = (th_PV, th_PQ, v_PQ)
    g2 = (Re g_REF, Im g_REF, Im g_PV)    paired with x2 = (p_REF, q_REF, q_PV)

so that dg1/dx2 = 0 and dg2/dx2 = -I. The reference bus angle and voltage
magnitude are fixed parameters and never appear in x1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid_model import AdmittanceMatrix, GridCase


class PowerflowError(Exception):
    pass


class DimensionMismatch(PowerflowError):
    pass


class PfDivergence(PowerflowError):
    pass


class SingularJacobian(PowerflowError):
    pass


class IndexOutOfRange(PowerflowError):
    pass


@dataclass(frozen=True)
class PfPartition:
    """Index bookkeeping between bus/generator arrays and the (u, x1, x2) slots."""

    ref: int
    pv: np.ndarray  # bus positions hosting in-service generators (REF excluded)
    pq: np.ndarray
    pv_gens: np.ndarray  # generator indices at PV buses, grouped by bus order
    ref_gens: np.ndarray

    @property
    def n_pv(self) -> int:
        return len(self.pv)

    @property
    def n_pq(self) -> int:
        return len(self.pq)

    @property
    def x1_dim(self) -> int:
        # (th_PV, th_PQ, v_PQ)
        return self.n_pv + 2 * self.n_pq

    @property
    def x2_dim(self) -> int:
        # (p_REF, q_REF, q at each PV bus)
        return 2 + self.n_pv

    @property
    def n_u(self) -> int:
        return self.n_pv + len(self.pv_gens)

    def theta_slots(self) -> np.ndarray:
        """Bus position for each angle slot of x1."""
        return np.concatenate([self.pv, self.pq])

    def vm_slots(self) -> np.ndarray:
        """Bus position for each magnitude slot of x1."""
        return self.pq.copy()


def make_partition(grid: GridCase) -> PfPartition:
    pv = grid.pv_bus_positions()
    pq = grid.pq_bus_positions()
    ref = grid.ref_bus
    gbus = grid.gen_bus_positions()
    live = np.array([g.status for g in grid.generators], dtype=bool)
    pv_gens = [j for b in pv for j in np.flatnonzero((gbus == b) & live)]
    ref_gens = np.flatnonzero((gbus == ref) & live)
    return PfPartition(
        ref=ref, pv=pv, pq=pq,
        pv_gens=np.array(pv_gens, dtype=int), ref_gens=np.asarray(ref_gens),
    )


def bus_injections(grid: GridCase, pg: np.ndarray, qg: np.ndarray) -> np.ndarray:
    """Complex net generator injection per bus (out-of-service gens ignored)."""
    s = np.zeros(grid.n_b, dtype=complex)
    gbus = grid.gen_bus_positions()
    for j, g in enumerate(grid.generators):
        if g.status:
            s[gbus[j]] += pg[j] + 1j * qg[j]
    return s


def complex_mismatch(
    grid: GridCase, Y: AdmittanceMatrix, vm, va, pg, qg
) -> np.ndarray:
    """Per-bus complex residual S(V) + S_load - S_gen."""
    vm = np.asarray(vm, dtype=float)
    va = np.asarray(va, dtype=float)
    if vm.shape != (grid.n_b,) or va.shape != (grid.n_b,):
        raise DimensionMismatch("voltage vectors must have length n_b")
    if len(pg) != grid.n_g or len(qg) != grid.n_g:
        raise DimensionMismatch("injection vectors must have length n_g")
    V = vm * np.exp(1j * va)
    s_bus = V * np.conj(Y.ybus @ V)
    s_load = np.array([b.pd + 1j * b.qd for b in grid.buses])
    return s_bus + s_load - bus_injections(grid, pg, qg)


def mismatch(grid, Y, vm, va, pg, qg, part: PfPartition | None = None) -> np.ndarray:
    """Power balance residual of length 2*N_B in the (g1, g2) row ordering."""
    if part is None:
        part = make_partition(grid)
    c = complex_mismatch(grid, Y, vm, va, pg, qg)
    g1 = np.concatenate([c[part.pv].real, c[part.pq].real, c[part.pq].imag])
    g2 = np.concatenate([[c[part.ref].real], [c[part.ref].imag], c[part.pv].imag])
    return np.concatenate([g1, g2])


def dsbus_dv(Y: sp.csr_matrix, V: np.ndarray):
    """Partial derivatives of the complex bus injections S = diag(V) (Y V)*."""
    ibus = Y @ V
    diag_v = sp.diags(V)
    diag_i = sp.diags(ibus)
    diag_e = sp.diags(V / np.abs(V))
    ds_dva = 1j * diag_v @ (diag_i - Y @ diag_v).conj()
    ds_dvm = diag_v @ (Y @ diag_e).conj() + diag_i.conj() @ diag_e
    return sp.csr_matrix(ds_dva), sp.csr_matrix(ds_dvm)


@dataclass(frozen=True)
class PfJacobianBlocks:
    g11: sp.csr_matrix  # dg1/dx1, square
    g21: sp.csr_matrix  # dg2/dx1


def pf_jacobian(grid, Y, vm, va, part: PfPartition | None = None) -> PfJacobianBlocks:
    """Analytic blocks of the partitioned mismatch Jacobian in polar coordinates."""
    if part is None:
        part = make_partition(grid)
    vm = np.asarray(vm, dtype=float)
    va = np.asarray(va, dtype=float)
    if vm.shape != (grid.n_b,) or va.shape != (grid.n_b,):
        raise DimensionMismatch("voltage vectors must have length n_b")
    V = vm * np.exp(1j * va)
    ds_dva, ds_dvm = dsbus_dv(Y.ybus, V)

    th = part.theta_slots()
    vq = part.vm_slots()

    def rows(mat, buses, kind):
        block = mat[buses, :]
        return block.real if kind == "re" else block.imag

    def assemble(bus_groups):
        cols = []
        for mat, slots in ((ds_dva, th), (ds_dvm, vq)):
            sub = []
            for buses, kind in bus_groups:
                sub.append(rows(mat[:, slots], buses, kind))
            cols.append(sp.vstack(sub) if sub else None)
        return sp.hstack(cols, format="csr")

    g1_groups = [(part.pv, "re"), (part.pq, "re"), (part.pq, "im")]
    g2_groups = [([part.ref], "re"), ([part.ref], "im"), (part.pv, "im")]
    g11 = assemble(g1_groups)
    g21 = assemble(g2_groups)
    return PfJacobianBlocks(g11=sp.csr_matrix(g11), g21=sp.csr_matrix(g21))


@dataclass
class PfSolution:
    vm: np.ndarray
    va: np.ndarray
    pg: np.ndarray  # per generator, p.u.
    qg: np.ndarray
    iterations: int
    residual_history: list[float]

    @property
    def max_mismatch(self) -> float:
        return self.residual_history[-1]


def _disaggregate(total: float, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Split a bus-level quantity over generators proportionally to capacity."""
    if len(lo) == 1:
        return np.array([total])
    span = hi - lo
    if span.sum() <= 0:
        return np.full(len(lo), total / len(lo))
    return lo + (total - lo.sum()) * span / span.sum()


def newton_pf(
    grid: GridCase,
    Y: AdmittanceMatrix,
    controls: tuple[np.ndarray, np.ndarray] | None = None,
    tol: float = 1e-10,
    max_iter: int = 20,
    x0: tuple[np.ndarray, np.ndarray] | None = None,
    part: PfPartition | None = None,
    step_clip: float | None = None,
) -> PfSolution:
    """Solve the power flow by Newton iterations on the x1 block.

    controls: (v setpoints at PV buses, p injections of PV-bus generators),
    defaulting to the case data. x0 optionally warm-starts (vm, va).
    The x2 quantities (REF injections, PV reactive power) are recovered
    exactly from the g2 equations, which are linear in x2.
    """
    if part is None:
        part = make_partition(grid)
    if tol <= 0:
        raise ValueError("tol must be positive")

    vm = np.array([b.vm0 for b in grid.buses], dtype=float)
    va = np.array([b.va0 for b in grid.buses], dtype=float)
    if x0 is not None:
        vm, va = np.array(x0[0], dtype=float), np.array(x0[1], dtype=float)

    if controls is None:
        v_pv = np.array([grid.buses[b].vm0 for b in part.pv])
        p_pv = np.array([grid.generators[j].pg0 for j in part.pv_gens])
    else:
        v_pv, p_pv = np.asarray(controls[0], float), np.asarray(controls[1], float)
        if len(v_pv) != part.n_pv or len(p_pv) != len(part.pv_gens):
            raise DimensionMismatch("control vector sizes do not match partition")
    vm[part.pv] = v_pv
    vm[part.ref] = grid.buses[part.ref].vm0
    va[part.ref] = grid.buses[part.ref].va0

    pg = np.array([g.pg0 for g in grid.generators], dtype=float)
    qg = np.zeros(grid.n_g)
    pg[part.pv_gens] = p_pv
    # REF/PV reactive and REF active slots are recovered after convergence.

    n1 = part.x1_dim
    history: list[float] = []

    def g1_of(vm, va):
        c = complex_mismatch(grid, Y, vm, va, pg, qg)
        # g1 rows carry no x2 unknowns: REF gens and q do not enter them.
        return np.concatenate([c[part.pv].real, c[part.pq].real, c[part.pq].imag])

    it = 0
    g1 = g1_of(vm, va)
    history.append(float(np.max(np.abs(g1))) if n1 else 0.0)
    while history[-1] > tol:
        if it >= max_iter:
            raise PfDivergence(
                f"no convergence in {max_iter} iterations (|g| = {history[-1]:.3e})"
            )
        blocks = pf_jacobian(grid, Y, vm, va, part)
        try:
            dx1 = spla.spsolve(sp.csc_matrix(blocks.g11), -g1)
        except RuntimeError as e:
            raise SingularJacobian(str(e)) from e
        if not np.all(np.isfinite(dx1)):
            raise SingularJacobian("power flow Jacobian is singular")
        if step_clip is not None:
            scale = np.max(np.abs(dx1[: part.n_pv + part.n_pq])) / step_clip
            if scale > 1.0:
                dx1 = dx1 / scale
        th = part.theta_slots()
        va[th] += dx1[: len(th)]
        vm[part.pq] += dx1[len(th):]
        if np.any(vm[part.pq] <= 0) or not np.all(np.isfinite(vm)):
            raise PfDivergence("voltage magnitude collapsed")
        g1 = g1_of(vm, va)
        history.append(float(np.max(np.abs(g1))))
        it += 1

    # Recover x2 from the g2 rows (linear with coefficient -1).
    c = complex_mismatch(grid, Y, vm, va, pg, qg)
    gens = grid.generators
    if len(part.ref_gens):
        rg = part.ref_gens
        lo_p = np.array([gens[j].pmin for j in rg])
        hi_p = np.array([gens[j].pmax for j in rg])
        lo_q = np.array([gens[j].qmin for j in rg])
        hi_q = np.array([gens[j].qmax for j in rg])
        p_ref = c[part.ref].real + pg[rg].sum()
        q_ref = c[part.ref].imag + qg[rg].sum()
        pg[rg] = _disaggregate(p_ref, lo_p, hi_p)
        qg[rg] = _disaggregate(q_ref, lo_q, hi_q)
    gbus = grid.gen_bus_positions()
    live = np.array([g.status for g in gens], dtype=bool)
    for b in part.pv:
        js = np.flatnonzero((gbus == b) & live)
        q_bus = c[b].imag + qg[js].sum()
        qg[js] = _disaggregate(
            q_bus,
            np.array([gens[j].qmin for j in js]),
            np.array([gens[j].qmax for j in js]),
        )
    return PfSolution(vm=vm, va=va, pg=pg, qg=qg, iterations=it,
                      residual_history=history)


def rated_lines(grid: GridCase) -> np.ndarray:
    """Indices of in-service branches carrying a finite apparent power limit."""
    return np.array(
        [k for k, br in enumerate(grid.branches) if br.status and br.rate_a > 0],
        dtype=int,
    )


def branch_flows(grid, Y, vm, va, lines: np.ndarray):
    """Complex from/to apparent power flows of the selected branches."""
    V = np.asarray(vm) * np.exp(1j * np.asarray(va))
    sf = (Y.cf[lines] @ V) * np.conj(Y.yf[lines] @ V)
    st = (Y.ct[lines] @ V) * np.conj(Y.yt[lines] @ V)
    return sf, st


def line_flow_h(grid, Y, vm, va):
    """Squared apparent-flow limit functions, h <= 0 iff flows within limits.

    Returns (h, lines) where h has length 2*len(lines): the 'from' end block
    followed by the 'to' end block. Unrated branches are skipped.
    """
    lines = rated_lines(grid)
    if len(lines) == 0:
        return np.zeros(0), lines
    sf, st = branch_flows(grid, Y, vm, va, lines)
    rate2 = np.array([grid.branches[k].rate_a ** 2 for k in lines])
    h = np.concatenate([np.abs(sf) ** 2 - rate2, np.abs(st) ** 2 - rate2])
    return h, lines


def dsbranch_dv(Y: AdmittanceMatrix, V: np.ndarray, lines: np.ndarray):
    """Derivatives of complex branch flows (from and to) w.r.t. (va, vm)."""
    cf, ct = Y.cf[lines], Y.ct[lines]
    yf, yt = Y.yf[lines], Y.yt[lines]
    diag_v = sp.diags(V)
    diag_e = sp.diags(V / np.abs(V))
    out = []
    for C, B in ((cf, yf), (ct, yt)):
        vb = C @ V
        ib = B @ V
        d_va = 1j * (sp.diags(np.conj(ib)) @ C @ diag_v
                     - sp.diags(vb) @ (B @ diag_v).conj())
        d_vm = sp.diags(np.conj(ib)) @ C @ diag_e + sp.diags(vb) @ (B @ diag_e).conj()
        out.append((sp.csr_matrix(d_va), sp.csr_matrix(d_vm)))
    return out  # [(dSf_dva, dSf_dvm), (dSt_dva, dSt_dvm)]


def line_flow_jacobian(grid, Y, vm, va):
    """Jacobian of line_flow_h w.r.t. (va all buses, vm all buses), sparse."""
    lines = rated_lines(grid)
    nb = grid.n_b
    if len(lines) == 0:
        return sp.csr_matrix((0, 2 * nb)), lines
    V = np.asarray(vm) * np.exp(1j * np.asarray(va))
    sf, st = branch_flows(grid, Y, vm, va, lines)
    (dsf_va, dsf_vm), (dst_va, dst_vm) = dsbranch_dv(Y, V, lines)

    def real_rows(s, d_va, d_vm):
        m = sp.diags(np.conj(s))
        block = sp.hstack([m @ d_va, m @ d_vm])
        return 2.0 * block.real

    jf = real_rows(sf, dsf_va, dsf_vm)
    jt = real_rows(st, dst_va, dst_vm)
    return sp.csr_matrix(sp.vstack([jf, jt])), lines


def line_flow_h_grad(grid, Y, vm, va, line_index: int,
                     part: PfPartition | None = None):
    """Gradient of one limit function w.r.t. the x1 slots and the PV voltages.

    line_index addresses the stacked h vector (from-block then to-block).
    Only the slots of the two endpoint buses can be nonzero.
    """
    if part is None:
        part = make_partition(grid)
    jac, lines = line_flow_jacobian(grid, Y, vm, va)
    if not 0 <= line_index < 2 * len(lines):
        raise IndexOutOfRange(f"line_index {line_index} out of range")
    nb = grid.n_b
    row = np.asarray(jac[line_index].todense()).ravel()
    d_va, d_vm = row[:nb], row[nb:]
    th = part.theta_slots()
    grad_x1 = np.concatenate([d_va[th], d_vm[part.vm_slots()]])
    grad_vpv = d_vm[part.pv]
    return grad_x1, grad_vpv


def second_deriv_blocks(T: sp.spmatrix, V: np.ndarray):
    """Hessian blocks of the scalar V^T T conj(V) w.r.t. (va, vm), sparse.

    Both the weighted bus injections and the weighted branch flows reduce to
    this bilinear kernel for a suitable T; callers take the real part of the
    returned complex blocks.
    """
    v = np.abs(V)
    W = sp.csr_matrix(sp.diags(V) @ sp.csr_matrix(T, dtype=complex)
                      @ sp.diags(np.conj(V)))
    r = np.asarray(W.sum(axis=1)).ravel()
    c = np.asarray(W.sum(axis=0)).ravel()
    sym = W + W.T
    inv_v = sp.diags(1.0 / v)
    h_aa = sym - sp.diags(r + c)
    h_vv = inv_v @ sym @ inv_v
    h_av = 1j * (W - W.T + sp.diags(r - c)) @ inv_v
    return sp.csr_matrix(h_aa), sp.csr_matrix(h_av), sp.csr_matrix(h_vv)


def weighted_mismatch_hessian(Y: AdmittanceMatrix, V: np.ndarray,
                              lam_re: np.ndarray, lam_im: np.ndarray):
    """Real Hessian of sum_i (lam_re_i Re + lam_im_i Im) of the bus injections."""
    mu = lam_re - 1j * lam_im
    T = sp.diags(mu) @ Y.ybus.conj()
    h_aa, h_av, h_vv = second_deriv_blocks(T, V)
    return h_aa.real, h_av.real, h_vv.real


def weighted_flow_hessian(grid, Y: AdmittanceMatrix, V: np.ndarray,
                          sigma: np.ndarray, lines: np.ndarray):
    """Real Hessian of sum_l sigma_l h_l over (va, vm), h_l = |S_l|^2 - rate^2."""
    nb = len(V)
    sf, st = branch_flows(grid, Y, np.abs(V), np.angle(V), lines)
    nl = len(lines)
    sig_f, sig_t = sigma[:nl], sigma[nl:]
    (dsf_va, dsf_vm), (dst_va, dst_vm) = dsbranch_dv(Y, V, lines)

    h_aa = sp.csr_matrix((nb, nb))
    h_av = sp.csr_matrix((nb, nb))
    h_vv = sp.csr_matrix((nb, nb))
    for s, sig, C, B, d_va, d_vm in (
        (sf, sig_f, Y.cf[lines], Y.yf[lines], dsf_va, dsf_vm),
        (st, sig_t, Y.ct[lines], Y.yt[lines], dst_va, dst_vm),
    ):
        # curvature of S itself, weighted by sigma * conj(S)
        T = C.T @ sp.diags(sig * np.conj(s)) @ B.conj()
        aa, av, vv = second_deriv_blocks(T, V)
        h_aa = h_aa + 2 * aa.real
        h_av = h_av + 2 * av.real
        h_vv = h_vv + 2 * vv.real
        # first-order outer products: 2 Re(dS^H diag(sigma) dS)
        w = sp.diags(sig)
        for da, db, target in (
            (d_va, d_va, "aa"), (d_vm, d_vm, "vv"), (d_va, d_vm, "av"),
        ):
            term = 2 * (da.real.T @ w @ db.real + da.imag.T @ w @ db.imag)
            if target == "aa":
                h_aa = h_aa + term
            elif target == "vv":
                h_vv = h_vv + term
            else:
                h_av = h_av + term
    return sp.csr_matrix(h_aa), sp.csr_matrix(h_av), sp.csr_matrix(h_vv)
