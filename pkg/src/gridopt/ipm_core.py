"""Filter line-search primal-dual interior-point method.

Solves  min f(x)  s.t.  g(x) = 0,  h(x) <= 0,  lb <= x <= ub
with slacks s = -h > 0, bound duals z > 0 and inequality multipliers
lam_h < 0, so the slack diagonal L_s = -S^{-1} diag(lam_h) stays positive.
Search directions come from the symmetric saddle system

    [ H + Sigma_x   0     -Jg'   -Jh' ] [dx  ]   [ r_x ]
    [ 0             L_s    0     -I   ] [ds  ] = [ r_s ]
    [ -Jg           0      0      0   ] [dlg ]   [ r_g ]
    [ -Jh          -I      0      0   ] [dlh ]   [ r_h ]

whose required inertia is (n + n_h, n_g + n_h, 0). The system can be
solved directly, after eliminating the diagonal slack block, or through
the block-arrowhead Schur decomposition; every backend produces the same
step.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kkt_linalg as kl
from .opf_problems import NlpProblem
from .quasi_newton import LbfgsHistory, lbfgs_matrix, lbfgs_update

INF = np.inf

MONOTONE = "monotone"
MEHROTRA = "mehrotra"
QUALITY = "quality"

INERTIA_DETECTION = "inertia"
CURVATURE_TEST = "curvature"

DIRECT_FULL = "direct"
DIRECT_REDUCED = "direct-reduced"
SCHUR_STD = "schur-std"
SCHUR_AUG = "schur-aug"

BACKENDS = (DIRECT_FULL, DIRECT_REDUCED, SCHUR_STD, SCHUR_AUG)


class IpmError(Exception):
    pass


class CallbackFailure(IpmError):
    """A problem callback failed or returned non-finite values."""


class EvalError(IpmError):
    """Recoverable evaluation failure at a trial point (rejects the trial)."""


class MappingError(IpmError):
    pass


class StepComputationFailed(IpmError):
    pass


class InertiaCorrectionFailed(IpmError):
    pass


class RestorationNeeded(IpmError):
    pass


@dataclass
class IpmOptions:
    eps_tol: float = 1e-8
    max_iter: int = 100
    mu0: float = 0.1
    kappa_eps: float = 10.0
    kappa_mu: float = 0.2
    theta_mu: float = 1.5
    tau_min: float = 0.99
    barrier_strategy: str = MONOTONE
    inertia_mode: str = INERTIA_DETECTION
    hessian_mode: str = "exact"
    lbfgs_history: int = 20
    sigma_min: float = 0.01
    sigma_max: float = 100.0
    s_max: float = 100.0
    g_max: float = 100.0
    scale_gradients: bool = True
    curvature_kappa: float = 1e-8
    delta_0: float = 1e-4
    delta_min: float = 1e-20
    delta_max: float = 1e40
    delta_grow: float = 8.0
    delta_grow_first: float = 100.0
    delta_shrink: float = 1.0 / 3.0
    delta_c_bar: float = 1e-8
    theta_max_fac: float = 1e4
    gamma_theta: float = 1e-5
    gamma_phi: float = 1e-5
    eta_phi: float = 1e-4
    s_theta: float = 1.1
    s_phi: float = 2.3
    delta_ls: float = 1.0
    max_backtracks: int = 30
    kappa_sigma: float = 1e10
    push_factor: float = 1e-2
    slack_min: float = 1e-2
    z_init_min: float = 1e-6
    z_init_max: float = 1e6
    workers: int = 1
    sparse: bool | None = None  # None = decide by KKT dimension
    sparse_threshold: int = 4000
    acceptable_obj_change: float = 1e-8
    acceptable_count: int = 10
    acceptable_inf_pr: float = 1e-6
    restoration_zeta: float = 1e-8
    restoration: bool = False  # internal marker for the nested solve

    def __post_init__(self):
        if not (0 < self.kappa_mu < 1):
            raise ValueError("kappa_mu must lie in (0, 1)")
        if not (1 < self.theta_mu < 2):
            raise ValueError("theta_mu must lie in (1, 2)")
        if not (0 < self.tau_min < 1):
            raise ValueError("tau_min must lie in (0, 1)")
        if self.eps_tol <= 0 or self.mu0 <= 0 or self.kappa_eps <= 0:
            raise ValueError("tolerances must be positive")
        if self.barrier_strategy not in (MONOTONE, MEHROTRA, QUALITY):
            raise ValueError(f"unknown barrier strategy {self.barrier_strategy}")
        if self.inertia_mode not in (INERTIA_DETECTION, CURVATURE_TEST):
            raise ValueError(f"unknown inertia mode {self.inertia_mode}")
        if not (0 < self.sigma_min < self.sigma_max):
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.curvature_kappa <= 0:
            raise ValueError("curvature_kappa must be positive")


@dataclass
class ScalingFactors:
    s_f: float
    s_g: np.ndarray
    s_h: np.ndarray

    @staticmethod
    def identity(problem: NlpProblem) -> "ScalingFactors":
        return ScalingFactors(1.0, np.ones(problem.n_g), np.ones(problem.n_h))


def compute_scaling(problem: NlpProblem, x0: np.ndarray,
                    g_max: float = 100.0) -> ScalingFactors:
    """Gradient-based scaling factors, fixed at the starting point.

    Rows whose gradient is below g_max (or exactly zero) keep factor 1,
    so all scaled gradient entries are at most g_max at x0.
    """
    try:
        gf = np.asarray(problem.grad_f(x0))
        jg = problem.jac_g(x0)
        jh = problem.jac_h(x0)
    except Exception as e:  # noqa: BLE001
        raise CallbackFailure(f"scaling evaluation failed: {e}") from e

    def factor(norm):
        return 1.0 if norm == 0.0 else min(1.0, g_max / norm)

    s_f = factor(float(np.max(np.abs(gf))) if gf.size else 0.0)
    row_inf_g = np.zeros(problem.n_g)
    if problem.n_g:
        row_inf_g = np.asarray(abs(jg).max(axis=1).todense()).ravel()
    row_inf_h = np.zeros(problem.n_h)
    if problem.n_h:
        row_inf_h = np.asarray(abs(jh).max(axis=1).todense()).ravel()
    s_g = np.array([factor(v) for v in row_inf_g])
    s_h = np.array([factor(v) for v in row_inf_h])
    return ScalingFactors(s_f=s_f, s_g=s_g, s_h=s_h)


def scale_problem(problem: NlpProblem, sc: ScalingFactors) -> NlpProblem:
    """Multiplicative scaling of f, g, h and their derivatives."""
    dg = sp.diags(sc.s_g)
    dh = sp.diags(sc.s_h)

    def hess(x, lam_g, lam_h):
        wg = sc.s_g * lam_g / sc.s_f if problem.n_g else lam_g
        wh = sc.s_h * lam_h / sc.s_f if problem.n_h else lam_h
        return sc.s_f * problem.hess_lagrangian(x, wg, wh)

    return replace(
        problem,
        f=lambda x: sc.s_f * problem.f(x),
        grad_f=lambda x: sc.s_f * problem.grad_f(x),
        g=lambda x: sc.s_g * problem.g(x),
        h=lambda x: sc.s_h * problem.h(x),
        jac_g=lambda x: dg @ problem.jac_g(x),
        jac_h=lambda x: dh @ problem.jac_h(x),
        hess_lagrangian=hess,
    )


@dataclass
class IpmIterate:
    """Primal-dual point; all positivity conditions hold strictly."""

    x: np.ndarray
    s: np.ndarray
    lam_g: np.ndarray
    lam_h: np.ndarray  # negative componentwise
    z_lo: np.ndarray  # positive where lb finite, else 0
    z_hi: np.ndarray
    mu: float
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        # Degenerate bound boxes pin a variable; those slots are frozen at
        # the box midpoint and their stationarity rows absorbed by the free
        # reduced-cost dual, keeping the barrier and the KKT diagonal sane.
        self.fixed = np.isfinite(self.lb) & np.isfinite(self.ub) \
            & (self.ub - self.lb <= 1e-10)
        self.has_lo = np.isfinite(self.lb) & ~self.fixed
        self.has_hi = np.isfinite(self.ub) & ~self.fixed

    @property
    def d_lo(self) -> np.ndarray:
        return np.where(self.has_lo, self.x - self.lb, 1.0)

    @property
    def d_hi(self) -> np.ndarray:
        return np.where(self.has_hi, self.ub - self.x, 1.0)

    @property
    def z(self) -> np.ndarray:
        """Net bound dual entering the stationarity residual."""
        return self.z_lo - self.z_hi

    def z_norm1(self) -> float:
        return float(self.z_lo.sum() + self.z_hi.sum())

    def sigma_x(self) -> np.ndarray:
        lo = np.where(self.has_lo, self.z_lo / self.d_lo, 0.0)
        hi = np.where(self.has_hi, self.z_hi / self.d_hi, 0.0)
        return lo + hi

    def complementarity(self) -> float:
        parts = [self.z_lo[self.has_lo] * self.d_lo[self.has_lo],
                 self.z_hi[self.has_hi] * self.d_hi[self.has_hi],
                 -self.lam_h * self.s]
        num = sum(float(p.sum()) for p in parts)
        den = int(self.has_lo.sum() + self.has_hi.sum() + len(self.s))
        return num / max(1, den)

    def copy(self) -> "IpmIterate":
        return IpmIterate(
            x=self.x.copy(), s=self.s.copy(), lam_g=self.lam_g.copy(),
            lam_h=self.lam_h.copy(), z_lo=self.z_lo.copy(),
            z_hi=self.z_hi.copy(), mu=self.mu, lb=self.lb, ub=self.ub,
        )

    def assert_interior(self) -> None:
        ok = (np.all(self.d_lo > 0) and np.all(self.d_hi > 0)
              and np.all(self.s > 0) and np.all(self.lam_h < 0)
              and np.all(self.z_lo[self.has_lo] > 0)
              and np.all(self.z_hi[self.has_hi] > 0))
        if not ok:
            raise IpmError("iterate left the strict interior")


@dataclass
class KktResiduals:
    l_a: np.ndarray  # dual feasibility
    l_b: np.ndarray  # slack complementarity, -mu e - S lam_h
    l_c: np.ndarray  # equality violation
    l_d: np.ndarray  # inequality/slack consistency
    l_e: np.ndarray  # bound complementarity rows (finite bounds only)

    def inf_norms(self):
        def nrm(v):
            return float(np.max(np.abs(v))) if len(v) else 0.0
        return tuple(nrm(v) for v in (self.l_a, self.l_b, self.l_c,
                                      self.l_d, self.l_e))


@dataclass
class EvalData:
    """First-order callback values at one point."""

    x: np.ndarray
    f: float
    grad_f: np.ndarray
    g: np.ndarray
    h: np.ndarray
    jg: sp.csr_matrix
    jh: sp.csr_matrix


def evaluate(problem: NlpProblem, x: np.ndarray) -> EvalData:
    try:
        data = EvalData(
            x=x.copy(), f=float(problem.f(x)), grad_f=np.asarray(problem.grad_f(x)),
            g=np.asarray(problem.g(x)), h=np.asarray(problem.h(x)),
            jg=problem.jac_g(x), jh=problem.jac_h(x),
        )
    except EvalError:
        raise
    except Exception as e:  # noqa: BLE001
        raise CallbackFailure(f"callback evaluation failed: {e}") from e
    vals = [data.f, data.grad_f, data.g, data.h]
    if not all(np.all(np.isfinite(np.atleast_1d(v))) for v in vals):
        raise EvalError("callback returned non-finite values")
    return data


def kkt_residuals(data: EvalData, it: IpmIterate,
                  mu: float | None = None) -> KktResiduals:
    """Perturbed KKT residual blocks at the iterate."""
    if mu is None:
        mu = it.mu
    l_a = data.grad_f - data.jg.T @ it.lam_g - data.jh.T @ it.lam_h - it.z
    l_a = np.where(it.fixed, 0.0, l_a)
    l_b = -mu - it.s * it.lam_h
    l_c = data.g
    l_d = data.h + it.s
    e_lo = it.z_lo[it.has_lo] * it.d_lo[it.has_lo] - mu
    e_hi = it.z_hi[it.has_hi] * it.d_hi[it.has_hi] - mu
    return KktResiduals(l_a=l_a, l_b=l_b, l_c=l_c, l_d=l_d,
                        l_e=np.concatenate([e_lo, e_hi]))


def optimality_error(it: IpmIterate, res: KktResiduals, s_max: float = 100.0,
                     scaled: bool = True) -> float:
    """Max-norm optimality error, optionally with the multiplier scaling."""
    na, nb_, nc, nd, ne = res.inf_norms()
    if not scaled:
        return max(na, nb_, nc, nd, ne)
    n = len(it.x)
    n_g, n_h = len(it.lam_g), len(it.lam_h)
    lam_sum = float(np.abs(it.lam_g).sum() + np.abs(it.lam_h).sum()) + it.z_norm1()
    s_1 = max(s_max, lam_sum / max(1, n_g + n_h + n)) / s_max
    s_2 = max(s_max, it.z_norm1() / max(1, n)) / s_max
    return max(na / s_1, nb_ / s_1, nc, nd, ne / s_2)


def rhs_for_mu(data: EvalData, it: IpmIterate, mu: float):
    """Right-hand side blocks of the symmetric KKT system for barrier mu."""
    l_a = data.grad_f - data.jg.T @ it.lam_g - data.jh.T @ it.lam_h - it.z
    lo_term = np.where(it.has_lo, (it.z_lo * it.d_lo - mu) / it.d_lo, 0.0)
    hi_term = np.where(it.has_hi, (it.z_hi * it.d_hi - mu) / it.d_hi, 0.0)
    r_x = -(l_a + lo_term - hi_term)
    r_x[it.fixed] = 0.0
    r_s = mu / it.s + it.lam_h
    r_g = data.g
    r_h = data.h + it.s
    return r_x, r_s, r_g, r_h


def assemble_kkt(data: EvalData, it: IpmIterate, hess: sp.spmatrix,
                 mu: float | None = None) -> kl.SymmetricKkt:
    """Symmetrized 4-block KKT system with slack and bound blocks eliminated
    down to (x, s, lam_g, lam_h)."""
    if mu is None:
        mu = it.mu
    sigma = it.sigma_x()
    jg_eff = sp.csr_matrix(-data.jg)
    jh_eff = sp.csr_matrix(-data.jh)
    w = sp.csr_matrix(hess) + sp.diags(sigma)
    if it.fixed.any():
        keep = sp.diags((~it.fixed).astype(float))
        w = keep @ w @ keep + sp.diags(it.fixed.astype(float))
        jg_eff = jg_eff @ keep
        jh_eff = jh_eff @ keep
    r_x, r_s, r_g, r_h = rhs_for_mu(data, it, mu)
    return kl.SymmetricKkt(
        w=sp.csr_matrix(w), jg=jg_eff, jh=jh_eff,
        ls=-it.lam_h / it.s, r_x=r_x, r_s=r_s, r_g=r_g, r_h=r_h,
    )


def recover_dz(it: IpmIterate, dx: np.ndarray, mu: float | None = None):
    """Bound-dual steps eliminated from the symmetric system."""
    if mu is None:
        mu = it.mu
    e_lo = it.z_lo * it.d_lo - mu
    e_hi = it.z_hi * it.d_hi - mu
    dz_lo = np.where(it.has_lo, -(e_lo + it.z_lo * dx) / it.d_lo, 0.0)
    dz_hi = np.where(it.has_hi, (it.z_hi * dx - e_hi) / it.d_hi, 0.0)
    return dz_lo, dz_hi


@dataclass
class Direction:
    dx: np.ndarray
    ds: np.ndarray
    dlam_g: np.ndarray
    dlam_h: np.ndarray
    dz_lo: np.ndarray
    dz_hi: np.ndarray
    delta_w: float = 0.0
    delta_c: float = 0.0


def _pos_ratio(val: np.ndarray, step: np.ndarray, tau: float) -> float:
    """Largest alpha in (0,1] with val + alpha*step >= (1-tau)*val."""
    mask = step < 0
    if not np.any(mask):
        return 1.0
    return float(min(1.0, np.min(-tau * val[mask] / step[mask])))


def fraction_to_boundary(it: IpmIterate, d: Direction, tau: float):
    """Step caps keeping (bound distances, s) and the duals strictly positive."""
    if not (0 < tau < 1):
        raise ValueError("tau must lie in (0, 1)")
    alpha = 1.0
    alpha = min(alpha, _pos_ratio(it.d_lo[it.has_lo], d.dx[it.has_lo], tau))
    alpha = min(alpha, _pos_ratio(it.d_hi[it.has_hi], -d.dx[it.has_hi], tau))
    alpha = min(alpha, _pos_ratio(it.s, d.ds, tau))
    alpha_z = 1.0
    alpha_z = min(alpha_z, _pos_ratio(it.z_lo[it.has_lo], d.dz_lo[it.has_lo], tau))
    alpha_z = min(alpha_z, _pos_ratio(it.z_hi[it.has_hi], d.dz_hi[it.has_hi], tau))
    alpha_z = min(alpha_z, _pos_ratio(-it.lam_h, -d.dlam_h, tau))
    return alpha, alpha_z


class Filter:
    """Forbidden (theta, phi) region; dominated entries are pruned."""

    def __init__(self, theta_max: float):
        self.theta_max = theta_max
        self.entries: list[tuple[float, float]] = []

    def contains(self, theta: float, phi: float) -> bool:
        if theta > self.theta_max:
            return True
        return any(theta >= te and phi >= pe for te, pe in self.entries)

    def add(self, theta: float, phi: float) -> None:
        self.entries = [(te, pe) for te, pe in self.entries
                        if not (te >= theta and pe >= phi)]
        self.entries.append((theta, phi))

    def reset(self) -> None:
        self.entries.clear()


def constraint_violation(g: np.ndarray, h: np.ndarray, s: np.ndarray) -> float:
    """theta(x, s): one-norm of the equality and slack residuals."""
    th = float(np.abs(g).sum()) if len(g) else 0.0
    if len(s):
        th += float(np.abs(h + s).sum())
    return th


def barrier_objective(f: float, it_like, mu: float) -> float:
    val = f
    val -= mu * float(np.log(it_like.d_lo[it_like.has_lo]).sum())
    val -= mu * float(np.log(it_like.d_hi[it_like.has_hi]).sum())
    if len(it_like.s):
        val -= mu * float(np.log(it_like.s).sum())
    return val


# ---------------------------------------------------------------------------
# KKT backends


class _Backend:
    """Factors the symmetric KKT system and re-solves for several rhs."""

    name = "base"
    expected_pos_extra = 0  # n_h for the full system, 0 for reduced ones

    def __init__(self, options: IpmOptions, layout=None):
        self.opt = options
        self.layout = layout
        self.timings = {"kkt_s": 0.0, "schur_assembly_s": 0.0, "solve_s": 0.0}
        self.use_sparse = None

    def decide_storage(self, dim: int):
        if self.use_sparse is not None:
            return
        if self.opt.sparse is None:
            self.use_sparse = dim > self.opt.sparse_threshold
        else:
            self.use_sparse = self.opt.sparse

    def factor(self, kkt: kl.SymmetricKkt, delta_w: float, delta_c: float):
        raise NotImplementedError

    def solve(self, kkt: kl.SymmetricKkt, rhs=None):
        raise NotImplementedError

    def expected_inertia(self, kkt: kl.SymmetricKkt):
        raise NotImplementedError


class DirectFullBackend(_Backend):
    name = DIRECT_FULL

    def factor(self, kkt, delta_w, delta_c):
        self.decide_storage(kkt.dim)
        kkt.delta_w, kkt.delta_c = delta_w, delta_c
        self.kkt = kkt
        t0 = time.perf_counter()
        inertia = None
        if self.use_sparse:
            try:
                self.fac = spla.splu(sp.csc_matrix(kkt.assemble(dense=False)))
            except RuntimeError as e:
                raise StepComputationFailed(str(e)) from e
        else:
            self.matrix = kkt.assemble(dense=True)
            try:
                self.fac = kl.ldlt_factor(self.matrix, pivot_tol=0.0)
            except kl.KktError as e:
                raise StepComputationFailed(str(e)) from e
            inertia = self.fac.inertia
        self.timings["kkt_s"] += time.perf_counter() - t0
        return inertia

    def expected_inertia(self, kkt):
        return (kkt.n + kkt.n_h, kkt.n_g + kkt.n_h)

    def solve(self, kkt, rhs=None):
        t0 = time.perf_counter()
        b = np.concatenate(rhs) if rhs is not None else kkt.rhs()
        if self.use_sparse:
            sol = self.fac.solve(b)
        else:
            sol = kl.ldlt_solve(self.fac, b, A=self.matrix)
        self.timings["solve_s"] += time.perf_counter() - t0
        return kkt.split(sol)


class DirectReducedBackend(_Backend):
    name = DIRECT_REDUCED

    def factor(self, kkt, delta_w, delta_c):
        self.decide_storage(kkt.dim)
        kkt.delta_w, kkt.delta_c = delta_w, delta_c
        self.kkt = kkt
        try:
            reduced, self.record = kl.reduce_slack_system(kkt)
        except kl.DegenerateSlack as e:
            raise StepComputationFailed(str(e)) from e
        self.reduced = reduced
        t0 = time.perf_counter()
        inertia = None
        if self.use_sparse:
            try:
                self.fac = spla.splu(sp.csc_matrix(reduced.assemble(dense=False)))
            except RuntimeError as e:
                raise StepComputationFailed(str(e)) from e
        else:
            self.matrix = reduced.assemble(dense=True)
            try:
                self.fac = kl.ldlt_factor(self.matrix, pivot_tol=0.0)
            except kl.KktError as e:
                raise StepComputationFailed(str(e)) from e
            inertia = self.fac.inertia
        self.timings["kkt_s"] += time.perf_counter() - t0
        return inertia

    def expected_inertia(self, kkt):
        return (kkt.n, kkt.n_g + kkt.n_h)

    def _reduce_rhs(self, kkt, rhs):
        r_x, r_s, r_g, r_h = rhs
        ls_eff = self.record.ls_eff
        rec = kl.EliminationRecord(ls_eff=ls_eff, r_s=r_s)
        b = np.concatenate([r_x, r_g, r_h + (r_s / ls_eff if len(ls_eff) else 0.0)])
        return b, rec

    def solve(self, kkt, rhs=None):
        t0 = time.perf_counter()
        if rhs is None:
            rhs = (kkt.r_x, kkt.r_s, kkt.r_g, kkt.r_h)
        b, rec = self._reduce_rhs(kkt, rhs)
        if self.use_sparse:
            sol = self.fac.solve(b)
        else:
            sol = kl.ldlt_solve(self.fac, b, A=self.matrix)
        dx, dlg, dlh = self.reduced.split(sol)
        ds = kl.recover_slack_step(rec, dlh)
        self.timings["solve_s"] += time.perf_counter() - t0
        return dx, ds, dlg, dlh


class SchurBackend(_Backend):
    def __init__(self, options, layout=None, method=kl.BACKSOLVE):
        super().__init__(options, layout)
        self.method = method
        self.name = SCHUR_AUG if method == kl.AUGMENTED_PARTIAL else SCHUR_STD

    def factor(self, kkt, delta_w, delta_c):
        if self.layout is None:
            raise StepComputationFailed("schur backend requires an arrowhead layout")
        self.decide_storage(kkt.dim)
        kkt.delta_w, kkt.delta_c = delta_w, delta_c
        self.kkt = kkt
        try:
            reduced, self.record = kl.reduce_slack_system(kkt)
        except kl.DegenerateSlack as e:
            raise StepComputationFailed(str(e)) from e
        self.reduced = reduced
        t0 = time.perf_counter()
        matrix = reduced.assemble(dense=False)
        self.arrow = kl.permute_to_arrowhead(
            matrix, self.layout, reduced.rhs(),
            dense_blocks=not self.use_sparse,
        )
        self.solver = kl.SchurSolver(self.arrow, method=self.method,
                                     workers=self.opt.workers)
        try:
            self.solver.factor()
        except kl.KktError as e:
            self.timings["schur_assembly_s"] += time.perf_counter() - t0
            raise StepComputationFailed(str(e)) from e
        self.timings["schur_assembly_s"] += time.perf_counter() - t0
        self.timings["kkt_s"] += time.perf_counter() - t0
        return self.solver.inertia

    def expected_inertia(self, kkt):
        return (kkt.n, kkt.n_g + kkt.n_h)

    def solve(self, kkt, rhs=None):
        t0 = time.perf_counter()
        if rhs is None:
            rhs = (kkt.r_x, kkt.r_s, kkt.r_g, kkt.r_h)
        r_x, r_s, r_g, r_h = rhs
        ls_eff = self.record.ls_eff
        rec = kl.EliminationRecord(ls_eff=ls_eff, r_s=r_s)
        full = np.concatenate(
            [r_x, r_g, r_h + (r_s / ls_eff if len(ls_eff) else 0.0)]
        )
        rhs_blocks = [full[rows] for rows in self.layout.scenario_rows]
        rhs_corner = full[self.layout.corner_rows]
        sol = self.solver.solve(rhs_blocks, rhs_corner)
        dx, dlg, dlh = self.reduced.split(sol)
        ds = kl.recover_slack_step(rec, dlh)
        self.timings["solve_s"] += time.perf_counter() - t0
        return dx, ds, dlg, dlh


def make_backend(name: str, options: IpmOptions, layout=None) -> _Backend:
    if name == DIRECT_FULL:
        return DirectFullBackend(options, layout)
    if name == DIRECT_REDUCED:
        return DirectReducedBackend(options, layout)
    if name == SCHUR_STD:
        return SchurBackend(options, layout, method=kl.BACKSOLVE)
    if name == SCHUR_AUG:
        return SchurBackend(options, layout, method=kl.AUGMENTED_PARTIAL)
    raise ValueError(f"unknown backend {name!r}; choose from {BACKENDS}")


# ---------------------------------------------------------------------------
# Inertia correction and curvature test


@dataclass
class RegularizationState:
    delta_w_last: float = 0.0


def correct_inertia(backend: _Backend, kkt: kl.SymmetricKkt, opt: IpmOptions,
                    state: RegularizationState, mu: float):
    """Factor with trial (delta_w, delta_c) until the inertia is correct.

    Returns the (delta_w, delta_c) that produced inertia
    (n + n_h, n_g + n_h, 0) on the full system (equivalently
    (n, n_g + n_h, 0) after slack elimination).
    """
    want = backend.expected_inertia(kkt)
    delta_c = 0.0
    delta_w = 0.0
    tried_zero = False
    while True:
        try:
            inertia = backend.factor(kkt, delta_w, delta_c)
            failed = False
        except StepComputationFailed:
            inertia, failed = None, True
        if not failed and inertia is not None:
            pos, neg, zero = inertia
            if zero > 0 and delta_c == 0.0:
                delta_c = opt.delta_c_bar * max(mu, 1e-20) ** 0.25
                continue
            if (pos, neg) == want and zero == 0:
                state.delta_w_last = delta_w
                return delta_w, delta_c
        elif failed and delta_c == 0.0:
            delta_c = opt.delta_c_bar * max(mu, 1e-20) ** 0.25
            continue
        if not tried_zero and delta_w == 0.0:
            tried_zero = True
            if state.delta_w_last == 0.0:
                delta_w = opt.delta_0
            else:
                delta_w = max(opt.delta_min,
                              state.delta_w_last * opt.delta_shrink)
        else:
            grow = opt.delta_grow_first if state.delta_w_last == 0.0 \
                else opt.delta_grow
            delta_w = delta_w * grow
        if delta_w > opt.delta_max:
            raise InertiaCorrectionFailed(
                f"no correct inertia up to delta_w = {opt.delta_max:g}"
            )


def curvature_test(w_apply, ls: np.ndarray, delta: float, dx: np.ndarray,
                   ds: np.ndarray, kappa: float) -> bool:
    """d' W(delta) d >= kappa d'd for W = diag(Hessian block, L_s) + delta I."""
    quad = float(dx @ w_apply(dx)) if len(dx) else 0.0
    if len(ds):
        quad += float(ds @ ((ls + delta) * ds))
    quad += delta * float(dx @ dx)
    dd = float(dx @ dx + (ds @ ds if len(ds) else 0.0))
    return quad >= kappa * dd


# ---------------------------------------------------------------------------
# Barrier strategies


def update_barrier_monotone(mu: float, eps_tol: float, kappa_mu: float,
                            theta_mu: float) -> float:
    return max(eps_tol / 10.0, min(kappa_mu * mu, mu ** theta_mu))


def mehrotra_sigma(it: IpmIterate, affine: Direction,
                   sigma_max: float = 100.0) -> float:
    """Centering parameter from the affine-scaling probe, cubed-ratio rule."""
    comp = it.complementarity()
    if comp <= 0:
        return 1.0
    alpha_p, alpha_z = fraction_to_boundary(it, affine, tau=0.995)
    d_lo = it.d_lo + alpha_p * affine.dx
    d_hi = it.d_hi - alpha_p * affine.dx
    s = it.s + alpha_p * affine.ds
    z_lo = it.z_lo + alpha_z * affine.dz_lo
    z_hi = it.z_hi + alpha_z * affine.dz_hi
    lam_h = it.lam_h + alpha_z * affine.dlam_h
    num = float((z_lo[it.has_lo] * d_lo[it.has_lo]).sum()
                + (z_hi[it.has_hi] * d_hi[it.has_hi]).sum()
                + (-lam_h * s).sum())
    den = max(1, int(it.has_lo.sum() + it.has_hi.sum() + len(it.s)))
    ratio = max(0.0, (num / den) / comp)
    return float(min(ratio ** 3, sigma_max))


def quality_function_sigma(probe_fn, sigma_min: float, sigma_max: float,
                           max_bisections: int = 12) -> float:
    """Golden-section minimization of the probed quality function.

    probe_fn(sigma) returns the three scaled infeasibility measures of the
    probing step; their max is minimized with at most `max_bisections`
    interval shrinks (at most max_bisections + 2 probe calls).
    """
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0

    def q(sigma):
        return max(probe_fn(sigma))

    a, b = sigma_min, sigma_max
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    qc, qd = q(c), q(d)
    for _ in range(max_bisections):
        if qc <= qd:
            b, d, qd = d, c, qc
            c = b - inv_phi * (b - a)
            qc = q(c)
        else:
            a, c, qc = c, d, qd
            d = a + inv_phi * (b - a)
            qd = q(d)
    return c if qc <= qd else d


# ---------------------------------------------------------------------------
# Line search


@dataclass
class LineSearchResult:
    alpha: float
    backtracks: int
    data: EvalData
    theta: float
    phi: float
    ftype: bool  # accepted by the theta/phi progress test (augments filter)


def filter_line_search(problem, it: IpmIterate, d: Direction, flt: Filter,
                       mu: float, opt: IpmOptions, alpha_max: float,
                       data: EvalData, theta_min: float = 0.0) -> LineSearchResult:
    """Backtracking filter line search over alpha = 2^-i alpha_max.

    Near feasibility (theta_k <= theta_min) a descent direction must satisfy
    the Armijo condition on the barrier objective; elsewhere progress in
    either the violation or the objective is enough, provided the trial pair
    is not in the filter.
    """
    theta_k = constraint_violation(data.g, data.h, it.s)
    phi_k = barrier_objective(data.f, it, mu)
    # directional derivative of the barrier objective
    dphi = float(data.grad_f @ d.dx)
    dphi -= mu * float((d.dx[it.has_lo] / it.d_lo[it.has_lo]).sum())
    dphi += mu * float((d.dx[it.has_hi] / it.d_hi[it.has_hi]).sum())
    if len(it.s):
        dphi -= mu * float((d.ds / it.s).sum())

    alpha = alpha_max
    for i in range(opt.max_backtracks):
        x_t = it.x + alpha * d.dx
        s_t = it.s + alpha * d.ds
        try:
            trial = evaluate(problem, x_t)
        except (EvalError, CallbackFailure):
            alpha *= 0.5
            continue
        view = _BoundView(x_t, s_t, it)
        theta_t = constraint_violation(trial.g, trial.h, s_t)
        with np.errstate(divide="ignore", invalid="ignore"):
            phi_t = barrier_objective(trial.f, view, mu)
        if not (np.isfinite(theta_t) and np.isfinite(phi_t)):
            alpha *= 0.5
            continue
        if flt.contains(theta_t, phi_t):
            alpha *= 0.5
            continue
        switching = (dphi < 0.0 and
                     alpha * (-dphi) ** opt.s_phi
                     > opt.delta_ls * theta_k ** opt.s_theta)
        if switching and theta_k <= theta_min:
            # feasible regime: only an Armijo decrease of phi is acceptable
            if phi_t <= phi_k + opt.eta_phi * alpha * dphi:
                return LineSearchResult(alpha, i, trial, theta_t, phi_t,
                                        ftype=False)
            alpha *= 0.5
            continue
        if switching and phi_t <= phi_k + opt.eta_phi * alpha * dphi:
            return LineSearchResult(alpha, i, trial, theta_t, phi_t,
                                    ftype=False)
        if (theta_t <= (1.0 - opt.gamma_theta) * theta_k
                or phi_t <= phi_k - opt.gamma_phi * theta_k):
            return LineSearchResult(alpha, i, trial, theta_t, phi_t,
                                    ftype=True)
        alpha *= 0.5
    raise RestorationNeeded(
        f"no acceptable step after {opt.max_backtracks} backtracks"
    )


class _BoundView:
    """Bound distances of a trial point without building a full iterate."""

    def __init__(self, x, s, ref: IpmIterate):
        self.has_lo, self.has_hi = ref.has_lo, ref.has_hi
        self.d_lo = np.where(ref.has_lo, x - ref.lb, 1.0)
        self.d_hi = np.where(ref.has_hi, ref.ub - x, 1.0)
        self.s = s


# ---------------------------------------------------------------------------
# Initialization and warm starts


def initial_iterate(problem: NlpProblem, opt: IpmOptions) -> IpmIterate:
    lb, ub = problem.lb, problem.ub
    x = np.array(problem.x0, dtype=float)
    has_lo, has_hi = np.isfinite(lb), np.isfinite(ub)
    span = np.where(has_lo & has_hi, ub - lb, np.inf)
    pad_lo = np.where(has_lo, np.minimum(opt.push_factor *
                                         np.maximum(1.0, np.abs(lb)),
                                         opt.push_factor * span), 0.0)
    pad_hi = np.where(has_hi, np.minimum(opt.push_factor *
                                         np.maximum(1.0, np.abs(ub)),
                                         opt.push_factor * span), 0.0)
    tiny = has_lo & has_hi & (span < 4 * opt.push_factor)
    x = np.clip(x, np.where(has_lo, lb + pad_lo, -INF),
                np.where(has_hi, ub - pad_hi, INF))
    x[tiny] = 0.5 * (lb[tiny] + ub[tiny])

    data = evaluate(problem, x)
    s = np.maximum(-data.h, opt.slack_min)
    mu = opt.mu0
    lam_g = np.zeros(problem.n_g)
    lam_h = -mu / s if problem.n_h else np.zeros(0)
    d_lo = np.maximum(np.where(has_lo, x - lb, 1.0), 1e-300)
    d_hi = np.maximum(np.where(has_hi, ub - x, 1.0), 1e-300)
    z_lo = np.where(has_lo, np.clip(mu / d_lo, opt.z_init_min,
                                    opt.z_init_max), 0.0)
    z_hi = np.where(has_hi, np.clip(mu / d_hi, opt.z_init_min,
                                    opt.z_init_max), 0.0)
    return IpmIterate(x=x, s=s, lam_g=lam_g, lam_h=lam_h, z_lo=z_lo,
                      z_hi=z_hi, mu=mu, lb=lb, ub=ub)


def warm_start(problem: NlpProblem, previous, mu_ws: float = 1e-4,
               init_duals: bool = True, mapping: np.ndarray | None = None,
               options: IpmOptions | None = None) -> IpmIterate:
    """Iterate seeded from a nearby solution.

    `previous` is an IpmIterate (or SolveResult) of a problem whose variables
    map into this one through `mapping` (old slot i -> new slot mapping[i];
    identity when omitted). Unmapped new slots take the default cold values.
    Copied entries are pushed strictly inside their bounds.
    """
    opt = options or IpmOptions()
    if hasattr(previous, "iterate"):
        previous = previous.iterate
    cold = initial_iterate(problem, opt)
    n_old = len(previous.x)
    if mapping is None:
        if n_old > problem.n:
            raise MappingError("previous solution larger than the new problem")
        mapping = np.arange(n_old)
    mapping = np.asarray(mapping, dtype=int)
    if len(mapping) != n_old or (len(mapping) and mapping.max() >= problem.n):
        raise MappingError("slot mapping does not fit the new problem")

    x = cold.x.copy()
    x[mapping] = previous.x
    push = np.minimum(opt.push_factor * np.where(
        cold.has_lo & cold.has_hi, problem.ub - problem.lb, 1.0), 1e-2)
    x = np.where(cold.has_lo, np.maximum(x, problem.lb + push), x)
    x = np.where(cold.has_hi, np.minimum(x, problem.ub - push), x)

    x[cold.fixed] = 0.5 * (problem.lb[cold.fixed] + problem.ub[cold.fixed])
    data = evaluate(problem, x)
    s = np.maximum(-data.h, 1e-8)
    it = IpmIterate(x=x, s=s, lam_g=cold.lam_g, lam_h=-mu_ws / s
                    if problem.n_h else np.zeros(0),
                    z_lo=cold.z_lo, z_hi=cold.z_hi, mu=mu_ws,
                    lb=problem.lb, ub=problem.ub)
    if init_duals and problem.n_g == len(previous.lam_g) \
            and problem.n_h == len(previous.lam_h):
        it.lam_g = previous.lam_g.copy()
        it.lam_h = np.minimum(previous.lam_h, -1e-8)
        z_lo = cold.z_lo.copy()
        z_hi = cold.z_hi.copy()
        z_lo[mapping] = previous.z_lo
        z_hi[mapping] = previous.z_hi
        it.z_lo = np.where(it.has_lo, np.clip(z_lo, opt.z_init_min,
                                              opt.z_init_max), 0.0)
        it.z_hi = np.where(it.has_hi, np.clip(z_hi, opt.z_init_min,
                                              opt.z_init_max), 0.0)
    it.assert_interior()
    return it


# ---------------------------------------------------------------------------
# Driver


@dataclass
class LogRow:
    iter: int
    obj: float
    inf_pr: float
    inf_du: float
    mu: float
    alpha: float
    backtracks: int
    delta_w: float


CSV_HEADER = "iter,obj,inf_pr,inf_du,mu,alpha,backtracks,delta_w"


def log_to_csv(rows: list[LogRow]) -> str:
    out = [CSV_HEADER]
    for r in rows:
        out.append(f"{r.iter},{r.obj:.10e},{r.inf_pr:.6e},{r.inf_du:.6e},"
                   f"{r.mu:.6e},{r.alpha:.6e},{r.backtracks},{r.delta_w:.6e}")
    return "\n".join(out) + "\n"


@dataclass
class SolveResult:
    status: str
    iterate: IpmIterate
    objective: float
    iterations: int
    log: list[LogRow]
    timings: dict
    scaling: ScalingFactors
    problem: NlpProblem

    @property
    def success(self) -> bool:
        return self.status in ("optimal", "acceptable")


OPTIMAL = "optimal"
ACCEPTABLE = "acceptable"
MAX_ITER = "max_iter"
RESTORATION_FAILURE = "restoration_failure"
STEP_FAILURE = "step_failure"


def solve(problem: NlpProblem, options: IpmOptions | None = None,
          backend: str = DIRECT_FULL,
          start: IpmIterate | None = None) -> SolveResult:
    """Run the interior-point iteration until the scaled NLP error meets
    eps_tol (status 'optimal') or another terminal condition is hit."""
    opt = options or IpmOptions()
    scaling = (compute_scaling(problem, problem.x0, opt.g_max)
               if opt.scale_gradients else ScalingFactors.identity(problem))
    sp_problem = scale_problem(problem, scaling)
    layout = problem.layout
    be = make_backend(backend, opt, layout)
    reg = RegularizationState()

    it = start.copy() if start is not None else initial_iterate(sp_problem, opt)
    it.assert_interior()
    be.decide_storage(problem.n + problem.n_g + 2 * problem.n_h)
    flt = Filter(theta_max=1.0)
    lbfgs = LbfgsHistory(m=opt.lbfgs_history) \
        if opt.hessian_mode == "lbfgs" else None
    prev_data = None

    rows: list[LogRow] = []
    status = MAX_ITER
    accept_streak = 0
    prev_obj = None
    k = 0

    data = evaluate(sp_problem, it.x)
    theta0 = constraint_violation(data.g, data.h, it.s)
    flt.theta_max = opt.theta_max_fac * max(1.0, theta0)
    theta_min = 1e-4 * max(1.0, theta0)

    while k < opt.max_iter:
        res = kkt_residuals(data, it)
        e_mu = optimality_error(it, res, opt.s_max, scaled=True)
        res0 = kkt_residuals(data, it, mu=0.0)
        e_0 = optimality_error(it, res0, opt.s_max, scaled=True)
        inf_pr = max(res.inf_norms()[2], res.inf_norms()[3])
        inf_du = res.inf_norms()[0]

        if e_0 <= opt.eps_tol:
            status = OPTIMAL
            rows.append(LogRow(k, problem.f(it.x), inf_pr, inf_du, it.mu,
                               0.0, 0, 0.0))
            break

        # quasi-Newton early acceptance: feasible and objective stalled
        if lbfgs is not None and prev_obj is not None:
            obj_now = problem.f(it.x)
            rel = abs(obj_now - prev_obj) / max(1.0, abs(obj_now))
            if rel <= opt.acceptable_obj_change \
                    and inf_pr <= opt.acceptable_inf_pr:
                accept_streak += 1
                if accept_streak >= opt.acceptable_count:
                    status = ACCEPTABLE
                    rows.append(LogRow(k, obj_now, inf_pr, inf_du, it.mu,
                                       0.0, 0, 0.0))
                    break
            else:
                accept_streak = 0

        # monotone barrier update: tighten mu while the subproblem is solved
        if opt.barrier_strategy == MONOTONE:
            changed = False
            while e_mu <= opt.kappa_eps * it.mu \
                    and it.mu > opt.eps_tol / 10.0 + 1e-300:
                it.mu = update_barrier_monotone(it.mu, opt.eps_tol,
                                                opt.kappa_mu, opt.theta_mu)
                changed = True
                res = kkt_residuals(data, it)
                e_mu = optimality_error(it, res, opt.s_max, scaled=True)
            if changed:
                flt.reset()

        # Hessian of the Lagrangian (exact or quasi-Newton)
        if lbfgs is None:
            hess = sp_problem.hess_lagrangian(it.x, it.lam_g, it.lam_h)
        else:
            if prev_data is not None:
                # secant pair with both gradients at the current multipliers
                y = ((data.grad_f - data.jg.T @ it.lam_g
                      - data.jh.T @ it.lam_h)
                     - (prev_data.grad_f - prev_data.jg.T @ it.lam_g
                        - prev_data.jh.T @ it.lam_h))
                lbfgs_update(lbfgs, it.x - prev_data.x, y)
            prev_data = data
            hess = sp.csr_matrix(lbfgs_matrix(lbfgs, problem.n))

        kkt = assemble_kkt(data, it, hess, mu=it.mu)

        # factor with inertia correction or curvature loop
        try:
            delta_w, delta_c, (dx, ds, dlg, dlh) = _compute_direction(
                be, kkt, opt, reg, it)
        except (InertiaCorrectionFailed, StepComputationFailed):
            restored = _restoration(problem, sp_problem, it, flt, opt, backend)
            if restored is None:
                status = RESTORATION_FAILURE
                rows.append(LogRow(k, problem.f(it.x), inf_pr, inf_du,
                                   it.mu, 0.0, 0, 0.0))
                break
            it = restored
            data = evaluate(sp_problem, it.x)
            k += 1
            continue

        # adaptive barrier choice re-uses the factorization
        if opt.barrier_strategy in (MEHROTRA, QUALITY) and not opt.restoration:
            it.mu = _adaptive_mu(be, kkt, data, it, opt)
            rhs = rhs_for_mu(data, it, it.mu)
            dx, ds, dlg, dlh = be.solve(kkt, rhs)

        dx[it.fixed] = 0.0
        dz_lo, dz_hi = recover_dz(it, dx, mu=it.mu)
        d = Direction(dx=dx, ds=ds, dlam_g=dlg, dlam_h=dlh,
                      dz_lo=dz_lo, dz_hi=dz_hi,
                      delta_w=delta_w, delta_c=delta_c)

        tau = max(opt.tau_min, 1.0 - it.mu)
        alpha_max, alpha_z = fraction_to_boundary(it, d, tau)

        try:
            ls = filter_line_search(sp_problem, it, d, flt, it.mu, opt,
                                    alpha_max, data, theta_min=theta_min)
        except RestorationNeeded:
            restored = _restoration(problem, sp_problem, it, flt, opt, backend)
            if restored is None:
                status = RESTORATION_FAILURE
                rows.append(LogRow(k, problem.f(it.x), inf_pr, inf_du,
                                   it.mu, 0.0, 0, 0.0))
                break
            it = restored
            data = evaluate(sp_problem, it.x)
            k += 1
            continue

        if ls.ftype:
            flt.add((1.0 - opt.gamma_theta) * constraint_violation(
                data.g, data.h, it.s),
                barrier_objective(data.f, it, it.mu)
                - opt.gamma_phi * constraint_violation(data.g, data.h, it.s))

        prev_obj = problem.f(it.x)
        it.x = it.x + ls.alpha * d.dx
        it.s = it.s + ls.alpha * d.ds
        it.lam_g = it.lam_g + alpha_z * d.dlam_g
        it.lam_h = it.lam_h + alpha_z * d.dlam_h
        it.z_lo = it.z_lo + alpha_z * d.dz_lo
        it.z_hi = it.z_hi + alpha_z * d.dz_hi
        _clip_bound_duals(it, opt)
        data = ls.data

        rows.append(LogRow(k, problem.f(it.x), inf_pr, inf_du, it.mu,
                           ls.alpha, ls.backtracks, delta_w))
        k += 1
    else:
        status = MAX_ITER

    return SolveResult(
        status=status, iterate=it, objective=problem.f(it.x),
        iterations=k, log=rows, timings=dict(be.timings), scaling=scaling,
        problem=problem,
    )


def _clip_bound_duals(it: IpmIterate, opt: IpmOptions) -> None:
    """Primal-dual safeguard keeping z (and the slack dual -lam_h) within
    kappa_sigma of mu over the matching distance."""
    ks, mu = opt.kappa_sigma, it.mu
    lo = it.has_lo
    it.z_lo[lo] = np.clip(it.z_lo[lo], mu / (ks * it.d_lo[lo]),
                          ks * mu / it.d_lo[lo])
    hi = it.has_hi
    it.z_hi[hi] = np.clip(it.z_hi[hi], mu / (ks * it.d_hi[hi]),
                          ks * mu / it.d_hi[hi])
    if len(it.s):
        v = np.clip(-it.lam_h, mu / (ks * it.s), ks * mu / it.s)
        it.lam_h = -v


def _finite_step(step) -> bool:
    return all(np.all(np.isfinite(part)) for part in step)


def _compute_direction(be, kkt, opt, reg, it):
    """Inertia-corrected (or curvature-tested) step with a finiteness guard."""
    if opt.inertia_mode != INERTIA_DETECTION or be.use_sparse:
        return _curvature_loop(be, kkt, opt, reg, it)
    delta_w, delta_c = correct_inertia(be, kkt, opt, reg, it.mu)
    for _ in range(60):
        try:
            step = be.solve(kkt)
            if _finite_step(step):
                return delta_w, delta_c, step
        except (kl.KktError, np.linalg.LinAlgError):
            pass
        # numerically unusable despite acceptable inertia: keep regularizing
        delta_w = opt.delta_0 if delta_w == 0.0 else delta_w * opt.delta_grow
        if delta_w > opt.delta_max:
            break
        try:
            be.factor(kkt, delta_w, delta_c)
        except StepComputationFailed:
            continue
    raise StepComputationFailed("no numerically usable step")


def _curvature_loop(be, kkt, opt, reg, it):
    """Regularize until the step passes the curvature test."""
    delta = 0.0
    delta_c = 0.0
    w = kkt.w

    def w_apply(v):
        return np.asarray(w @ v).ravel()

    for _ in range(40):
        try:
            be.factor(kkt, delta, delta_c)
            step = be.solve(kkt)
        except StepComputationFailed:
            if delta_c == 0.0:
                delta_c = opt.delta_c_bar * max(it.mu, 1e-20) ** 0.25
                continue
            step = None
        if step is not None and _finite_step(step):
            dx, ds, dlg, dlh = step
            if curvature_test(w_apply, kkt.ls, delta, dx, ds,
                              opt.curvature_kappa):
                reg.delta_w_last = delta
                return delta, delta_c, step
        if delta == 0.0:
            delta = opt.delta_0 if reg.delta_w_last == 0.0 else max(
                opt.delta_min, reg.delta_w_last * opt.delta_shrink)
        else:
            delta *= opt.delta_grow
        if delta > opt.delta_max:
            break
    raise InertiaCorrectionFailed("curvature regularization exhausted")


def _adaptive_mu(be, kkt, data, it, opt) -> float:
    comp = it.complementarity()
    if comp <= 0:
        return it.mu
    if opt.barrier_strategy == MEHROTRA:
        rhs0 = rhs_for_mu(data, it, 0.0)
        dx, ds, dlg, dlh = be.solve(kkt, rhs0)
        dz_lo, dz_hi = recover_dz(it, dx, mu=0.0)
        aff = Direction(dx, ds, dlg, dlh, dz_lo, dz_hi)
        sigma = mehrotra_sigma(it, aff, opt.sigma_max)
        return max(opt.eps_tol / 10.0, sigma * comp)

    res = kkt_residuals(data, it)
    na, _, nc, nd, _ = res.inf_norms()

    def probe(sigma):
        mu_p = sigma * comp
        rhs = rhs_for_mu(data, it, mu_p)
        dx, ds, dlg, dlh = be.solve(kkt, rhs)
        dz_lo, dz_hi = recover_dz(it, dx, mu=mu_p)
        d = Direction(dx, ds, dlg, dlh, dz_lo, dz_hi)
        alpha_p, alpha_z = fraction_to_boundary(it, d, tau=0.995)
        d_lo = it.d_lo + alpha_p * dx
        d_hi = it.d_hi - alpha_p * dx
        s_t = it.s + alpha_p * ds
        z_lo = it.z_lo + alpha_z * dz_lo
        z_hi = it.z_hi + alpha_z * dz_hi
        lam_h = it.lam_h + alpha_z * dlh
        num = float((z_lo[it.has_lo] * d_lo[it.has_lo]).sum()
                    + (z_hi[it.has_hi] * d_hi[it.has_hi]).sum()
                    + (-lam_h * s_t).sum())
        den = max(1, int(it.has_lo.sum() + it.has_hi.sum() + len(it.s)))
        return ((1.0 - alpha_z) * na, (1.0 - alpha_p) * max(nc, nd), num / den)

    sigma = quality_function_sigma(probe, opt.sigma_min, opt.sigma_max)
    return max(opt.eps_tol / 10.0, sigma * comp)


def _restoration(problem, sp_problem, it, flt, opt, backend):
    """Feasibility restoration: minimize the squared constraint violation
    plus a proximity term, subject to the variable bounds only."""
    if opt.restoration:
        return None
    x_r = it.x.copy()
    zeta = opt.restoration_zeta
    base = sp_problem

    def rho(x):
        g = base.g(x)
        h = base.h(x)
        viol = float(g @ g) if len(g) else 0.0
        if len(h):
            hp = np.maximum(h, 0.0)
            viol += float(hp @ hp)
        return 0.5 * viol + 0.5 * zeta * float((x - x_r) @ (x - x_r))

    def grad_rho(x):
        out = zeta * (x - x_r)
        g = base.g(x)
        if len(g):
            out = out + base.jac_g(x).T @ g
        h = base.h(x)
        if len(h):
            hp = np.maximum(h, 0.0)
            out = out + base.jac_h(x).T @ hp
        return out

    def hess_rho(x, lam_g, lam_h):
        jg = base.jac_g(x)
        jh = base.jac_h(x)
        H = zeta * sp.eye(problem.n)
        if jg.shape[0]:
            H = H + jg.T @ jg
        if jh.shape[0]:
            act = sp.diags((base.h(x) > 0).astype(float))
            H = H + jh.T @ act @ jh
        return sp.csr_matrix(H)

    rest_problem = replace(
        problem, f=rho, grad_f=grad_rho,
        g=lambda x: np.zeros(0), h=lambda x: np.zeros(0),
        jac_g=lambda x: sp.csr_matrix((0, problem.n)),
        jac_h=lambda x: sp.csr_matrix((0, problem.n)),
        hess_lagrangian=hess_rho, n_g=0, n_h=0,
        x0=x_r, layout=None, name=problem.name + "-restoration",
    )
    rest_opt = replace(opt, restoration=True, scale_gradients=False,
                       barrier_strategy=MONOTONE, hessian_mode="exact",
                       max_iter=60, eps_tol=max(1e-8, opt.eps_tol))
    try:
        result = solve(rest_problem, rest_opt, backend=DIRECT_FULL)
    except IpmError:
        return None
    x_new = result.iterate.x
    data = evaluate(base, x_new)
    s_new = np.maximum(-data.h, 1e-8)
    theta_new = constraint_violation(data.g, data.h, s_new)
    phi_new = barrier_objective(
        data.f, _BoundView(x_new, s_new, it), it.mu)
    if flt.contains(theta_new, phi_new):
        return None
    out = it.copy()
    out.x = x_new
    out.s = s_new
    out.lam_g = np.zeros_like(it.lam_g)
    out.lam_h = -it.mu / s_new if len(s_new) else np.zeros(0)
    d_lo = np.maximum(np.where(out.has_lo, out.x - out.lb, 1.0), 1e-300)
    d_hi = np.maximum(np.where(out.has_hi, out.ub - out.x, 1.0), 1e-300)
    out.z_lo = np.where(out.has_lo, np.clip(it.mu / d_lo, opt.z_init_min,
                                            opt.z_init_max), 0.0)
    out.z_hi = np.where(out.has_hi, np.clip(it.mu / d_hi, opt.z_init_min,
                                            opt.z_init_max), 0.0)
    out.assert_interior()
    return out
