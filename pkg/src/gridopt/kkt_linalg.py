"""Symmetric indefinite factorization with inertia, slack elimination,
arrowhead permutation, and the block Schur-complement solve.

The factorization kernels are dense (LAPACK Bunch-Kaufman through
scipy.linalg.ldl) with an optional sparse backend (scipy splu) behind the
same interfaces; sparse factorizations do not report inertia.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class KktError(Exception):
    pass


class NotSymmetric(KktError):
    pass


class SingularSystem(KktError):
    pass


class DegenerateSlack(KktError):
    pass


class LayoutMismatch(KktError):
    pass


class SingularBlock(KktError):
    def __init__(self, msg, block=None):
        super().__init__(msg)
        self.block = block


class SingularSchur(KktError):
    pass


BACKSOLVE = "backsolve"
AUGMENTED_PARTIAL = "augmented-partial"


@dataclass
class SymIndefFactor:
    """P A P' = L D L' with unit-lower L and 1x1/2x2 block-diagonal D."""

    lower: np.ndarray  # row-permuted unit lower factor as returned by LAPACK
    d: np.ndarray
    perm: np.ndarray
    inertia: tuple[int, int, int]  # (n_pos, n_neg, n_zero)
    scale: float  # ||A||_inf used for the zero-pivot threshold

    @property
    def dim(self) -> int:
        return self.lower.shape[0]


def _d_blocks(d: np.ndarray):
    """Iterate the 1x1 / 2x2 pivot blocks of the block-diagonal factor."""
    n = d.shape[0]
    k = 0
    while k < n:
        if k + 1 < n and d[k + 1, k] != 0.0:
            yield k, d[k : k + 2, k : k + 2]
            k += 2
        else:
            yield k, d[k : k + 1, k : k + 1]
            k += 1


def ldlt_factor(A: np.ndarray, pivot_tol: float = 1e-12) -> SymIndefFactor:
    """Bunch-Kaufman LDL' factorization with eigenvalue-sign inertia."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise NotSymmetric("matrix must be square")
    if A.size and not np.all(np.isfinite(A)):
        raise SingularSystem("matrix contains non-finite entries")
    if A.size and not np.allclose(A, A.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise NotSymmetric("matrix is not symmetric")
    if A.size == 0:
        return SymIndefFactor(
            lower=np.zeros((0, 0)), d=np.zeros((0, 0)),
            perm=np.zeros(0, dtype=int), inertia=(0, 0, 0), scale=0.0,
        )
    lower, d, perm = sla.ldl(A, lower=True)
    scale = float(np.abs(A).max())
    tol = pivot_tol * max(scale, 1e-300)
    pos = neg = zero = 0
    for _, blk in _d_blocks(d):
        for ev in np.linalg.eigvalsh(blk):
            if ev > tol:
                pos += 1
            elif ev < -tol:
                neg += 1
            else:
                zero += 1
    return SymIndefFactor(lower=lower, d=d, perm=perm,
                          inertia=(pos, neg, zero), scale=scale)


def _solve_d(d: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = np.empty_like(y)
    for k, blk in _d_blocks(d):
        m = blk.shape[0]
        z[k : k + m] = np.linalg.solve(blk, y[k : k + m])
    return z


def ldlt_solve(factor: SymIndefFactor, rhs: np.ndarray,
               A: np.ndarray | None = None, refine: int = 1) -> np.ndarray:
    """Solve with the LDL' factors plus one step of iterative refinement.

    Passing the original matrix enables the refinement step; without it the
    plain back substitution result is returned.
    """
    if factor.inertia[2] > 0:
        raise SingularSystem("factorization has zero pivots")
    rhs = np.asarray(rhs, dtype=float)
    one_d = rhs.ndim == 1
    b = rhs.reshape(factor.dim, -1) if one_d else rhs

    def backsolve(b):
        L = factor.lower[factor.perm]
        y = sla.solve_triangular(L, b[factor.perm], lower=True,
                                 unit_diagonal=True)
        z = _solve_d(factor.d, y)
        w = sla.solve_triangular(L.T, z, lower=False, unit_diagonal=True)
        x = np.empty_like(w)
        x[factor.perm] = w
        return x

    x = backsolve(b)
    if A is not None:
        for _ in range(refine):
            r = b - A @ x
            x = x + backsolve(r)
    return x.ravel() if one_d else x


@dataclass
class SymmetricKkt:
    """Assembled symmetric 4-block system in (x, s, lam_g, lam_h) order.

    The s rows couple to lam_h through -I; ls holds the positive slack
    diagonal. delta_w is added to the W and ls diagonals, -delta_c to the
    constraint diagonal.
    """

    w: sp.csr_matrix | np.ndarray  # n x n symmetric
    jg: sp.csr_matrix | np.ndarray  # n_g x n
    jh: sp.csr_matrix | np.ndarray  # n_h x n
    ls: np.ndarray  # (n_h,)
    r_x: np.ndarray
    r_s: np.ndarray
    r_g: np.ndarray
    r_h: np.ndarray
    delta_w: float = 0.0
    delta_c: float = 0.0

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @property
    def n_g(self) -> int:
        return self.jg.shape[0]

    @property
    def n_h(self) -> int:
        return self.jh.shape[0]

    @property
    def dim(self) -> int:
        return self.n + self.n_g + 2 * self.n_h

    def rhs(self) -> np.ndarray:
        return np.concatenate([self.r_x, self.r_s, self.r_g, self.r_h])

    def assemble(self, dense: bool = True):
        n, ng, nh = self.n, self.n_g, self.n_h
        w = sp.csr_matrix(self.w) + self.delta_w * sp.eye(n)
        eye_h = sp.eye(nh)
        ls = sp.diags(self.ls + self.delta_w) if nh else sp.csr_matrix((0, 0))
        dcg = -self.delta_c * sp.eye(ng) if ng else None
        dch = -self.delta_c * sp.eye(nh) if nh else None
        M = sp.bmat(
            [
                [w, None, sp.csr_matrix(self.jg).T, sp.csr_matrix(self.jh).T],
                [None, ls, None, -eye_h if nh else None],
                [sp.csr_matrix(self.jg), None, dcg, None],
                [sp.csr_matrix(self.jh), -eye_h if nh else None, None, dch],
            ],
            format="csr",
        )
        return M.toarray() if dense else M

    def split(self, sol: np.ndarray):
        n, ng, nh = self.n, self.n_g, self.n_h
        return (sol[:n], sol[n : n + nh], sol[n + nh : n + nh + ng],
                sol[n + nh + ng :])


@dataclass
class ReducedKkt:
    """Slack-reduced 3-block system in (x, lam_g, lam_h) order."""

    w: sp.csr_matrix | np.ndarray
    jg: sp.csr_matrix | np.ndarray
    jh: sp.csr_matrix | np.ndarray
    corner: np.ndarray  # (n_h,) diagonal of the (3,3) block, typically -1/ls
    r_x: np.ndarray
    r_g: np.ndarray
    r_h: np.ndarray
    delta_w: float = 0.0
    delta_c: float = 0.0

    @property
    def dim(self) -> int:
        return self.w.shape[0] + self.jg.shape[0] + self.jh.shape[0]

    def rhs(self) -> np.ndarray:
        return np.concatenate([self.r_x, self.r_g, self.r_h])

    def assemble(self, dense: bool = True):
        n = self.w.shape[0]
        ng, nh = self.jg.shape[0], self.jh.shape[0]
        w = sp.csr_matrix(self.w) + self.delta_w * sp.eye(n)
        dcg = -self.delta_c * sp.eye(ng) if ng else None
        ch = sp.diags(self.corner - self.delta_c) if nh else None
        M = sp.bmat(
            [
                [w, sp.csr_matrix(self.jg).T, sp.csr_matrix(self.jh).T],
                [sp.csr_matrix(self.jg), dcg, None],
                [sp.csr_matrix(self.jh), None, ch],
            ],
            format="csr",
        )
        return M.toarray() if dense else M

    def split(self, sol: np.ndarray):
        n, ng = self.w.shape[0], self.jg.shape[0]
        return sol[:n], sol[n : n + ng], sol[n + ng :]


@dataclass
class EliminationRecord:
    """What recover_slack_step needs after the slacks were pivoted out."""

    ls_eff: np.ndarray  # L_s diagonal including the delta_w shift
    r_s: np.ndarray  # second rhs block of the unreduced system


def reduce_slack_system(kkt: SymmetricKkt) -> tuple[ReducedKkt, EliminationRecord]:
    """Eliminate the slack rows, shrinking the dimension by exactly n_h.

    The diagonal slack block makes the Schur complement trivial: the (3,3)
    block of the reduced system receives -inv(L_s) and the lam_h right-hand
    side picks up the propagated slack residual.
    """
    nh = kkt.n_h
    ls_eff = kkt.ls + kkt.delta_w
    if nh and np.min(np.abs(ls_eff)) < 1e-300:
        raise DegenerateSlack("slack diagonal is numerically singular")
    record = EliminationRecord(ls_eff=ls_eff, r_s=kkt.r_s.copy())
    reduced = ReducedKkt(
        w=kkt.w, jg=kkt.jg, jh=kkt.jh,
        corner=-1.0 / ls_eff if nh else np.zeros(0),
        r_x=kkt.r_x,
        r_g=kkt.r_g,
        r_h=kkt.r_h + (record.r_s / ls_eff if nh else 0.0),
        delta_w=kkt.delta_w, delta_c=kkt.delta_c,
    )
    return reduced, record


def recover_slack_step(record: EliminationRecord, d_lam_h: np.ndarray) -> np.ndarray:
    """Slack component of the step from the eliminated rows."""
    if len(record.ls_eff) == 0:
        return np.zeros(0)
    return (record.r_s + d_lam_h) / record.ls_eff


@dataclass
class ArrowheadSystem:
    """Block-diagonal matrix bordered by coupling rows/columns.

    blocks[i] are the per-scenario symmetric KKT blocks, couplings[i] the
    rectangular corner couplings B_i, corner the shared block C.
    """

    blocks: list
    couplings: list
    corner: np.ndarray | sp.spmatrix
    rhs_blocks: list[np.ndarray]
    rhs_corner: np.ndarray
    layout: "object" = None  # original ArrowheadLayout, for un-permutation

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)


def permute_to_arrowhead(matrix, layout, rhs: np.ndarray,
                         dense_blocks: bool = True) -> ArrowheadSystem:
    """Symmetrically permute a KKT matrix into its arrowhead blocks."""
    M = sp.csr_matrix(matrix)
    dim = M.shape[0]
    all_rows = np.concatenate(list(layout.scenario_rows) + [layout.corner_rows])
    if len(all_rows) != dim or len(np.unique(all_rows)) != dim:
        raise LayoutMismatch("layout does not partition the KKT dimension")
    corner_rows = layout.corner_rows
    Mc = sp.csc_matrix(M)
    blocks, couplings, rhs_blocks = [], [], []
    for rows in layout.scenario_rows:
        sub = Mc[:, rows].tocsr()
        a = sub[rows, :]
        b = sub[corner_rows, :]
        blocks.append(a.toarray() if dense_blocks else sp.csc_matrix(a))
        couplings.append(b.toarray() if dense_blocks else sp.csr_matrix(b))
        rhs_blocks.append(rhs[rows])
    corner_cols = Mc[:, corner_rows].tocsr()
    c = corner_cols[corner_rows, :]
    corner = c.toarray() if dense_blocks else sp.csc_matrix(c)
    return ArrowheadSystem(
        blocks=blocks, couplings=couplings, corner=corner,
        rhs_blocks=rhs_blocks, rhs_corner=rhs[corner_rows], layout=layout,
    )


def assemble_arrowhead(sys_: ArrowheadSystem):
    """Inverse of permute_to_arrowhead (block order, not original order)."""
    rows = []
    nb = sys_.n_blocks
    for i in range(nb):
        row = [None] * (nb + 1)
        row[i] = sp.csr_matrix(sys_.blocks[i])
        row[nb] = sp.csr_matrix(sys_.couplings[i]).T
        rows.append(row)
    last = [sp.csr_matrix(b) for b in sys_.couplings] + [sp.csr_matrix(sys_.corner)]
    rows.append(last)
    return sp.bmat(rows, format="csr")


def scatter_arrowhead_solution(sys_: ArrowheadSystem, locals_: list[np.ndarray],
                               corner: np.ndarray) -> np.ndarray:
    dim = sum(len(b) for b in sys_.rhs_blocks) + len(sys_.rhs_corner)
    out = np.empty(dim)
    for rows, val in zip(sys_.layout.scenario_rows, locals_):
        out[rows] = val
    out[sys_.layout.corner_rows] = corner
    return out


class _BlockFactor:
    """Factorization of one diagonal block, dense LDL' or sparse LU."""

    def __init__(self, a, index: int, pivot_tol: float = 0.0):
        self.index = index
        self.dense = isinstance(a, np.ndarray)
        self.a = a
        if self.dense:
            self.fac = ldlt_factor(a, pivot_tol=pivot_tol)
            if self.fac.inertia[2] > 0:
                raise SingularBlock(f"block {index} is singular", block=index)
            self.inertia = self.fac.inertia
        else:
            try:
                self.fac = spla.splu(sp.csc_matrix(a))
            except RuntimeError as e:
                raise SingularBlock(f"block {index}: {e}", block=index)
            self.inertia = None

    def solve(self, rhs):
        if self.dense:
            return ldlt_solve(self.fac, rhs, A=self.a)
        if rhs.ndim == 1:
            return self.fac.solve(rhs)
        return self.fac.solve(rhs)


def local_schur_contribution(a, b, method: str = BACKSOLVE,
                             index: int = 0) -> np.ndarray:
    """S_i = B_i inv(A_i) B_i', by backsolves or by partial factorization
    of the augmented matrix [[A, B'], [B, 0]]."""
    if method == BACKSOLVE:
        bf = _BlockFactor(a, index)
        bt = b.T.toarray() if sp.issparse(b) else np.asarray(b, dtype=float).T
        x = bf.solve(bt)
        s = (b @ x) if sp.issparse(b) else b @ x
        s = np.asarray(s)
        return 0.5 * (s + s.T)
    if method == AUGMENTED_PARTIAL:
        return _augmented_partial(a, b, index)
    raise ValueError(f"unknown local Schur method {method!r}")


def _augmented_partial(a, b, index: int = 0) -> np.ndarray:
    """Eliminate the A-range of the augmented matrix in place, with symmetric
    pivoting restricted to A; the negated trailing block is then B inv(A) B'.
    """
    a = a.toarray() if sp.issparse(a) else np.asarray(a, dtype=float)
    b = b.toarray() if sp.issparse(b) else np.asarray(b, dtype=float)
    na, m = a.shape[0], b.shape[0]
    M = np.zeros((na + m, na + m))
    M[:na, :na] = a
    M[na:, :na] = b
    M[:na, na:] = b.T
    # breakdown = the remaining A-range is exactly rank deficient; small but
    # genuine pivots are fine (BK pivoting keeps growth bounded), matching
    # the behavior of the dense LAPACK factorization
    tol = 1e-300
    alpha = (1.0 + np.sqrt(17.0)) / 8.0  # Bunch-Kaufman constant

    k = 0
    while k < na:
        rest = np.arange(k, na)
        dcol = np.abs(np.diag(M)[rest])
        use_two = False
        p = k + int(np.argmax(dcol))
        if k + 1 < na:
            # largest off-diagonal inside the remaining A-range
            sub = np.abs(M[k:na, k:na] - np.diag(np.diag(M[k:na, k:na])))
            off = sub.max() if sub.size else 0.0
            if dcol.max() < alpha * off:
                i, j = np.unravel_index(np.argmax(sub), sub.shape)
                pi, pj = k + min(i, j), k + max(i, j)
                _sym_swap(M, k, pi)
                _sym_swap(M, k + 1, pj if pj != k else pi)
                use_two = True
        if not use_two:
            if p != k:
                _sym_swap(M, k, p)
            piv = M[k, k]
            if abs(piv) <= tol:
                raise SingularBlock(
                    f"block {index}: pivot breakdown inside A", block=index
                )
            col = M[k + 1 :, k].copy()
            M[k + 1 :, k + 1 :] -= np.outer(col, col) / piv
            M[k + 1 :, k] = col / piv
            M[k, k + 1 :] = M[k + 1 :, k]
            k += 1
        else:
            D = M[k : k + 2, k : k + 2]
            det = D[0, 0] * D[1, 1] - D[0, 1] * D[1, 0]
            if abs(det) <= tol * tol:
                raise SingularBlock(
                    f"block {index}: 2x2 pivot breakdown inside A", block=index
                )
            cols = M[k + 2 :, k : k + 2].copy()
            W = np.linalg.solve(D.T, cols.T).T  # cols @ inv(D)
            M[k + 2 :, k + 2 :] -= W @ cols.T
            M[k + 2 :, k : k + 2] = W
            M[k : k + 2, k + 2 :] = W.T
            k += 2
    trailing = M[na:, na:]
    return -0.5 * (trailing + trailing.T)


def _sym_swap(M: np.ndarray, i: int, j: int) -> None:
    if i == j:
        return
    M[[i, j], :] = M[[j, i], :]
    M[:, [i, j]] = M[:, [j, i]]


class SchurSolver:
    """Factorization context for one arrowhead system (Schur decomposition).

    Per-block factorizations and Schur contributions run on a thread pool;
    the accumulation into S runs in ascending block order so results do not
    depend on the worker count.
    """

    def __init__(self, sys_: ArrowheadSystem, method: str = BACKSOLVE,
                 workers: int = 1):
        self.sys = sys_
        self.method = method
        self.workers = max(1, workers)
        self.block_factors: list[_BlockFactor] = []
        self.schur_factor: SymIndefFactor | None = None
        self.schur: np.ndarray | None = None
        self.inertia: tuple[int, int, int] | None = None

    def _map(self, fn, items):
        if self.workers == 1 or len(items) <= 1:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, items))

    def factor(self) -> "SchurSolver":
        sys_ = self.sys
        idxs = list(range(sys_.n_blocks))

        def one(i):
            bf = _BlockFactor(sys_.blocks[i], i)
            si = local_schur_contribution(sys_.blocks[i], sys_.couplings[i],
                                          self.method, index=i)
            return bf, si

        results = self._map(one, idxs)
        self.block_factors = [r[0] for r in results]
        corner = sys_.corner.toarray() if sp.issparse(sys_.corner) \
            else np.array(sys_.corner, dtype=float)
        s = corner
        for _, si in results:  # fixed ascending order
            s = s - si
        self.schur = s
        if s.size:
            self.schur_factor = ldlt_factor(s, pivot_tol=0.0)
            if self.schur_factor.inertia[2] > 0:
                raise SingularSchur("Schur complement is singular")
        if all(bf.inertia is not None for bf in self.block_factors):
            pos = sum(bf.inertia[0] for bf in self.block_factors)
            neg = sum(bf.inertia[1] for bf in self.block_factors)
            zero = sum(bf.inertia[2] for bf in self.block_factors)
            if self.schur_factor is not None:
                sp_, sn_, sz_ = self.schur_factor.inertia
                pos, neg, zero = pos + sp_, neg + sn_, zero + sz_
            self.inertia = (pos, neg, zero)
        return self

    def solve(self, rhs_blocks: list[np.ndarray] | None = None,
              rhs_corner: np.ndarray | None = None) -> np.ndarray:
        sys_ = self.sys
        if rhs_blocks is None:
            rhs_blocks = sys_.rhs_blocks
        if rhs_corner is None:
            rhs_corner = sys_.rhs_corner
        idxs = list(range(sys_.n_blocks))

        def residual(i):
            x = self.block_factors[i].solve(rhs_blocks[i])
            return np.asarray(sys_.couplings[i] @ x).ravel()

        r_parts = self._map(residual, idxs)
        r = np.zeros_like(rhs_corner)
        for part in r_parts:  # fixed ascending order
            r = r + part
        if self.schur_factor is not None:
            du_g = ldlt_solve(self.schur_factor, rhs_corner - r, A=self.schur)
        else:
            du_g = np.zeros(0)

        def local(i):
            b = rhs_blocks[i] - np.asarray(sys_.couplings[i].T @ du_g).ravel()
            return self.block_factors[i].solve(b)

        locals_ = self._map(local, idxs)
        return scatter_arrowhead_solution(sys_, locals_, du_g)


def schur_solve(sys_: ArrowheadSystem, method: str = BACKSOLVE,
                workers: int = 1) -> np.ndarray:
    """One-shot arrowhead solve (factor + solve)."""
    return SchurSolver(sys_, method=method, workers=workers).factor().solve()


def dump_symmetric(path, matrix) -> None:
    """Write the lower triangle as 'dim nnz' header plus 'i j value' lines."""
    M = sp.coo_matrix(sp.tril(sp.csr_matrix(matrix)))
    with open(path, "w") as fh:
        fh.write(f"{M.shape[0]} {M.nnz}\n")
        for i, j, v in zip(M.row, M.col, M.data):
            fh.write(f"{i + 1} {j + 1} {v:.17g}\n")


def load_symmetric(path) -> np.ndarray:
    with open(path) as fh:
        dim, nnz = map(int, fh.readline().split())
        A = np.zeros((dim, dim))
        for _ in range(nnz):
            i, j, v = fh.readline().split()
            i, j = int(i) - 1, int(j) - 1
            A[i, j] = float(v)
            A[j, i] = float(v)
    return A
