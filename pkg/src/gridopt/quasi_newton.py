"""Limited-memory BFGS approximation of the Lagrangian Hessian.

Maintains up to m (s, y) correction pairs with a curvature guard and
optional Powell damping; the operator stays positive definite by
construction. Used both for the full-space quasi-Newton mode and for the
reduced-space driver where exact second derivatives are unavailable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CURVATURE_GUARD = 1e-12


@dataclass
class LbfgsHistory:
    m: int = 20
    damping: bool = True
    pairs: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def gamma(self) -> float:
        """Scale of the base matrix B0 = gamma I."""
        if not self.pairs:
            return 1.0
        s, y = self.pairs[-1]
        return float(y @ y / (s @ y))

    def __len__(self) -> int:
        return len(self.pairs)


def lbfgs_update(history: LbfgsHistory, s: np.ndarray, y: np.ndarray) -> bool:
    """Admit a correction pair; returns False when the pair is rejected.

    Pairs with s'y below the curvature guard are either damped toward the
    current operator (Powell) or dropped, keeping B positive definite.
    """
    s = np.asarray(s, dtype=float)
    y = np.asarray(y, dtype=float)
    ns, ny = np.linalg.norm(s), np.linalg.norm(y)
    if ns == 0.0 or ny == 0.0:
        return False
    sty = float(s @ y)
    if history.damping:
        bs = lbfgs_apply(history, s)
        sbs = float(s @ bs)
        if sty < 0.2 * sbs:
            theta = 0.8 * sbs / (sbs - sty)
            y = theta * y + (1.0 - theta) * bs
            sty = float(s @ y)
    if sty <= CURVATURE_GUARD * ns * np.linalg.norm(y):
        return False
    history.pairs.append((s, y))
    if len(history.pairs) > history.m:
        history.pairs.pop(0)
    return True


def lbfgs_apply(history: LbfgsHistory, v: np.ndarray) -> np.ndarray:
    """B v for the direct BFGS operator built from the stored pairs."""
    v = np.asarray(v, dtype=float)
    out = history.gamma * v
    if not history.pairs:
        return out
    # unrolled direct recursion: B_{k+1} v = B_k v - B_k s (s'B_k v)/(s'B_k s)
    #                                        + y (y'v)/(y's)
    bs_list = []
    for i, (s, y) in enumerate(history.pairs):
        bs = history.gamma * s
        for j in range(i):
            sj, yj = history.pairs[j]
            bsj = bs_list[j]
            bs = bs - bsj * (sj @ bs) / (sj @ bsj) + yj * (yj @ s) / (yj @ sj)
        bs_list.append(bs)
    for (s, y), bs in zip(history.pairs, bs_list):
        out = out - bs * (s @ out) / (s @ bs) + y * (y @ v) / (y @ s)
    return out


def lbfgs_matrix(history: LbfgsHistory, n: int) -> np.ndarray:
    """Materialize B as a dense matrix (desk-scale KKT assembly)."""
    B = history.gamma * np.eye(n)
    for s, y in history.pairs:
        bs = B @ s
        B = B - np.outer(bs, bs) / (s @ bs) + np.outer(y, y) / (y @ s)
    return 0.5 * (B + B.T)
