"""Power network model: MATPOWER case parsing, admittance matrices, contingencies.

All quantities are stored in per-unit on the system MVA base, except generator
cost coefficients which stay in $/MW^2 h, $/MWh, $/h and are converted at
objective evaluation time.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

REF, PV, PQ = 3, 2, 1


class GridError(Exception):
    """Base class for grid model errors."""


class MalformedFile(GridError):
    """Case text is missing a required matrix or contains a ragged row."""


class ValidationError(GridError):
    """Parsed data violates a structural invariant."""


class UnsupportedCost(GridError):
    """Cost model is not polynomial of degree <= 2."""


class IslandingError(GridError):
    """Removing a branch disconnects the network."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: int  # REF, PV or PQ
    pd: float  # MW
    qd: float  # MVAr
    gs: float  # MW consumed at V = 1 p.u.
    bs: float  # MVAr injected at V = 1 p.u.
    vm0: float
    va0: float  # rad
    vmin: float
    vmax: float
    base_kv: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float
    rate_a: float  # MVA, 0 means unlimited
    tap: float  # 0 means 1
    shift: float  # rad
    status: int


@dataclass(frozen=True)
class Generator:
    bus: int
    pg0: float  # MW
    qg0: float  # MVAr
    qmin: float
    qmax: float
    pmin: float
    pmax: float
    status: int
    cost_a: float  # $/MW^2 h
    cost_b: float  # $/MWh
    cost_c: float  # $/h


@dataclass(frozen=True)
class Contingency:
    outaged_branch: int  # index into GridCase.branches
    label: str = ""

    def with_default_label(self) -> "Contingency":
        if self.label:
            return self
        return Contingency(self.outaged_branch, f"L{self.outaged_branch}")


@dataclass(frozen=True)
class GridCase:
    name: str
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]

    @property
    def n_b(self) -> int:
        return len(self.buses)

    @property
    def n_l(self) -> int:
        return len(self.branches)

    @property
    def n_g(self) -> int:
        return len(self.generators)

    def bus_index(self) -> dict[int, int]:
        """Map external bus id -> 0-based position."""
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def ref_bus(self) -> int:
        """0-based position of the reference bus."""
        for i, b in enumerate(self.buses):
            if b.kind == REF:
                return i
        raise ValidationError("no REF bus")

    def gen_bus_positions(self) -> np.ndarray:
        idx = self.bus_index()
        return np.array([idx[g.bus] for g in self.generators], dtype=int)

    def in_service_branches(self) -> list[int]:
        return [i for i, br in enumerate(self.branches) if br.status]

    def pv_bus_positions(self) -> np.ndarray:
        """Buses hosting at least one in-service generator, REF excluded.

        This is the effective PV set used for power flow and variable
        partitioning; the declared bus kind is kept for reference but a
        PV-typed bus without a live generator cannot hold its voltage.
        """
        idx = self.bus_index()
        hosts = {idx[g.bus] for g in self.generators if g.status}
        ref = self.ref_bus
        return np.array(sorted(hosts - {ref}), dtype=int)

    def pq_bus_positions(self) -> np.ndarray:
        pv = set(self.pv_bus_positions().tolist())
        ref = self.ref_bus
        return np.array(
            [i for i in range(self.n_b) if i != ref and i not in pv], dtype=int
        )


@dataclass(frozen=True)
class AdmittanceMatrix:
    ybus: sp.csr_matrix  # N_B x N_B complex
    yf: sp.csr_matrix  # N_L x N_B
    yt: sp.csr_matrix
    cf: sp.csr_matrix  # 0/1 incidence, from side
    ct: sp.csr_matrix


_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\];", re.DOTALL)
_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([0-9eE.+-]+)\s*;")


def _strip_comments(text: str) -> str:
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _parse_matrix(body: str, what: str) -> np.ndarray:
    rows = []
    for raw in body.replace(";", "\n").splitlines():
        raw = raw.strip()
        if not raw:
            continue
        try:
            rows.append([float(tok) for tok in raw.split()])
        except ValueError as e:
            raise MalformedFile(f"bad number in mpc.{what}: {raw!r}") from e
    if not rows:
        raise MalformedFile(f"mpc.{what} is empty")
    width = len(rows[0])
    for r in rows:
        if len(r) != width:
            raise MalformedFile(f"ragged row in mpc.{what}")
    return np.array(rows)


def parse_matpower(text: str, name: str = "case") -> GridCase:
    """Parse MATPOWER v2 case text into a validated per-unit GridCase."""
    clean = _strip_comments(text)
    matrices = {m.group(1): m.group(2) for m in _MATRIX_RE.finditer(clean)}
    scalar = _SCALAR_RE.search(clean)
    if scalar is None:
        raise MalformedFile("missing mpc.baseMVA")
    base = float(scalar.group(1))
    if base <= 0:
        raise ValidationError("baseMVA must be positive")
    for req in ("bus", "gen", "branch"):
        if req not in matrices:
            raise MalformedFile(f"missing mpc.{req}")
    if "gencost" not in matrices:
        raise UnsupportedCost("missing mpc.gencost")

    bus_m = _parse_matrix(matrices["bus"], "bus")
    gen_m = _parse_matrix(matrices["gen"], "gen")
    br_m = _parse_matrix(matrices["branch"], "branch")
    cost_m = _parse_matrix(matrices["gencost"], "gencost")

    if bus_m.shape[1] < 13 or gen_m.shape[1] < 10 or br_m.shape[1] < 11:
        raise MalformedFile("matrix has too few columns")
    if cost_m.shape[0] != gen_m.shape[0]:
        raise UnsupportedCost("gencost rows must match gen rows")

    buses = []
    for row in bus_m:
        kind = int(row[1])
        if kind not in (REF, PV, PQ):
            if kind == 4:  # isolated bus
                raise ValidationError(f"isolated bus {int(row[0])} not supported")
            raise ValidationError(f"unknown bus type {kind}")
        buses.append(
            Bus(
                id=int(row[0]),
                kind=kind,
                pd=row[2] / base,
                qd=row[3] / base,
                gs=row[4] / base,
                bs=row[5] / base,
                vm0=row[7],
                va0=np.deg2rad(row[8]),
                base_kv=row[9],
                vmax=row[11],
                vmin=row[12],
            )
        )

    gens = []
    for grow, crow in zip(gen_m, cost_m):
        model, npoly = int(crow[0]), int(crow[3])
        if model != 2:
            raise UnsupportedCost("only polynomial (model 2) costs supported")
        if npoly > 3:
            raise UnsupportedCost("cost polynomial degree > 2")
        coeffs = crow[4 : 4 + npoly]
        a = b = c = 0.0
        if npoly == 3:
            a, b, c = coeffs
        elif npoly == 2:
            b, c = coeffs
        elif npoly == 1:
            (c,) = coeffs
        gens.append(
            Generator(
                bus=int(grow[0]),
                pg0=grow[1] / base,
                qg0=grow[2] / base,
                qmax=grow[3] / base,
                qmin=grow[4] / base,
                status=int(grow[7]),
                pmax=grow[8] / base,
                pmin=grow[9] / base,
                cost_a=a,
                cost_b=b,
                cost_c=c,
            )
        )

    branches = []
    for row in br_m:
        branches.append(
            Branch(
                from_bus=int(row[0]),
                to_bus=int(row[1]),
                r=row[2],
                x=row[3],
                b=row[4],
                rate_a=row[5] / base,
                tap=row[8],
                shift=np.deg2rad(row[9]),
                status=int(row[10]),
            )
        )

    grid = GridCase(name, base, tuple(buses), tuple(branches), tuple(gens))
    validate(grid)
    return grid


def validate(grid: GridCase) -> None:
    ref_count = sum(1 for b in grid.buses if b.kind == REF)
    if ref_count != 1:
        raise ValidationError(f"expected exactly one REF bus, found {ref_count}")
    ids = [b.id for b in grid.buses]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate bus ids")
    known = set(ids)
    for b in grid.buses:
        if b.vmin <= 0:
            raise ValidationError(f"bus {b.id}: vmin must be positive")
        if b.kind == REF and not (b.vmin <= b.vm0 <= b.vmax):
            raise ValidationError(f"REF bus {b.id}: vm0 outside voltage bounds")
    for g in grid.generators:
        if g.bus not in known:
            raise ValidationError(f"generator references unknown bus {g.bus}")
        if g.pmin > g.pmax or g.qmin > g.qmax:
            raise ValidationError(f"generator at bus {g.bus}: empty limit box")
    for k, br in enumerate(grid.branches):
        if br.from_bus not in known or br.to_bus not in known:
            raise ValidationError(f"branch {k}: endpoint does not exist")
        if br.from_bus == br.to_bus:
            raise ValidationError(f"branch {k}: endpoints coincide")
        if br.status and br.r == 0.0 and br.x == 0.0:
            raise ValidationError(f"branch {k}: zero series impedance")


def serialize_matpower(grid: GridCase) -> str:
    """Write the case back out as MATPOWER v2 text (round-trips with parse)."""
    base = grid.base_mva
    out = [f"function mpc = {grid.name}", "mpc.version = '2';",
           f"mpc.baseMVA = {base:.10g};", ""]
    out.append("mpc.bus = [")
    for b in grid.buses:
        out.append(
            f"\t{b.id}\t{b.kind}\t{b.pd * base:.10g}\t{b.qd * base:.10g}"
            f"\t{b.gs * base:.10g}\t{b.bs * base:.10g}\t1"
            f"\t{b.vm0:.12g}\t{np.rad2deg(b.va0):.12g}\t{b.base_kv:.10g}\t1"
            f"\t{b.vmax:.10g}\t{b.vmin:.10g};"
        )
    out.append("];\n")
    out.append("mpc.gen = [")
    for g in grid.generators:
        out.append(
            f"\t{g.bus}\t{g.pg0 * base:.10g}\t{g.qg0 * base:.10g}"
            f"\t{g.qmax * base:.10g}\t{g.qmin * base:.10g}\t1\t{base:.10g}"
            f"\t{g.status}\t{g.pmax * base:.10g}\t{g.pmin * base:.10g};"
        )
    out.append("];\n")
    out.append("mpc.branch = [")
    for br in grid.branches:
        out.append(
            f"\t{br.from_bus}\t{br.to_bus}\t{br.r:.10g}\t{br.x:.10g}\t{br.b:.10g}"
            f"\t{br.rate_a * base:.10g}\t0\t0\t{br.tap:.10g}"
            f"\t{np.rad2deg(br.shift):.10g}\t{br.status}\t-360\t360;"
        )
    out.append("];\n")
    out.append("mpc.gencost = [")
    for g in grid.generators:
        out.append(f"\t2\t0\t0\t3\t{g.cost_a:.12g}\t{g.cost_b:.12g}\t{g.cost_c:.12g};")
    out.append("];")
    return "\n".join(out) + "\n"


def load_case(path: str | Path) -> GridCase:
    path = Path(path)
    return parse_matpower(path.read_text(), name=path.stem)


def bundled_case_path(name: str) -> Path:
    """Path to a case file shipped with the package (e.g. 'case9')."""
    return Path(__file__).parent / "cases" / f"{name}.m"


def load_bundled_case(name: str) -> GridCase:
    return load_case(bundled_case_path(name))


def build_admittance(grid: GridCase) -> AdmittanceMatrix:
    """Assemble bus/branch admittance matrices for the standard pi model.

    Out-of-service branches contribute nothing. Tap ratio applies on the
    from side together with the phase shift.
    """
    nb, nl = grid.n_b, grid.n_l
    idx = grid.bus_index()
    f = np.array([idx[br.from_bus] for br in grid.branches], dtype=int)
    t = np.array([idx[br.to_bus] for br in grid.branches], dtype=int)
    status = np.array([br.status for br in grid.branches], dtype=float)
    r = np.array([br.r for br in grid.branches])
    x = np.array([br.x for br in grid.branches])
    bch = np.array([br.b for br in grid.branches])
    tap_mag = np.array([br.tap if br.tap != 0.0 else 1.0 for br in grid.branches])
    shift = np.array([br.shift for br in grid.branches])

    with np.errstate(divide="ignore", invalid="ignore"):
        ys = status / (r + 1j * x)
    ys = np.where(status > 0, ys, 0.0)
    tap = tap_mag * np.exp(1j * shift)

    ytt = ys + 1j * bch / 2.0 * status
    yff = ytt / (tap * np.conj(tap))
    yft = -ys / np.conj(tap)
    ytf = -ys / tap

    rows = np.arange(nl)
    cf = sp.csr_matrix((np.ones(nl), (rows, f)), shape=(nl, nb))
    ct = sp.csr_matrix((np.ones(nl), (rows, t)), shape=(nl, nb))
    yf = sp.csr_matrix((yff, (rows, f)), shape=(nl, nb)) + sp.csr_matrix(
        (yft, (rows, t)), shape=(nl, nb)
    )
    yt = sp.csr_matrix((ytf, (rows, f)), shape=(nl, nb)) + sp.csr_matrix(
        (ytt, (rows, t)), shape=(nl, nb)
    )
    ysh = np.array([b.gs + 1j * b.bs for b in grid.buses])
    ybus = cf.T @ yf + ct.T @ yt + sp.diags(ysh)
    return AdmittanceMatrix(
        ybus=sp.csr_matrix(ybus), yf=sp.csr_matrix(yf), yt=sp.csr_matrix(yt),
        cf=cf, ct=ct,
    )


def is_connected(grid: GridCase, skip_branch: int | None = None) -> bool:
    """Connectivity of the in-service network, optionally with one branch removed."""
    nb = grid.n_b
    idx = grid.bus_index()
    adj: list[list[int]] = [[] for _ in range(nb)]
    for k, br in enumerate(grid.branches):
        if not br.status or k == skip_branch:
            continue
        a, b = idx[br.from_bus], idx[br.to_bus]
        adj[a].append(b)
        adj[b].append(a)
    seen = np.zeros(nb, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                stack.append(v)
    return bool(seen.all())


def apply_contingency(grid: GridCase, c: Contingency) -> GridCase:
    """Return a copy of the grid with the outaged branch switched out."""
    k = c.outaged_branch
    if not 0 <= k < grid.n_l:
        raise ValidationError(f"contingency references unknown branch {k}")
    if not grid.branches[k].status:
        raise ValidationError(f"branch {k} is already out of service")
    if not is_connected(grid, skip_branch=k):
        raise IslandingError(f"outage of branch {k} disconnects the grid")
    branches = list(grid.branches)
    branches[k] = replace(branches[k], status=0)
    return replace(grid, branches=tuple(branches))


def screen_contingencies(
    grid: GridCase,
    candidates: list[Contingency],
    q_viol_tol: float = 10.0,
    pf_tol: float = 1e-8,
    pf_max_iter: int = 20,
) -> list[Contingency]:
    """Keep candidates that leave a connected, PF-solvable grid.

    A candidate survives when (i) no islands or isolated buses appear after
    the outage, (ii) a Newton power flow at base-case controls converges on
    the post-outage grid, and (iii) the total reactive generation limit
    violation stays within q_viol_tol (MVAr).
    """
    from . import powerflow

    kept = []
    for c in candidates:
        c = c.with_default_label()
        k = c.outaged_branch
        if not (0 <= k < grid.n_l) or not grid.branches[k].status:
            continue
        if not is_connected(grid, skip_branch=k):
            continue
        post = apply_contingency(grid, c)
        y_post = build_admittance(post)
        try:
            sol = powerflow.newton_pf(post, y_post, tol=pf_tol, max_iter=pf_max_iter)
        except (powerflow.PfDivergence, powerflow.SingularJacobian):
            continue
        viol = 0.0
        for g, q in zip(post.generators, sol.qg):
            if not g.status:
                continue
            viol += max(0.0, q - g.qmax) + max(0.0, g.qmin - q)
        if viol * grid.base_mva > q_viol_tol:
            continue
        kept.append(c)
    return kept
