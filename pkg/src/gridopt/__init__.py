"""gridopt: structure-exploiting interior-point solver for AC optimal power
flow and security-constrained OPF.

The package splits into the grid model (MATPOWER parsing, admittances,
contingencies), AC power flow with partitioned Jacobians, full-space OPF and
SCOPF problem builders, symmetric-indefinite and block-Schur KKT linear
algebra, the filter line-search interior-point driver, and a reduced-space
quasi-Newton path built on adjoint gradients.
"""

from . import (  # noqa: F401
    grid_model,
    ipm_core,
    kkt_linalg,
    opf_problems,
    powerflow,
    quasi_newton,
    reduced_space,
)
from .grid_model import (  # noqa: F401
    Contingency,
    GridCase,
    apply_contingency,
    build_admittance,
    load_bundled_case,
    load_case,
    parse_matpower,
    screen_contingencies,
    serialize_matpower,
)
from .ipm_core import IpmOptions, solve  # noqa: F401
from .opf_problems import build_opf, build_scopf  # noqa: F401
from .powerflow import newton_pf  # noqa: F401
from .reduced_space import build_reduced, reduced_solve  # noqa: F401

__version__ = "0.1.0"
