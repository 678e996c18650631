"""Semidefinite relaxation of optimal power flow for unbalanced microgrids.

Centralized solves go through :func:`assemble_p3` and :func:`solve_sdp`;
the distributed variant runs :func:`run_admm` over a :class:`PartitionPlan`.
:mod:`mgopf.verify` checks recovered voltages against the power-flow
equations directly.
"""

__version__ = "0.1.0"

from .admm import AdmmConfig, AdmmResult, complete_psd, run_admm
from .ipsolver import SolverConfig, SolverResult, extract_rank1, solve_sdp
from .netmodel import NetworkModel, build_bus_admittance, load_network
from .partition import PartitionPlan, build_plan, verify_chordal
from .sdpcore import CapOptions, CostKind, SdpProblem, assemble_p3
from .verify import check_operating_point, report_quantities

__all__ = [
    "AdmmConfig",
    "AdmmResult",
    "CapOptions",
    "CostKind",
    "NetworkModel",
    "PartitionPlan",
    "SdpProblem",
    "SolverConfig",
    "SolverResult",
    "assemble_p3",
    "build_bus_admittance",
    "build_plan",
    "check_operating_point",
    "complete_psd",
    "extract_rank1",
    "load_network",
    "report_quantities",
    "run_admm",
    "solve_sdp",
    "verify_chordal",
]
