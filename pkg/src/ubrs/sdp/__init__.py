"""Semidefinite programming: standard form, SDPA codec, interior-point solver."""

from .sdpa import SdpaFormatError, export_sdpa, import_sdpa
from .solver import SdpSolution, SolverOptions, Status, solve
from .standard import SdpStandardForm, StandardFormError, sos_solution, to_standard_form

__all__ = [
    "SdpSolution", "SdpStandardForm", "SdpaFormatError", "SolverOptions", "StandardFormError", "Status",
    "export_sdpa", "import_sdpa", "solve", "sos_solution", "to_standard_form",
]
