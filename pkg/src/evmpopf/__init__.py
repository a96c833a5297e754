"""Multiperiod AC optimal power flow for EV charge scheduling in distribution grids."""

from evmpopf.grid import (
    Admittances,
    CaseValidationError,
    NetworkCase,
    build_admittances,
    build_connectivity,
    bus_injections,
    line_flows,
)

__version__ = "0.1.0"

__all__ = [
    "Admittances",
    "CaseValidationError",
    "NetworkCase",
    "build_admittances",
    "build_connectivity",
    "bus_injections",
    "line_flows",
    "__version__",
]
