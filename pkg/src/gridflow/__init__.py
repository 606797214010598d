"""Convex optimal power flow, prices and payments, with MPC simulation."""

from .devices import (
    Composite,
    Converter,
    CurtailableLoad,
    DeferrableLoad,
    Device,
    FixedGenerator,
    FixedLoad,
    GenericGenerator,
    GridTie,
    IdealStorage,
    LosslessLine,
    LossyLine,
    PowerDissipator,
    RenewableGenerator,
    ThermalLoad,
    ValidationError,
    cycle_cost,
    lossy_battery,
)
from .network import Network, NetworkWarning
from .opf import InfeasibleError, Solution, optimize
from .pricing import payments, price_check, price_sheet, profit_check
from .qp import SolverSettings, Status
from .mpc import SimulationConfig, SimulationTrace, TerminalCondition, run_dopf, run_mpc, run_robust_mpc

__version__ = "0.1.0"

__all__ = [
    "Composite", "Converter", "CurtailableLoad", "DeferrableLoad", "Device", "FixedGenerator",
    "FixedLoad", "GenericGenerator", "GridTie", "IdealStorage", "LosslessLine", "LossyLine",
    "PowerDissipator", "RenewableGenerator", "ThermalLoad", "ValidationError", "cycle_cost",
    "lossy_battery", "Network", "NetworkWarning", "InfeasibleError", "Solution", "optimize",
    "payments", "price_check", "price_sheet", "profit_check", "SolverSettings", "Status",
    "SimulationConfig", "SimulationTrace", "TerminalCondition", "run_dopf", "run_mpc",
    "run_robust_mpc",
]
