"""Behavioral model, gain design and stability checks for a switched-mode DPLL."""
from .model import CircuitParams, FsmState, LoopGains, Mode, PllState
from .sim import LoopConfig, SimOptions, SwitchThresholds, simulate

__version__ = "0.1.0"

__all__ = [
    "CircuitParams",
    "FsmState",
    "LoopConfig",
    "LoopGains",
    "Mode",
    "PllState",
    "SimOptions",
    "SwitchThresholds",
    "simulate",
]
