"""Cycle-approximate simulator of enclave memory side channels: page tables,
TLBs, caches and DRAM shared between an enclave victim and its attackers."""
from .config import SimConfig
from .engine import SimResult, run_scenario, simulate

__version__ = "0.1.0"

__all__ = ["SimConfig", "SimResult", "run_scenario", "simulate", "__version__"]
