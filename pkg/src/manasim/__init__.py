"""Simulated MPI runtime with transparent coordinated checkpoint/restart."""

from .engine import EngineId, engine_id
from .runtime import Deadlock, Simulation, run
from .simnet import Schedule
from .workloads import WorkloadSpec

__all__ = ["EngineId", "engine_id", "Deadlock", "Simulation", "run", "Schedule", "WorkloadSpec"]
__version__ = "0.1.0"
