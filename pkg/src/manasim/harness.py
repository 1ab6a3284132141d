"""Run helpers shared by the acceptance suite and the demos."""

from __future__ import annotations

from typing import NamedTuple

from .ckptstore import restart
from .engine import engine_id
from .runtime import Simulation, run
from .simnet import Schedule
from .workloads import WorkloadSpec


def native_run(spec: WorkloadSpec, engine: str = "linear", seed: int = 0) -> Simulation:
    return run(Simulation(spec.programs(), engine_id(engine)), Schedule.seeded(seed))


def checkpoint_run(spec: WorkloadSpec, at, engine: str = "linear", seed: int = 0) -> Simulation:
    """Run with a checkpoint begun once ``at`` events have executed (int or list)."""
    at = [at] if isinstance(at, int) else list(at)
    return run(Simulation(spec.programs(), engine_id(engine), ckpt_at=at), Schedule.seeded(seed))


def restart_run(images: dict[int, bytes], spec: WorkloadSpec, engine: str = "linear",
                seed: int = 0) -> Simulation:
    return run(restart(images, engine_id(engine), spec.programs()), Schedule.seeded(seed))


class SweepPoint(NamedTuple):
    index: int
    continued: bool
    restarted: dict[str, bool]
    violations: int


def restart_sweep(spec: WorkloadSpec, engine: str = "linear", restart_engines=("linear",),
                  seed: int = 0, restart_seed: int = 1, stride: int = 1) -> tuple[str, list[SweepPoint]]:
    """Checkpoint at every ``stride``-th event index and restart from each image set.

    Returns the native digest and one point per index.
    """
    want = native_run(spec, engine, seed)
    points = []
    for i in range(0, want.steps, stride):
        sim = checkpoint_run(spec, i, engine, seed)
        images = sim.images[max(sim.images)]
        res = {e: restart_run(images, spec, e, restart_seed).digest() == want.digest()
               for e in restart_engines}
        points.append(SweepPoint(i, sim.digest() == want.digest(), res, len(sim.violations)))
    return want.digest(), points
