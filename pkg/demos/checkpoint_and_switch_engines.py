"""
Checkpoint under one engine, restart under another
====================================================

A four-rank iterative allreduce is checkpointed partway through, written to
disk, and resumed on the other collective engine.  The final memory digest
matches the uninterrupted run.
"""

import tempfile
from pathlib import Path

from manasim.ckptstore import ImageSet, restart, write_image_set
from manasim.cli import metrics
from manasim.engine import engine_id
from manasim.harness import checkpoint_run, native_run
from manasim.runtime import run
from manasim.simnet import Schedule
from manasim.workloads import WorkloadSpec

spec = WorkloadSpec("iter-allreduce", world_size=4, steps=5)

# the reference: no checkpoint, star-shaped collectives
native = native_run(spec, "linear", seed=3)
print(f"native run: {native.steps} events, digest {native.digest()[:16]}")

# same schedule seed, with a checkpoint begun after 70 events
sim = checkpoint_run(spec, 70, "linear", seed=3)
print(f"with checkpoint: digest {sim.digest()[:16]}")
print("protocol cost:", metrics(sim.trace))

# images carry only upper-half state: no engine name, no real communicator ids
out = Path(tempfile.mkdtemp()) / "ckpt"
write_image_set(sim.images[0], out, spec.world_size, spec.to_dict(), sim.image_steps[0])
for p in sorted(out.iterdir()):
    print(f"  {p.name:14} {p.stat().st_size:5d} bytes")

# restart on the binomial-tree engine with a different schedule
images = ImageSet(out)
resumed = run(restart(images, engine_id("binomial"), spec.programs()), Schedule.seeded(99))
print(f"restarted on binomial: {resumed.steps} events, digest {resumed.digest()[:16]}")
assert resumed.digest() == native.digest()
