"""
The foreground balancing gate
=============================

Crops with little foreground go to one queue and foreground-rich crops to the
other. A batch leaves only once both queues hold C crops.
"""

import numpy as np

from logbseg.gate import GateState, fg_ratio
from logbseg.voxelio import LabeledCrop, PhantomSpec, Volume, crop_blocks, make_phantom

rng = np.random.default_rng(0)
crops = []
for seed in range(6):
    radii = (1.5, 2.0) if seed % 2 else (6.0, 7.0)
    p = make_phantom(PhantomSpec(grid_size=(32, 32, 32), tube_radii=radii, tube_count=2, seed=seed))
    crops += crop_blocks(p.image, p.mask, 16, p.source_id)

ratios = [fg_ratio(c.mask) for c in crops]
print(f"{len(crops)} crops, foreground ratio range {min(ratios):.3f} .. {max(ratios):.3f}")

gate = GateState(capacity=2, mu=0.15)
for i in rng.permutation(len(crops)):
    batch = gate.push(crops[i])
    if batch is not None:
        print("batch:", np.round(batch.ratios, 3))

stats = gate.stats()
print("pushes", stats["pushes"], "enqueued", stats["enqueued"], "skipped", stats["skipped"],
      "still queued", gate.c1, gate.c2)
