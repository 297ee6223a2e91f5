"""
Uncertainty from repeated posterior samples
===========================================

Train briefly, run ten stochastic passes, and compare interval widths on the
tube boundary with those inside the tube.
"""

from pathlib import Path

import torch

from logbseg import PhantomSpec, TrainConfig, make_phantom, normalize, train
from logbseg.uqinfer import (boundary_width_stat, confidence_bounds, export_surface, mc_predict,
                             plot_slices, write_uncertainty)

torch.set_num_threads(1)
out = Path("demo_out")

vols = [make_phantom(PhantomSpec(grid_size=(32, 32, 32), tube_radii=(6.0, 1.5), tube_count=2, seed=s))
        for s in range(4)]
res = train(vols, TrainConfig(crop_size=32, epochs=60, lr=1e-3, ablation="no_gate", seed=0))

p = make_phantom(PhantomSpec(grid_size=(32, 32, 32), tube_radii=(6.0, 1.5), tube_count=2, seed=50))
ens = mc_predict(res.model, normalize(p.image), n=10, seed=0, crop_size=32)
u = confidence_bounds(ens, "minmax")
print("members:", ens.n)
print(boundary_width_stat(u, p.mask))

write_uncertainty(u, out / "case")
plot_slices(u, out / "plots", image=p.image, gt=p.mask)
mesh = export_surface(u.mean, 0.5, out / "case_mean.obj")
print("mesh:", len(mesh.vertices), "vertices,", len(mesh.faces), "faces")
