"""
Training on phantoms, with and without the LoG stream
=====================================================

A short run on 32^3 phantoms. Each volume holds one thick tube and three thin
ones; the thin-tube region is scored separately.
"""

import time

import numpy as np
import torch

from logbseg import PhantomSpec, TrainConfig, evaluate, make_phantom, normalize, train
from logbseg.uqinfer import infer_volume
from logbseg.voxelio import REGION_SA

torch.set_num_threads(1)
EPOCHS = 100  # 500 reproduces the acceptance run


def phantom(seed, thick):
    return make_phantom(PhantomSpec(grid_size=(32, 32, 32), tube_radii=(thick, 1.0, 1.5, 2.0), tube_count=4,
                                    blur_sigma=1.0, noise_std=0.05, seed=seed))


train_set = [phantom(100 + i, r) for i, r in enumerate((8, 7, 5, 6, 8, 4, 7, 6))]
test_set = [phantom(900 + i, r) for i, r in enumerate((8, 5, 6, 7))]

for ablation in ("full", "no_log"):
    t = time.time()
    res = train(train_set, TrainConfig(crop_size=32, epochs=EPOCHS, ablation=ablation, seed=0))
    whole, sa = [], []
    for p in test_set:
        prob = infer_volume(res.model, normalize(p.image), 32)
        whole.append(evaluate(prob, p.mask).dice)
        sa.append(evaluate(prob, p.mask, region_mask=p.regions.data == REGION_SA).dice)
    print(f"{ablation:7s} loss {res.history[-1]['dice_loss']:.3f}  dice {np.mean(whole):.3f}  "
          f"thin-tube dice {np.mean(sa):.3f}  ({time.time() - t:.0f}s)")
