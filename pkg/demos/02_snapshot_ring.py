#!/usr/bin/env python3
# How the snapshot ring turns recent parameter copies into teachers.

# %%
import numpy as np

from mrkd.nn import init_params
from mrkd.snapshots import SnapshotConfig, ring_init

# %% Three copies refreshed every 4 steps. The "update" just nudges one weight
# so we can read off which step each copy came from.
theta = init_params([2, 2], seed=0)
theta.layers[0].weight[0, 0] = 0.0
ring = ring_init(theta, SnapshotConfig(kappa_epochs=1, n=3, steps_per_epoch=4))

for t in range(1, 14):
    shifted = ring.tick(theta)
    theta.layers[0].weight[0, 0] = t
    tags = [int(c.layers[0].weight[0, 0]) for c in ring.copies]
    print(f"step {t:>2}  {'shift' if shifted else '     '}  copies hold theta after steps {tags}")

# %% Teachers are just forward passes through the stored copies.
x = np.random.default_rng(0).normal(size=(2, 2))
for i, logits in enumerate(ring.teachers(x)):
    print(f"teacher {i}:", np.round(logits, 3).tolist())
