"""
Bags, patch labels and shuffling
================================

Two synthetic images are cut into 16x16 patches, shuffled across the batch,
and the soft labels of the regrouped bags are compared with the originals.
"""

import numpy as np

from sivit import datasynth as ds
from sivit.bagging import patchify, shuffle_distribute, unshuffle_distribute

cfg = ds.GenConfig(seed=3)
samples = [ds.generate_sample(cfg, 0, positive=True), ds.generate_sample(cfg, 1, positive=False)]
grids = [patchify(s, 16) for s in samples]

# the unshuffled bags keep their own soft labels: (MR, MR_normal, MR_cancer)
for bag in unshuffle_distribute(grids):
    print("original ", np.round(bag.soft_label.vector(), 3))

# after shuffling, patches (and their labels) have moved between bags
bags, record = shuffle_distribute(grids, np.random.default_rng(0))
for bag in bags:
    print("shuffled ", np.round(bag.soft_label.vector(), 3))

# the batch total is unchanged: shuffling only redistributes labelled area
total_before = sum(b.soft_label.vector() for b in unshuffle_distribute(grids))
total_after = sum(b.soft_label.vector() for b in bags)
print("batch totals match:", np.allclose(total_before, total_after))

# every slot remembers where its patch came from
print("bag 0, slot 0 came from", bags[0].provenance[0])
