"""
Attribution maps
================

Train briefly, then write gradient-weighted token maps for a few positive test
images and for a shuffled bag. Maps land in ``attribution_demo/`` as PGM files.
"""

from pathlib import Path

import numpy as np

from sivit import datasynth as ds
from sivit import evalviz as ev
from sivit import train as tr
from sivit.backbone import image_patches
from sivit.bagging import merge_patches

out = Path("attribution_demo")
out.mkdir(exist_ok=True)

train = ds.generate_dataset(ds.GenConfig(seed=100), 128, 128)
cfg = tr.TrainConfig(epochs=8, strategy="si", normalize_labels=True, seed=0)
model = tr.build_model(cfg, 64, 2)
tr.fit(model, train, [], cfg)

test = ds.generate_dataset(ds.GenConfig(seed=102), 4, 0)
images, masks, _ = tr.stack(test)
images, masks = tr.eval_transform(images, masks, tr.AugmentConfig())
for sample, img, mask in zip(test, images, masks):
    amap = ev.attribution(model, img, target_class=1)
    inside, outside = ev.mask_overlap(amap, mask, ds.CANCER)
    print(f"{sample.sample_id}: mean map on cancer {inside:.2f}, on background {outside:.2f}")
    ev.write_map(amap, out / f"{sample.sample_id}.pgm")

# a regrouped bag is just another image to the model
patches = image_patches(images, 8)
perm = np.random.default_rng(0).permutation(patches.shape[0] * patches.shape[1])
shuffled = patches.reshape(-1, patches.shape[-1])[perm].reshape(patches.shape)
bag = merge_patches(shuffled[0].reshape(-1, 8, 8, 3))
ev.write_map(ev.attribution(model, bag, 1), out / "shuffled_bag.pgm")
print("maps written to", out)
