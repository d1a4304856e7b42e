"""Synthetic shape scenes, a base/novel split and augmentation.

Writes a small dataset to ./demo_out/data and a contact sheet PNG.
"""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from owseg.data import SceneSpec, augment, generate_synthetic, save_dataset

out = Path("demo_out")
spec = SceneSpec(seed=0)
split = spec.split_by_family(["ring", "cross"])
ds = generate_synthetic(spec, 8, split, supervision="base_only")

for s in ds.samples[:4]:
    kinds = [(spec.families[i.category_id - 1], "base" if i.is_base else "novel")
             for i in s.eval_instances]
    print(f"image {s.image_id}: {len(s.instances)} supervised / {len(s.eval_instances)} total", kinds)

path = save_dataset(ds, out / "data")
print("saved", path)

# Flip and large-scale jitter on the first image; boxes always follow the masks.
rng = np.random.default_rng(0)
s = ds[0]
views = [("original", s.image, s.eval_instances)]
views.append(("flip", *augment(s.image, s.eval_instances, "flip", apply=True)))
views.append(("lsj x0.5", *augment(s.image, s.eval_instances, "lsj", scale=0.5, offset=(0, 0))))
views.append(("lsj random", *augment(s.image, s.eval_instances, "lsj", rng)))

fig, axes = plt.subplots(1, len(views), figsize=(3 * len(views), 3))
for ax, (title, img, insts) in zip(axes, views):
    ax.imshow(img)
    for inst in insts:
        x1, y1, x2, y2 = inst.box
        color = "lime" if inst.is_base else "red"
        ax.add_patch(plt.Rectangle((x1 - 0.5, y1 - 0.5), x2 - x1, y2 - y1, fill=False, color=color))
    ax.set_title(title)
    ax.axis("off")
fig.tight_layout()
fig.savefig(out / "scenes.png")
print("wrote", out / "scenes.png")
