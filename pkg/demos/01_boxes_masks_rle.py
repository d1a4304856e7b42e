"""Boxes, masks and run-length encoding.

Walks through the geometry helpers on a couple of hand-made shapes.
"""
import numpy as np

from owseg.geometry import (box_iou, generalized_iou, mask_iou, mask_to_box, rle_decode,
                            rle_encode, size_bucket)

# Two overlapping squares: IoU is 1/7; GIoU subtracts the empty part of their 3x3 hull.
a, b = [0, 0, 2, 2], [1, 1, 3, 3]
print("IoU", box_iou(a, b), "GIoU", generalized_iou(a, b))

# Disjoint boxes have IoU 0 but GIoU still tells how far apart they are.
for gap in (0, 1, 4):
    far = [2 + gap, 0, 4 + gap, 2]
    print(f"gap {gap}: IoU {box_iou(a, far):.3f} GIoU {generalized_iou(a, far):+.3f}")

# A ring-ish mask and its tight box.
yy, xx = np.mgrid[:16, :16]
r = np.hypot(yy - 7.5, xx - 7.5)
ring = (r < 6) & (r > 3)
print("tight box", mask_to_box(ring).tolist(), "area", ring.sum(), size_bucket(ring.sum()))

# RLE is column-major and always starts with a run of zeros.
rle = rle_encode(ring)
print("first runs", rle.counts[:6], "...", len(rle.counts), "runs total")
assert np.array_equal(rle_decode(rle), ring)
print("COCO form", {k: v if k != "counts" else f"[{len(v)} ints]" for k, v in rle.to_coco().items()})

disc = r < 6
print("mask IoU ring vs disc", round(mask_iou(ring, disc), 3))
