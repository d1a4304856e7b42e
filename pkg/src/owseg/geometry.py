"""Geometric kernels shared by the losses, the matcher and the evaluator.

Boxes are ``(x1, y1, x2, y2)`` with the half-open area convention
``area = (x2 - x1) * (y2 - y1)``. Normalized boxes are ``(cx, cy, w, h)``
divided by the image size. Masks are 2-D boolean numpy arrays; RLE masks
follow the uncompressed COCO layout (column-major runs, leading zero run).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

SMALL_AREA = 32.0 ** 2
MEDIUM_AREA = 96.0 ** 2
SIZE_BUCKETS = ("small", "medium", "large")


def _as_box(box) -> np.ndarray:
    b = np.asarray(box, dtype=np.float64)
    if b.shape[-1] != 4:
        raise ValueError(f"box must have 4 coordinates, got shape {b.shape}")
    if not np.all(np.isfinite(b)):
        raise ValueError(f"box has non-finite coordinates: {b}")
    if np.any(b[..., 2] < b[..., 0]) or np.any(b[..., 3] < b[..., 1]):
        raise ValueError(f"box has negative width or height: {b}")
    return b


def box_area(box) -> np.ndarray:
    b = _as_box(box)
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def box_iou(a, b) -> float:
    """IoU of two ``xyxy`` boxes; 0.0 when the union is empty."""
    a, b = _as_box(a), _as_box(b)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0.0:
        return 0.0
    return float(inter / union)


def generalized_iou(a, b) -> float:
    """Generalized IoU: ``IoU - (hull - union) / hull``.

    Returns 0.0 when the enclosing hull has zero area.
    """
    a, b = _as_box(a), _as_box(b)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    hull = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    if hull <= 0.0:
        return 0.0
    iou = inter / union if union > 0.0 else 0.0
    return float(iou - (hull - union) / hull)


def pairwise_box_iou(boxes1, boxes2) -> np.ndarray:
    """Vectorized IoU matrix of shape ``[len(boxes1), len(boxes2)]``."""
    b1 = _as_box(np.asarray(boxes1, dtype=np.float64).reshape(-1, 4))
    b2 = _as_box(np.asarray(boxes2, dtype=np.float64).reshape(-1, 4))
    lt = np.maximum(b1[:, None, :2], b2[None, :, :2])
    rb = np.minimum(b1[:, None, 2:], b2[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(b1)[:, None] + box_area(b2)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def pairwise_generalized_iou(boxes1, boxes2) -> np.ndarray:
    b1 = _as_box(np.asarray(boxes1, dtype=np.float64).reshape(-1, 4))
    b2 = _as_box(np.asarray(boxes2, dtype=np.float64).reshape(-1, 4))
    lt = np.maximum(b1[:, None, :2], b2[None, :, :2])
    rb = np.minimum(b1[:, None, 2:], b2[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(b1)[:, None] + box_area(b2)[None, :] - inter
    iou = np.zeros_like(inter)
    np.divide(inter, union, out=iou, where=union > 0)
    hlt = np.minimum(b1[:, None, :2], b2[None, :, :2])
    hrb = np.maximum(b1[:, None, 2:], b2[None, :, 2:])
    hwh = hrb - hlt
    hull = hwh[..., 0] * hwh[..., 1]
    penalty = np.zeros_like(inter)
    np.divide(hull - union, hull, out=penalty, where=hull > 0)
    return np.where(hull > 0, iou - penalty, 0.0)


def xyxy_to_ccwh(box, image_size: tuple[int, int]) -> np.ndarray:
    """Pixel ``xyxy`` to normalized ``(cx, cy, w, h)``; ``image_size`` is ``(height, width)``."""
    b = _as_box(box)
    h, w = image_size
    scale = np.array([w, h, w, h], dtype=np.float64)
    cx = (b[..., 0] + b[..., 2]) / 2
    cy = (b[..., 1] + b[..., 3]) / 2
    bw = b[..., 2] - b[..., 0]
    bh = b[..., 3] - b[..., 1]
    return np.stack([cx, cy, bw, bh], axis=-1) / scale


def ccwh_to_xyxy(box, image_size: tuple[int, int]) -> np.ndarray:
    b = np.asarray(box, dtype=np.float64)
    if np.any(b[..., 2:] < 0):
        raise ValueError(f"normalized box has negative size: {b}")
    h, w = image_size
    cx, cy, bw, bh = b[..., 0] * w, b[..., 1] * h, b[..., 2] * w, b[..., 3] * h
    return np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=-1)


def mask_iou(a: np.ndarray, b: np.ndarray, empty_value: float = 1.0) -> float:
    """IoU of two binary masks of equal shape.

    Two empty masks score ``empty_value`` (1.0 by default) so that a matched
    empty prediction is not penalized.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return float(empty_value)
    return np.count_nonzero(a & b) / union


def pairwise_mask_iou(masks1: Sequence[np.ndarray], masks2: Sequence[np.ndarray],
                      empty_value: float = 1.0) -> np.ndarray:
    if len(masks1) == 0 or len(masks2) == 0:
        return np.zeros((len(masks1), len(masks2)))
    m1 = np.stack([np.asarray(m, dtype=bool).ravel() for m in masks1]).astype(np.float64)
    m2 = np.stack([np.asarray(m, dtype=bool).ravel() for m in masks2]).astype(np.float64)
    if m1.shape[1] != m2.shape[1]:
        raise ValueError("mask shapes differ")
    inter = m1 @ m2.T
    union = m1.sum(1)[:, None] + m2.sum(1)[None, :] - inter
    out = np.full_like(inter, float(empty_value))
    np.divide(inter, union, out=out, where=union > 0)
    return out


def mask_to_box(mask: np.ndarray) -> np.ndarray | None:
    """Tight half-open ``xyxy`` box of a mask, or None when the mask is empty."""
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return np.array([cols[0], rows[0], cols[-1] + 1, rows[-1] + 1], dtype=np.float64)


@dataclass(frozen=True)
class RleMask:
    height: int
    width: int
    counts: tuple[int, ...]

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"RLE size must be positive, got {self.height}x{self.width}")
        if any(c < 0 for c in self.counts):
            raise ValueError("RLE counts must be non-negative")
        if sum(self.counts) != self.height * self.width:
            raise ValueError(
                f"RLE counts sum to {sum(self.counts)}, expected {self.height * self.width}")

    def to_coco(self) -> dict:
        return {"size": [self.height, self.width], "counts": list(self.counts)}

    @classmethod
    def from_coco(cls, record: dict) -> "RleMask":
        counts = record["counts"]
        if isinstance(counts, (str, bytes)):
            raise ValueError("compressed RLE strings are not supported; use integer counts")
        h, w = record["size"]
        return cls(int(h), int(w), tuple(int(c) for c in counts))

    def area(self) -> int:
        return sum(self.counts[1::2])


def rle_encode(mask: np.ndarray) -> RleMask:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2 or mask.size == 0:
        raise ValueError(f"expected a non-empty 2-D mask, got shape {mask.shape}")
    flat = mask.ravel(order="F").astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return RleMask(mask.shape[0], mask.shape[1], tuple(int(r) for r in runs))


def rle_decode(rle: RleMask) -> np.ndarray:
    if sum(rle.counts) != rle.height * rle.width:
        raise ValueError("RLE counts do not cover the mask")
    values = np.zeros(len(rle.counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, rle.counts)
    return flat.reshape((rle.height, rle.width), order="F")


def size_bucket(area: float) -> str:
    if area < 0:
        raise ValueError(f"area must be non-negative, got {area}")
    if area < SMALL_AREA:
        return "small"
    if area < MEDIUM_AREA:
        return "medium"
    return "large"
