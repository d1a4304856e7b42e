"""Datasets: COCO-format ingestion, synthetic shape scenes and augmentation."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .geometry import RleMask, mask_to_box, rle_decode, rle_encode

MIN_INSTANCE_AREA = 4
SHAPE_FAMILIES = ("ellipse", "rectangle", "triangle", "ring", "cross")


@dataclass(frozen=True)
class GroundTruthInstance:
    box: np.ndarray  # xyxy, pixels
    mask: np.ndarray  # bool [H, W]
    category_id: int
    is_base: bool = True

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))


@dataclass(frozen=True)
class CategorySplit:
    base_ids: frozenset[int]
    novel_ids: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "base_ids", frozenset(self.base_ids))
        object.__setattr__(self, "novel_ids", frozenset(self.novel_ids))
        overlap = self.base_ids & self.novel_ids
        if overlap:
            raise ValueError(f"categories {sorted(overlap)} are both base and novel")

    def is_base(self, category_id: int) -> bool:
        return category_id not in self.novel_ids


@dataclass
class Sample:
    image_id: int
    height: int
    width: int
    image: np.ndarray | None  # uint8 [H, W, 3]
    instances: list[GroundTruthInstance]  # supervision
    eval_instances: list[GroundTruthInstance]  # full ground truth, tagged base/novel
    file_name: str = ""


@dataclass
class Dataset:
    samples: list[Sample]
    categories: list[dict]
    split: CategorySplit | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.categories, self.split)


def rasterize_polygon(polygon: Sequence[float], height: int, width: int) -> np.ndarray:
    """Even-odd fill of a flat ``[x0, y0, x1, y1, ...]`` polygon, sampled at pixel centers."""
    pts = np.asarray(polygon, dtype=np.float64).reshape(-1, 2)
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs + 0.5
    py = ys + 0.5
    inside = np.zeros((height, width), dtype=bool)
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        if ay == by:
            continue
        crosses = (ay > py) != (by > py)
        xint = ax + (py - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (px < xint)
    return inside


def _decode_segmentation(seg, height: int, width: int) -> np.ndarray:
    if isinstance(seg, dict):
        rle = RleMask.from_coco(seg)
        if (rle.height, rle.width) != (height, width):
            raise ValueError(f"RLE size {rle.height}x{rle.width} != image {height}x{width}")
        return rle_decode(rle)
    mask = np.zeros((height, width), dtype=bool)
    for poly in seg:
        mask |= rasterize_polygon(poly, height, width)
    return mask


def load_coco(annotation_file: str | os.PathLike, split: CategorySplit | None = None,
              supervision: str = "all", image_root: str | os.PathLike | None = None) -> Dataset:
    """Read a COCO-format annotation file.

    With ``supervision="base_only"`` novel-category annotations are dropped from
    ``Sample.instances`` but kept (tagged ``is_base=False``) in
    ``Sample.eval_instances``. Images are loaded only when ``image_root`` is given.
    """
    if supervision not in ("all", "base_only"):
        raise ValueError(f"unknown supervision mode {supervision!r}")
    path = Path(annotation_file)
    try:
        coco = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ValueError(f"{path}: malformed JSON ({err})") from err
    for key in ("images", "annotations", "categories"):
        if key not in coco:
            raise ValueError(f"{path}: missing '{key}' array")
    categories = coco["categories"]
    known = {c["id"] for c in categories}
    if split is None:
        split = CategorySplit(frozenset(known), frozenset())
    root = Path(image_root) if image_root is not None else None

    samples: dict[int, Sample] = {}
    for img in coco["images"]:
        image = None
        if root is not None:
            with Image.open(root / img["file_name"]) as im:
                image = np.array(im.convert("RGB"))
        samples[img["id"]] = Sample(img["id"], int(img["height"]), int(img["width"]), image,
                                    [], [], img.get("file_name", ""))

    for idx, ann in enumerate(coco["annotations"]):
        cat = ann.get("category_id")
        if cat not in known:
            raise ValueError(f"annotation {idx}: unknown category id {cat}")
        sample = samples.get(ann["image_id"])
        if sample is None:
            raise ValueError(f"annotation {idx}: unknown image id {ann['image_id']}")
        try:
            mask = _decode_segmentation(ann["segmentation"], sample.height, sample.width)
        except (ValueError, KeyError, TypeError) as err:
            raise ValueError(f"annotation {idx}: bad segmentation ({err})") from err
        if isinstance(ann["segmentation"], dict) and "area" in ann:
            if abs(np.count_nonzero(mask) - float(ann["area"])) > 1:
                raise ValueError(f"annotation {idx}: RLE area {np.count_nonzero(mask)} "
                                 f"disagrees with recorded area {ann['area']}")
        x, y, w, h = (float(v) for v in ann["bbox"])
        if w < 0 or h < 0:
            raise ValueError(f"annotation {idx}: negative bbox size")
        inst = GroundTruthInstance(np.array([x, y, x + w, y + h]), mask, int(cat),
                                   split.is_base(int(cat)))
        sample.eval_instances.append(inst)
        if supervision == "all" or inst.is_base:
            sample.instances.append(inst)
    return Dataset(list(samples.values()), categories, split)


def to_coco(dataset: Dataset) -> dict:
    """COCO-format dict of the evaluation ground truth, masks as integer-count RLE."""
    images, annotations = [], []
    ann_id = 1
    for s in dataset.samples:
        images.append({"id": s.image_id, "file_name": s.file_name or f"{s.image_id:06d}.png",
                       "height": s.height, "width": s.width})
        for inst in s.eval_instances:
            x1, y1, x2, y2 = (float(v) for v in inst.box)
            annotations.append({
                "id": ann_id,
                "image_id": s.image_id,
                "category_id": inst.category_id,
                "bbox": [x1, y1, x2 - x1, y2 - y1],
                "area": inst.area,
                "iscrowd": 0,
                "segmentation": rle_encode(inst.mask).to_coco(),
            })
            ann_id += 1
    return {"images": images, "annotations": annotations, "categories": dataset.categories}


def save_dataset(dataset: Dataset, out_dir: str | os.PathLike) -> Path:
    """Write ``annotations.json`` plus one PNG per image; returns the annotation path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    coco = to_coco(dataset)
    for rec, s in zip(coco["images"], dataset.samples):
        rec["file_name"] = f"images/{s.image_id:06d}.png"
        if s.image is not None:
            Image.fromarray(s.image).save(out / rec["file_name"], format="PNG")
    path = out / "annotations.json"
    path.write_text(json.dumps(coco, sort_keys=True))
    return path


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple[int, int] = (64, 64)
    min_shapes: int = 1
    max_shapes: int = 4
    families: tuple[str, ...] = SHAPE_FAMILIES  # category id = position + 1
    min_size: int = 12
    max_size: int = 36
    occlusion_prob: float = 0.2
    seed: int = 0

    def categories(self) -> list[dict]:
        return [{"id": i + 1, "name": f, "supercategory": "shape"}
                for i, f in enumerate(self.families)]

    def split_by_family(self, novel: Iterable[str]) -> CategorySplit:
        novel = set(novel)
        unknown = novel - set(self.families)
        if unknown:
            raise ValueError(f"unknown shape families {sorted(unknown)}")
        ids = {f: i + 1 for i, f in enumerate(self.families)}
        return CategorySplit(frozenset(ids[f] for f in self.families if f not in novel),
                             frozenset(ids[f] for f in novel))


def _shape_mask(family: str, cx: float, cy: float, size: float, angle: float,
                aspect: float, height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    # pixel centers in a frame centred on the shape, rotated by -angle
    dx, dy = xs + 0.5 - cx, ys + 0.5 - cy
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    r = size / 2
    if family == "ellipse":
        a, b = r, r * aspect
        return (u / a) ** 2 + (v / b) ** 2 <= 1
    if family == "rectangle":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r * aspect)
    if family == "ring":
        d2 = dx ** 2 + dy ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if family == "cross":
        arm = r / 3
        return ((np.abs(u) <= r) & (np.abs(v) <= arm)) | ((np.abs(v) <= r) & (np.abs(u) <= arm))
    if family == "triangle":
        verts = [(cx + r * np.cos(angle + k * 2 * np.pi / 3),
                  cy + r * np.sin(angle + k * 2 * np.pi / 3)) for k in range(3)]
        return rasterize_polygon([c for p in verts for c in p], height, width)
    raise ValueError(f"unknown shape family {family!r}")


def render_scene(spec: SceneSpec, index: int, split: CategorySplit | None = None) -> Sample:
    """Render scene ``index``; every visible shape becomes an annotated instance."""
    h, w = spec.image_size
    rng = np.random.default_rng([spec.seed, index])
    base_level = rng.uniform(0.05, 0.35)
    image = base_level + 0.04 * rng.standard_normal((h, w, 3))
    n = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    masks: list[np.ndarray] = []
    cats: list[int] = []
    boxes: list[tuple[float, float, float, float]] = []
    for _ in range(n):
        overlap_ok = rng.random() < spec.occlusion_prob
        for _attempt in range(30):
            fam_idx = int(rng.integers(len(spec.families)))
            size = rng.uniform(spec.min_size, min(spec.max_size, h, w))
            cx = rng.uniform(size / 2, w - size / 2)
            cy = rng.uniform(size / 2, h - size / 2)
            angle = rng.uniform(0, np.pi)
            aspect = rng.uniform(0.5, 1.0)
            bb = (cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2)
            clash = any(not (bb[2] <= o[0] or o[2] <= bb[0] or bb[3] <= o[1] or o[3] <= bb[1])
                        for o in boxes)
            if overlap_ok or not clash:
                break
        else:
            continue
        m = _shape_mask(spec.families[fam_idx], cx, cy, size, angle, aspect, h, w)
        if not m.any():
            continue
        color = rng.uniform(0.45, 1.0, size=3)
        image[m] = color
        masks = [prev & ~m for prev in masks]
        masks.append(m)
        cats.append(fam_idx + 1)
        boxes.append(bb)
    image = (np.clip(image, 0, 1) * 255).round().astype(np.uint8)
    instances = []
    for m, cat in zip(masks, cats):
        if np.count_nonzero(m) < MIN_INSTANCE_AREA:
            continue
        is_base = True if split is None else split.is_base(cat)
        instances.append(GroundTruthInstance(mask_to_box(m), m, cat, is_base))
    return Sample(index + 1, h, w, image, instances, list(instances), f"{index + 1:06d}.png")


def generate_synthetic(spec: SceneSpec, n_images: int, split: CategorySplit | None = None,
                       supervision: str = "all") -> Dataset:
    """Deterministic synthetic dataset; scene ``i`` depends only on ``(spec, i)``."""
    if len(spec.families) == 0:
        raise ValueError("need at least one shape family")
    if split is not None and len(spec.families) < 2:
        raise ValueError("a base/novel split needs at least two shape families")
    samples = []
    for i in range(n_images):
        s = render_scene(spec, i, split)
        if supervision == "base_only":
            s.instances = [inst for inst in s.instances if inst.is_base]
        samples.append(s)
    return Dataset(samples, spec.categories(), split)


# --------------------------------------------------------------------------
# augmentation

LSJ_SCALE_RANGE = (0.1, 2.0)


def _resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if image.shape[:2] == (out_h, out_w):
        return image.copy()
    pil = Image.fromarray(image).resize((out_w, out_h), Image.BILINEAR)
    return np.asarray(pil)


def _resize_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return mask[rows[:, None], cols[None, :]]


def _window(arr: np.ndarray, oy: int, ox: int, out_h: int, out_w: int) -> np.ndarray:
    """Crop/pad ``arr`` to the window starting at ``(oy, ox)``; padding is zero."""
    out = np.zeros((out_h, out_w) + arr.shape[2:], dtype=arr.dtype)
    h, w = arr.shape[:2]
    sy0, sx0 = max(oy, 0), max(ox, 0)
    sy1, sx1 = min(oy + out_h, h), min(ox + out_w, w)
    if sy1 > sy0 and sx1 > sx0:
        out[sy0 - oy:sy1 - oy, sx0 - ox:sx1 - ox] = arr[sy0:sy1, sx0:sx1]
    return out


def augment(image: np.ndarray, instances: Sequence[GroundTruthInstance], mode: str,
            rng: np.random.Generator | None = None, *, apply: bool | None = None,
            scale: float | None = None, offset: tuple[int, int] | None = None,
            output_size: tuple[int, int] | None = None):
    """Apply ``flip`` or ``lsj`` to an image and its instances.

    ``apply``, ``scale`` and ``offset`` override the random draws. Boxes of
    the transformed instances are re-derived from their masks; instances left
    with fewer than ``MIN_INSTANCE_AREA`` pixels are dropped.
    """
    rng = rng if rng is not None else np.random.default_rng()
    h, w = image.shape[:2]
    if mode == "none":
        return image, list(instances)
    if mode == "flip":
        if apply is None:
            apply = bool(rng.random() < 0.5)
        if not apply:
            return image, list(instances)
        out = []
        for inst in instances:
            x1, y1, x2, y2 = inst.box
            out.append(replace(inst, box=np.array([w - x2, y1, w - x1, y2], dtype=np.float64),
                               mask=inst.mask[:, ::-1].copy()))
        return image[:, ::-1].copy(), out
    if mode == "lsj":
        out_h, out_w = output_size or (h, w)
        if scale is None:
            scale = float(rng.uniform(*LSJ_SCALE_RANGE))
        sh, sw = max(1, round(h * scale)), max(1, round(w * scale))
        if offset is None:
            oy = int(rng.integers(0, sh - out_h + 1)) if sh > out_h else 0
            ox = int(rng.integers(0, sw - out_w + 1)) if sw > out_w else 0
        else:
            oy, ox = offset
        new_image = _window(_resize_image(image, sh, sw), oy, ox, out_h, out_w)
        out = []
        for inst in instances:
            m = _window(_resize_mask(inst.mask, sh, sw), oy, ox, out_h, out_w)
            if np.count_nonzero(m) < MIN_INSTANCE_AREA:
                continue
            out.append(replace(inst, box=mask_to_box(m), mask=m))
        return new_image, out
    raise ValueError(f"unknown augmentation mode {mode!r}")
