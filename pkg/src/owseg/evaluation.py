"""Class-agnostic Average Recall.

``AR@k`` keeps the top ``k`` predictions of each image, greedily matches them
one-to-one to ground truth at each IoU threshold (0.50:0.05:0.95 by default),
and averages the resulting recall over the thresholds.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import GroundTruthInstance
from .geometry import (SIZE_BUCKETS, RleMask, box_area, pairwise_box_iou, pairwise_mask_iou,
                       rle_decode, rle_encode, size_bucket)

DEFAULT_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass
class Prediction:
    box: np.ndarray  # xyxy, pixels
    mask: np.ndarray | None = None  # bool [H, W]
    score: float | None = None


@dataclass(frozen=True)
class EvalConfig:
    budgets: tuple[int, ...] = (10, 100)
    iou_thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    mode: str = "box"
    protocol: str = "plain"
    exclusion_iou: float = 0.5

    def __post_init__(self):
        th = list(self.iou_thresholds)
        if not th or any(not 0 < t < 1 for t in th) or any(a >= b for a, b in zip(th, th[1:])):
            raise ValueError("iou_thresholds must be strictly increasing inside (0, 1)")
        if not self.budgets or any(k < 1 for k in self.budgets):
            raise ValueError("budgets must be positive integers")
        if self.mode not in ("box", "mask"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.protocol not in ("plain", "cross_category"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        object.__setattr__(self, "budgets", tuple(sorted(set(int(k) for k in self.budgets))))


@dataclass
class ARReport:
    mode: str
    protocol: str
    budgets: list[int]
    iou_thresholds: list[float]
    num_gt: int
    empty: bool
    ar: dict[int, float | None]
    recall_per_threshold: dict[int, list[float | None]]
    ar_50: float | None
    ar_75: float | None
    ar_size: dict[str, float | None]
    per_image: list[dict] = field(default_factory=list)

    @property
    def max_budget(self) -> int:
        return max(self.budgets)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ar"] = {str(k): v for k, v in self.ar.items()}
        d["recall_per_threshold"] = {str(k): v for k, v in self.recall_per_threshold.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def summary_row(self) -> dict[str, float | None]:
        row = {f"AR@{k}": self.ar[k] for k in self.budgets}
        row.update({"AR_0.5": self.ar_50, "AR_0.75": self.ar_75,
                    "AR_small": self.ar_size["small"], "AR_med": self.ar_size["medium"],
                    "AR_large": self.ar_size["large"]})
        return row

    def to_csv_row(self, **extra) -> str:
        row = {**extra, "mode": self.mode, "protocol": self.protocol, **self.summary_row()}
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        writer.writeheader()
        writer.writerow(row)
        return buf.getvalue()


def match_greedy(iou: np.ndarray, threshold: float) -> np.ndarray:
    """Flags of ground truth matched by rank-ordered predictions.

    ``iou`` is ``[P, G]`` with rows in rank order. Each prediction takes the
    highest-IoU unmatched ground truth with IoU >= ``threshold``.
    """
    iou = np.asarray(iou, dtype=np.float64)
    n_pred, n_gt = iou.shape
    matched = np.zeros(n_gt, dtype=bool)
    for p in range(n_pred):
        cand = np.where(matched | (iou[p] < threshold), -np.inf, iou[p])
        if n_gt == 0:
            break
        j = int(np.argmax(cand))
        if np.isfinite(cand[j]):
            matched[j] = True
    return matched


def _iou_matrix(preds: Sequence[Prediction], gts: Sequence[GroundTruthInstance], mode: str):
    if len(preds) == 0 or len(gts) == 0:
        return np.zeros((len(preds), len(gts)))
    if mode == "box":
        return pairwise_box_iou([p.box for p in preds], [g.box for g in gts])
    if any(p.mask is None for p in preds):
        raise ValueError("mask-mode evaluation needs predicted masks")
    return pairwise_mask_iou([p.mask for p in preds], [g.mask for g in gts])


def cross_category_filter(preds: Sequence[Prediction], base_gts: Sequence[GroundTruthInstance],
                          exclusion_iou: float = 0.5, mode: str = "box") -> list[Prediction]:
    """Drop predictions overlapping any base-category object by at least ``exclusion_iou``."""
    preds = list(preds)
    if not base_gts or not preds:
        return preds
    iou = _iou_matrix(preds, base_gts, mode)
    keep = ~(iou >= exclusion_iou).any(axis=1)
    return [p for p, k in zip(preds, keep) if k]


def gt_area(g: GroundTruthInstance) -> float:
    if g.mask is not None:
        return float(np.count_nonzero(g.mask))
    return float(box_area(g.box))


def _safe_div(num: float, den: int) -> float | None:
    return None if den == 0 else num / den


def average_recall(images: Sequence[tuple[Sequence[Prediction], Sequence[GroundTruthInstance]]],
                   cfg: EvalConfig = EvalConfig(),
                   image_ids: Sequence[int] | None = None) -> ARReport:
    """AR report over ``(ranked predictions, ground truth)`` pairs, one per image.

    Under ``cross_category`` only novel ground truth is recalled and
    predictions covering base objects are removed before truncation. Size
    buckets restrict the ground truth only. When there is no ground truth at
    all, every value is None and ``empty`` is set.
    """
    thresholds = list(cfg.iou_thresholds)
    budgets = list(cfg.budgets)
    kmax = max(budgets)
    extra_th = [0.5, 0.75]
    all_th = thresholds + extra_th

    matched = {k: np.zeros(len(all_th)) for k in budgets}
    bucket_matched = {b: np.zeros(len(thresholds)) for b in SIZE_BUCKETS}
    bucket_total = dict.fromkeys(SIZE_BUCKETS, 0)
    total = 0
    per_image = []
    ids = list(image_ids) if image_ids is not None else list(range(len(images)))

    for img_id, (preds, gts) in zip(ids, images):
        preds = list(preds)
        if cfg.protocol == "cross_category":
            base = [g for g in gts if g.is_base]
            gts = [g for g in gts if not g.is_base]
            preds = cross_category_filter(preds, base, cfg.exclusion_iou, cfg.mode)
        else:
            gts = list(gts)
        total += len(gts)
        iou = _iou_matrix(preds[:kmax], gts, cfg.mode)
        for k in budgets:
            sub = iou[:k]
            for ti, t in enumerate(all_th):
                matched[k][ti] += match_greedy(sub, t).sum()
        buckets = np.array([size_bucket(gt_area(g)) for g in gts])
        for b in SIZE_BUCKETS:
            cols = np.flatnonzero(buckets == b)
            bucket_total[b] += cols.size
            if cols.size:
                sub = iou[:kmax][:, cols]
                for ti, t in enumerate(thresholds):
                    bucket_matched[b][ti] += match_greedy(sub, t).sum()
        img_rec = [match_greedy(iou, t).sum() for t in thresholds]
        per_image.append({"image_id": int(img_id), "num_gt": len(gts), "num_pred": len(preds),
                          "recall": _safe_div(float(np.mean(img_rec)), len(gts))})

    nt = len(thresholds)
    if total == 0:
        return ARReport(cfg.mode, cfg.protocol, budgets, thresholds, 0, True,
                        {k: None for k in budgets}, {k: [None] * nt for k in budgets},
                        None, None, dict.fromkeys(SIZE_BUCKETS), per_image)
    recall = {k: [float(m) / total for m in matched[k][:nt]] for k in budgets}
    ar = {k: math.fsum(recall[k]) / nt for k in budgets}
    ar_size = {b: (math.fsum(bucket_matched[b]) / nt / bucket_total[b]
                   if bucket_total[b] else None) for b in SIZE_BUCKETS}
    return ARReport(cfg.mode, cfg.protocol, budgets, thresholds, total, False, ar, recall,
                    float(matched[kmax][nt]) / total, float(matched[kmax][nt + 1]) / total,
                    ar_size, per_image)


# --------------------------------------------------------------------------
# COCO results format


def predictions_to_results(image_ids: Sequence[int],
                           predictions: Sequence[Sequence[Prediction]]) -> list[dict]:
    """COCO results records; unscored predictions get a rank-derived score."""
    out = []
    for img_id, preds in zip(image_ids, predictions):
        n = len(preds)
        for rank, p in enumerate(preds):
            x1, y1, x2, y2 = (float(v) for v in p.box)
            rec = {"image_id": int(img_id), "bbox": [x1, y1, x2 - x1, y2 - y1],
                   "score": float(p.score) if p.score is not None else float(n - rank) / n}
            if p.mask is not None:
                rec["segmentation"] = rle_encode(p.mask).to_coco()
            out.append(rec)
    return out


def results_to_predictions(results: Sequence[dict]) -> dict[int, list[Prediction]]:
    """Group results by image and rank by descending score (stable in file order)."""
    grouped: dict[int, list[tuple[float, int, Prediction]]] = {}
    for i, rec in enumerate(results):
        x, y, w, h = (float(v) for v in rec["bbox"])
        mask = None
        if "segmentation" in rec:
            mask = rle_decode(RleMask.from_coco(rec["segmentation"]))
        score = rec.get("score")
        pred = Prediction(np.array([x, y, x + w, y + h]), mask, score)
        grouped.setdefault(int(rec["image_id"]), []).append(
            (-(score if score is not None else 0.0), i, pred))
    return {k: [p for _, _, p in sorted(v, key=lambda t: (t[0], t[1]))]
            for k, v in grouped.items()}


def evaluate_results(dataset, results: Sequence[dict], cfg: EvalConfig = EvalConfig()) -> ARReport:
    """Evaluate COCO-format results against a loaded dataset's evaluation ground truth."""
    by_image = results_to_predictions(results)
    pairs = [(by_image.get(s.image_id, []), s.eval_instances) for s in dataset.samples]
    return average_recall(pairs, cfg, [s.image_id for s in dataset.samples])


def write_report(report: ARReport, out_dir: str | Path, name: str = "report", **extra) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.json").write_text(report.to_json())
    (out / f"{name}.csv").write_text(report.to_csv_row(**extra))
