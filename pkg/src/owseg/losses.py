"""Loss stack for query-based open-world instance segmentation.

Per decoder stage the loss is ``objectness + box + mask`` and the training
objective sums it over all stages. The objectness term depends on the
:class:`ObjectnessVariant`; the box and mask terms are shared.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
from torch import Tensor

logger = logging.getLogger(__name__)

EPS = 1e-6


class ObjectnessVariant(str, enum.Enum):
    VOID = "void"
    CLS = "cls"
    BOX = "box"
    MASK = "mask"
    FUSION = "fusion"

    @property
    def heads(self) -> tuple[str, ...]:
        """Names of the score heads this variant carries."""
        return {
            "void": (),
            "cls": ("cls",),
            "box": ("box_iou",),
            "mask": ("mask_iou",),
            "fusion": ("box_iou", "mask_iou"),
        }[self.value]


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 2.0
    lambda_reg: float = 5.0
    lambda_giou: float = 2.0
    lambda_mask: float = 8.0
    lambda_box_iou: float = 1.0
    lambda_mask_iou: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")


def focal_loss(p: Tensor, target: Tensor, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Elementwise binary focal loss on probabilities.

    ``p`` must lie in [0, 1]; it is clamped to ``[EPS, 1 - EPS]`` before the log.
    """
    p = torch.as_tensor(p)
    target = torch.as_tensor(target, dtype=p.dtype)
    if torch.any((p < 0) | (p > 1)) or not torch.all(torch.isfinite(p)):
        raise ValueError("focal_loss expects probabilities in [0, 1]")
    p = p.clamp(EPS, 1 - EPS)
    pos = -alpha * (1 - p) ** gamma * torch.log(p)
    neg = -(1 - alpha) * p ** gamma * torch.log(1 - p)
    return target * pos + (1 - target) * neg


def ccwh_to_xyxy(boxes: Tensor) -> Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def xyxy_to_ccwh(boxes: Tensor) -> Tensor:
    x1, y1, x2, y2 = boxes.unbind(-1)
    return torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dim=-1)


def elementwise_iou(a: Tensor, b: Tensor) -> Tensor:
    """IoU of paired ``xyxy`` boxes (``[..., 4]`` each)."""
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def elementwise_giou(a: Tensor, b: Tensor) -> Tensor:
    """Generalized IoU of paired ``xyxy`` boxes; 0 where the hull is empty."""
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    iou = torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))
    hlt = torch.minimum(a[..., :2], b[..., :2])
    hrb = torch.maximum(a[..., 2:], b[..., 2:])
    hwh = hrb - hlt
    hull = hwh[..., 0] * hwh[..., 1]
    giou = iou - (hull - union) / hull.clamp(min=1e-12)
    return torch.where(hull > 0, giou, torch.zeros_like(giou))


def box_loss(pred: Tensor, gt: Tensor, weights: LossWeights = LossWeights()) -> tuple[Tensor, Tensor]:
    """L1 and GIoU terms for matched pairs of normalized ``ccwh`` boxes.

    Both inputs are ``[P, 4]`` (or ``[4]``); the returned terms are per pair,
    already multiplied by ``lambda_reg`` and ``lambda_giou``.
    """
    l1 = (pred - gt).abs().sum(-1)
    giou = elementwise_giou(ccwh_to_xyxy(pred), ccwh_to_xyxy(gt))
    return weights.lambda_reg * l1, weights.lambda_giou * (1 - giou)


def dice_loss(pred_mask: Tensor, gt: Tensor, smooth: float = 1e-4) -> Tensor:
    """Dice loss over the last two dimensions, one value per mask."""
    gt = torch.as_tensor(gt, dtype=pred_mask.dtype)
    if pred_mask.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {tuple(pred_mask.shape)} vs {tuple(gt.shape)}")
    p = pred_mask.flatten(-2)
    g = gt.flatten(-2)
    num = 2 * (p * g).sum(-1) + smooth
    den = (p * p).sum(-1) + (g * g).sum(-1) + smooth
    return 1 - num / den


def _checked_score(score: Tensor, name: str) -> Tensor:
    if torch.any((score < 0) | (score > 1)):
        logger.warning("%s outside [0, 1]; clamping", name)
        score = score.clamp(0, 1)
    return score


def objectness_loss(
    variant: ObjectnessVariant | str,
    *,
    p_c: Tensor | None = None,
    p_c_target: Tensor | None = None,
    p_b: Tensor | None = None,
    p_b_target: Tensor | None = None,
    p_m: Tensor | None = None,
    p_m_target: Tensor | None = None,
    weights: LossWeights = LossWeights(),
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> Tensor:
    """Summed objectness loss for one variant.

    IoU targets are detached here, so callers may pass them with history.
    For ``box``/``mask``/``fusion`` the inputs should already be restricted to
    matched queries. For ``cls`` all queries are passed with binary targets.
    """
    variant = ObjectnessVariant(variant)
    if variant is ObjectnessVariant.VOID:
        return torch.zeros(())
    if variant is ObjectnessVariant.CLS:
        p_c = _checked_score(p_c, "p_c")
        return weights.lambda_cls * focal_loss(p_c, p_c_target.detach(), alpha, gamma).sum()
    total = None
    if variant in (ObjectnessVariant.BOX, ObjectnessVariant.FUSION):
        p_b = _checked_score(p_b, "p_b")
        total = weights.lambda_box_iou * (p_b - p_b_target.detach()).abs().sum()
    if variant in (ObjectnessVariant.MASK, ObjectnessVariant.FUSION):
        p_m = _checked_score(p_m, "p_m")
        term = weights.lambda_mask_iou * (p_m - p_m_target.detach()).abs().sum()
        total = term if total is None else total + term
    return total


@dataclass
class StageLoss:
    """Weighted loss components of one decoder stage."""

    objectness: Tensor | float = 0.0
    box_l1: Tensor | float = 0.0
    box_giou: Tensor | float = 0.0
    mask: Tensor | float = 0.0

    def total(self):
        return self.objectness + self.box_l1 + self.box_giou + self.mask


@dataclass
class LossBreakdown:
    stages: list[dict[str, float]]
    total: float
    total_tensor: Tensor | None = field(default=None, repr=False)

    def to_record(self) -> dict[str, float]:
        """Flat JSON-friendly record, e.g. ``stage0/box_l1``."""
        rec: dict[str, float] = {"total": self.total}
        for i, stage in enumerate(self.stages):
            for k, v in stage.items():
                rec[f"stage{i}/{k}"] = v
        return rec


def _to_float(x) -> float:
    return float(x.detach()) if isinstance(x, Tensor) else float(x)


def aggregate(stages: Sequence[StageLoss], num_stages: int) -> LossBreakdown:
    if len(stages) != num_stages:
        raise ValueError(f"expected {num_stages} stage losses, got {len(stages)}")
    records = []
    total_tensor = None
    for s in stages:
        records.append({
            "objectness": _to_float(s.objectness),
            "box_l1": _to_float(s.box_l1),
            "box_giou": _to_float(s.box_giou),
            "mask": _to_float(s.mask),
        })
        t = s.total()
        total_tensor = t if total_tensor is None else total_tensor + t
    total = math.fsum(v for r in records for v in r.values())
    if not isinstance(total_tensor, Tensor):
        total_tensor = torch.tensor(float(total_tensor))
    return LossBreakdown(records, total, total_tensor)
