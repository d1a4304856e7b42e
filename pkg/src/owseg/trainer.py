"""Training loop: per-stage matching, summed stage losses, Adam with step decay."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor
from torchvision.ops import roi_align

from .data import Dataset, GroundTruthInstance, augment
from .evaluation import ARReport, EvalConfig, average_recall, predictions_to_results
from .geometry import xyxy_to_ccwh
from .losses import (LossBreakdown, LossWeights, ObjectnessVariant, StageLoss, aggregate,
                     box_loss, ccwh_to_xyxy, dice_loss, elementwise_iou, focal_loss,
                     objectness_loss)
from .matching import MatchAssignment, MatchCostConfig, build_cost_matrix, hungarian_assign
from .model import (ModelConfig, QueryModel, StageOutput, image_to_tensor, load_checkpoint,
                    predict, ranking_scores, save_checkpoint)

logger = logging.getLogger(__name__)

MASK_THRESHOLD = 0.5


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, batch: Sequence[int]):
        super().__init__(f"non-finite loss at step {step} (batch sample ids {list(batch)})")
        self.step = step
        self.batch = list(batch)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 5e-4
    epochs: int = 12
    decay_epochs: tuple[int, ...] = (8, 11)
    decay_factor: float = 0.1
    batch_size: int = 8
    seed: int = 0
    augmentation: str = "flip"
    grad_clip: float = 1.0
    checkpoint_every: int = 1
    mask_smooth: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    matching: MatchCostConfig = field(default_factory=MatchCostConfig)

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(self.decay_epochs))
        d = self.decay_epochs
        if any(a >= b for a, b in zip(d, d[1:])):
            raise ValueError("decay_epochs must be strictly increasing")
        if d and d[-1] >= self.epochs:
            raise ValueError("decay_epochs must all be < epochs")
        if self.augmentation not in ("none", "flip", "lsj"):
            raise ValueError(f"unknown augmentation {self.augmentation!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for d in self.decay_epochs if epoch >= d)
        return self.lr * self.decay_factor ** passed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown train config key(s): {', '.join(unknown)}")
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        if isinstance(d.get("matching"), dict):
            d["matching"] = MatchCostConfig(**d["matching"])
        return cls(**d)


PRESETS = {
    "1x": {"epochs": 12, "decay_epochs": (8, 11), "augmentation": "flip"},
    "3x": {"epochs": 36, "decay_epochs": (27, 33), "augmentation": "lsj"},
}


def preset(name: str, epochs: int | None = None, **overrides) -> TrainConfig:
    """Named schedule, optionally stretched to ``epochs`` with proportional decay points."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}")
    p = dict(PRESETS[name])
    if epochs is not None:
        base = p["epochs"]
        scaled = {d * epochs // base for d in p["decay_epochs"]}
        p["decay_epochs"] = tuple(sorted(d for d in scaled if 0 < d < epochs))
        p["epochs"] = epochs
    p.update(overrides)
    return TrainConfig(**p)


# --------------------------------------------------------------------------
# criterion


@dataclass
class Targets:
    boxes: Tensor  # [M, 4] normalized ccwh
    masks: Tensor  # [M, H, W] float {0, 1}

    @classmethod
    def from_instances(cls, instances: Sequence[GroundTruthInstance], h: int, w: int) -> "Targets":
        if not instances:
            return cls(torch.zeros((0, 4)), torch.zeros((0, h, w)))
        boxes = xyxy_to_ccwh(np.stack([i.box for i in instances]), (h, w))
        masks = np.stack([i.mask for i in instances]).astype(np.float32)
        return cls(torch.tensor(boxes, dtype=torch.float32), torch.from_numpy(masks))


def match_stage(out: StageOutput, targets: Sequence[Targets], variant: ObjectnessVariant,
                cfg: MatchCostConfig) -> list[MatchAssignment]:
    scores = ranking_scores(out, variant) if cfg.use_score_cost else None
    result = []
    for i, t in enumerate(targets):
        cost = build_cost_matrix(out.boxes[i].detach().double().numpy(), t.boxes.double().numpy(),
                                 cfg, None if scores is None else scores[i].detach().numpy())
        result.append(hungarian_assign(cost))
    return result


def crop_gt_masks(masks: Tensor, boxes_xyxy_px: Tensor, resolution: int) -> Tensor:
    """Resample ``[P, H, W]`` ground-truth masks inside the given boxes to ``[P, m, m]`` binary."""
    if masks.shape[0] == 0:
        return masks.new_zeros((0, resolution, resolution))
    idx = torch.arange(masks.shape[0], dtype=masks.dtype)[:, None]
    rois = torch.cat([idx, boxes_xyxy_px.to(masks.dtype)], dim=1)
    crops = roi_align(masks[:, None], rois, resolution, 1.0, 2, True)[:, 0]
    return (crops >= MASK_THRESHOLD).to(masks.dtype)


def roi_mask_iou(pred_probs: Tensor, gt: Tensor) -> Tensor:
    """Mask IoU in RoI space after binarizing the prediction; empty vs empty scores 1."""
    p = (pred_probs >= MASK_THRESHOLD).to(gt.dtype).flatten(1)
    g = gt.flatten(1)
    inter = (p * g).sum(1)
    union = p.sum(1) + g.sum(1) - inter
    return torch.where(union > 0, inter / union.clamp(min=1), torch.ones_like(inter))


def stage_loss(out: StageOutput, targets: Sequence[Targets], matches: Sequence[MatchAssignment],
               variant: ObjectnessVariant, weights: LossWeights, image_hw: tuple[int, int],
               mask_smooth: float = 1e-4) -> StageLoss:
    """Weighted loss of one stage, normalized by the number of ground-truth instances."""
    h, w = image_hw
    num_gt = max(1, sum(t.boxes.shape[0] for t in targets))
    b_idx = torch.tensor([i for i, m in enumerate(matches) for _ in m.pairs], dtype=torch.long)
    q_idx = torch.tensor([q for m in matches for q, _ in m.pairs], dtype=torch.long)
    gt_boxes = torch.cat([t.boxes[torch.as_tensor(m.gt_indices, dtype=torch.long)]
                          for t, m in zip(targets, matches)]) if len(q_idx) else torch.zeros((0, 4))
    zero = out.boxes.sum() * 0

    if variant is ObjectnessVariant.CLS:
        target = torch.zeros_like(out.scores["cls"])
        target[b_idx, q_idx] = 1.0
        obj = objectness_loss(variant, p_c=out.scores["cls"], p_c_target=target,
                              weights=weights) / num_gt
    else:
        obj = zero

    if len(q_idx) == 0:
        return StageLoss(obj, zero, zero, zero)

    pred_boxes = out.boxes[b_idx, q_idx]
    l1, giou = box_loss(pred_boxes, gt_boxes, weights)

    scale = pred_boxes.new_tensor([w, h, w, h])
    pred_px = (ccwh_to_xyxy(pred_boxes) * scale).detach()
    gt_masks = torch.cat([t.masks[torch.as_tensor(m.gt_indices, dtype=torch.long)]
                          for t, m in zip(targets, matches)])
    m = out.mask_logits.shape[-1]
    gt_crops = crop_gt_masks(gt_masks, pred_px, m)
    probs = out.mask_logits[b_idx, q_idx].sigmoid()
    mask = weights.lambda_mask * dice_loss(probs, gt_crops, mask_smooth).sum() / num_gt

    if variant in (ObjectnessVariant.BOX, ObjectnessVariant.MASK, ObjectnessVariant.FUSION):
        kw = {}
        if "box_iou" in out.scores:
            kw["p_b"] = out.scores["box_iou"][b_idx, q_idx]
            kw["p_b_target"] = elementwise_iou(ccwh_to_xyxy(pred_boxes.detach()),
                                               ccwh_to_xyxy(gt_boxes))
        if "mask_iou" in out.scores:
            kw["p_m"] = out.scores["mask_iou"][b_idx, q_idx]
            kw["p_m_target"] = roi_mask_iou(probs.detach(), gt_crops)
        obj = objectness_loss(variant, weights=weights, **kw) / num_gt

    return StageLoss(obj, l1.sum() / num_gt, giou.sum() / num_gt, mask)


def compute_loss(outputs: Sequence[StageOutput], targets: Sequence[Targets], model_cfg: ModelConfig,
                 train_cfg: TrainConfig, image_hw: tuple[int, int]) -> LossBreakdown:
    """Match every stage independently against the same targets and sum the stage losses."""
    variant = ObjectnessVariant(model_cfg.variant)
    match_cfg = train_cfg.matching
    if variant is ObjectnessVariant.VOID and match_cfg.use_score_cost:
        match_cfg = replace(match_cfg, use_score_cost=False)
    stages = []
    for out in outputs:
        matches = match_stage(out, targets, variant, match_cfg)
        stages.append(stage_loss(out, targets, matches, variant, train_cfg.weights, image_hw,
                                 train_cfg.mask_smooth))
    return aggregate(stages, model_cfg.num_stages)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: QueryModel
    metrics: list[dict]
    checkpoint: Path | None


def _batch(dataset: Dataset, ids: Sequence[int], cfg: TrainConfig, epoch: int):
    images, targets = [], []
    for sid in ids:
        s = dataset.samples[sid]
        rng = np.random.default_rng([cfg.seed, epoch, sid])
        img, insts = augment(s.image, s.instances, cfg.augmentation, rng)
        images.append(img)
        targets.append(Targets.from_instances(insts, s.height, s.width))
    return image_to_tensor(np.stack(images)), targets


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: Dataset,
          run_dir: str | Path | None = None, max_steps: int | None = None,
          model: QueryModel | None = None) -> TrainResult:
    """Train from scratch (or continue ``model``) and optionally write artifacts to ``run_dir``.

    ``run_dir`` receives ``metrics.jsonl`` (one line per step) and
    ``checkpoint.bin`` (rewritten every ``checkpoint_every`` epochs and at the end).
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if any(s.image is None for s in dataset.samples):
        raise ValueError("training needs images; load the dataset with an image root")
    heights = {(s.height, s.width) for s in dataset.samples}
    if len(heights) != 1:
        raise ValueError(f"all training images must share one size, got {sorted(heights)}")
    image_hw = heights.pop()

    torch.manual_seed(train_cfg.seed)
    model = model if model is not None else QueryModel(model_cfg)
    model.check_image_size(*image_hw)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr,
                           weight_decay=train_cfg.weight_decay)

    out_dir = Path(run_dir) if run_dir is not None else None
    metrics_f = None
    ckpt = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_f = open(out_dir / "metrics.jsonl", "w")
        ckpt = out_dir / "checkpoint.bin"

    metrics: list[dict] = []
    step = 0
    n = len(dataset)
    try:
        for epoch in range(train_cfg.epochs):
            if max_steps is not None and step >= max_steps:
                break
            lr = train_cfg.lr_at(epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            order = np.random.default_rng([train_cfg.seed, epoch]).permutation(n)
            for start in range(0, n, train_cfg.batch_size):
                if max_steps is not None and step >= max_steps:
                    break
                ids = order[start:start + train_cfg.batch_size].tolist()
                images, targets = _batch(dataset, ids, train_cfg, epoch)
                outputs = model(images)
                finite = all(bool(torch.isfinite(o.boxes).all()) for o in outputs)
                breakdown = (compute_loss(outputs, targets, model_cfg, train_cfg, image_hw)
                             if finite else None)
                if breakdown is None or not math.isfinite(breakdown.total):
                    if out_dir is not None:
                        (out_dir / "replay.json").write_text(json.dumps(
                            {"step": step, "epoch": epoch, "sample_ids": ids}))
                    raise NonFiniteLossError(step, ids)
                opt.zero_grad(set_to_none=True)
                breakdown.total_tensor.backward()
                if train_cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
                opt.step()
                rec = {"step": step, "epoch": epoch, "lr": lr, **breakdown.to_record()}
                metrics.append(rec)
                if metrics_f is not None:
                    metrics_f.write(json.dumps(rec, sort_keys=True) + "\n")
                step += 1
            if ckpt is not None and (epoch + 1) % train_cfg.checkpoint_every == 0:
                save_checkpoint(model, ckpt, {"epoch": epoch + 1, "step": step})
        if ckpt is not None:
            save_checkpoint(model, ckpt, {"step": step})
    finally:
        if metrics_f is not None:
            metrics_f.close()
    return TrainResult(model, metrics, ckpt)


def predict_dataset(model: QueryModel, dataset: Dataset, batch_size: int = 8):
    """All-query predictions for every sample, ranked per the model's variant."""
    preds = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.samples[start:start + batch_size]
        preds.extend(predict(model, np.stack([s.image for s in chunk])))
    return preds


def evaluate_model(model: QueryModel, dataset: Dataset, eval_cfg: EvalConfig = EvalConfig(),
                   out_dir: str | Path | None = None, batch_size: int = 8) -> ARReport:
    preds = predict_dataset(model, dataset, batch_size)
    ids = [s.image_id for s in dataset.samples]
    report = average_recall(list(zip(preds, [s.eval_instances for s in dataset.samples])),
                            eval_cfg, ids)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "predictions.json").write_text(
            json.dumps(predictions_to_results(ids, preds), sort_keys=True))
    return report


def evaluate_checkpoint(checkpoint: str | Path, dataset: Dataset,
                        eval_cfg: EvalConfig = EvalConfig(),
                        model_cfg: ModelConfig | None = None,
                        out_dir: str | Path | None = None) -> ARReport:
    """Load a checkpoint and evaluate it; read-only with respect to the checkpoint."""
    model, _ = load_checkpoint(checkpoint, model_cfg)
    return evaluate_model(model, dataset, eval_cfg, out_dir)
