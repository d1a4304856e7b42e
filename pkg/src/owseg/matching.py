"""One-to-one assignment of queries to ground-truth instances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import ccwh_to_xyxy, pairwise_generalized_iou


@dataclass(frozen=True)
class MatchCostConfig:
    w_score: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    use_score_cost: bool = False
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        for name in ("w_score", "w_l1", "w_giou"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class MatchAssignment:
    pairs: tuple[tuple[int, int], ...]
    unmatched_queries: tuple[int, ...]
    cost: float = 0.0

    @property
    def query_indices(self) -> np.ndarray:
        return np.array([q for q, _ in self.pairs], dtype=np.int64)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)


def score_cost(scores: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    """Focal-style cost of calling each query a positive (lower is better)."""
    p = np.clip(scores, 1e-6, 1 - 1e-6)
    pos = alpha * (1 - p) ** gamma * -np.log(p)
    neg = (1 - alpha) * p ** gamma * -np.log(1 - p)
    return pos - neg


def build_cost_matrix(pred_boxes, gt_boxes, cfg: MatchCostConfig = MatchCostConfig(),
                      pred_scores=None) -> np.ndarray:
    """``N x M`` matching cost between normalized ``ccwh`` boxes.

    ``pred_scores`` only enters when ``cfg.use_score_cost`` is set.
    """
    pred = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if pred.shape[0] < 1:
        raise ValueError("need at least one query")
    if not np.all(np.isfinite(pred)):
        raise ValueError("non-finite predicted box")
    if gt.shape[0] == 0:
        return np.zeros((pred.shape[0], 0))
    l1 = np.abs(pred[:, None, :] - gt[None, :, :]).sum(-1)
    giou = pairwise_generalized_iou(ccwh_to_xyxy(pred, (1, 1)), ccwh_to_xyxy(gt, (1, 1)))
    cost = cfg.w_l1 * l1 + cfg.w_giou * (1 - giou)
    if cfg.use_score_cost:
        if pred_scores is None:
            raise ValueError("use_score_cost requires pred_scores")
        scores = np.asarray(pred_scores, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(scores)):
            raise ValueError("non-finite predicted score")
        cost = cost + cfg.w_score * score_cost(scores, cfg.alpha, cfg.gamma)[:, None]
    return cost


def hungarian_assign(cost) -> MatchAssignment:
    """Minimum-cost injective assignment of ``min(N, M)`` pairs.

    Pairs come back sorted by query index. The solver is deterministic, so
    equal matrices always produce equal assignments.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    n = cost.shape[0]
    if cost.shape[1] == 0:
        return MatchAssignment((), tuple(range(n)), 0.0)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    pairs = tuple(sorted((int(r), int(c)) for r, c in zip(rows, cols)))
    matched = {r for r, _ in pairs}
    unmatched = tuple(i for i in range(n) if i not in matched)
    return MatchAssignment(pairs, unmatched, float(cost[rows, cols].sum()))
