"""Independent scalar reference implementations used as test oracles.

These deliberately avoid numpy vectorization and share no code with the
package so that a bug in one path cannot hide in the other.
"""

from __future__ import annotations

import itertools
from fractions import Fraction

import torch


def overlap_1d(a0, a1, b0, b1):
    lo = a0 if a0 > b0 else b0
    hi = a1 if a1 < b1 else b1
    return hi - lo if hi > lo else 0.0


def iou_ref(a, b):
    inter = overlap_1d(a[0], a[2], b[0], b[2]) * overlap_1d(a[1], a[3], b[1], b[3])
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return 0.0 if union <= 0 else inter / union


def giou_ref(a, b):
    inter = overlap_1d(a[0], a[2], b[0], b[2]) * overlap_1d(a[1], a[3], b[1], b[3])
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    hull = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    if hull <= 0:
        return 0.0
    iou = inter / union if union > 0 else 0.0
    return iou - (hull - union) / hull


def mask_iou_ref(a, b):
    inter = union = 0
    for row_a, row_b in zip(a, b):
        for x, y in zip(row_a, row_b):
            inter += bool(x) and bool(y)
            union += bool(x) or bool(y)
    return 1.0 if union == 0 else inter / union


def rle_ref(mask):
    """Column-major run lengths starting with a (possibly empty) zero run."""
    h, w = len(mask), len(mask[0])
    flat = [bool(mask[r][c]) for c in range(w) for r in range(h)]
    counts, current, run = [], False, 0
    for v in flat:
        if v == current:
            run += 1
        else:
            counts.append(run)
            current, run = v, 1
    counts.append(run)
    return counts


def brute_force_assignment(cost):
    """Minimum total cost over all injections of min(N, M) pairs."""
    n, m = len(cost), len(cost[0]) if cost else 0
    if m == 0:
        return 0.0
    best = None
    if n >= m:
        for rows in itertools.permutations(range(n), m):
            total = sum(cost[r][c] for c, r in enumerate(rows))
            best = total if best is None or total < best else best
    else:
        for cols in itertools.permutations(range(m), n):
            total = sum(cost[r][c] for r, c in enumerate(cols))
            best = total if best is None or total < best else best
    return best


def naive_average_recall(scenes, thresholds, budgets, iou_fn):
    """AR@k by looping over every (image, threshold, budget) triple.

    ``scenes`` is a list of ``(pred_boxes_ranked, gt_boxes)``; returns
    ``{k: AR}`` or None when there is no ground truth.
    """
    total_gt = sum(len(g) for _, g in scenes)
    if total_gt == 0:
        return None
    out = {}
    for k in budgets:
        per_threshold = []
        for t in thresholds:
            hits = 0
            for preds, gts in scenes:
                taken = [False] * len(gts)
                for p in preds[:k]:
                    best_j, best_v = -1, -1.0
                    for j, g in enumerate(gts):
                        if taken[j]:
                            continue
                        v = iou_fn(p, g)
                        if v >= t and v > best_v:
                            best_j, best_v = j, v
                    if best_j >= 0:
                        taken[best_j] = True
                        hits += 1
            per_threshold.append(Fraction(hits, total_gt))
        out[k] = float(sum(per_threshold) / len(per_threshold))
    return out


def fd_grad(f, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite differences of a scalar function, float64."""
    x = x.detach().double()
    g = torch.zeros_like(x)
    flat = g.view(-1)
    for i in range(x.numel()):
        e = torch.zeros_like(x).view(-1)
        e[i] = h
        e = e.view_as(x)
        flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def autograd_grad(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().double().requires_grad_(True)
    f(x).backward()
    return x.grad


def rel_err(a, b):
    return float((a - b).norm() / max(float(b.norm()), 1e-12))
