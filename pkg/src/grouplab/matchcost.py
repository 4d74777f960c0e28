"""Matching cost between predictions and ground truth, and the post-assignment set loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .assign import MultiAssignment
from .boxes import Box, box_loss_tensor, l1_distance, pairwise_giou

PROB_EPS = 1e-8


@dataclass(frozen=True)
class CostWeights:
    mu_cls: float = 2.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"CostWeights.{name} must be >= 0, got {value}")


@dataclass
class Prediction:
    class_probs: np.ndarray
    box: Box

    def __post_init__(self):
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)
        if np.any((self.class_probs < 0) | (self.class_probs > 1)):
            raise ValueError("class probabilities must lie in [0, 1]")


@dataclass
class GroundTruth:
    class_id: int
    box: Box


def focal_cls_cost(p, alpha=0.25, gamma=2.0):
    """Positive-minus-negative focal cost of predicting the target class with probability ``p``."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    pos = alpha * (1 - p) ** gamma * -np.log(p)
    neg = (1 - alpha) * p ** gamma * -np.log(1 - p)
    return pos - neg


def cost_matrix(probs, boxes, gt_classes, gt_boxes, weights=CostWeights()):
    """Array form: ``probs`` (N, C), ``boxes`` (N, 4), ``gt_classes`` (M,), ``gt_boxes`` (M, 4).

    Returns the (N, M) cost matrix, queries along rows.
    """
    probs = np.asarray(probs, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_classes) == 0:
        return np.zeros((len(probs), 0))
    cls = focal_cls_cost(probs[:, gt_classes], weights.focal_alpha, weights.focal_gamma)
    return (weights.mu_cls * cls
            + weights.l1_weight * l1_distance(boxes, gt_boxes)
            + weights.giou_weight * (1 - pairwise_giou(boxes, gt_boxes)))


def build_cost_matrix(preds, gts, weights=CostWeights()):
    """Cost matrix from :class:`Prediction` and :class:`GroundTruth` lists."""
    if not preds:
        raise ValueError("build_cost_matrix needs at least one prediction")
    probs = np.stack([p.class_probs for p in preds])
    boxes = np.stack([p.box.as_array() for p in preds])
    gt_classes = np.array([g.class_id for g in gts], dtype=np.int64)
    gt_boxes = np.array([g.box.as_array() for g in gts]).reshape(-1, 4)
    return cost_matrix(probs, boxes, gt_classes, gt_boxes, weights)


def focal_loss_tensor(probs, targets, alpha=0.25, gamma=2.0):
    """Summed sigmoid focal loss. ``probs`` is taped, ``targets`` a constant 0/1 array."""
    p = dc.clip(probs, PROB_EPS, 1 - PROB_EPS)
    t = np.asarray(targets, dtype=np.float64)
    pos = dc.power(1.0 - p, gamma) * dc.neg(dc.log(p)) * (alpha * t)
    neg = dc.power(p, gamma) * dc.neg(dc.log(1.0 - p)) * ((1 - alpha) * (1 - t))
    return dc.sum_(pos + neg)


def _matched_pairs(entry, n_queries, n_gt, scene):
    """Yield (global query indices, gt indices) for one scene's assignment entry."""
    if isinstance(entry, MultiAssignment):
        if len(entry.gt_to_queries) != n_gt:
            raise ValueError(f"scene {scene}: assignment covers {len(entry.gt_to_queries)} "
                             f"of {n_gt} ground truths")
        q = np.array(entry.queries(), dtype=np.int64)
        j = np.array([k for k, qs in enumerate(entry.gt_to_queries) for _ in qs], dtype=np.int64)
        groups = [(0, n_queries, q, j)]
    else:
        K = len(entry)
        if K == 0 or n_queries % K:
            raise ValueError(f"scene {scene}: {K} assignments do not tile {n_queries} queries")
        N = n_queries // K
        groups = [(g * N, N, np.asarray(a.gt_to_query, dtype=np.int64), np.arange(n_gt))
                  for g, a in enumerate(entry)]
    for g, (offset, size, q, j) in enumerate(groups):
        if len(q) != len(j) or len(np.unique(j)) != n_gt or (len(j) and j.max() >= n_gt):
            raise ValueError(f"scene {scene} group {g}: assignment does not cover "
                             f"all {n_gt} ground truths")
        if len(q) and (q.min() < 0 or q.max() >= size):
            raise ValueError(f"scene {scene} group {g}: query index out of range [0, {size})")
        yield offset + q, j


def batch_set_loss(probs, boxes, targets, assignments, weights=CostWeights()):
    """Set loss over a batch of scenes.

    ``probs`` (B, Q, C) and ``boxes`` (B, Q, 4) are taped decoder outputs.
    ``targets[b]`` is ``(gt_classes, gt_boxes)``. ``assignments[b]`` is either
    a list of K per-group assignments (group-local query indices, Q = K*N) or
    one :class:`MultiAssignment` over all Q queries.

    Every query is supervised by classification (unmatched -> all-negative);
    matched queries additionally get the box loss. The sum is divided by
    max(1, number of matched pairs), i.e. K*M for group-wise matching.
    """
    probs, boxes = dc.as_tensor(probs), dc.as_tensor(boxes)
    B, Q, C = probs.shape
    cls_target = np.zeros((B, Q, C))
    b_idx, q_idx, gt_rows = [], [], []
    for b, (entry, (gt_classes, gt_boxes)) in enumerate(zip(assignments, targets)):
        gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
        gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        for q, j in _matched_pairs(entry, Q, len(gt_classes), b):
            cls_target[b, q, gt_classes[j]] = 1.0
            b_idx.append(np.full(len(q), b))
            q_idx.append(q)
            gt_rows.append(gt_boxes[j])

    total = focal_loss_tensor(probs, cls_target, weights.focal_alpha, weights.focal_gamma)
    n_matched = sum(len(q) for q in q_idx)
    if n_matched:
        matched = boxes[np.concatenate(b_idx), np.concatenate(q_idx)]
        per_pair = box_loss_tensor(matched, np.concatenate(gt_rows),
                                   weights.l1_weight, weights.giou_weight)
        total = total + dc.sum_(per_pair)
    return total * (1.0 / max(1, n_matched))


def set_loss(probs, boxes, gts, assignments, weights=CostWeights()):
    """Single-scene set loss: ``probs`` (K*N, C), ``boxes`` (K*N, 4), ``gts`` as ``(classes, boxes)``.

    ``assignments`` is the list of K group assignments (or a MultiAssignment).
    """
    probs, boxes = dc.as_tensor(probs), dc.as_tensor(boxes)
    return batch_set_loss(dc.reshape(probs, (1,) + probs.shape),
                          dc.reshape(boxes, (1,) + boxes.shape),
                          [gts], [assignments], weights)
