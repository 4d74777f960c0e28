"""Detection records, per-class NMS, 101-point interpolated AP, duplicate rate.

Detections travel as a :class:`Detections` bundle of parallel arrays so that a
few thousand of them can be scored without per-record Python objects.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import Box, pairwise_iou

logger = logging.getLogger(__name__)

COCO_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
RECALL_POINTS = np.arange(101) / 100  # correctly rounded, so recall 3/10 reaches level 0.30
DUMP_HEADER = ["scene_id", "class_id", "score", "cx", "cy", "w", "h"]


@dataclass(frozen=True)
class Detection:
    scene_id: int
    class_id: int
    score: float
    box: Box

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")


@dataclass
class Detections:
    scene_ids: np.ndarray
    class_ids: np.ndarray
    scores: np.ndarray
    boxes: np.ndarray  # (n, 4) center-size

    def __len__(self):
        return len(self.scores)

    def __getitem__(self, idx):
        return Detections(self.scene_ids[idx], self.class_ids[idx],
                          self.scores[idx], self.boxes[idx])

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros((0, 4)))

    @classmethod
    def from_records(cls, records):
        records = list(records)
        if not records:
            return cls.empty()
        return cls(np.array([r.scene_id for r in records], dtype=np.int64),
                   np.array([r.class_id for r in records], dtype=np.int64),
                   np.array([r.score for r in records], dtype=np.float64),
                   np.array([r.box.as_array() for r in records]).reshape(-1, 4))

    @classmethod
    def concat(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("scene_ids", "class_ids", "scores", "boxes")))

    def records(self):
        return [Detection(int(s), int(c), float(p), Box(*b))
                for s, c, p, b in zip(self.scene_ids, self.class_ids, self.scores, self.boxes)]


def _as_detections(dets):
    return dets if isinstance(dets, Detections) else Detections.from_records(dets)


def _order(scores):
    """Descending score, ties by input index."""
    return np.argsort(-np.asarray(scores), kind="stable")


def nms_indices(dets, iou_threshold=0.5):
    """Indices kept by greedy per-scene, per-class suppression, in kept order."""
    dets = _as_detections(dets)
    order = _order(dets.scores)
    keep = []
    for key in sorted(set(zip(dets.scene_ids.tolist(), dets.class_ids.tolist()))):
        idx = order[(dets.scene_ids[order] == key[0]) & (dets.class_ids[order] == key[1])]
        iou, _ = pairwise_iou(dets.boxes[idx], dets.boxes[idx])
        alive = np.ones(len(idx), dtype=bool)
        for i in range(len(idx)):
            if alive[i]:
                keep.append(idx[i])
                alive[i + 1:] &= iou[i, i + 1:] < iou_threshold
    keep = np.sort(np.array(keep, dtype=np.int64))
    return keep[_order(dets.scores[keep])]


def nms(dets, iou_threshold=0.5):
    """Greedy non-maximum suppression. Returns the kept detections sorted by score."""
    records = not isinstance(dets, Detections)
    dets = _as_detections(dets)
    kept = dets[nms_indices(dets, iou_threshold)]
    return kept.records() if records else kept


def duplicate_rate(dets, score_threshold=0.05, iou_threshold=0.5):
    """Fraction of detections scoring >= ``score_threshold`` that NMS removes."""
    dets = _as_detections(dets)
    dets = dets[dets.scores >= score_threshold]
    if len(dets) == 0:
        return 0.0
    return 1.0 - len(nms_indices(dets, iou_threshold)) / len(dets)


@dataclass
class APResult:
    mAP: float
    per_class: dict  # class_id -> AP averaged over thresholds
    per_threshold: dict  # threshold -> mAP over classes
    table: np.ndarray  # (num_classes_evaluated, num_thresholds)
    classes: list

    def to_dict(self):
        return {"mAP": self.mAP,
                "per_class_AP": {str(k): v for k, v in self.per_class.items()},
                "per_threshold_mAP": {f"{k:.2f}": v for k, v in self.per_threshold.items()}}


def _scene_matches(det_boxes, det_scores, gt_boxes, thresholds):
    """TP flags (n_det, T) for one scene and class, detections taken by descending score."""
    n, T = len(det_boxes), len(thresholds)
    tp = np.zeros((n, T), dtype=bool)
    if n == 0 or len(gt_boxes) == 0:
        return tp
    iou, _ = pairwise_iou(det_boxes, gt_boxes)
    taken = np.zeros((T, len(gt_boxes)), dtype=bool)
    for i in _order(det_scores):
        cand = np.where(taken, -1.0, iou[i][None, :])
        best = cand.argmax(axis=1)
        hit = cand[np.arange(T), best] >= thresholds
        tp[i] = hit
        taken[np.flatnonzero(hit), best[hit]] = True
    return tp


def interpolated_ap(tp, n_gt):
    """101-point interpolated AP from TP flags already in descending-score order."""
    tp = np.asarray(tp, dtype=np.float64)
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    tps = np.cumsum(tp)
    fps = np.cumsum(1.0 - tp)
    recall = tps / n_gt
    precision = tps / (tps + fps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    interp = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(interp.mean())


def average_precision(dets, scenes, iou_thresholds=COCO_THRESHOLDS):
    """Per-class AP and mAP over classes and thresholds.

    ``scenes`` is any sequence of objects with ``scene_id``, ``gt_classes`` and
    ``gt_boxes``. Classes without ground truth are excluded from the mean.
    """
    dets = _as_detections(dets)
    thresholds = np.atleast_1d(np.asarray(iou_thresholds, dtype=np.float64))
    by_scene = {}
    for i, sid in enumerate(dets.scene_ids.tolist()):
        by_scene.setdefault(sid, []).append(i)
    gt_classes = np.concatenate([np.asarray(s.gt_classes, dtype=np.int64) for s in scenes]) \
        if scenes else np.zeros(0, np.int64)
    present = sorted(set(gt_classes.tolist()))
    for c in set(dets.class_ids.tolist()) - set(present):
        logger.info("class %d has detections but no ground truth; excluded from mAP", c)

    flags = {c: [] for c in present}  # c -> list of (scores, tp)
    for s in scenes:
        idx = np.array(by_scene.get(int(s.scene_id), []), dtype=np.int64)
        for c in present:
            sel = idx[dets.class_ids[idx] == c] if len(idx) else idx
            gt = np.asarray(s.gt_boxes).reshape(-1, 4)[np.asarray(s.gt_classes) == c]
            if len(sel):
                tp = _scene_matches(dets.boxes[sel], dets.scores[sel], gt, thresholds)
                flags[c].append((dets.scores[sel], tp))

    table = np.zeros((len(present), len(thresholds)))
    for row, c in enumerate(present):
        n_gt = int((gt_classes == c).sum())
        if not flags[c]:
            continue
        scores = np.concatenate([f[0] for f in flags[c]])
        tp = np.concatenate([f[1] for f in flags[c]])
        order = _order(scores)
        for col in range(len(thresholds)):
            table[row, col] = interpolated_ap(tp[order, col], n_gt)
    mAP = float(table.mean()) if table.size else 0.0
    return APResult(
        mAP=mAP,
        per_class={c: float(table[r].mean()) for r, c in enumerate(present)},
        per_threshold={float(t): float(table[:, k].mean()) if table.size else 0.0
                       for k, t in enumerate(thresholds)},
        table=table,
        classes=present,
    )


def write_detections(dets, path):
    dets = _as_detections(dets)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(DUMP_HEADER)
        for s, c, p, b in zip(dets.scene_ids, dets.class_ids, dets.scores, dets.boxes):
            w.writerow([int(s), int(c), repr(float(p))] + [repr(float(x)) for x in b])


def read_detections(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != DUMP_HEADER:
        raise ValueError(f"{path}: missing detection dump header")
    body = np.array(rows[1:], dtype=np.float64).reshape(-1, 7)
    return Detections(body[:, 0].astype(np.int64), body[:, 1].astype(np.int64),
                      body[:, 2].copy(), body[:, 3:].copy())
