"""Axis-aligned boxes in normalised image coordinates, IoU / GIoU, box loss."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

logger = logging.getLogger(__name__)

L1_WEIGHT = 5.0
GIOU_WEIGHT = 2.0
HULL_FLOOR = 1e-12


@dataclass(frozen=True)
class Box:
    """Center-size box. Negative extents are clamped to zero."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        object.__setattr__(self, "w", max(float(self.w), 0.0))
        object.__setattr__(self, "h", max(float(self.h), 0.0))

    @classmethod
    def from_corners(cls, x1, y1, x2, y2):
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    def as_array(self):
        return np.array([self.cx, self.cy, self.w, self.h])

    @property
    def area(self):
        return self.w * self.h


def cxcywh_to_xyxy(boxes):
    b = np.asarray(boxes, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(boxes):
    b = np.asarray(boxes, dtype=np.float64)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def pairwise_iou(a, b):
    """IoU for every pair of rows; ``a`` (n, 4) and ``b`` (m, 4) in center-size form.

    Returns the (n, m) IoU matrix together with the union areas.
    """
    ax, bx = cxcywh_to_xyxy(a)[:, None, :], cxcywh_to_xyxy(b)[None, :, :]
    iw = np.clip(np.minimum(ax[..., 2], bx[..., 2]) - np.maximum(ax[..., 0], bx[..., 0]), 0, None)
    ih = np.clip(np.minimum(ax[..., 3], bx[..., 3]) - np.maximum(ax[..., 1], bx[..., 1]), 0, None)
    inter = iw * ih
    area_a = (ax[..., 2] - ax[..., 0]) * (ax[..., 3] - ax[..., 1])
    area_b = (bx[..., 2] - bx[..., 0]) * (bx[..., 3] - bx[..., 1])
    union = area_a + area_b - inter
    iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    return iou, union


def pairwise_giou(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iou, union = pairwise_iou(a, b)
    ax, bx = cxcywh_to_xyxy(a)[:, None, :], cxcywh_to_xyxy(b)[None, :, :]
    hw = np.maximum(ax[..., 2], bx[..., 2]) - np.minimum(ax[..., 0], bx[..., 0])
    hh = np.maximum(ax[..., 3], bx[..., 3]) - np.minimum(ax[..., 1], bx[..., 1])
    hull = hw * hh
    degenerate = hull <= 0
    if degenerate.any():
        logger.debug("giou: %d degenerate hulls set to 0", int(degenerate.sum()))
    giou = iou - (hull - union) / np.maximum(hull, HULL_FLOOR)
    return np.where(degenerate, 0.0, giou)


def iou(a, b):
    ab = np.stack([_to_cxcywh(a), _to_cxcywh(b)])
    return float(pairwise_iou(ab[:1], ab[1:])[0][0, 0])


def giou(a, b):
    ab = np.stack([_to_cxcywh(a), _to_cxcywh(b)])
    return float(pairwise_giou(ab[:1], ab[1:])[0, 0])


def _to_cxcywh(box):
    if isinstance(box, Box):
        return box.as_array()
    return np.asarray(box, dtype=np.float64)


def l1_distance(a, b):
    return np.abs(np.asarray(a)[:, None, :] - np.asarray(b)[None, :, :]).sum(-1)


# ---------------------------------------------------------------------------
# taped versions (elementwise over matching rows)


def giou_tensor(pred, target):
    """GIoU between row-aligned boxes. ``pred`` may be taped; ``target`` is constant."""
    pred, target = dc.as_tensor(pred), dc.as_tensor(target)
    pcx, pcy, pw, ph = (pred[..., k] for k in range(4))
    tcx, tcy, tw, th = (target[..., k] for k in range(4))
    px1, px2 = pcx - pw * 0.5, pcx + pw * 0.5
    py1, py2 = pcy - ph * 0.5, pcy + ph * 0.5
    tx1, tx2 = tcx - tw * 0.5, tcx + tw * 0.5
    ty1, ty2 = tcy - th * 0.5, tcy + th * 0.5
    iw = dc.relu(dc.minimum(px2, tx2) - dc.maximum(px1, tx1))
    ih = dc.relu(dc.minimum(py2, ty2) - dc.maximum(py1, ty1))
    inter = iw * ih
    union = pw * ph + tw * th - inter
    iou_ = inter / dc.maximum(union, HULL_FLOOR)
    hull = (dc.maximum(px2, tx2) - dc.minimum(px1, tx1)) * (dc.maximum(py2, ty2) - dc.minimum(py1, ty1))
    return iou_ - (hull - union) / dc.maximum(hull, HULL_FLOOR)


def box_loss_tensor(pred, target, l1_weight=L1_WEIGHT, giou_weight=GIOU_WEIGHT):
    """Per-row ``l1_weight * L1 + giou_weight * (1 - GIoU)``, shape ``pred.shape[:-1]``."""
    pred, target = dc.as_tensor(pred), dc.as_tensor(target)
    l1 = dc.sum_(dc.abs_(pred - target), axis=-1)
    return l1 * l1_weight + (1.0 - giou_tensor(pred, target)) * giou_weight


def box_loss(pred, gt, l1_weight=L1_WEIGHT, giou_weight=GIOU_WEIGHT):
    """Box regression loss for a single pair; differentiable when ``pred`` is a Tensor."""
    if isinstance(pred, dc.Tensor):
        return box_loss_tensor(dc.reshape(pred, (1, 4)), _to_cxcywh(gt).reshape(1, 4),
                               l1_weight, giou_weight)[0]
    p, g = _to_cxcywh(pred), _to_cxcywh(gt)
    return float(l1_weight * np.abs(p - g).sum() + giou_weight * (1.0 - giou(p, g)))
