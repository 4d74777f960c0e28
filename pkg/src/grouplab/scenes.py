"""Synthetic detection scenes: ground-truth boxes plus a grid of memory tokens.

The memory grid stands in for encoder features. Each token carries Gaussian
class bumps and its own cell-center coordinates, projected to ``d_model`` by a
fixed seeded matrix, plus Gaussian noise.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import Box, cxcywh_to_xyxy, xyxy_to_cxcywh
from .matchcost import GroundTruth

logger = logging.getLogger(__name__)

FORMAT_NAME = "grouplab-scenes"
FORMAT_VERSION = 1
MAX_TRIES = 1000


@dataclass(frozen=True)
class SceneParams:
    m_min: int = 1
    m_max: int = 5
    num_classes: int = 4
    min_size: float = 0.08
    max_size: float = 0.4
    min_center_dist: float = 0.05
    grid: int = 8
    d_model: int = 64
    bump_scale: float = 0.5
    noise: float = 0.05
    projection_seed: int = 1234

    def __post_init__(self):
        if not 0 <= self.m_min <= self.m_max:
            raise ValueError(f"need 0 <= m_min <= m_max, got {self.m_min}, {self.m_max}")
        if not 0 < self.min_size <= self.max_size <= 1:
            raise ValueError("box size range must satisfy 0 < min <= max <= 1")

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in {f.name for f in dataclasses.fields(cls)}})


@dataclass
class Scene:
    scene_id: int
    gt_classes: np.ndarray
    gt_boxes: np.ndarray
    memory: np.ndarray
    truncated: bool = False

    @property
    def num_objects(self):
        return len(self.gt_classes)

    @property
    def gts(self):
        return [GroundTruth(int(c), Box(*b)) for c, b in zip(self.gt_classes, self.gt_boxes)]

    @property
    def targets(self):
        return self.gt_classes, self.gt_boxes


def cell_centers(grid):
    c = (np.arange(grid) + 0.5) / grid
    xs, ys = np.meshgrid(c, c)  # row-major over (y, x)
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def projection_matrix(params):
    rng = np.random.default_rng(params.projection_seed)
    fan_in = params.num_classes + 2
    return rng.standard_normal((fan_in, params.d_model)) / np.sqrt(fan_in)


def memory_features(gt_classes, gt_boxes, params):
    """Pre-projection token features: (G*G, C + 2) class bumps and cell coordinates."""
    centers = cell_centers(params.grid)
    bumps = np.zeros((len(centers), params.num_classes))
    for c, (cx, cy, w, h) in zip(gt_classes, np.asarray(gt_boxes).reshape(-1, 4)):
        d2 = ((centers - (cx, cy)) ** 2).sum(axis=1)
        sigma = np.sqrt(w * h) * params.bump_scale
        bumps[:, c] += np.exp(-d2 / (2.0 * sigma ** 2))
    return np.concatenate([bumps, centers], axis=1)


def build_memory(gt_classes, gt_boxes, params, rng):
    feats = memory_features(gt_classes, gt_boxes, params) @ projection_matrix(params)
    return feats + params.noise * rng.standard_normal(feats.shape)


def _draw_box(rng, params):
    w, h = rng.uniform(params.min_size, params.max_size, size=2)
    cx, cy = rng.uniform(0, 1, size=2)
    corners = np.clip(cxcywh_to_xyxy([cx, cy, w, h]), 0.0, 1.0)
    return xyxy_to_cxcywh(corners)


def sample_scene(seed, params=SceneParams(), scene_id=None):
    """Deterministic scene for ``seed``; rejection-samples boxes with separated centers."""
    rng = np.random.default_rng(seed)
    m = int(rng.integers(params.m_min, params.m_max + 1))
    classes, boxes = [], []
    truncated = False
    for _ in range(m):
        for _ in range(MAX_TRIES):
            box = _draw_box(rng, params)
            if all(np.hypot(*(box[:2] - b[:2])) >= params.min_center_dist for b in boxes):
                break
        else:
            truncated = True
            logger.warning("scene %s: placed %d of %d objects", seed, len(boxes), m)
            break
        boxes.append(box)
        classes.append(int(rng.integers(params.num_classes)))
    gt_classes = np.array(classes, dtype=np.int64)
    gt_boxes = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    memory = build_memory(gt_classes, gt_boxes, params, rng)
    sid = seed if scene_id is None else scene_id
    return Scene(sid, gt_classes, gt_boxes, memory, truncated)


def make_split(seed, start, count, params=SceneParams()):
    """Scenes with ids ``start .. start+count-1``; each id seeds its own generator."""
    return [sample_scene([seed, i], params, scene_id=i) for i in range(start, start + count)]


# ---------------------------------------------------------------------------
# persistence: JSON header line, then one JSON record per scene


def save_dataset(scenes, path, params=SceneParams(), meta=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION,
              "params": dataclasses.asdict(params), "count": len(scenes)}
    if meta:
        header["meta"] = meta
    with open(path, "w") as f:
        f.write(json.dumps(header) + "\n")
        for s in scenes:
            record = {
                "scene_id": int(s.scene_id),
                "truncated": bool(s.truncated),
                "gts": [[int(c)] + [float(x) for x in b] for c, b in zip(s.gt_classes, s.gt_boxes)],
                "memory_shape": list(s.memory.shape),
                "memory": s.memory.ravel().tolist(),
            }
            f.write(json.dumps(record) + "\n")


class DatasetFormatError(ValueError):
    pass


def load_dataset(path, with_params=False):
    path = Path(path)
    scenes = []
    with open(path) as f:
        lines = f.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError:
        raise DatasetFormatError(f"{path}: line 1: unreadable header") from None
    if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"{path}: line 1: expected {FORMAT_NAME} v{FORMAT_VERSION}, "
            f"got {header.get('format')} v{header.get('version')}")
    params = SceneParams.from_dict(header.get("params", {}))
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            gts = np.array(rec["gts"], dtype=np.float64).reshape(-1, 5)
            memory = np.array(rec["memory"], dtype=np.float64).reshape(rec["memory_shape"])
            scenes.append(Scene(int(rec["scene_id"]), gts[:, 0].astype(np.int64),
                                gts[:, 1:].copy(), memory, bool(rec.get("truncated", False))))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: malformed record ({exc})") from None
    if "count" in header and header["count"] != len(scenes):
        raise DatasetFormatError(
            f"{path}: line {len(lines) + 1}: expected {header['count']} scenes, found {len(scenes)}")
    return (scenes, params) if with_params else scenes


def dataset_hash(scenes):
    """SHA-256 over the exact float64 bytes of every scene."""
    h = hashlib.sha256()
    for s in scenes:
        h.update(np.int64(s.scene_id).tobytes())
        h.update(np.ascontiguousarray(s.gt_classes, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(s.gt_boxes, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(s.memory, dtype=np.float64).tobytes())
    return h.hexdigest()
