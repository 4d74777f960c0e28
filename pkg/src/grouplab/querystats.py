"""Query-position diagnostics: perturbation distance (PD) and matching distance (MD).

PD averages, over both directions, the distance from each query of one group
to its nearest neighbour in the other group. MD averages, over ground truths,
the distance between the queries of two groups matched to the same object.
With more than two groups both are averaged over unordered group pairs.
"""
from __future__ import annotations

import csv
import itertools
import logging
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


def as_group_positions(positions, num_groups=None):
    """Normalise to an array (K, N, 2). Accepts a (K*N, 2) array when ``num_groups`` is given."""
    pos = np.asarray(positions, dtype=np.float64)
    if num_groups is not None and pos.ndim == 2:
        pos = pos.reshape(num_groups, -1, 2)
    if pos.ndim != 3 or pos.shape[-1] != 2:
        raise ValueError(f"expected (K, N, 2) positions, got shape {pos.shape}")
    return pos


def _pair_pd(a, b):
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return (d.min(axis=1).sum() + d.min(axis=0).sum()) / (2 * len(a))


def perturbation_distance(positions):
    pos = as_group_positions(positions)
    if len(pos) < 2:
        raise ValueError(f"perturbation distance needs at least 2 groups, got {len(pos)}")
    return float(np.mean([_pair_pd(pos[g], pos[h])
                          for g, h in itertools.combinations(range(len(pos)), 2)]))


def matching_distance(positions, assignments):
    """MD for one scene. ``assignments[g].gt_to_query`` indexes group ``g``'s queries.

    Returns 0.0 (logged) when the scene has no ground truth.
    """
    pos = as_group_positions(positions)
    if len(pos) < 2 or len(assignments) != len(pos):
        raise ValueError(f"need one assignment per group and >= 2 groups, "
                         f"got {len(assignments)} assignments for {len(pos)} groups")
    sizes = {len(a.gt_to_query) for a in assignments}
    if len(sizes) != 1:
        raise ValueError(f"assignments disagree on the number of ground truths: {sorted(sizes)}")
    if sizes == {0}:
        logger.debug("matching distance of a scene without ground truth set to 0")
        return 0.0
    pairs = []
    for g, h in itertools.combinations(range(len(pos)), 2):
        a = pos[g][np.asarray(assignments[g].gt_to_query)]
        b = pos[h][np.asarray(assignments[h].gt_to_query)]
        pairs.append(np.sqrt(((a - b) ** 2).sum(-1)).mean())
    return float(np.mean(pairs))


def mean_matching_distance(positions, scene_assignments):
    """MD averaged over scenes that have at least one ground truth; NaN if none do."""
    values = [matching_distance(positions, a) for a in scene_assignments
              if len(a) and len(a[0].gt_to_query)]
    return float(np.mean(values)) if values else float("nan")


def dump_positions(positions):
    """Rows ``(group, query, x, y)``, one per query."""
    pos = as_group_positions(positions)
    return [(g, q, float(x), float(y))
            for g in range(pos.shape[0]) for q, (x, y) in enumerate(pos[g])]


def write_positions(positions, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["group", "query", "x", "y"])
        w.writerows(dump_positions(positions))


def write_distance_series(rows, path):
    """``rows`` of (step, pd, md)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "pd", "md"])
        for step, pd, md in rows:
            w.writerow([step, repr(float(pd)), repr(float(md))])


def read_distance_series(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return [(int(r["step"]), float(r["pd"]), float(r["md"])) for r in reader]


def histogram_distance(a, b, bins=8):
    """Earth-mover style distance between two 2-d position sets: mean of the
    per-axis 1-d Wasserstein distances over a ``bins`` grid."""
    a, b = np.asarray(a), np.asarray(b)
    edges = np.linspace(0, 1, bins + 1)
    total = 0.0
    for axis in range(2):
        ha = np.histogram(a[:, axis], edges)[0] / max(len(a), 1)
        hb = np.histogram(b[:, axis], edges)[0] / max(len(b), 1)
        total += np.abs(np.cumsum(ha - hb)).sum() / bins
    return total / 2
