from fractions import Fraction

import numpy as np
import pytest

from grouplab.boxes import Box, iou
from grouplab.evalkit import (Detection, Detections, average_precision, duplicate_rate,
                              interpolated_ap, nms, read_detections, write_detections)
from grouplab.scenes import Scene


def scene(sid, classes, boxes):
    return Scene(sid, np.array(classes, dtype=np.int64), np.array(boxes, float).reshape(-1, 4),
                 np.zeros((1, 1)))


def oracle_ap(tp_flags, n_gt):
    """101-point interpolated AP, written as the textbook loop over recall levels."""
    tp = fp = 0
    curve = []
    for flag in tp_flags:
        tp += flag
        fp += not flag
        curve.append((Fraction(tp, n_gt), Fraction(tp, tp + fp)))
    total = Fraction(0)
    for k in range(101):
        total += max([p for rec, p in curve if rec >= Fraction(k, 100)], default=0)
    return float(total / 101)


def oracle_nms(records, thr):
    order = sorted(range(len(records)), key=lambda i: (-records[i].score, i))
    kept = []
    for i in order:
        d = records[i]
        if all(not (k.scene_id == d.scene_id and k.class_id == d.class_id
                    and iou(k.box, d.box) >= thr) for k in kept):
            kept.append(d)
    return kept


def random_dets(rng, n, scenes=3, classes=2):
    return [Detection(int(rng.integers(scenes)), int(rng.integers(classes)),
                      float(rng.uniform(0.05, 1)),
                      Box(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.05, 0.4, 2)))
            for _ in range(n)]


A = Detection(0, 0, 0.9, Box.from_corners(0.0, 0, 1.0, 1))
B = Detection(0, 0, 0.8, Box.from_corners(0.25, 0, 1.25, 1))
C = Detection(0, 0, 0.7, Box.from_corners(0.5, 0, 1.5, 1))


class TestNMS:
    def test_single(self):
        assert nms([A]) == [A]

    def test_identical_pair(self):
        dup = Detection(0, 0, 0.8, A.box)
        assert nms([dup, A]) == [A]

    def test_chain(self):
        assert iou(A.box, B.box) == pytest.approx(0.6)
        assert iou(B.box, C.box) == pytest.approx(0.6)
        assert iou(A.box, C.box) < 0.5
        assert nms([C, B, A], 0.5) == [A, C]

    def test_class_and_scene_separate(self):
        other_class = Detection(0, 1, 0.8, A.box)
        other_scene = Detection(1, 0, 0.8, A.box)
        assert len(nms([A, other_class, other_scene])) == 3

    @pytest.mark.parametrize("seed", range(1000))
    def test_idempotent_and_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        dets = Detections.from_records(random_dets(rng, int(rng.integers(0, 25))))
        once = nms(dets)
        twice = nms(once)
        assert once.records() == twice.records()
        if seed < 100:
            assert once.records() == oracle_nms(dets.records(), 0.5)


class TestDuplicateRate:
    def test_disjoint(self):
        assert duplicate_rate([A, Detection(0, 0, 0.5, Box(5, 5, 1, 1))]) == 0.0

    def test_every_detection_duplicated(self, rng):
        base = [Detection(i, 0, 0.9, Box(0.5, 0.5, 0.2, 0.2)) for i in range(4)]
        dups = [Detection(d.scene_id, 0, 0.6, d.box) for d in base]
        assert duplicate_rate(base + dups) == 0.5

    def test_nothing_above_threshold(self):
        assert duplicate_rate([Detection(0, 0, 0.01, A.box)]) == 0.0

    def test_empty(self):
        assert duplicate_rate(Detections.empty()) == 0.0


class TestAP:
    def test_perfect(self):
        scenes = [scene(0, [0, 1], [[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.1, 0.3]]),
                  scene(1, [0], [[0.5, 0.5, 0.4, 0.4]])]
        dets = [Detection(s.scene_id, int(c), 0.9, Box(*b))
                for s in scenes for c, b in zip(s.gt_classes, s.gt_boxes)]
        assert average_precision(dets, scenes).mAP == 1.0

    def test_no_detections(self):
        assert average_precision([], [scene(0, [0], [[0.5, 0.5, 0.2, 0.2]])]).mAP == 0.0

    def test_duplicate_after_hit(self):
        gt = [0.5, 0.5, 0.2, 0.2]
        dets = [Detection(0, 0, 0.9, Box(*gt)), Detection(0, 0, 0.8, Box(*gt))]
        res = average_precision(dets, [scene(0, [0], [gt])], [0.5])
        assert res.mAP == 1.0 == oracle_ap([True, False], 1)

    def test_duplicate_before_hit(self):
        gt = [0.5, 0.5, 0.2, 0.2]
        dets = [Detection(0, 0, 0.9, Box(0.1, 0.1, 0.05, 0.05)), Detection(0, 0, 0.8, Box(*gt))]
        res = average_precision(dets, [scene(0, [0], [gt])], [0.5])
        assert res.mAP == pytest.approx(0.5) == pytest.approx(oracle_ap([False, True], 1))

    def test_class_without_ground_truth_excluded(self):
        gt = [0.5, 0.5, 0.2, 0.2]
        dets = [Detection(0, 0, 0.9, Box(*gt)), Detection(0, 3, 0.9, Box(*gt))]
        res = average_precision(dets, [scene(0, [0], [gt])])
        assert res.classes == [0] and res.mAP == 1.0

    @pytest.mark.parametrize("seed", range(50))
    def test_interpolation_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        flags = rng.random(int(rng.integers(1, 30))) < 0.5
        n_gt = int(flags.sum() + rng.integers(0, 4)) or 1
        assert interpolated_ap(flags, n_gt) == pytest.approx(oracle_ap(flags.tolist(), n_gt),
                                                             abs=1e-12)

    @pytest.mark.parametrize("seed", range(30))
    def test_adding_correct_detection_never_hurts(self, seed):
        rng = np.random.default_rng(seed)
        scenes = [scene(i, rng.integers(0, 2, 3),
                        np.column_stack([rng.uniform(0.2, 0.8, (3, 2)), rng.uniform(0.1, 0.3, (3, 2))]))
                  for i in range(3)]
        dets = random_dets(rng, 10)
        before = average_precision(dets, scenes)
        # a perfect detection of a ground truth nothing else matches at any threshold
        s = scenes[0]
        covered = [d for d in dets if d.scene_id == 0 and d.class_id == s.gt_classes[0]
                   and iou(d.box, Box(*s.gt_boxes[0])) >= 0.5]
        if covered:
            pytest.skip("ground truth already hit")
        extra = Detection(0, int(s.gt_classes[0]), 1.0, Box(*s.gt_boxes[0]))
        after = average_precision(dets + [extra], scenes)
        assert (after.table >= before.table - 1e-12).all()

    def test_nms_is_noop_without_duplicates(self):
        scenes = [scene(0, [0, 0], [[0.2, 0.2, 0.1, 0.1], [0.7, 0.7, 0.1, 0.1]])]
        dets = [Detection(0, 0, 0.9, Box(0.2, 0.2, 0.1, 0.1)),
                Detection(0, 0, 0.4, Box(0.72, 0.7, 0.1, 0.1))]
        assert duplicate_rate(dets) == 0
        assert average_precision(dets, scenes).mAP == average_precision(nms(dets), scenes).mAP


class TestDump:
    def test_round_trip(self, tmp_path, rng):
        dets = Detections.from_records(random_dets(rng, 20))
        write_detections(dets, tmp_path / "d.csv")
        back = read_detections(tmp_path / "d.csv")
        assert back.records() == dets.records()
        assert (tmp_path / "d.csv").read_text().splitlines()[0] == \
            "scene_id,class_id,score,cx,cy,w,h"

    def test_missing_header(self, tmp_path):
        (tmp_path / "d.csv").write_text("1,2,3\n")
        with pytest.raises(ValueError, match="header"):
            read_detections(tmp_path / "d.csv")

    def test_score_validated(self):
        with pytest.raises(ValueError):
            Detection(0, 0, 1.5, Box(0, 0, 1, 1))
