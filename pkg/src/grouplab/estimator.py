"""Scikit-learn style detector wrapping the group decoder and its training loop.

``X`` is always a sequence of :class:`~grouplab.scenes.Scene`. The decoder only
ever sees ``scene.memory``; ground truth is read exclusively for matching and
the loss during :meth:`SetPredictionDetector.fit`.
"""
from __future__ import annotations

import logging
import math
import time

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import diffcore as dc
from .assign import group_wise_assign, hungarian, one_to_many_assign, split_groups
from .evalkit import Detections, average_precision, duplicate_rate, nms
from .groupdecoder import GroupConfig, GroupDecoder
from .matchcost import CostWeights, batch_set_loss, cost_matrix
from .querystats import mean_matching_distance, perturbation_distance

logger = logging.getLogger(__name__)

STRATEGIES = ("one_to_one", "one_to_many", "group_wise")
METRIC_FIELDS = ["epoch", "lr", "loss", "map_no_nms", "map_nms", "duplicate_rate", "pd", "md",
                 "seconds"]


class TrainingDiverged(RuntimeError):
    pass


def check_scenes(X, d_model=None, memory_tokens=None, need_targets=False):
    """Validate a scene sequence; returns it as a list."""
    if X is None or isinstance(X, (str, bytes)):
        raise TypeError("X must be a sequence of scenes")
    scenes = list(X)
    if not scenes:
        raise ValueError("X contains no scenes")
    for i, s in enumerate(scenes):
        mem = getattr(s, "memory", None)
        if mem is None:
            raise TypeError(f"X[{i}] has no memory grid")
        mem = np.asarray(mem)
        if mem.ndim != 2 or not np.isfinite(mem).all():
            raise ValueError(f"X[{i}]: memory must be a finite 2-d array, got shape {mem.shape}")
        if memory_tokens is not None and d_model is not None and mem.shape != (memory_tokens, d_model):
            raise ValueError(f"X[{i}]: memory shape {mem.shape} does not match "
                             f"({memory_tokens}, {d_model})")
        if need_targets:
            gc, gb = np.asarray(s.gt_classes), np.asarray(s.gt_boxes).reshape(-1, 4)
            if len(gc) != len(gb):
                raise ValueError(f"X[{i}]: {len(gc)} classes but {len(gb)} boxes")
    return scenes


class SetPredictionDetector(BaseEstimator):
    """End-to-end set-prediction detector trained with a chosen label-assignment strategy.

    ``strategy``: ``"one_to_one"`` (Hungarian over N queries), ``"one_to_many"``
    (rank-greedy, ``multiplicity`` queries per object) or ``"group_wise"``
    (``num_groups`` groups of N queries, Hungarian inside each group).
    Inference always decodes one group (``inference_group``, default 0).
    """

    def __init__(self, strategy="one_to_one", num_groups=1, multiplicity=1, num_queries=20,
                 num_classes=4, d_model=64, heads=4, layers=2, ffn_dim=128, memory_tokens=64,
                 epochs=30, batch_size=32, learning_rate=1e-3, lr_drop_epoch=None,
                 weight_decay=1e-4, mu_cls=2.0, l1_weight=5.0, giou_weight=2.0,
                 focal_alpha=0.25, focal_gamma=2.0, score_threshold=0.05, nms_threshold=0.5,
                 diagnostic_scenes=200, inference_group=0, random_state=0):
        self.strategy = strategy
        self.num_groups = num_groups
        self.multiplicity = multiplicity
        self.num_queries = num_queries
        self.num_classes = num_classes
        self.d_model = d_model
        self.heads = heads
        self.layers = layers
        self.ffn_dim = ffn_dim
        self.memory_tokens = memory_tokens
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_drop_epoch = lr_drop_epoch
        self.weight_decay = weight_decay
        self.mu_cls = mu_cls
        self.l1_weight = l1_weight
        self.giou_weight = giou_weight
        self.focal_alpha = focal_alpha
        self.focal_gamma = focal_gamma
        self.score_threshold = score_threshold
        self.nms_threshold = nms_threshold
        self.diagnostic_scenes = diagnostic_scenes
        self.inference_group = inference_group
        self.random_state = random_state

    # -- configuration ------------------------------------------------------------

    def _validate_params(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.strategy != "group_wise" and self.num_groups != 1:
            raise ValueError(f"num_groups={self.num_groups} requires strategy='group_wise'")
        if self.strategy != "one_to_many" and self.multiplicity != 1:
            raise ValueError(f"multiplicity={self.multiplicity} requires strategy='one_to_many'")
        if self.num_groups < 1 or self.multiplicity < 1:
            raise ValueError("num_groups and multiplicity must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        drop = self.drop_epoch
        if drop is not None and not 0 <= drop < self.epochs:
            raise ValueError(f"lr_drop_epoch {drop} must lie in [0, epochs={self.epochs})")

    @property
    def drop_epoch(self):
        """Zero-based epoch from which the learning rate is divided by 10."""
        if self.lr_drop_epoch is not None:
            return self.lr_drop_epoch
        return min(math.ceil(11 * self.epochs / 12), self.epochs - 1) if self.epochs > 1 else None

    def group_config(self):
        return GroupConfig(num_groups=self.num_groups, num_queries=self.num_queries,
                           num_classes=self.num_classes, d_model=self.d_model, heads=self.heads,
                           layers=self.layers, memory_tokens=self.memory_tokens,
                           ffn_dim=self.ffn_dim)

    def cost_weights(self):
        return CostWeights(self.mu_cls, self.l1_weight, self.giou_weight,
                           self.focal_alpha, self.focal_gamma)

    # -- training -----------------------------------------------------------------

    def _assign(self, probs, boxes, scene):
        """Label assignment for one scene given detached predictions over all queries."""
        cost = cost_matrix(probs, boxes, scene.gt_classes, scene.gt_boxes, self.cost_weights())
        if self.strategy == "one_to_one":
            return [hungarian(cost)]
        if self.strategy == "group_wise":
            return group_wise_assign(split_groups(cost, self.num_groups))
        return one_to_many_assign(cost, self.multiplicity)

    def _train_step(self, batch):
        model = self.model_
        model.zero_grad()
        out = model(np.stack([s.memory for s in batch]))
        assignments = [self._assign(out.probs.data[b], out.boxes.data[b], s)
                       for b, s in enumerate(batch)]
        loss = batch_set_loss(out.probs, out.boxes, [s.targets for s in batch],
                              assignments, self.cost_weights())
        value = float(loss.data)
        if not np.isfinite(value):
            return value
        dc.backward(loss)
        self.optimizer_.step()
        return value

    def fit(self, X, y=None, eval_set=None, callback=None):
        """Train on scenes ``X``. ``y`` is ignored (targets live on the scenes).

        After every epoch, metrics on ``eval_set`` (if given) are appended to
        ``history_`` and ``callback(epoch, self)`` is invoked.
        """
        self._validate_params()
        scenes = check_scenes(X, self.d_model, self.memory_tokens, need_targets=True)
        eval_scenes = None
        if eval_set is not None:
            eval_scenes = check_scenes(eval_set, self.d_model, self.memory_tokens, need_targets=True)
        most = max(len(s.gt_classes) for s in scenes)
        if most * self.multiplicity > self.num_queries:
            raise ValueError(f"a training scene has {most} objects; {self.num_queries} queries "
                             f"cannot give each {self.multiplicity} positives")
        self.model_ = GroupDecoder(self.group_config(), seed=self.random_state)
        self.optimizer_ = dc.AdamW(self.model_.parameters(), lr=self.learning_rate,
                                   weight_decay=self.weight_decay)
        self.history_ = []
        rng = np.random.default_rng([self.random_state, 1])
        for epoch in range(self.epochs):
            started = time.perf_counter()
            lr = dc.step_lr(self.learning_rate, epoch, self.drop_epoch)
            self.optimizer_.state.lr = lr
            order = rng.permutation(len(scenes))
            losses = []
            for start in range(0, len(order), self.batch_size):
                batch = [scenes[i] for i in order[start:start + self.batch_size]]
                value = self._train_step(batch)
                if not np.isfinite(value):
                    self.epochs_completed_ = epoch
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}")
                losses.append(value)
            row = {"epoch": epoch + 1, "lr": lr, "loss": float(np.mean(losses))}
            if eval_scenes is not None:
                row.update(self.evaluate(eval_scenes))
                row.update(self.query_distances(eval_scenes[:self.diagnostic_scenes]))
            row["seconds"] = time.perf_counter() - started
            self.history_.append(row)
            self.epochs_completed_ = epoch + 1
            logger.info("epoch %d %s", epoch + 1,
                        " ".join(f"{k}={v:.4g}" for k, v in row.items() if k != "epoch"))
            if callback is not None:
                callback(epoch + 1, self)
        return self

    # -- inference ------------------------------------------------------------------

    def decode(self, X, groups=None, batch_size=128):
        """Detached outputs ``(probs, boxes)`` of shape (S, Q, C) and (S, Q, 4)."""
        check_is_fitted(self, "model_")
        scenes = check_scenes(X, self.d_model, self.memory_tokens)
        probs, boxes = [], []
        for start in range(0, len(scenes), batch_size):
            mem = np.stack([s.memory for s in scenes[start:start + batch_size]])
            out = self.model_(mem, groups=groups)
            probs.append(out.probs.data)
            boxes.append(out.boxes.data)
        return np.concatenate(probs), np.concatenate(boxes)

    def predict(self, X, group=None, apply_nms=False):
        """One detection per query of the inference group: its best class and box.

        Detections below ``score_threshold`` are dropped.
        """
        check_is_fitted(self, "model_")
        group = self.inference_group if group is None else group
        if not 0 <= group < self.model_.config.num_groups:
            raise ValueError(f"group {group} out of range for "
                             f"{self.model_.config.num_groups} groups")
        scenes = list(X)
        probs, boxes = self.decode(scenes, groups=[group])
        cls = probs.argmax(axis=-1)
        score = np.take_along_axis(probs, cls[..., None], axis=-1)[..., 0]
        sid = np.repeat([int(s.scene_id) for s in scenes], probs.shape[1])
        dets = Detections(sid, cls.ravel(), score.ravel(), boxes.reshape(-1, 4))
        dets = dets[dets.scores >= self.score_threshold]
        return nms(dets, self.nms_threshold) if apply_nms else dets

    def evaluate(self, X, group=None):
        scenes = list(X)
        dets = self.predict(scenes, group=group)
        raw = average_precision(dets, scenes)
        suppressed = average_precision(nms(dets, self.nms_threshold), scenes)
        return {"map_no_nms": raw.mAP, "map_nms": suppressed.mAP,
                "duplicate_rate": duplicate_rate(dets, self.score_threshold, self.nms_threshold)}

    def score(self, X, y=None):
        """mAP@[.5:.95] of the inference group without NMS."""
        scenes = list(X)
        return average_precision(self.predict(scenes), scenes).mAP

    # -- diagnostics ----------------------------------------------------------------

    @property
    def positions_(self):
        """Reference points per group, shape (K, N, 2)."""
        check_is_fitted(self, "model_")
        cfg = self.model_.config
        return self.model_.queries.reference_points().reshape(cfg.num_groups, cfg.num_queries, 2)

    def group_assignments(self, X):
        """Per-scene, per-group Hungarian assignments of the current model on ``X``."""
        scenes = list(X)
        probs, boxes = self.decode(scenes)
        K = self.model_.config.num_groups
        out = []
        for b, s in enumerate(scenes):
            cost = cost_matrix(probs[b], boxes[b], s.gt_classes, s.gt_boxes, self.cost_weights())
            out.append(group_wise_assign(split_groups(cost, K)))
        return out

    def query_distances(self, X):
        """PD of the reference points and MD averaged over ``X``; NaN for a single group."""
        if self.model_.config.num_groups < 2:
            return {"pd": float("nan"), "md": float("nan")}
        pos = self.positions_
        return {"pd": perturbation_distance(pos),
                "md": mean_matching_distance(pos, self.group_assignments(X))}

    # -- persistence ----------------------------------------------------------------

    def save(self, path):
        check_is_fitted(self, "model_")
        self.model_.save(path, extra={"estimator": self.get_params(),
                                      "history": getattr(self, "history_", [])})

    @classmethod
    def load(cls, path):
        model, extra = GroupDecoder.load(path, with_extra=True)
        est = cls(**extra.get("estimator", {}))
        if est.group_config() != model.config:
            raise ValueError(f"{path}: estimator parameters do not match the stored decoder config")
        est.model_ = model
        est.history_ = extra.get("history", [])
        return est
