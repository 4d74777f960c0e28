"""Toy detection-transformer decoder driven by K groups of N object queries.

Groups are stacked along the query axis (group ``g`` owns rows
``g*N .. (g+1)*N-1``). Self-attention is block-diagonal so groups never see
each other; every other operation is row-wise, so a group's output depends
only on its own queries, the memory, and the shared weights.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc

CHECKPOINT_FORMAT = "grouplab-checkpoint"
CHECKPOINT_VERSION = 1
PRIOR_PROB = 0.01
INIT_SIZE = 0.2


@dataclass(frozen=True)
class GroupConfig:
    num_groups: int = 1
    num_queries: int = 20
    num_classes: int = 4
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    memory_tokens: int = 64
    ffn_dim: int = 128

    def __post_init__(self):
        if self.num_groups < 1 or self.num_queries < 1:
            raise ValueError("num_groups and num_queries must be >= 1")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.d_model % 4:
            raise ValueError("d_model must be a multiple of 4 for the sine position embedding")
        grid = math.isqrt(self.memory_tokens)
        if grid * grid != self.memory_tokens:
            raise ValueError(f"memory_tokens must be a square grid, got {self.memory_tokens}")

    @property
    def total_queries(self):
        return self.num_groups * self.num_queries

    @property
    def grid(self):
        return math.isqrt(self.memory_tokens)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def build_group_mask(num_groups, num_queries):
    """Block-diagonal (K*N, K*N) boolean mask; True means attendable."""
    if num_groups < 1 or num_queries < 1:
        raise ValueError("num_groups and num_queries must be >= 1")
    groups = np.repeat(np.arange(num_groups), num_queries)
    return groups[:, None] == groups[None, :]


def _phase_matrix(d_model):
    """(2, d_model/2) map from (x, y) to per-axis phases at geometric frequencies."""
    freqs = 2 * np.pi * np.geomspace(0.5, 8.0, d_model // 4)
    F = len(freqs)
    W = np.zeros((2, 2 * F))
    W[0, :F] = freqs
    W[1, F:] = freqs
    return W


def sine_embedding(points, d_model):
    """(..., 2) positions in [0, 1] -> (..., d_model) features [sin(phase), cos(phase)].

    Differentiable when ``points`` is taped.
    """
    phase = dc.matmul(points, _phase_matrix(d_model))
    return dc.concat([dc.sin(phase), dc.cos(phase)], axis=-1)


@dataclass
class QuerySet:
    """Learnable query content (K*N, d) and anchor logits (K*N, 2)."""

    content: dc.Tensor
    anchors: dc.Tensor

    def reference_points(self):
        return 1.0 / (1.0 + np.exp(-self.anchors.data))

    def group_rows(self, group, num_queries):
        return slice(group * num_queries, (group + 1) * num_queries)


@dataclass
class DecoderOutput:
    probs: dc.Tensor  # (B, Q, C)
    boxes: dc.Tensor  # (B, Q, 4) center-size
    reference_points: np.ndarray  # (Q, 2)
    num_groups: int

    @property
    def num_queries(self):
        return self.probs.shape[-2] // self.num_groups


class GroupDecoder:
    """Shared-weight decoder. ``queries`` hold all K groups; everything else is shared."""

    def __init__(self, config=GroupConfig(), seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.params = {}
        cfg = config
        d, f = cfg.d_model, cfg.ffn_dim

        def dense(name, n_in, n_out, scale=None):
            limit = math.sqrt(6.0 / (n_in + n_out)) if scale is None else scale
            self._add(f"{name}.w", rng.uniform(-limit, limit, (n_in, n_out)))
            self._add(f"{name}.b", np.zeros(n_out))

        self._add("query.content", rng.standard_normal((cfg.total_queries, d)))
        anchors = rng.uniform(0.05, 0.95, (cfg.total_queries, 2))
        self._add("query.anchor", np.log(anchors / (1 - anchors)))
        for layer in range(cfg.layers):
            for block in ("self", "cross"):
                for proj in ("q", "k", "v", "o"):
                    dense(f"layer{layer}.{block}.{proj}", d, d)
            dense(f"layer{layer}.ffn1", d, f)
            dense(f"layer{layer}.ffn2", f, d)
            for ln in range(3):
                self._add(f"layer{layer}.ln{ln}.gamma", np.ones(d))
                self._add(f"layer{layer}.ln{ln}.beta", np.zeros(d))
        dense("class_head", d, cfg.num_classes)
        self.params["class_head.b"].data[:] = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
        dense("box_head1", d, d)
        dense("box_head2", d, 4, scale=1e-3)
        self.params["box_head2.b"].data[2:] = math.log(INIT_SIZE / (1 - INIT_SIZE))

        grid = (np.arange(cfg.grid) + 0.5) / cfg.grid
        xs, ys = np.meshgrid(grid, grid)
        self._memory_pos = _sine_np(np.stack([xs.ravel(), ys.ravel()], axis=1), d)

    def _add(self, name, value):
        self.params[name] = dc.Tensor(value, requires_grad=True, name=name)

    # -- parameter bookkeeping ------------------------------------------------

    @property
    def queries(self):
        return QuerySet(self.params["query.content"], self.params["query.anchor"])

    def parameters(self):
        return list(self.params.values())

    def parameter_count(self, include_queries=True):
        return sum(p.size for name, p in self.params.items()
                   if include_queries or not name.startswith("query."))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # -- forward ----------------------------------------------------------------

    def _attend(self, prefix, q_in, k_in, v_in, mask=None):
        cfg, P = self.config, self.params
        H, dh = cfg.heads, cfg.d_model // cfg.heads

        def heads(x, name):
            y = dc.matmul(x, P[f"{prefix}.{name}.w"]) + P[f"{prefix}.{name}.b"]
            B, L = y.shape[0], y.shape[1]
            return dc.transpose(dc.reshape(y, (B, L, H, dh)), (0, 2, 1, 3))

        q, k, v = heads(q_in, "q"), heads(k_in, "k"), heads(v_in, "v")
        scores = (q @ dc.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        attn = dc.masked_softmax(scores, mask)
        out = dc.transpose(attn @ v, (0, 2, 1, 3))
        B, L = out.shape[0], out.shape[1]
        out = dc.reshape(out, (B, L, cfg.d_model))
        return out @ P[f"{prefix}.o.w"] + P[f"{prefix}.o.b"]

    def _norm(self, name, x):
        return dc.layer_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"])

    def forward(self, memory, groups=None):
        """Decode a batch. ``memory`` is (B, T, d) or (T, d).

        ``groups`` restricts decoding to a subset of query groups (inference
        uses ``[0]``); by default all K groups run in parallel.
        """
        cfg, P = self.config, self.params
        memory = np.asarray(memory, dtype=np.float64)
        if memory.ndim == 2:
            memory = memory[None]
        if memory.shape[1:] != (cfg.memory_tokens, cfg.d_model):
            raise ValueError(f"memory shape {memory.shape[1:]} does not match config "
                             f"({cfg.memory_tokens}, {cfg.d_model})")
        groups = list(range(cfg.num_groups)) if groups is None else list(groups)
        N = cfg.num_queries
        rows = np.concatenate([np.arange(g * N, (g + 1) * N) for g in groups])
        content = P["query.content"][rows]
        anchor = P["query.anchor"][rows]
        ref = dc.sigmoid(anchor)
        qpos = sine_embedding(ref, cfg.d_model)
        mask = build_group_mask(len(groups), N)
        keys = memory + self._memory_pos
        B = memory.shape[0]

        x = content + np.zeros((B,) + content.shape)
        for layer in range(cfg.layers):
            pre = f"layer{layer}"
            h = x + qpos
            x = self._norm(f"{pre}.ln0", x + self._attend(f"{pre}.self", h, h, x, mask))
            x = self._norm(f"{pre}.ln1", x + self._attend(f"{pre}.cross", x + qpos, keys, memory))
            hidden = dc.relu(x @ P[f"{pre}.ffn1.w"] + P[f"{pre}.ffn1.b"])
            x = self._norm(f"{pre}.ln2", x + (hidden @ P[f"{pre}.ffn2.w"] + P[f"{pre}.ffn2.b"]))
            if not np.isfinite(x.data).all():
                raise FloatingPointError(f"non-finite activation in decoder layer {layer}")

        probs = dc.sigmoid(x @ P["class_head.w"] + P["class_head.b"])
        hb = dc.relu(x @ P["box_head1.w"] + P["box_head1.b"])
        raw = hb @ P["box_head2.w"] + P["box_head2.b"]
        centers = dc.sigmoid(raw[..., :2] + anchor)
        sizes = dc.sigmoid(raw[..., 2:])
        boxes = dc.concat([centers, sizes], axis=-1)
        return DecoderOutput(probs, boxes, ref.data.copy(), len(groups))

    __call__ = forward

    # -- persistence --------------------------------------------------------------

    def save(self, path, extra=None):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        entries, offset = [], 0
        for name, p in self.params.items():
            entries.append({"name": name, "shape": list(p.shape), "offset": offset})
            offset += p.size
        header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                  "dtype": "<f8", "config": dataclasses.asdict(self.config),
                  "params": entries, "extra": extra or {}}
        with open(path, "wb") as f:
            f.write(json.dumps(header).encode() + b"\n")
            for p in self.params.values():
                f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path, with_extra=False):
        header, payload = read_checkpoint(path)
        model = cls(GroupConfig.from_dict(header["config"]))
        for entry in header["params"]:
            if entry["name"] not in model.params:
                raise ValueError(f"{path}: unknown parameter {entry['name']}")
            n = math.prod(entry["shape"])
            value = payload[entry["offset"]:entry["offset"] + n].reshape(entry["shape"])
            target = model.params[entry["name"]]
            if target.shape != value.shape:
                raise ValueError(f"{path}: parameter {entry['name']} has shape {value.shape}, "
                                 f"config expects {target.shape}")
            target.data = value.copy()
        return (model, header.get("extra", {})) if with_extra else model


def read_checkpoint(path):
    """Parse the checkpoint file: one JSON header line, then raw little-endian float64."""
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    header = json.loads(raw[:newline])
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} file")
    payload = np.frombuffer(raw[newline + 1:], dtype="<f8")
    expected = sum(math.prod(e["shape"]) for e in header["params"])
    if payload.size != expected:
        raise ValueError(f"{path}: payload holds {payload.size} values, header declares {expected}")
    return header, payload


def _sine_np(points, d_model):
    phase = points @ _phase_matrix(d_model)
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


def decode(queries, memory, model, groups=None):
    """Functional entry point: run ``model`` with an explicit query set."""
    saved = model.params["query.content"], model.params["query.anchor"]
    model.params["query.content"], model.params["query.anchor"] = queries.content, queries.anchors
    try:
        return model.forward(memory, groups)
    finally:
        model.params["query.content"], model.params["query.anchor"] = saved


def inference_slice(out, group=0):
    """Rows of one group (default the first) as a single-group output."""
    N = out.num_queries
    if not 0 <= group < out.num_groups:
        raise ValueError(f"group {group} out of range for {out.num_groups} groups")
    rows = slice(group * N, (group + 1) * N)
    return DecoderOutput(out.probs[:, rows], out.boxes[:, rows],
                         out.reference_points[rows], 1)
