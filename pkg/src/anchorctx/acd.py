"""Anchor-context detection: RoI pooling, anchor-keyed attention over space
and time, and a linear classification head.

The attention score between an anchor vector ``i`` and a position feature
``f`` is ``exp(<i W_theta, f W_phi> / sqrt(D))``; normalising by the sum
over positions turns the weighted sum of ``g(f) = f W_g`` into a softmax
average. The head sees two slots whose contents depend on which
interactions are enabled:

=========  ====================  ====================
mode       slot 1                slot 2
=========  ====================  ====================
none       anchor vector i_t     frame mean of f_t
spatial    a_t                   frame mean of f_t
temporal   anchor vector i_t     b_t
both       a_t                   b_t
=========  ====================  ====================
"""

from __future__ import annotations

import math
from collections import deque
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .dataset import AnchorDetection, Box, FrameRecord, filter_anchors, group_videos
from .errors import ConfigurationError, DimensionError, ValidationError
from .metrics import greedy_assign
from .nn import cross_entropy, make_optimizer

MODES = ("none", "spatial", "temporal", "both")
_MASK = -1e9


# -- RoI pooling ----------------------------------------------------------------


def _bilinear(fmap: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``fmap[C,H,W]`` at continuous grid coords (cell centres at k + 0.5)."""
    _, H, W = fmap.shape
    gx = np.clip(xs - 0.5, 0.0, W - 1)
    gy = np.clip(ys - 0.5, 0.0, H - 1)
    x0 = np.floor(gx).astype(int)
    y0 = np.floor(gy).astype(int)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = gx - x0
    wy = gy - y0
    top = fmap[:, y0, x0] * (1 - wx) + fmap[:, y0, x1] * wx
    bot = fmap[:, y1, x0] * (1 - wx) + fmap[:, y1, x1] * wx
    return top * (1 - wy) + bot * wy


def roi_align(fmap: np.ndarray, box: Box, P: int = 7) -> np.ndarray:
    """[C,P,P] grid of bilinear samples at the centres of a PxP split of ``box``."""
    if P < 1:
        raise ConfigurationError(f"RoIAlign grid must be >= 1, got {P}")
    x1, y1, x2, y2 = (float(v) for v in box)
    if not (x2 > x1 and y2 > y1):
        raise ValidationError(f"degenerate RoI box {box}")
    _, H, W = fmap.shape
    if x1 < 0 or y1 < 0 or x2 > W or y2 > H:
        raise ValidationError(f"RoI box {box} outside grid {W}x{H}")
    cx = x1 + (np.arange(P) + 0.5) * (x2 - x1) / P
    cy = y1 + (np.arange(P) + 0.5) * (y2 - y1) / P
    xs, ys = np.meshgrid(cx, cy)
    return _bilinear(np.asarray(fmap, dtype=np.float64), xs, ys)


@dataclass
class AnchorFeature:
    anchor_box: Box
    pooled: np.ndarray
    vector: np.ndarray


def anchor_feature(fmap: np.ndarray, box: Box, P: int = 7) -> AnchorFeature:
    pooled = roi_align(fmap, box, P)
    return AnchorFeature(tuple(box), pooled, pooled.mean(axis=(1, 2)))


class MemoryBank:
    """The last ``L`` feature maps of one video, oldest first."""

    def __init__(self, L: int):
        if L < 1:
            raise ConfigurationError(f"memory length must be >= 1, got {L}")
        self.L = L
        self._frames: deque[np.ndarray] = deque(maxlen=L)

    def push(self, fmap: np.ndarray) -> None:
        self._frames.append(np.asarray(fmap, dtype=np.float64))

    def frames(self) -> list[np.ndarray]:
        return list(self._frames)

    def __len__(self) -> int:
        return len(self._frames)


# -- parameters -----------------------------------------------------------------


@dataclass
class AcdConfig:
    P: int = 7
    D: int = 32
    L: int = 10
    mode: str = "both"
    norm: str = "softmax"
    lr: float = 0.1
    epochs: int = 20
    batch_size: int = 32
    optimizer: str = "sgd"
    momentum: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"interactions must be one of {MODES}, got {self.mode!r}")
        if self.norm not in ("softmax", "count"):
            raise ConfigurationError(f"attention_norm must be softmax or count, got {self.norm!r}")
        if self.D < 1 or self.L < 1 or self.P < 1:
            raise ConfigurationError("D, L and P must be >= 1")


@dataclass
class StabParams:
    theta_proj: Tensor
    phi_proj: Tensor
    g_proj: Tensor
    head_weights: Tensor
    head_bias: Tensor
    L: int = 10
    mode: str = "both"
    norm: str = "softmax"

    @property
    def C(self) -> int:
        return self.theta_proj.shape[0]

    @property
    def D(self) -> int:
        return self.theta_proj.shape[1]

    @property
    def K(self) -> int:
        return self.head_bias.shape[0]

    def named(self) -> dict[str, Tensor]:
        return {
            "theta_proj": self.theta_proj,
            "phi_proj": self.phi_proj,
            "g_proj": self.g_proj,
            "head_weights": self.head_weights,
            "head_bias": self.head_bias,
        }

    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.named().items()}
        out["meta.L"] = np.array(float(self.L))
        out["meta.mode"] = np.array(float(MODES.index(self.mode)))
        out["meta.norm"] = np.array(0.0 if self.norm == "softmax" else 1.0)
        return out

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "StabParams":
        return cls(
            ag.parameter(state["theta_proj"], "theta_proj"),
            ag.parameter(state["phi_proj"], "phi_proj"),
            ag.parameter(state["g_proj"], "g_proj"),
            ag.parameter(state["head_weights"], "head_weights"),
            ag.parameter(state["head_bias"], "head_bias"),
            L=int(state["meta.L"]),
            mode=MODES[int(state["meta.mode"])],
            norm="softmax" if float(state["meta.norm"]) == 0.0 else "count",
        )


def head_input_dim(C: int, D: int, mode: str) -> int:
    return {"none": 2 * C, "spatial": D + C, "temporal": C + D, "both": 2 * D}[mode]


def init_stab(C: int, K: int, cfg: AcdConfig, rng: np.random.Generator) -> StabParams:
    cfg.validate()
    D = cfg.D
    proj = lambda: rng.normal(0.0, 1.0 / math.sqrt(C), size=(C, D))  # noqa: E731
    # key and query projections start equal so matching content starts out attracting
    theta = proj()
    phi, g = theta.copy(), proj()
    n_in = head_input_dim(C, D, cfg.mode)
    w = rng.normal(0.0, 0.1 / math.sqrt(n_in), size=(n_in, K))
    return StabParams(
        ag.parameter(theta, "theta_proj"),
        ag.parameter(phi, "phi_proj"),
        ag.parameter(g, "g_proj"),
        ag.parameter(w, "head_weights"),
        ag.parameter(np.zeros(K), "head_bias"),
        L=cfg.L,
        mode=cfg.mode,
        norm=cfg.norm,
    )


# -- attention --------------------------------------------------------------------


def attention(query: np.ndarray | Tensor, positions: np.ndarray, params: StabParams,
              mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Anchor-keyed weighted sum over positions.

    query: [B, C] anchor vectors; positions: [B, N, C]; mask: [B, N] bool
    (False = absent). Returns (output [B, D], weights [B, N]).
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 3 or positions.shape[2] != params.C:
        raise DimensionError(f"positions {positions.shape} do not match C={params.C}")
    q_shape = query.shape
    if len(q_shape) != 2 or q_shape[1] != params.C or q_shape[0] != positions.shape[0]:
        raise DimensionError(f"query {q_shape} does not match positions {positions.shape}")
    B, N, _ = positions.shape
    D = params.D
    # <q, f W_phi> = f . (W_phi q) and sum_j w_j f_j W_g = (sum_j w_j f_j) W_g:
    # contracting on the C side keeps the per-position cost at O(C).
    q = ag.matmul(query, params.theta_proj)  # [B, D]
    q_in = ag.matmul(q, ag.transpose(params.phi_proj))  # [B, C]
    scores = ag.reshape(ag.matmul(positions, ag.reshape(q_in, (B, params.C, 1))), (B, N))
    if params.norm == "softmax":
        scores = ag.scale(scores, 1.0 / math.sqrt(D))
        if mask is not None:
            scores = ag.add(scores, np.where(mask, 0.0, _MASK))
        weights = ag.softmax(scores, axis=-1)
    else:
        valid = np.ones((B, N)) if mask is None else mask.astype(np.float64)
        count = np.maximum(valid.sum(axis=1, keepdims=True), 1.0)
        weights = ag.mul(scores, valid / count)
    pooled = ag.reshape(ag.matmul(ag.reshape(weights, (B, 1, N)), positions), (B, params.C))
    out = ag.matmul(pooled, params.g_proj)
    return out, weights


def _positions(fmap: np.ndarray) -> np.ndarray:
    C = fmap.shape[0]
    return np.asarray(fmap, dtype=np.float64).reshape(C, -1).T


def spatial_interaction(f_t: np.ndarray, i_t: np.ndarray, params: StabParams) -> Tensor:
    """a_t for one anchor: attention over every spatial position of ``f_t`` ([C,H,W])."""
    f_t = np.asarray(f_t, dtype=np.float64)
    if f_t.ndim != 3 or f_t.shape[0] != params.C:
        raise DimensionError(f"feature map {f_t.shape} does not match C={params.C}")
    i_t = np.asarray(i_t, dtype=np.float64).reshape(1, -1)
    out, _ = attention(i_t, _positions(f_t)[None], params)
    return ag.reshape(out, (params.D,))


class NoMemory(Exception):
    """Raised by temporal_interaction when the bank is empty."""


def temporal_interaction(memory: MemoryBank | Sequence[np.ndarray], i_t: np.ndarray, params: StabParams) -> Tensor:
    """b_t for one anchor: attention over all positions of all memory frames."""
    frames = memory.frames() if isinstance(memory, MemoryBank) else list(memory)
    if not frames:
        raise NoMemory("empty memory")
    pos = np.concatenate([_positions(f) for f in frames[-params.L:]], axis=0)
    i_t = np.asarray(i_t, dtype=np.float64).reshape(1, -1)
    out, _ = attention(i_t, pos[None], params)
    return ag.reshape(out, (params.D,))


# -- batched instances ----------------------------------------------------------------


@dataclass
class InstanceSet:
    """Anchor instances referencing rows of a shared per-frame feature bank.

    ``bank`` is [F+1, H*W, C] with a trailing all-zero row used as padding
    for absent memory frames.
    """

    bank: np.ndarray
    frame_row: np.ndarray  # [B]
    memory_rows: np.ndarray  # [B, L], -1 for absent
    anchor_vec: np.ndarray  # [B, C]
    labels: np.ndarray  # [B], -1 when unlabelled
    meta: list[dict] = field(default_factory=list)
    frame_keys: list[tuple[str, int]] = field(default_factory=list)  # (video_id, t) per bank row

    def __len__(self) -> int:
        return int(self.frame_row.size)

    def subset(self, idx: np.ndarray) -> "InstanceSet":
        return InstanceSet(self.bank, self.frame_row[idx], self.memory_rows[idx], self.anchor_vec[idx],
                           self.labels[idx], [self.meta[i] for i in idx], self.frame_keys)


def build_instances(frames: Sequence[FrameRecord], L: int, P: int = 7, *, labelled: bool = True,
                    threshold: float = 0.8, match_iou: float = 0.5) -> InstanceSet:
    """Collect anchor instances from ``frames``.

    labelled=True keeps anchors greedily matched (by detector score) to a
    ground-truth action at IoU >= match_iou, labelled with its class.
    labelled=False keeps every anchor scoring above ``threshold``.
    """
    videos = group_videos(frames)
    maps, row_of = [], {}
    for vid, fs in videos.items():
        for f in fs:
            row_of[(vid, f.t)] = len(maps)
            maps.append(_positions(f.feature_map))
    if not maps:
        raise ConfigurationError("no frames to build instances from")
    bank = np.stack(maps + [np.zeros_like(maps[0])])
    pad = len(maps)

    frame_row, mem_rows, vecs, labels, meta = [], [], [], [], []
    for vid, fs in videos.items():
        for f in fs:
            if labelled:
                anchors = sorted(f.anchors, key=lambda a: -a.score)
                assign = greedy_assign([a.box for a in anchors], [b for b, _ in f.ground_truth], match_iou)
                picked = [(a, f.ground_truth[j][1]) for a, j in zip(anchors, assign) if j >= 0]
            else:
                picked = [(a, -1) for a in filter_anchors(f, threshold)]
            mem = [row_of[(vid, s)] for s in range(f.t - L, f.t) if (vid, s) in row_of]
            mem = [pad] * (L - len(mem)) + mem
            mem = [m if m != pad else -1 for m in mem]
            for a, cls in picked:
                frame_row.append(row_of[(vid, f.t)])
                mem_rows.append(mem)
                vecs.append(anchor_feature(f.feature_map, a.box, P).vector)
                labels.append(cls)
                meta.append({"video_id": vid, "t": f.t, "box": list(a.box), "score": a.score})
    C = bank.shape[2]
    return InstanceSet(
        bank,
        np.asarray(frame_row, dtype=np.int64),
        np.asarray(mem_rows, dtype=np.int64).reshape(-1, L),
        np.asarray(vecs, dtype=np.float64).reshape(-1, C),
        np.asarray(labels, dtype=np.int64),
        meta,
        list(row_of),
    )


def _memory_block(inst: InstanceSet, L: int):
    rows = inst.memory_rows[:, -L:]
    B = rows.shape[0]
    HW, C = inst.bank.shape[1:]
    present = rows >= 0
    block = inst.bank[np.where(present, rows, -1)].reshape(B, L * HW, C)
    mask = np.repeat(present, HW, axis=1)
    return block, mask, present.any(axis=1)


def summary_features(inst: InstanceSet, params: StabParams) -> Tensor:
    """Head input for every instance in ``inst`` ([B, head_input_dim])."""
    frame_pos = inst.bank[inst.frame_row]  # [B, HW, C]
    slot1: Tensor | np.ndarray
    slot2: Tensor | np.ndarray
    if params.mode in ("spatial", "both"):
        slot1, _ = attention(inst.anchor_vec, frame_pos, params)
    else:
        slot1 = inst.anchor_vec
    if params.mode in ("temporal", "both"):
        block, mask, has_mem = _memory_block(inst, params.L)
        b, _ = attention(inst.anchor_vec, block, params, mask)
        slot2 = ag.mul(b, has_mem.astype(np.float64)[:, None])
    else:
        slot2 = frame_pos.mean(axis=1)
    return ag.concat([slot1, slot2], axis=-1)


def logits_for(inst: InstanceSet, params: StabParams) -> Tensor:
    x = summary_features(inst, params)
    return ag.add(ag.matmul(x, params.head_weights), params.head_bias)


def acd_forward(frame: FrameRecord, anchor: AnchorDetection, memory: MemoryBank | Sequence[np.ndarray] | None,
                params: StabParams, P: int = 7) -> tuple[Box, Tensor]:
    """(box, logits[K]) for one anchor; the action box is the anchor box."""
    vec = anchor_feature(frame.feature_map, anchor.box, P).vector
    pos = _positions(frame.feature_map)
    if params.mode in ("spatial", "both"):
        slot1 = spatial_interaction(frame.feature_map, vec, params)
    else:
        slot1 = ag.tensor(vec)
    if params.mode in ("temporal", "both"):
        try:
            slot2 = temporal_interaction(memory if memory is not None else [], vec, params)
        except NoMemory:
            slot2 = ag.tensor(np.zeros(params.D))
    else:
        slot2 = ag.tensor(pos.mean(axis=0))
    x = ag.reshape(ag.concat([slot1, slot2], axis=-1), (1, -1))
    logits = ag.add(ag.matmul(x, params.head_weights), params.head_bias)
    return tuple(anchor.box), ag.reshape(logits, (params.K,))


def softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_logits(inst: InstanceSet, params: StabParams, batch: int = 256) -> np.ndarray:
    out = []
    with ag.no_grad():
        for s in range(0, len(inst), batch):
            out.append(logits_for(inst.subset(np.arange(s, min(s + batch, len(inst)))), params).data)
    return np.concatenate(out) if out else np.zeros((0, params.K))


def predict_summaries(inst: InstanceSet, params: StabParams, batch: int = 256) -> np.ndarray:
    out = []
    with ag.no_grad():
        for s in range(0, len(inst), batch):
            out.append(summary_features(inst.subset(np.arange(s, min(s + batch, len(inst)))), params).data)
    return np.concatenate(out) if out else np.zeros((0, head_input_dim(params.C, params.D, params.mode)))


# -- training ---------------------------------------------------------------------


def acd_train(inst: InstanceSet, K: int, cfg: AcdConfig, params: StabParams | None = None,
              log=None) -> tuple[StabParams, list[float]]:
    """Minibatch cross-entropy training; returns params and per-epoch mean loss."""
    cfg.validate()
    if len(inst) == 0 or np.all(inst.labels < 0):
        raise ConfigurationError("no matched (anchor, ground-truth) training pairs")
    inst = inst.subset(np.flatnonzero(inst.labels >= 0))
    init_rng = np.random.default_rng([cfg.seed, 1])
    order_rng = np.random.default_rng([cfg.seed, 2])
    if params is None:
        params = init_stab(inst.bank.shape[2], K, cfg, init_rng)
    named = params.named()
    opt = make_optimizer(cfg.optimizer, named, cfg.lr, cfg.momentum)
    curve = []
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(inst))
        total = 0.0
        for s in range(0, len(perm), cfg.batch_size):
            batch = inst.subset(perm[s : s + cfg.batch_size])
            loss = cross_entropy(logits_for(batch, params), batch.labels)
            grads = ag.gradients(loss, named)
            opt.step(grads)
            total += loss.item() * len(batch)
        curve.append(total / len(inst))
        if log is not None:
            log(f"acd epoch {epoch + 1}/{cfg.epochs} loss {curve[-1]:.4f}")
    return params, curve
