"""Toy single-stage anchor-grid detector.

Four conv+relu stages (three stride-2, one stride-1) followed by 1x1 heads for
box offsets, class scores and objectness, YOLO style.  The last backbone stage,
the layer the heads read, is exposed as ``feat`` for feature distillation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .optim import Adam
from .tensor import Tensor

logger = logging.getLogger(__name__)

TARGET_CLASS = 0


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int = 64
    grid: int = 8
    num_classes: int = 2
    channels: tuple[int, ...] = (16, 32, 32, 32)
    anchors: tuple[tuple[float, float], ...] = ((10.0, 22.0), (18.0, 38.0))

    def __post_init__(self):
        if self.input_size % self.grid:
            raise ValueError("input_size must be divisible by grid")
        if len(self.channels) != 4:
            raise ValueError("the backbone has exactly four stages")
        if self.input_size // 8 != self.grid:
            raise ValueError("three stride-2 stages require grid == input_size / 8")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchors)

    @property
    def cell(self) -> float:
        return self.input_size / self.grid


# (stride, kernel) for each backbone stage
_STAGES = ((2, 3), (2, 3), (2, 3), (1, 5))


@dataclass
class DetectorWeights:
    config: DetectorConfig
    params: dict[str, np.ndarray] = field(repr=False)

    @classmethod
    def init(cls, config: DetectorConfig, seed: int = 0) -> "DetectorWeights":
        rng = np.random.default_rng(seed)
        params = {}
        cin = 3
        for i, ((_, k), cout) in enumerate(zip(_STAGES, config.channels)):
            params[f"conv{i}.w"] = rng.normal(0, np.sqrt(2.0 / (cin * k * k)), (cout, cin, k, k))
            params[f"conv{i}.b"] = np.zeros(cout)
            cin = cout
        a, k = config.anchors_per_cell, config.num_classes
        for name, out in (("pos", 4 * a), ("cls", k * a), ("obj", a)):
            params[f"{name}.w"] = rng.normal(0, 0.01, (out, cin, 1, 1))
            params[f"{name}.b"] = np.zeros(out)
        params["obj.b"][:] = -4.0
        return cls(config, params)

    def copy(self) -> "DetectorWeights":
        return DetectorWeights(self.config, {k: v.copy() for k, v in self.params.items()})

    def equals(self, other: "DetectorWeights") -> bool:
        return self.config == other.config and self.params.keys() == other.params.keys() and all(
            np.array_equal(v, other.params[k]) for k, v in self.params.items()
        )


@dataclass
class DetectorOutput:
    """Head outputs.  Batched tensors carry a leading ``N`` axis.

    pos: raw box offsets ``[N, A*4, G, G]`` ordered (tx, ty, tw, th) per anchor
    cls: per-class sigmoid scores ``[N, A*K, G, G]``
    obj: objectness sigmoid ``[N, A, G, G]``
    feat: tapped feature map ``[N, C_f, G, G]``
    """

    pos: Tensor
    cls: Tensor
    obj: Tensor
    feat: Tensor
    config: DetectorConfig
    cls_logits: Tensor | None = None
    obj_logits: Tensor | None = None

    @property
    def batched(self) -> bool:
        return self.obj.ndim == 4

    def __getitem__(self, i: int) -> "DetectorOutput":
        """Single-image view of a batched output (detached)."""
        pick = lambda t: None if t is None else T.constant(t.data[i])  # noqa: E731
        return DetectorOutput(
            pick(self.pos), pick(self.cls), pick(self.obj), pick(self.feat), self.config,
            pick(self.cls_logits), pick(self.obj_logits),
        )

    def detach(self) -> "DetectorOutput":
        d = lambda t: None if t is None else t.detach()  # noqa: E731
        return DetectorOutput(d(self.pos), d(self.cls), d(self.obj), d(self.feat), self.config,
                              d(self.cls_logits), d(self.obj_logits))


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    score: float


def forward(image, weights: DetectorWeights, params: dict[str, Tensor] | None = None) -> DetectorOutput:
    """Run the detector on ``[3, S, S]`` or ``[N, 3, S, S]`` images in ``[0, 1]``.

    ``params`` optionally supplies the weights as tensors (for training).
    """
    cfg = weights.config
    x = image if isinstance(image, Tensor) else T.constant(image)
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1:] != (3, cfg.input_size, cfg.input_size):
        raise ValueError(f"expected image of shape [3, {cfg.input_size}, {cfg.input_size}], got {image.shape}")
    p = params if params is not None else {k: T.constant(v) for k, v in weights.params.items()}
    h = x
    for i, (stride, k) in enumerate(_STAGES):
        h = T.relu(T.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=stride, padding=k // 2))
    feat = h
    pos = T.conv2d(feat, p["pos.w"], p["pos.b"])
    cls_logits = T.conv2d(feat, p["cls.w"], p["cls.b"])
    obj_logits = T.conv2d(feat, p["obj.w"], p["obj.b"])
    out = DetectorOutput(pos, T.sigmoid(cls_logits), T.sigmoid(obj_logits), feat, cfg,
                         cls_logits, obj_logits)
    if single:
        sq = lambda t: T.reshape(t, t.shape[1:])  # noqa: E731
        out = DetectorOutput(sq(out.pos), sq(out.cls), sq(out.obj), sq(out.feat), cfg,
                             sq(cls_logits), sq(obj_logits))
    return out


# ---------------------------------------------------------------- box geometry


def decode_boxes(out: DetectorOutput) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Differentiable corner coordinates ``(x1, y1, x2, y2)``, each shaped like ``obj``."""
    cfg = out.config
    a, g = cfg.anchors_per_cell, cfg.grid
    lead = out.pos.shape[:-3]
    pos = T.reshape(out.pos, lead + (a, 4, g, g))
    sel = lambda j: pos[(Ellipsis, j, slice(None), slice(None))]  # noqa: E731
    gx = np.broadcast_to(np.arange(g)[None, :], (g, g))
    gy = np.broadcast_to(np.arange(g)[:, None], (g, g))
    shape = lead + (a, g, g)
    aw = np.broadcast_to(np.array([w for w, _ in cfg.anchors])[:, None, None], (a, g, g))
    ah = np.broadcast_to(np.array([h for _, h in cfg.anchors])[:, None, None], (a, g, g))
    full = lambda arr: T.constant(np.broadcast_to(arr, shape))  # noqa: E731
    cx = T.scale(T.add(T.sigmoid(sel(0)), full(gx)), cfg.cell)
    cy = T.scale(T.add(T.sigmoid(sel(1)), full(gy)), cfg.cell)
    bw = T.mul(T.exp(T.clip(sel(2), -4.0, 4.0)), full(aw))
    bh = T.mul(T.exp(T.clip(sel(3), -4.0, 4.0)), full(ah))
    hw, hh = T.scale(bw, 0.5), T.scale(bh, 0.5)
    return T.sub(cx, hw), T.sub(cy, hh), T.add(cx, hw), T.add(cy, hh)


def iou_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between boxes ``a[..., 4]`` and ``b[..., 4]`` (broadcasting)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    iy = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = ix * iy
    area = lambda r: (r[..., 2] - r[..., 0]) * (r[..., 3] - r[..., 1])  # noqa: E731
    union = area(a) + area(b) - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def assign_anchors(boxes: np.ndarray, config: DetectorConfig):
    """Anchor assignment for training: the cell holding the box center, best-shape anchor.

    Returns ``(anchor, gy, gx)`` index arrays, one entry per box.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    cx = (boxes[:, 0] + boxes[:, 2]) / 2
    cy = (boxes[:, 1] + boxes[:, 3]) / 2
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    gx = np.clip((cx // config.cell).astype(int), 0, config.grid - 1)
    gy = np.clip((cy // config.cell).astype(int), 0, config.grid - 1)
    anchors = np.array(config.anchors)
    inter = np.minimum(w[:, None], anchors[None, :, 0]) * np.minimum(h[:, None], anchors[None, :, 1])
    union = (w * h)[:, None] + anchors.prod(axis=1)[None, :] - inter
    return (inter / union).argmax(axis=1), gy, gx


# ---------------------------------------------------------------- decoding


def _nms(boxes: np.ndarray, scores: np.ndarray, thr: float) -> list[int]:
    order = list(np.argsort(-scores, kind="stable"))
    keep = []
    while order:
        i = order.pop(0)
        keep.append(i)
        order = [j for j in order if iou_np(boxes[i], boxes[j]) <= thr]
    return keep


def decode(out: DetectorOutput, conf_threshold: float = 0.5, nms_iou: float = 0.5) -> list[Detection]:
    """Threshold and NMS a single-image output into detections sorted by score."""
    if not (0 < conf_threshold < 1 and 0 < nms_iou < 1):
        raise ValueError("thresholds must lie in (0, 1)")
    if out.batched:
        raise ValueError("decode works on a single image; index the batched output first")
    cfg = out.config
    a, k, g, s = cfg.anchors_per_cell, cfg.num_classes, cfg.grid, cfg.input_size
    with T.no_grad():
        x1, y1, x2, y2 = (t.data for t in decode_boxes(out.detach()))
    cls = out.cls.data.reshape(a, k, g, g)
    cls_id = cls.argmax(axis=1)
    score = out.obj.data * cls.max(axis=1)
    boxes = np.stack([np.clip(x1, 0, s), np.clip(y1, 0, s), np.clip(x2, 0, s), np.clip(y2, 0, s)], -1)
    valid = (score >= conf_threshold) & (boxes[..., 2] > boxes[..., 0]) & (boxes[..., 3] > boxes[..., 1])
    idx = np.flatnonzero(valid.reshape(-1))
    boxes, score, cls_id = boxes.reshape(-1, 4)[idx], score.reshape(-1)[idx], cls_id.reshape(-1)[idx]
    dets = []
    for c in np.unique(cls_id):
        sel = np.flatnonzero(cls_id == c)
        for i in _nms(boxes[sel], score[sel], nms_iou):
            j = sel[i]
            dets.append(Detection(tuple(float(v) for v in boxes[j]), int(c), float(score[j])))
    dets.sort(key=lambda d: (-d.score, d.class_id, d.box))
    return dets


# ---------------------------------------------------------------- training


def detection_loss(out: DetectorOutput, targets: Sequence[tuple[np.ndarray, np.ndarray]],
                   noobj_weight: float = 1.0, cls_neg_weight: float = 0.2) -> Tensor:
    """Objectness and class BCE on all anchors, squared offset error on assigned anchors.

    ``targets`` holds ``(boxes[n, 4], classes[n])`` per image.  Mean over the batch.
    """
    cfg = out.config
    a, k, g = cfg.anchors_per_cell, cfg.num_classes, cfg.grid
    n = out.obj.shape[0]
    obj_t = np.zeros((n, a, g, g))
    cls_t = np.zeros((n, a, k, g, g))
    box_t = np.zeros((n, a, 4, g, g))
    for i, (boxes, classes) in enumerate(targets):
        if len(boxes) == 0:
            continue
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        an, gy, gx = assign_anchors(boxes, cfg)
        cx = (boxes[:, 0] + boxes[:, 2]) / 2 / cfg.cell
        cy = (boxes[:, 1] + boxes[:, 3]) / 2 / cfg.cell
        anc = np.array(cfg.anchors)[an]
        obj_t[i, an, gy, gx] = 1.0
        cls_t[i, an, np.asarray(classes, dtype=int), gy, gx] = 1.0
        box_t[i, an, 0, gy, gx] = cx - gx
        box_t[i, an, 1, gy, gx] = cy - gy
        box_t[i, an, 2, gy, gx] = np.log((boxes[:, 2] - boxes[:, 0]) / anc[:, 0])
        box_t[i, an, 3, gy, gx] = np.log((boxes[:, 3] - boxes[:, 1]) / anc[:, 1])
    pos_mask = obj_t
    obj_w = np.where(obj_t > 0, 1.0, noobj_weight)

    def bce(logits: Tensor, target: np.ndarray, weight: np.ndarray) -> Tensor:
        z = T.sub(T.softplus(logits), T.mul(logits, T.constant(target)))
        return T.sum(T.mul(z, T.constant(weight)))

    obj_loss = bce(T.reshape(out.obj_logits, (n, a, g, g)), obj_t, obj_w)
    # class scores are trained on every anchor so that they double as per-class confidences
    cls_loss = bce(T.reshape(out.cls_logits, (n, a, k, g, g)), cls_t,
                   np.broadcast_to(np.where(obj_t > 0, 1.0, cls_neg_weight)[:, :, None], cls_t.shape))
    pos = T.reshape(out.pos, (n, a, 4, g, g))
    xy = T.sigmoid(pos[:, :, 0:2])
    wh = pos[:, :, 2:4]
    m2 = np.broadcast_to(pos_mask[:, :, None], (n, a, 2, g, g))
    box_loss = T.add(
        T.sum(T.mul(T.power(T.sub(xy, T.constant(box_t[:, :, 0:2])), 2), T.constant(m2))),
        T.sum(T.mul(T.power(T.sub(wh, T.constant(box_t[:, :, 2:4])), 2), T.constant(m2))),
    )
    total = T.add(T.add(obj_loss, cls_loss), T.scale(box_loss, 5.0))
    return T.scale(total, 1.0 / n)


def _random_shift(batch, targets, max_shift, rng):
    s = batch.shape[-1]
    out = np.empty_like(batch)
    new_targets = []
    for i, (boxes, classes) in enumerate(targets):
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        lo_x = max(-max_shift, -int(b[:, 0].min())) if len(b) else -max_shift
        hi_x = min(max_shift, int(s - b[:, 2].max())) if len(b) else max_shift
        lo_y = max(-max_shift, -int(b[:, 1].min())) if len(b) else -max_shift
        hi_y = min(max_shift, int(s - b[:, 3].max())) if len(b) else max_shift
        dx = int(rng.integers(lo_x, hi_x + 1))
        dy = int(rng.integers(lo_y, hi_y + 1))
        padded = np.pad(batch[i], ((0, 0), (max_shift, max_shift), (max_shift, max_shift)), mode="edge")
        out[i] = padded[:, max_shift - dy : max_shift - dy + s, max_shift - dx : max_shift - dx + s]
        new_targets.append((b + np.array([dx, dy, dx, dy]), classes))
    return out, new_targets


def train_toy(
    dataset,
    epochs: int = 50,
    seed: int = 0,
    config: DetectorConfig | None = None,
    batch_size: int = 8,
    lr: float = 6e-3,
    flip: bool = True,
    shift: int = 8,
    noobj_weight: float = 0.5,
    augment=None,
    log_every: int = 0,
) -> DetectorWeights:
    """Train the toy detector on scenes (objects with ``image``, ``boxes``, ``classes``).

    Each image is randomly translated by up to ``shift`` pixels (boxes kept
    inside the frame) and mirrored when ``flip`` is set.  ``augment(images, rng,
    scenes)`` may further perturb the images of a batch without moving boxes; it
    must draw only from the supplied generator so training stays reproducible.
    The learning rate follows a cosine decay over all steps.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    config = config or DetectorConfig()
    weights = DetectorWeights.init(config, seed)
    if epochs <= 0:
        return weights
    rng = np.random.default_rng(seed + 1)
    params = {k: T.tensor(v, requires_grad=True) for k, v in weights.params.items()}
    names = list(params)
    opt = Adam([params[k] for k in names], lr=lr)
    images = np.stack([np.asarray(s.image) for s in dataset])
    s_px = config.input_size
    steps_per_epoch = -(-len(dataset) // batch_size)
    total_steps = epochs * steps_per_epoch
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            scenes = [dataset[i] for i in idx]
            batch = images[idx]
            if augment is not None:
                batch = augment(batch, rng, scenes)
            targets = [(sc.boxes, sc.classes) for sc in scenes]
            if shift:
                batch, targets = _random_shift(batch, targets, shift, rng)
            if flip:
                mirror = rng.random(len(idx)) < 0.5
                batch = np.where(mirror[:, None, None, None], batch[..., ::-1], batch)
                targets = [
                    ((np.stack([s_px - b[:, 2], b[:, 1], s_px - b[:, 0], b[:, 3]], 1) if m else b), c)
                    for (b, c), m in zip(targets, mirror)
                ]
            opt.lr = lr * 0.5 * (1 + np.cos(np.pi * step / total_steps))
            out = forward(T.constant(batch), weights, params)
            loss = detection_loss(out, targets, noobj_weight)
            if not np.isfinite(loss.data).all():
                raise FloatingPointError(f"detector training diverged at epoch {epoch} (seed {seed})")
            T.backward(loss)
            opt.step()
            step += 1
            total += loss.item() * len(idx)
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("detector epoch %d loss %.4f", epoch + 1, total / len(dataset))
    return DetectorWeights(config, {k: params[k].data.copy() for k in names})


def recall(dataset, weights: DetectorWeights, conf_threshold: float = 0.5, iou: float = 0.5,
           target_class: int = TARGET_CLASS) -> float:
    """Fraction of target-class ground-truth boxes matched by a detection."""
    hit = total = 0
    for i in range(0, len(dataset), 32):
        chunk = dataset[i : i + 32]
        with T.no_grad():
            out = forward(T.constant(np.stack([s.image for s in chunk])), weights)
        for j, s in enumerate(chunk):
            dets = [d for d in decode(out[j], conf_threshold) if d.class_id == target_class]
            for box, c in zip(s.boxes, s.classes):
                if c != target_class:
                    continue
                total += 1
                if any(iou_np(d.box, box) >= iou for d in dets):
                    hit += 1
    return hit / total if total else 1.0
