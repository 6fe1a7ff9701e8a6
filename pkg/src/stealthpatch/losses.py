"""Attack objective: adversarial head loss, masked feature distillation, total loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .detector import TARGET_CLASS, DetectorOutput, decode_boxes, iou_np
from .tensor import Tensor

STRATEGIES = ("obj_conf", "cls_max_conf", "obj_or_cls", "obj_and_cls")
MATCH_IOU = 0.1


@dataclass(frozen=True)
class AdvLossWeights:
    lambda1: float = 1.0  # target-class score
    lambda2: float = 1.0  # objectness
    lambda3: float = 0.5  # IoU with ground truth

    def __post_init__(self):
        ws = (self.lambda1, self.lambda2, self.lambda3)
        if min(ws) < 0 or max(ws) == 0:
            raise ValueError("loss weights must be non-negative and not all zero")


@dataclass(frozen=True)
class MaskConfig:
    strategy: str = "cls_max_conf"
    th_cls: float = 0.25
    th_obj: float = 0.1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown mask strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not (0 < self.th_cls < 1 and 0 < self.th_obj < 1):
            raise ValueError("mask thresholds must lie in (0, 1)")


def _batched(out: DetectorOutput, gt_boxes):
    """Normalise single-image inputs to batch form."""
    if out.batched:
        if len(gt_boxes) != out.obj.shape[0]:
            raise ValueError("need one ground-truth box list per batch member")
        return out, [np.asarray(b, dtype=np.float64).reshape(-1, 4) for b in gt_boxes], True
    lift = lambda t: None if t is None else T.reshape(t, (1,) + t.shape)  # noqa: E731
    bo = DetectorOutput(lift(out.pos), lift(out.cls), lift(out.obj), lift(out.feat), out.config,
                        lift(out.cls_logits), lift(out.obj_logits))
    return bo, [np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)], False


def match_anchors(out: DetectorOutput, gt_boxes, iou_threshold: float = MATCH_IOU):
    """Anchors whose decoded box overlaps some ground-truth box by more than ``iou_threshold``.

    Returns ``(mask, matched_gt)``: a ``[N, A, G, G]`` 0/1 array and, per anchor,
    the best-overlapping box ``[N, A, G, G, 4]``.
    """
    out, gts, _ = _batched(out, gt_boxes)
    with T.no_grad():
        x1, y1, x2, y2 = (t.data for t in decode_boxes(out.detach()))
    pred = np.stack([x1, y1, x2, y2], axis=-1)
    mask = np.zeros(pred.shape[:-1])
    matched = np.zeros(pred.shape)
    for i, gt in enumerate(gts):
        if len(gt) == 0:
            continue
        ious = iou_np(pred[i][..., None, :], gt)  # [A, G, G, n]
        best = ious.argmax(axis=-1)
        mask[i] = ious.max(axis=-1) > iou_threshold
        matched[i] = gt[best]
    return mask, matched


def adversarial_loss(out: DetectorOutput, gt_boxes, weights: AdvLossWeights | None = None,
                     target_class: int = TARGET_CLASS) -> Tensor:
    """Sum over matched anchors of ``l1*cls + l2*obj + l3*IoU``; batch mean.

    ``gt_boxes`` is an ``(n, 4)`` array for a single output or a list of them for
    a batch.  Anchors count as matched when their decoded box has IoU > 0.1 with
    a ground-truth target box.
    """
    weights = weights or AdvLossWeights()
    out, gts, _ = _batched(out, gt_boxes)
    if not any(len(g) for g in gts):
        raise ValueError("adversarial loss needs at least one ground-truth box")
    cfg = out.config
    n = out.obj.shape[0]
    a, k, g = cfg.anchors_per_cell, cfg.num_classes, cfg.grid
    mask, matched = match_anchors(out, gts)
    m = T.constant(mask)
    cls_t = T.reshape(out.cls, (n, a, k, g, g))[:, :, target_class]
    terms = T.add(T.scale(cls_t, weights.lambda1), T.scale(out.obj, weights.lambda2))
    if weights.lambda3 > 0:
        terms = T.add(terms, T.scale(box_iou(out, matched), weights.lambda3))
    return T.scale(T.sum(T.mul(terms, m)), 1.0 / n)


def box_iou(out: DetectorOutput, boxes: np.ndarray) -> Tensor:
    """Differentiable IoU between every decoded anchor box and a per-anchor box ``[..., 4]``."""
    x1, y1, x2, y2 = decode_boxes(out)
    b = [T.constant(boxes[..., j]) for j in range(4)]
    iw = T.relu(T.sub(T.minimum(x2, b[2]), T.maximum(x1, b[0])))
    ih = T.relu(T.sub(T.minimum(y2, b[3]), T.maximum(y1, b[1])))
    inter = T.mul(iw, ih)
    area_p = T.mul(T.sub(x2, x1), T.sub(y2, y1))
    area_g = T.constant((boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1]))
    return T.div(inter, T.sub(T.add(area_p, area_g), inter))


def score_map(out: DetectorOutput, strategy: MaskConfig | str) -> Tensor:
    """Per-cell target score: max over anchors of objectness and/or max class score.

    Returns ``[G, G]`` (or ``[N, G, G]`` for batched outputs).
    """
    name = strategy.strategy if isinstance(strategy, MaskConfig) else strategy
    if name not in STRATEGIES:
        raise ValueError(f"unknown mask strategy {name!r}")
    if name == "obj_conf":
        return _obj_map(out)
    if name == "cls_max_conf":
        return _cls_map(out)
    combine = T.maximum if name == "obj_or_cls" else T.minimum
    return combine(_obj_map(out), _cls_map(out))


def _obj_map(out: DetectorOutput) -> Tensor:
    return T.max(out.obj, axis=-3)


def _cls_map(out: DetectorOutput) -> Tensor:
    cfg = out.config
    lead = out.cls.shape[:-3]
    g = cfg.grid
    cls = T.reshape(out.cls, lead + (cfg.anchors_per_cell, cfg.num_classes, g, g))
    return T.max(T.max(cls, axis=-3), axis=-3)


def build_mask(score: Tensor, th: float, feat_shape: Sequence[int]) -> Tensor:
    """Keep scores above ``th`` (others become 0) and resize nearest-neighbour to ``feat_shape``."""
    if not 0 < th < 1:
        raise ValueError("threshold must lie in (0, 1)")
    gated = T.mul(score, T.constant((score.data > th).astype(np.float64)))
    gh, gw = score.shape[-2:]
    fh, fw = feat_shape[-2:]
    if (gh, gw) == (fh, fw):
        return gated
    rows = (np.arange(fh) * gh) // fh
    cols = (np.arange(fw) * gw) // fw
    return gated[(Ellipsis, rows[:, None], cols[None, :])]


def strategy_mask(out: DetectorOutput, config: MaskConfig, feat_shape: Sequence[int]) -> Tensor:
    """Gated score mask for one patch.

    Objectness is gated with ``th_obj`` and class scores with ``th_cls``; the
    combined strategies take the elementwise max (or) / min (and) of the two
    gated maps.
    """
    if config.strategy == "obj_conf":
        return build_mask(_obj_map(out), config.th_obj, feat_shape)
    if config.strategy == "cls_max_conf":
        return build_mask(_cls_map(out), config.th_cls, feat_shape)
    mo = build_mask(_obj_map(out), config.th_obj, feat_shape)
    mc = build_mask(_cls_map(out), config.th_cls, feat_shape)
    return T.maximum(mo, mc) if config.strategy == "obj_or_cls" else T.minimum(mo, mc)


def interest_mask(mask_t: Tensor, mask_s: Tensor) -> Tensor:
    """Regions where teacher and student responses disagree: ``|m_t - m_s|``."""
    return T.abs(T.sub(mask_t, mask_s))


def distillation_loss(feat_tch: Tensor, feat_stu: Tensor, mask_t: Tensor, mask_s: Tensor) -> Tensor:
    """Sum over locations of the channel-wise L2 norm of the masked feature gap.

    Features are ``[C, H, W]`` (or ``[N, C, H, W]``, batch mean); masks match the
    spatial shape.  Teacher features are treated as constants.
    """
    if feat_tch.shape != feat_stu.shape:
        raise T.ShapeError(f"feature shapes differ: {feat_tch.shape} vs {feat_stu.shape}")
    if mask_t.shape != mask_s.shape:
        raise T.ShapeError(f"mask shapes differ: {mask_t.shape} vs {mask_s.shape}")
    single = feat_stu.ndim == 3
    if single:
        feat_tch = T.reshape(feat_tch, (1,) + feat_tch.shape)
        feat_stu = T.reshape(feat_stu, (1,) + feat_stu.shape)
        mask_t = T.reshape(mask_t, (1,) + mask_t.shape)
        mask_s = T.reshape(mask_s, (1,) + mask_s.shape)
    n, c, h, w = feat_stu.shape
    if mask_t.shape != (n, h, w):
        raise T.ShapeError(f"mask shape {mask_t.shape} does not match features {feat_stu.shape}")
    m = interest_mask(mask_t, mask_s)
    m = T.broadcast_to(T.reshape(m, (n, 1, h, w)), (n, c, h, w))
    diff = T.sub(feat_tch.detach(), feat_stu)
    per_loc = T.l2_norm(T.mul(diff, m), axis=1)
    return T.scale(T.sum(per_loc), 1.0 / n)


def total_loss(l_adv, l_distill, beta: float) -> Tensor:
    """``l_adv + beta * l_distill``."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    return T.add(l_adv, T.scale(l_distill, beta))


def matched_objectness(out: DetectorOutput, gt_boxes, iou_threshold: float = MATCH_IOU) -> float:
    """Mean over ground-truth boxes of the highest objectness among overlapping anchors.

    A box with no anchor overlapping it above ``iou_threshold`` contributes 0.
    """
    out, gts, _ = _batched(out, gt_boxes)
    with T.no_grad():
        x1, y1, x2, y2 = (t.data for t in decode_boxes(out.detach()))
    pred = np.stack([x1, y1, x2, y2], axis=-1)
    obj = out.obj.data
    vals = []
    for i, gt in enumerate(gts):
        for box in gt:
            hit = iou_np(pred[i], box) > iou_threshold
            vals.append(float(obj[i][hit].max()) if hit.any() else 0.0)
    return float(np.mean(vals)) if vals else 0.0
