"""Evaluation: global SSIM, attack success rate, confidence-decline curves."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .detector import TARGET_CLASS, DetectorWeights, decode, forward, iou_np
from .scene import EotConfig, Scene, composite, fixed_transforms
from .trainer import LOG_FIELDS

BT601 = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SsimParams:
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 255.0

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def luminance(image) -> np.ndarray:
    """BT.601 luma of a ``[3, H, W]`` image; 2-D input is returned unchanged."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] == 3:
        return np.tensordot(BT601, img, axes=1)
    raise ValueError(f"expected [H, W] or [3, H, W], got {img.shape}")


def ssim(x, y, params: SsimParams | None = None) -> float:
    """Single-window SSIM using whole-image mean, variance and covariance.

    Inputs are expressed in the units of ``params.dynamic_range`` (0..255 by
    default); color inputs are reduced to luminance first.
    """
    params = params or SsimParams()
    a, b = luminance(x), luminance(y)
    if a.shape != b.shape:
        raise ValueError(f"image sizes differ: {a.shape} vs {b.shape}")
    mx, my = a.mean(), b.mean()
    vx, vy = a.var(), b.var()
    cov = ((a - mx) * (b - my)).mean()
    c1, c2 = params.c1, params.c2
    return float((2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))


def patch_ssim(a, b) -> float:
    """SSIM of two unit-range patches after 8-bit quantization."""
    def q(im):
        im = im.data if isinstance(im, T.Tensor) else im
        return np.rint(np.clip(np.asarray(im, dtype=np.float64), 0, 1) * 255)

    return ssim(q(a), q(b))


@dataclass(frozen=True)
class AsrResult:
    total_frames: int
    attacked_frames: int

    @property
    def asr(self) -> float:
        return self.attacked_frames / self.total_frames if self.total_frames else 0.0


def frame_attacked(scene: Scene, dets, conf_threshold: float, iou: float = 0.5,
                   target_class: int = TARGET_CLASS) -> bool:
    """True when no target-class detection above threshold overlaps a ground-truth target."""
    for d in dets:
        if d.class_id != target_class or d.score < conf_threshold:
            continue
        if any(iou_np(d.box, box) >= iou for box in scene.target_boxes):
            return False
    return True


def attack_success_rate(scenes: list[Scene], patch, weights: DetectorWeights,
                        conf_threshold: float = 0.5, eot: EotConfig | None = None,
                        batch: int = 32) -> AsrResult:
    """Deterministic compositing (no EOT randomness), then per-frame attack test."""
    if not scenes:
        raise ValueError("no frames to evaluate")
    eot = eot or EotConfig()
    p = patch if isinstance(patch, T.Tensor) else T.constant(patch)
    attacked = 0
    with T.no_grad():
        for i in range(0, len(scenes), batch):
            chunk = scenes[i : i + batch]
            imgs = T.stack([composite(sc, p, fixed_transforms(sc, eot)) for sc in chunk])
            out = forward(imgs, weights)
            for j, sc in enumerate(chunk):
                attacked += frame_attacked(sc, decode(out[j], conf_threshold), conf_threshold)
    return AsrResult(len(scenes), attacked)


def gray_patch(size: int) -> np.ndarray:
    return np.full((3, size, size), 0.5)


# ---------------------------------------------------------------- curves


def read_loss_csv(source) -> list[dict]:
    """Parse a loss trace (path or CSV text); errors name the offending line."""
    if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        with open(source, encoding="utf-8") as f:
            text = f.read()
    else:
        text = str(source)
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError("line 1: empty loss CSV") from None
    if tuple(h.strip() for h in header) != LOG_FIELDS:
        raise ValueError(f"line 1: expected header {','.join(LOG_FIELDS)}")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(LOG_FIELDS):
            raise ValueError(f"line {lineno}: expected {len(LOG_FIELDS)} fields, got {len(rec)}")
        try:
            vals = [float(v) for v in rec]
        except ValueError:
            raise ValueError(f"line {lineno}: non-numeric field") from None
        rows.append(dict(zip(LOG_FIELDS, vals)))
    return rows


def confidence_curve(log_csv, steps_per_epoch: int = 1) -> list[tuple[int, float]]:
    """Epoch-mean matched objectness from a loss trace."""
    rows = read_loss_csv(log_csv)
    if steps_per_epoch < 1:
        raise ValueError("steps_per_epoch must be >= 1")
    out = []
    for e in range(0, len(rows), steps_per_epoch):
        chunk = rows[e : e + steps_per_epoch]
        out.append((e // steps_per_epoch + 1, float(np.mean([r["mean_obj"] for r in chunk]))))
    return out


def curves_to_csv(curves: dict) -> str:
    """``{beta: [(epoch, value), ...]}`` -> long-format CSV ``beta,epoch,mean_obj``."""
    lines = ["beta,epoch,mean_obj"]
    for beta in sorted(curves):
        for epoch, v in curves[beta]:
            lines.append(f"{beta!r},{epoch},{v!r}")
    return "\n".join(lines) + "\n"
