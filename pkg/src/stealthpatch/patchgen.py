"""Palette-constrained patch parameterization and Gumbel-softmax rendering."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .colorspace import Palette
from .tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_OMEGA = 0.3
MIN_OMEGA = 1e-3


@dataclass
class PatchParams:
    """Per-pixel color logits ``[m, H, W]`` over ``palette`` plus temperature ``omega``."""

    logits: Tensor
    palette: Palette
    omega: float = DEFAULT_OMEGA

    def __post_init__(self):
        if self.logits.ndim != 3:
            raise ValueError(f"logits must be [m, H, W], got {self.logits.shape}")
        if self.logits.shape[0] != self.palette.m:
            raise ValueError(
                f"logits have {self.logits.shape[0]} color planes, palette has {self.palette.m}"
            )
        if not self.omega > 0:
            raise ValueError(f"omega must be positive, got {self.omega}")

    @property
    def size(self) -> tuple[int, int]:
        return self.logits.shape[1], self.logits.shape[2]

    @classmethod
    def init(cls, palette: Palette, size: int | tuple[int, int], rng: np.random.Generator,
             omega: float = DEFAULT_OMEGA, std: float = 0.1) -> "PatchParams":
        h, w = (size, size) if isinstance(size, int) else size
        logits = Tensor(rng.normal(0.0, std, size=(palette.m, h, w)), requires_grad=True)
        return cls(logits, palette, omega)


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    """Gumbel(0, 1) draws ``-log(-log(u))`` with ``u`` strictly inside (0, 1)."""
    u = rng.random(shape)
    tiny = np.finfo(np.float64).tiny
    u = np.clip(u, tiny, 1.0 - np.finfo(np.float64).epsneg)
    return -np.log(-np.log(u))


def color_weights(logits: Tensor, gumbel: np.ndarray, omega: float) -> Tensor:
    """Relaxed one-hot weights ``softmax((g + logits) / omega)`` over the palette axis."""
    if not omega > 0:
        raise ValueError(f"omega must be positive, got {omega}")
    z = T.scale(T.add(logits, T.constant(gumbel)), 1.0 / omega)
    return T.softmax(z, axis=0)


def mix_colors(weights: Tensor, palette: Palette) -> Tensor:
    """Blend palette colors with per-pixel weights ``[m, H, W]`` -> image ``[3, H, W]``."""
    m, h, w = weights.shape
    colors = T.constant(palette.as_unit().T.copy())  # [3, m]
    return T.reshape(T.matmul(colors, T.reshape(weights, (m, h * w))), (3, h, w))


def render_soft(params: PatchParams, rng: np.random.Generator | None = None,
                gumbel: np.ndarray | None = None) -> Tensor:
    """Differentiable patch image ``[3, H, W]``.

    Fresh Gumbel noise is drawn from ``rng`` unless ``gumbel`` is given, which
    lets callers freeze the noise.
    """
    if gumbel is None:
        if rng is None:
            raise ValueError("render_soft needs either an rng or explicit gumbel noise")
        gumbel = sample_gumbel(params.logits.shape, rng)
    return mix_colors(color_weights(params.logits, gumbel, params.omega), params.palette)


def hard_indices(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest palette index
    return np.argmax(np.asarray(logits), axis=0)


def render_hard(params: PatchParams) -> Tensor:
    """Deployment rendering: each pixel takes its most probable palette color."""
    idx = hard_indices(params.logits.data)
    img = params.palette.as_unit()[idx].transpose(2, 0, 1)
    return Tensor(img)


@dataclass(frozen=True)
class TemperatureSchedule:
    kind: str = "constant"  # constant | linear | exponential
    start: float = DEFAULT_OMEGA
    end: float = 0.1
    steps: int = 100  # linear ramp length
    half_life: float = 10.0  # exponential

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "exponential"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.start <= 0 or self.steps <= 0 or self.half_life <= 0:
            raise ValueError("schedule parameters must be positive")

    def value(self, step: int) -> float:
        if self.kind == "constant":
            omega = self.start
        elif self.kind == "linear":
            frac = min(max(step, 0), self.steps) / self.steps
            omega = self.start + (self.end - self.start) * frac
        else:
            omega = self.start * math.pow(0.5, step / self.half_life)
        if omega <= 0:
            logger.warning("temperature %.3g clamped to %.0e", omega, MIN_OMEGA)
            omega = MIN_OMEGA
        return omega


def anneal_temperature(params: PatchParams, schedule: TemperatureSchedule, step: int) -> float:
    """Set ``params.omega`` from the schedule and return it."""
    params.omega = schedule.value(step)
    return params.omega
