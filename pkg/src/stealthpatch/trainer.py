"""Two-phase patch optimisation.

Phase one trains an unconstrained-color *teacher* patch directly in pixel
space.  Phase two trains a palette-constrained *student* patch (Gumbel-softmax
logits) on the adversarial loss, optionally guided by the teacher through
masked feature distillation.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
import zipfile
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .colorspace import Palette
from .detector import DetectorWeights, forward
from .losses import (
    AdvLossWeights,
    MaskConfig,
    adversarial_loss,
    distillation_loss,
    matched_objectness,
    strategy_mask,
    total_loss,
)
from .optim import Adam
from .patchgen import DEFAULT_OMEGA, PatchParams, render_soft, sample_gumbel
from .scene import EotConfig, Scene, composite, sample_transforms

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_FIELDS = ("step", "l_adv", "l_distill", "l_total", "mean_obj")


@dataclass(frozen=True)
class RunConfig:
    epochs: int = 300
    batch_size: int = 8
    lr_teacher: float = 0.03
    lr_student: float = 0.01
    seed: int = 0
    beta: float = 1.0
    omega: float = DEFAULT_OMEGA
    patch_size: int = 16
    teacher_init: str = "random"  # random | gray
    eot: EotConfig = field(default_factory=EotConfig)
    adv_weights: AdvLossWeights = field(default_factory=AdvLossWeights)
    mask: MaskConfig = field(default_factory=MaskConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr_teacher < 0 or self.lr_student < 0:
            raise ValueError("learning rates must be non-negative")
        if self.beta < 0 or self.omega <= 0:
            raise ValueError("beta must be >= 0 and omega > 0")
        if self.teacher_init not in ("random", "gray"):
            raise ValueError("teacher_init must be 'random' or 'gray'")


@dataclass
class TeacherPatch:
    pixels: np.ndarray  # [3, P, P] in [0, 1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValueError(f"teacher patch must be [3, P, P], got {self.pixels.shape}")

    def tensor(self) -> T.Tensor:
        return T.constant(self.pixels)


@dataclass
class TrainingLog:
    rows: list[tuple] = field(default_factory=list)  # one per step, LOG_FIELDS order
    epoch_l_adv: list[float] = field(default_factory=list)
    epoch_obj: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = [",".join(LOG_FIELDS)]
        for step, *vals in self.rows:
            lines.append(",".join([str(int(step))] + [repr(float(v)) for v in vals]))
        return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    patch: TeacherPatch | PatchParams
    log: TrainingLog


class PatchTrainer:
    """Shared epoch loop for teacher and student optimisation.

    All randomness (batch order, EOT draws, Gumbel noise, initialisation) comes
    from one generator seeded with ``config.seed`` and consumed in a fixed order,
    so a run is a pure function of its inputs.
    """

    def __init__(self, kind: str, config: RunConfig, dataset: list[Scene], weights: DetectorWeights,
                 palette: Palette | None = None, teacher: TeacherPatch | None = None,
                 distill: bool = False):
        if kind not in ("teacher", "student"):
            raise ValueError("kind must be 'teacher' or 'student'")
        if not dataset:
            raise ValueError("empty dataset")
        if kind == "student":
            if palette is None:
                raise ValueError("student training needs a palette")
            if distill and teacher is None:
                raise ValueError("distillation needs a trained teacher patch")
            if palette.m == 1:
                logger.warning("palette has a single color; the patch cannot carry any pattern")
        self.kind = kind
        self.config = config
        self.dataset = dataset
        self.weights = weights
        self.palette = palette
        self.teacher = teacher
        self.distill = distill and kind == "student"
        self.rng = np.random.default_rng(config.seed)
        p = config.patch_size
        if kind == "teacher":
            init = np.full((3, p, p), 0.5) if config.teacher_init == "gray" else self.rng.random((3, p, p))
            self.param = T.tensor(init, requires_grad=True)
            lr = config.lr_teacher
        else:
            self.params = PatchParams.init(palette, p, self.rng, config.omega)
            self.param = self.params.logits
            lr = config.lr_student
        self.opt = Adam([self.param], lr=lr)
        self.epoch = 0
        self.step = 0
        self.best = self.param.data.copy()
        self.best_loss = math.inf
        self.log = TrainingLog()

    # ------------------------------------------------------------ stepping

    def _patch(self) -> T.Tensor:
        if self.kind == "teacher":
            return self.param
        gumbel = sample_gumbel(self.param.shape, self.rng)
        return render_soft(self.params, gumbel=gumbel)

    def train_step(self, scenes: list[Scene]) -> tuple[float, float, float, float]:
        cfg = self.config
        patch = self._patch()
        tfs = [sample_transforms(sc, cfg.eot, self.rng) for sc in scenes]
        batch = T.stack([composite(sc, patch, tf) for sc, tf in zip(scenes, tfs)])
        out = forward(batch, self.weights)
        gts = [sc.target_boxes for sc in scenes]
        l_adv = adversarial_loss(out, gts, cfg.adv_weights)
        l_dist = 0.0
        loss = l_adv
        if self.distill:
            with T.no_grad():
                tpatch = self.teacher.tensor()
                tbatch = T.stack([composite(sc, tpatch, tf) for sc, tf in zip(scenes, tfs)])
                out_t = forward(tbatch, self.weights)
                feat_shape = out_t.feat.shape[-2:]
                mask_t = strategy_mask(out_t, cfg.mask, feat_shape)
                mask_s = strategy_mask(out.detach(), cfg.mask, feat_shape)
            ld = distillation_loss(out_t.feat, out.feat, mask_t, mask_s)
            l_dist = ld.item()
            loss = total_loss(l_adv, ld, cfg.beta)
        if not np.isfinite(loss.data).all():
            raise FloatingPointError(f"{self.kind} loss became non-finite at step {self.step}")
        T.backward(loss)
        self.opt.step()
        if self.kind == "teacher":
            self.param.data = np.clip(self.param.data, 0.0, 1.0)
        self.step += 1
        row = (self.step, l_adv.item(), l_dist, loss.item(), matched_objectness(out, gts))
        self.log.rows.append(row)
        return row[1:]

    def run_epoch(self) -> float:
        order = self.rng.permutation(len(self.dataset))
        bs = self.config.batch_size
        l_sum = o_sum = 0.0
        n = 0
        for start in range(0, len(order), bs):
            scenes = [self.dataset[i] for i in order[start : start + bs]]
            l_adv, _, _, obj = self.train_step(scenes)
            l_sum += l_adv * len(scenes)
            o_sum += obj * len(scenes)
            n += len(scenes)
        self.epoch += 1
        mean = l_sum / n
        self.log.epoch_l_adv.append(mean)
        self.log.epoch_obj.append(o_sum / n)
        if mean < self.best_loss:
            self.best_loss = mean
            self.best = self.param.data.copy()
        logger.debug("%s epoch %d L_adv %.4f", self.kind, self.epoch, mean)
        return mean

    def fit(self, until_epoch: int | None = None, checkpoint_path=None) -> TrainResult:
        """Train up to ``until_epoch`` (default: ``config.epochs``) and return the best patch."""
        stop = self.config.epochs if until_epoch is None else min(until_epoch, self.config.epochs)
        while self.epoch < stop:
            self.run_epoch()
            if checkpoint_path is not None:
                self.save(checkpoint_path)
        return TrainResult(self.result_patch(), self.log)

    def result_patch(self) -> TeacherPatch | PatchParams:
        if self.kind == "teacher":
            return TeacherPatch(self.best.copy())
        return PatchParams(T.tensor(self.best.copy(), requires_grad=True), self.palette, self.params.omega)

    # ------------------------------------------------------------ checkpointing

    def state_dict(self) -> dict:
        return {
            "kind": self.kind,
            "epoch": self.epoch,
            "step": self.step,
            "rng": self.rng.bit_generator.state,
            "param": self.param.data.copy(),
            "best": self.best.copy(),
            "best_loss": self.best_loss,
            "adam": self.opt.state_dict(),
            "rows": [list(r) for r in self.log.rows],
            "epoch_l_adv": list(self.log.epoch_l_adv),
            "epoch_obj": list(self.log.epoch_obj),
        }

    def load_state_dict(self, state: dict) -> None:
        if state["kind"] != self.kind:
            raise ValueError(f"checkpoint is for a {state['kind']} run, not {self.kind}")
        if state["param"].shape != self.param.shape:
            raise ValueError("checkpoint patch shape does not match the configuration")
        self.epoch = int(state["epoch"])
        self.step = int(state["step"])
        self.rng.bit_generator.state = state["rng"]
        self.param.data = np.array(state["param"], dtype=np.float64)
        self.best = np.array(state["best"], dtype=np.float64)
        self.best_loss = float(state["best_loss"])
        self.opt.load_state_dict(state["adam"])
        self.log = TrainingLog([tuple(r) for r in state["rows"]], list(state["epoch_l_adv"]),
                               list(state["epoch_obj"]))

    def save(self, path) -> None:
        save_checkpoint(self.state_dict(), path)

    def resume(self, path) -> None:
        self.load_state_dict(load_checkpoint(path))


class CheckpointError(ValueError):
    """Unreadable, truncated or incompatible checkpoint."""


def save_checkpoint(state: dict, path) -> None:
    """Write a trainer state (arrays bit-exact, scalars and RNG state as JSON)."""
    arrays = {
        "param": state["param"],
        "best": state["best"],
        "adam_m": np.stack(state["adam"]["m"]),
        "adam_v": np.stack(state["adam"]["v"]),
        "rows": np.asarray(state["rows"], dtype=np.float64).reshape(-1, len(LOG_FIELDS)),
        "epoch_l_adv": np.asarray(state["epoch_l_adv"], dtype=np.float64),
        "epoch_obj": np.asarray(state["epoch_obj"], dtype=np.float64),
    }
    meta = {
        "version": CHECKPOINT_VERSION,
        "kind": state["kind"],
        "epoch": state["epoch"],
        "step": state["step"],
        "rng": state["rng"],
        "best_loss": state["best_loss"] if math.isfinite(state["best_loss"]) else None,
        "adam_t": state["adam"]["t"],
    }
    buf = io.BytesIO()
    np.savez(buf, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            arrays = {k: z[k] for k in z.files if k != "meta"}
    except (zipfile.BadZipFile, EOFError, OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
    best_loss = meta["best_loss"]
    return {
        "kind": meta["kind"],
        "epoch": meta["epoch"],
        "step": meta["step"],
        "rng": meta["rng"],
        "param": arrays["param"],
        "best": arrays["best"],
        "best_loss": math.inf if best_loss is None else best_loss,
        "adam": {"t": meta["adam_t"], "m": list(arrays["adam_m"]), "v": list(arrays["adam_v"])},
        "rows": arrays["rows"].tolist(),
        "epoch_l_adv": arrays["epoch_l_adv"].tolist(),
        "epoch_obj": arrays["epoch_obj"].tolist(),
    }


def train_teacher(config: RunConfig, dataset: list[Scene], weights: DetectorWeights,
                  checkpoint_path=None) -> TrainResult:
    """Optimise an unconstrained patch against the adversarial loss.

    The detector is assumed to have passed its recall gate.  Returns the patch
    from the epoch with the lowest mean adversarial loss.
    """
    return PatchTrainer("teacher", config, dataset, weights).fit(checkpoint_path=checkpoint_path)


def train_student(config: RunConfig, dataset: list[Scene], weights: DetectorWeights,
                  teacher: TeacherPatch | None, palette: Palette, distill: bool = True,
                  checkpoint_path=None) -> TrainResult:
    """Optimise palette logits; with ``distill`` the teacher guides the tapped features."""
    trainer = PatchTrainer("student", config, dataset, weights, palette, teacher, distill)
    return trainer.fit(checkpoint_path=checkpoint_path)
