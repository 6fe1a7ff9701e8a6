"""Pipeline stages and the paired distilled-vs-plain comparison.

Every stage is a pure function of a :class:`PipelineConfig` and its inputs, so
the command line, the demos and the test-suite share one code path.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .colorspace import EnvironmentSample, Palette, extract_palette, quantize_to_palette
from .detector import DetectorWeights, recall, train_toy
from .fileio import PipelineConfig
from .losses import STRATEGIES
from .metrics import attack_success_rate, gray_patch, patch_ssim
from .patchgen import PatchParams, render_hard
from .scene import Scene, SceneConfig, environment_image, make_dataset
from .trainer import TeacherPatch, TrainResult, train_student, train_teacher

# independent random streams derived from the pipeline seed
TRAIN_STREAM, TEST_STREAM, ENV_STREAM, PALETTE_STREAM = 1, 2, 3, 4


def scene_config(cfg: PipelineConfig) -> SceneConfig:
    return SceneConfig(size=cfg.detector.input_size)


def build_data(cfg: PipelineConfig) -> tuple[list[Scene], list[Scene]]:
    sc = scene_config(cfg)
    return (make_dataset(cfg.n_train, [cfg.seed, TRAIN_STREAM], sc),
            make_dataset(cfg.n_test, [cfg.seed, TEST_STREAM], sc))


def build_environment(cfg: PipelineConfig) -> np.ndarray:
    return environment_image([cfg.seed, ENV_STREAM], scene_config(cfg), cfg.env_size)


def build_palette(env: np.ndarray, cfg: PipelineConfig) -> Palette:
    """``cfg.palette_colors`` colors from an ``(H, W, 3)`` uint8 environment image."""
    return extract_palette(EnvironmentSample.from_image(env), cfg.palette_colors,
                           seed=cfg.seed * 1000 + PALETTE_STREAM)


def build_detector(cfg: PipelineConfig, train: list[Scene]) -> DetectorWeights:
    return train_toy(train, cfg.det_epochs, seed=cfg.seed, config=cfg.detector,
                     batch_size=cfg.det_batch_size, lr=cfg.det_lr)


def detector_metrics(cfg: PipelineConfig, test: list[Scene], weights: DetectorWeights) -> dict:
    return {"recall": recall(test, weights, cfg.conf_threshold)}


def teacher_metrics(cfg: PipelineConfig, test, weights, teacher: TeacherPatch, log=None) -> dict:
    eot = cfg.run.eot
    m = {
        "asr": attack_success_rate(test, teacher.pixels, weights, cfg.conf_threshold, eot).asr,
        "gray_asr": attack_success_rate(test, gray_patch(cfg.run.patch_size), weights,
                                        cfg.conf_threshold, eot).asr,
    }
    if log is not None:
        m["final_l_adv"] = log.epoch_l_adv[-1]
        m["final_mean_obj"] = log.epoch_obj[-1]
    return m


def student_metrics(cfg: PipelineConfig, test, weights, student: PatchParams, teacher, log=None) -> dict:
    hard = render_hard(student).data
    m = {"asr": attack_success_rate(test, hard, weights, cfg.conf_threshold, cfg.run.eot).asr}
    if teacher is not None:
        m["ssim"] = patch_ssim(hard, quantize_to_palette(teacher.pixels, student.palette))
    if log is not None:
        m["final_l_adv"] = log.epoch_l_adv[-1]
        m["final_mean_obj"] = log.epoch_obj[-1]
    return m


# ---------------------------------------------------------------- paired comparison


@dataclass
class PairedTrial:
    seed: int
    teacher: TrainResult
    plain: TrainResult
    distilled: dict[str, TrainResult]  # mask strategy -> run
    palette: Palette

    @property
    def quantized_teacher(self) -> np.ndarray:
        return quantize_to_palette(self.teacher.patch.pixels, self.palette)

    def ssim(self, run: TrainResult) -> float:
        return patch_ssim(render_hard(run.patch).data, self.quantized_teacher)


def paired_trial(cfg: PipelineConfig, seed: int, train: list[Scene], weights: DetectorWeights,
                 strategies=("cls_max_conf",), teacher: TrainResult | None = None) -> PairedTrial:
    """Teacher, plain student and one distilled student per mask strategy, all from ``seed``.

    Detector and data are shared across seeds; the palette comes from a
    per-seed environment image.
    """
    c = cfg.with_seed(seed)
    palette = build_palette(build_environment(c), c)
    teacher = teacher or train_teacher(c.run, train, weights)
    plain = train_student(c.run, train, weights, teacher.patch, palette, distill=False)
    distilled = {}
    for name in strategies:
        if name not in STRATEGIES:
            raise ValueError(f"unknown mask strategy {name!r}")
        run = dataclasses.replace(c.run, mask=dataclasses.replace(c.run.mask, strategy=name))
        distilled[name] = train_student(run, train, weights, teacher.patch, palette, distill=True)
    return PairedTrial(seed, teacher, plain, distilled, palette)


def comparison_rows(trials: list[PairedTrial]) -> list[dict]:
    rows = []
    for t in trials:
        row = {"seed": t.seed, "teacher_l_adv": t.teacher.log.epoch_l_adv[-1],
               "plain_l_adv": t.plain.log.epoch_l_adv[-1], "plain_obj": t.plain.log.epoch_obj[-1],
               "plain_ssim": t.ssim(t.plain)}
        for name, run in t.distilled.items():
            row[f"{name}_l_adv"] = run.log.epoch_l_adv[-1]
            row[f"{name}_obj"] = run.log.epoch_obj[-1]
            row[f"{name}_ssim"] = t.ssim(run)
        rows.append(row)
    return rows


def format_table(rows: list[dict]) -> str:
    """Fixed-width text table; floats printed to 4 decimals."""
    if not rows:
        return ""
    cols = list(rows[0])
    cell = lambda v: f"{v:.4f}" if isinstance(v, float) else str(v)  # noqa: E731
    widths = [max(len(c), *(len(cell(r[c])) for r in rows)) for c in cols]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(cell(r[c]).rjust(w) for c, w in zip(cols, widths)) for r in rows]
    return "\n".join(lines) + "\n"

