"""Palette-constrained adversarial patches guided by an unconstrained teacher.

A numpy-only pipeline: reverse-mode autodiff (``tensor``), CIELAB palette
extraction (``colorspace``), Gumbel-softmax patch rendering (``patchgen``), a
toy anchor-grid detector (``detector``), synthetic scenes with EOT compositing
(``scene``), attack and distillation losses (``losses``), teacher/student
training (``trainer``), evaluation (``metrics``) and file formats plus the
command line (``fileio``, ``cli``).
"""

from .colorspace import Palette, extract_palette, lab_to_srgb, quantize_to_palette, srgb_to_lab
from .detector import DetectorConfig, DetectorWeights, decode, forward, recall, train_toy
from .fileio import PipelineConfig, load_config, load_image, save_image
from .losses import AdvLossWeights, MaskConfig, adversarial_loss, distillation_loss, total_loss
from .metrics import attack_success_rate, patch_ssim, ssim
from .patchgen import PatchParams, render_hard, render_soft
from .scene import EotConfig, Scene, make_dataset, synthesize_scene
from .tensor import Tensor, backward, no_grad
from .trainer import RunConfig, TeacherPatch, train_student, train_teacher

__version__ = "0.1.0"

__all__ = [
    "AdvLossWeights", "DetectorConfig", "DetectorWeights", "EotConfig", "MaskConfig", "Palette",
    "PatchParams", "PipelineConfig", "RunConfig", "Scene", "TeacherPatch", "Tensor",
    "adversarial_loss", "attack_success_rate", "backward", "decode", "distillation_loss",
    "extract_palette", "forward", "lab_to_srgb", "load_config", "load_image", "make_dataset",
    "no_grad", "patch_ssim", "quantize_to_palette", "recall", "render_hard", "render_soft",
    "save_image", "srgb_to_lab", "ssim", "synthesize_scene", "total_loss", "train_student",
    "train_teacher", "train_toy",
]
