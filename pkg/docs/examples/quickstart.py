"""Small end-to-end run: data, detector, palette, teacher, plain and distilled students.

Runs in about a minute on one core.  Pass --full for the desk-scale defaults.
"""

import argparse
import dataclasses

from stealthpatch.experiments import (
    build_data,
    build_detector,
    build_environment,
    build_palette,
    detector_metrics,
    student_metrics,
    teacher_metrics,
)
from stealthpatch.fileio import PipelineConfig, save_image, save_palette
from stealthpatch.patchgen import render_hard
from stealthpatch.trainer import train_student, train_teacher


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--full", action="store_true", help="desk-scale defaults instead of the small demo")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="quickstart_out")
    args = ap.parse_args()

    cfg = PipelineConfig()
    if not args.full:
        cfg = dataclasses.replace(cfg, n_train=60, n_test=30, det_epochs=20,
                                  run=dataclasses.replace(cfg.run, epochs=5))
    cfg = cfg.with_seed(args.seed)

    train, test = build_data(cfg)
    weights = build_detector(cfg, train)
    print("detector", detector_metrics(cfg, test, weights))

    palette = build_palette(build_environment(cfg), cfg)
    print("palette", " ".join(palette.to_hex()))

    teacher = train_teacher(cfg.run, train, weights)
    print("teacher", teacher_metrics(cfg, test, weights, teacher.patch, teacher.log))
    for distill in (False, True):
        res = train_student(cfg.run, train, weights, teacher.patch, palette, distill=distill)
        name = "distilled" if distill else "plain"
        print(name, student_metrics(cfg, test, weights, res.patch, teacher.patch, res.log))
        save_image(render_hard(res.patch), f"{args.out}_{name}.ppm")
    save_image(teacher.patch.pixels, f"{args.out}_teacher.ppm")
    save_palette(palette, f"{args.out}_palette.txt")


if __name__ == "__main__":
    main()
