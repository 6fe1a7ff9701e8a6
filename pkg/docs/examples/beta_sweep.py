"""Per-epoch matched objectness of distilled students for several distillation weights.

Writes a CSV with columns beta,epoch,mean_obj.
"""

import argparse
import dataclasses

from stealthpatch.experiments import build_data, build_detector, build_environment, build_palette
from stealthpatch.fileio import PipelineConfig
from stealthpatch.metrics import curves_to_csv
from stealthpatch.trainer import train_student, train_teacher


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--betas", default="0,0.1,1")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("-o", "--output", default="beta_sweep.csv")
    args = ap.parse_args()

    cfg = PipelineConfig().with_seed(args.seed)
    cfg = dataclasses.replace(cfg, run=dataclasses.replace(cfg.run, epochs=args.epochs))
    train, _ = build_data(cfg)
    weights = build_detector(cfg, train)
    palette = build_palette(build_environment(cfg), cfg)
    teacher = train_teacher(cfg.run, train, weights)
    curves = {}
    for beta in (float(b) for b in args.betas.split(",")):
        run = dataclasses.replace(cfg.run, beta=beta)
        res = train_student(run, train, weights, teacher.patch, palette, distill=True)
        curves[beta] = list(enumerate(res.log.epoch_obj, start=1))
        print(f"beta={beta} terminal mean_obj={res.log.epoch_obj[-1]:.4f}", flush=True)
    with open(args.output, "w") as fh:
        fh.write(curves_to_csv(curves))


if __name__ == "__main__":
    main()
