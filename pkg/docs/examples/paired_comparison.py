"""Paired-seed comparison of plain and distilled students across all mask strategies.

At the default desk scale this takes roughly 6 minutes per seed on one core.
"""

import argparse

from stealthpatch.experiments import (
    build_data,
    build_detector,
    comparison_rows,
    detector_metrics,
    format_table,
    paired_trial,
)
from stealthpatch.fileio import PipelineConfig
from stealthpatch.losses import STRATEGIES


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--masks", default=",".join(STRATEGIES))
    args = ap.parse_args()

    cfg = PipelineConfig()
    train, test = build_data(cfg)
    weights = build_detector(cfg, train)
    print("detector", detector_metrics(cfg, test, weights))
    masks = tuple(args.masks.split(","))
    trials = []
    for s in (int(v) for v in args.seeds.split(",")):
        trials.append(paired_trial(cfg, s, train, weights, masks))
        print(f"seed {s} done", flush=True)
    print(format_table(comparison_rows(trials)))


if __name__ == "__main__":
    main()
