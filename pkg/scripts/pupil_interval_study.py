"""Eyebox energy entropy and centre-view PSNR versus pupil interval z, over several scene seeds."""

import argparse

import numpy as np
import torch

from pupilholo.autodiff import deterministic
from pupilholo.experiments import PupilIntervalConfig, run_pupil_interval_trend


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--diameter-mm", type=float, default=4.0)
    ap.add_argument("--iterations", type=int, default=PupilIntervalConfig.iterations)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(PupilIntervalConfig.seeds))
    ap.add_argument("--cache", default=None)
    args = ap.parse_args()
    torch.set_num_threads(1)
    deterministic(0)
    cfg = PupilIntervalConfig(seeds=tuple(args.seeds), diameter_mm=args.diameter_mm, iterations=args.iterations)
    for run in run_pupil_interval_trend(cfg, args.cache):
        print(f"seed {run['seed']}: z={run['z_mm']} entropy={np.round(run['entropy'], 3).tolist()} "
              f"centre PSNR={np.round(run['center_psnr'], 2).tolist()}")


if __name__ == "__main__":
    main()
