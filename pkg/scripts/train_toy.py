"""Single-scene overfit and 50-scene toy training; prints the held-out summary.

Results are cached under .cache/ keyed by config, so a second run only reports.
"""

import argparse
import json

import numpy as np
import torch

from pupilholo.autodiff import deterministic
from pupilholo.experiments import OverfitConfig, ToyTrainingConfig, run_overfit, run_toy_training


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=ToyTrainingConfig.steps)
    ap.add_argument("--lr", type=float, default=ToyTrainingConfig.lr)
    ap.add_argument("--skip-overfit", action="store_true")
    ap.add_argument("--cache", default=None, help="cache directory (default: <repo>/.cache)")
    args = ap.parse_args()
    torch.set_num_threads(1)
    deterministic(0)

    if not args.skip_overfit:
        fit = run_overfit(OverfitConfig(), args.cache)
        print(f"overfit: network {fit['net_wpsnr']:.2f} dB, direct SGD {fit['sgd_wpsnr']:.2f} dB, {fit['seconds']:.0f} s")

    res = run_toy_training(ToyTrainingConfig(steps=args.steps, lr=args.lr), args.cache)
    print(f"held-out in-focus-weighted PSNR {res.holdout_wpsnr:.2f} dB  by s: "
          + json.dumps({k: round(v, 2) for k, v in res.wpsnr_by_s.items()}))
    s = res.dof_series[0]["s_mm"]
    for focus in ("near", "far"):
        print(f"DoF {focus}: s={s}")
        print("   out-of-focus", np.round(res.dof_mean(focus), 5).tolist())
        print("   in-focus    ", np.round(res.dof_mean(focus, "in_focus"), 5).tolist())
    ok, n = res.dof_series_monotone
    print(f"held-out mean trend monotone: {res.dof_monotone}; per-scene series monotone {ok}/{n}")
    print(f"training time {res.seconds / 60:.1f} min, checkpoint {res.checkpoint}")


if __name__ == "__main__":
    main()
