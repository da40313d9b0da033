"""Mean |offset| per depth quintile of the toy-trained network (run train_toy.py first)."""

import argparse
import csv
import sys

from pupilholo.experiments import ToyTrainingConfig, run_toy_training
from pupilholo.io import write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="offsets.csv")
    ap.add_argument("--cache", default=None)
    args = ap.parse_args()
    res = run_toy_training(ToyTrainingConfig(), args.cache)
    rows = []
    w = csv.writer(sys.stdout)
    w.writerow(["s_mm", "bin0_near", "bin1", "bin2_middle", "bin3", "bin4_far", "normalized_middle"])
    for r in res.offsets:
        m = r["means"]
        w.writerow([r["s_mm"], *(f"{v:.4f}" for v in m), f"{m[2] / max(m):.3f}"])
        rows += [{"s_mm": r["s_mm"], "bin": b, "mean_offset_px": v, "count": c}
                 for b, (v, c) in enumerate(zip(m, r["counts"]))]
    write_csv(args.out, ["s_mm", "bin", "mean_offset_px", "count"], rows)
    print(f"near and far quintiles >= middle for {res.offsets_edges_exceed_middle}/{len(res.offsets)} pupil sizes")


if __name__ == "__main__":
    main()
