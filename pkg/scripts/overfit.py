"""Overfit 20 synthetic scenes and report training-set AP."""

import argparse
import logging

from lqseg.experiments import OverfitConfig, run_overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iterations", type=int, help="default: OverfitConfig")
    ap.add_argument("--lr", type=float, help="default: OverfitConfig")
    ap.add_argument("--lsj", action="store_true")
    ap.add_argument("--out-dir", default="runs/overfit")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = OverfitConfig()
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
    if args.lr is not None:
        cfg.train.base_lr = args.lr
    cfg.train.lsj = args.lsj
    cfg.train.out_dir = args.out_dir
    res = run_overfit(cfg)
    print(f"ap_iou={res.ap_iou:.4f} ap_iou_f1={res.ap_iou_f1:.4f} "
          f"({res.iterations} iterations, {res.seconds / 60:.1f} min)")


if __name__ == "__main__":
    main()
