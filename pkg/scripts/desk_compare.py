"""Paired desk-scale runs on the glyph pair: source-only, full method, target-supervised.

Prints one row per (mode, seed) and the per-mode means. The defaults are the
settings the acceptance suite uses.

    python3 scripts/desk_compare.py --seeds 0 1 2 --epochs 30
    python3 scripts/desk_compare.py --no-invert --modes base full
"""
import argparse
import csv
import sys
import time

import numpy as np

from selfens import augment, data, models, trainer
from selfens.losses import LossWeights

MODES = ("base", "full", "tgtsup")


def run(mode, seed, args):
    shift = data.Shift(args.rotation, not args.no_invert, args.noise)
    source, target = data.gen_synthetic(data.SyntheticSpec(n_train=args.n_train, n_test=args.n_test, shift=shift, seed=seed))
    if mode == "tgtsup":
        source = target
    spec = models.build(args.arch, source.train.shape, 10, args.width, bn_momentum=args.bn_momentum)
    weights = LossWeights() if mode == "full" else LossWeights(lambda_se=0.0, lambda_cb=0.0)
    cfg = trainer.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, seed=seed, weights=weights, eval_network="teacher")
    t0 = time.perf_counter()
    res = trainer.run_training(source, target, spec, cfg, *augment.preset(args.augment))
    best = res.history[res.early_stopped.epoch - 1]
    return {
        "mode": mode,
        "seed": seed,
        "best_epoch": best.epoch,
        "pass_rate": round(best.pass_rate, 4),
        "teacher_tgt_acc": best.teacher_tgt_acc,
        "final_teacher_tgt_acc": res.history[-1].teacher_tgt_acc,
        "max_pred_freq": round(max(best.tgt_pred_freq), 3),
        "seconds": round(time.perf_counter() - t0, 1),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--modes", nargs="+", choices=MODES, default=list(MODES))
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2, 3, 4])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--batch-size", type=int, default=64)
    ap.add_argument("--n-train", type=int, default=640)
    ap.add_argument("--n-test", type=int, default=500)
    ap.add_argument("--arch", choices=models.PRESETS, default="conv_small")
    ap.add_argument("--width", type=float, default=None)
    ap.add_argument("--bn-momentum", type=float, default=0.1)
    ap.add_argument("--augment", choices=augment.AUGMENT_PRESETS, default="tf")
    ap.add_argument("--rotation", type=float, default=25.0)
    ap.add_argument("--noise", type=float, default=0.1)
    ap.add_argument("--no-invert", action="store_true")
    ap.add_argument("--csv", default=None, help="also write rows to this file")
    args = ap.parse_args()

    rows = []
    writer = csv.DictWriter(sys.stdout, fieldnames=None)
    for mode in args.modes:
        for seed in args.seeds:
            row = run(mode, seed, args)
            if writer.fieldnames is None:
                writer.fieldnames = list(row)
                writer.writeheader()
            writer.writerow(row)
            sys.stdout.flush()
            rows.append(row)
    for mode in args.modes:
        accs = [r["teacher_tgt_acc"] for r in rows if r["mode"] == mode]
        print(f"# {mode}: mean teacher target acc {np.mean(accs):.3f} (sd {np.std(accs):.3f})")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
