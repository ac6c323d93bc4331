#!/usr/bin/env python3
"""Run the four-mode comparison on a seeded phantom dataset.

Generates (or reuses) the dataset, preprocesses every case once, trains
single_view / bgn_only / ign_only / full_agn across seeds, and writes one
FROC CSV + summary per run plus a combined table.
"""

import argparse
import json
import logging
import time
from pathlib import Path

from mammograph import harness as h
from mammograph import phantom as ph


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ablation", help="output directory")
    ap.add_argument("--data", default=None, help="existing dataset dir (else generated)")
    ap.add_argument("--n-cases", type=int, default=1000)
    ap.add_argument("--image-size", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0, help="dataset seed")
    ap.add_argument("--train-seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=1)
    ap.add_argument("--lr", type=float, default=0.02)
    ap.add_argument("--jobs", type=int, default=2)
    args = ap.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()

    pcfg = ph.PhantomConfig(seed=args.seed, image_size=args.image_size)
    if args.data:
        manifest = Path(args.data) / "manifest.txt"
    else:
        data_dir = out / "data"
        manifest = data_dir / "manifest.txt"
        if not manifest.exists():
            logging.info("generating %d cases ...", args.n_cases)
            ph.generate_dataset(pcfg, args.n_cases, (0.8, 0.1, 0.1), data_dir,
                                jobs=args.jobs)

    cfg = h.TrainConfig(epochs=args.epochs, lr=args.lr, lr_milestones=(0.75,),
                        base_box_side=4 * pcfg.median_mass_radius)
    logging.info("preprocessing ...")
    prepared = h.load_and_prepare(manifest, cfg, splits=("train", "test"),
                                  progress_every=200)
    result = h.run_mode_experiment(prepared, cfg, seeds=tuple(args.train_seeds))

    table = {}
    for (mode, seed), curve in result.curves.items():
        h.write_froc_csv(out / f"froc_{mode}_seed{seed}.csv", curve)
        h.write_summary(out / f"summary_{mode}_seed{seed}.txt", mode, seed, curve)
        table.setdefault(mode, {})[seed] = {f"R@{f}": r for f, r in curve.points}
    medians = {mode: result.median_recall(mode) for mode in table}
    report = {"medians_R@1.0": medians, "runs": table,
              "runtime_s": round(time.time() - t0, 1)}
    (out / "ablation.json").write_text(json.dumps(report, indent=1))
    print(json.dumps(report["medians_R@1.0"], indent=1))
    print(f"total runtime: {report['runtime_s']} s")


if __name__ == "__main__":
    main()
