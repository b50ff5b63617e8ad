#!/usr/bin/env python3
"""Run the desk-scale experiments on the synthetic corpus.

    python scripts/desk_experiments.py all --root desk_runs
    python scripts/desk_experiments.py ablation --root desk_runs --seeds 0 1 2

Stand-in networks are trained once under ``--root`` and reused by later runs.
"""

import argparse
import logging

import torch

from sggan import experiments


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("which", choices=["all", "smoke", "ablation", "transfer"])
    p.add_argument("--root", default="desk_runs", help="directory for corpora, networks and results")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--full-table", action="store_true", help="ablate all four loss configurations")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    torch.set_num_threads(args.threads)

    if args.which == "all":
        experiments.run_all(args.root, args.epochs, args.seeds)
        return
    desk = experiments.prepare(args.root)
    if args.which == "smoke":
        s = experiments.smoke(desk, args.epochs)
        print(f"held-out pixel loss {s.untrained:.4f} -> {s.trained:.4f} (ratio {s.ratio:.3f}, {s.seconds:.0f}s)")
    elif args.which == "ablation":
        configs = experiments.TABLE_I if args.full_table else experiments.ABLATION_CONFIGS
        a = experiments.ablation(desk, args.epochs, args.seeds, configs=configs)
        for row in a.result.summary:
            print(f"{row.config:<16} median AUC {row.auc:6.2f}  EER {row.eer:6.2f}")
        print(f"epochs for the with-S run to reach the without-S final L_R, without-S epoch count: {a.reach}")
        print(f"results in {desk.root / 'ablation'}")
    else:
        print(experiments.transfer(desk, args.epochs, args.seeds).table(), end="")


if __name__ == "__main__":
    main()
