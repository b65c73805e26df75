"""Desk-scale ablation on the 8-class ring: trains each preset for several
seeds and writes the comparison table.

    python scripts/ring8_ablation.py --steps 20000 --seeds 0,1,2,3 --out runs/ablation
"""
import argparse
import json
import logging
from pathlib import Path

import torch

from ecgan_lab.cli import ExperimentConfig, run_experiment, write_tables

DEFAULT_PRESETS = "ECGAN-0,ECGAN-U,ECGAN-C,ECGAN-UC,ECGAN-UCE,ProjGAN,ACGAN,ContraGAN"


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--presets", default=DEFAULT_PRESETS)
    p.add_argument("--steps", type=int, default=20_000)
    p.add_argument("--eval-every", type=int, default=2_000)
    p.add_argument("--seeds", default="0,1")
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--force", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(args.threads)

    root = Path(args.out)
    summaries = []
    for name in args.presets.split(","):
        cfg = ExperimentConfig(preset=name, seeds=[int(s) for s in args.seeds.split(",")],
                               out_root=root,
                               train={"n_iter": args.steps, "eval_every": args.eval_every})
        existing = cfg.run_dir() / "summary.json"
        if existing.exists() and not args.force:
            summaries.append(json.loads(existing.read_text()))
            continue
        summaries.append(run_experiment(cfg, force=args.force))
    txt, csv_path = write_tables(summaries, root / "compare")
    print(txt.read_text(), end="")
    print(f"tables: {txt} {csv_path}")


if __name__ == "__main__":
    main()
