"""Both arms of every ablation over three seeds, on the acceptance preset.

    python3 scripts/run_ablations.py --out runs/ablations.json [--episodes 3000]

Prints each seed's raw mIoU and a verdict per ablation; one pretrained
backbone is shared by all runs.
"""

import argparse
import json
import logging
import os

from dam.ablation import ABLATIONS, run_ablation
from dam.config import acceptance_config
from dam.harness import prepare_backbone


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--ablations", nargs="+", choices=list(ABLATIONS), default=list(ABLATIONS))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--episodes", type=int, default=None)
    ap.add_argument("--out", default="runs/ablations.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = acceptance_config()
    if args.episodes is not None:
        cfg.train.episodes = args.episodes
    bb = prepare_backbone(cfg.backbone, cfg.data.image_size)

    def on_run(seed, arm, m):
        logging.info("seed %d %s: mIoU %.4f (%.0fs)", seed, arm, m.miou, m.wall_time)

    results = {}
    for name in args.ablations:
        res = run_ablation(cfg, name, args.seeds, backbone=bb, on_run=on_run)
        print(f"\n[{name}]\n{res.table()}", flush=True)
        results[name] = res.to_dict()
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
