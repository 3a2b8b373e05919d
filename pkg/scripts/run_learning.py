"""Learning run: train on fold 0 and compare against untrained and all-foreground baselines.

    python3 scripts/run_learning.py --out runs/learning

Defaults come from the ``acceptance`` preset; flags override single fields.
"""

import argparse
import json
import logging
import os
import time

import numpy as np

from dam.checkpoint import save_checkpoint
from dam.config import acceptance_config
from dam.decoder import DAM
from dam.harness import evaluate_model, evaluate_predictor, prepare_backbone, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=3000)
    ap.add_argument("--eval-episodes", type=int, default=300)
    ap.add_argument("--pretrain-epochs", type=int, default=None)
    ap.add_argument("--lr", type=float, default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/learning")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = acceptance_config()
    if args.pretrain_epochs is not None:
        cfg.backbone.pretrain_epochs = args.pretrain_epochs
    if args.lr is not None:
        cfg.train.lr = args.lr
    cfg.train.episodes = args.episodes
    cfg.train.eval_episodes = args.eval_episodes
    cfg.train.seed = args.seed
    os.makedirs(args.out, exist_ok=True)

    t0 = time.time()
    bb = prepare_backbone(cfg.backbone, cfg.data.image_size)
    t_pre = time.time() - t0
    d, tc = cfg.data, cfg.train

    untrained = evaluate_model(DAM(cfg, bb), d.fold, "test", tc.eval_episodes, d.kshot, tc.eval_seed)
    allfg = evaluate_predictor(lambda ep: np.ones_like(ep.query[1]), d.fold, "test", tc.eval_episodes,
                               d.kshot, tc.eval_seed, d.image_size)
    log = open(os.path.join(args.out, "metrics.ndjson"), "w", encoding="utf-8")

    def on_record(rec):
        log.write(json.dumps(rec) + "\n")
        log.flush()
        if "mIoU" in rec or rec["step"] % 25 == 0:
            logging.info("%s", rec)

    t1 = time.time()
    ckpt, metrics = train(cfg, bb, on_record)
    log.close()
    save_checkpoint(ckpt, os.path.join(args.out, "model.damc"))
    summary = {
        "trained_miou": metrics.miou, "trained_fbiou": metrics.fbiou,
        "per_category": metrics.per_category_iou,
        "untrained_miou": untrained.miou, "all_foreground_miou": allfg.miou,
        "first_loss": metrics.loss_curve[0] if metrics.loss_curve else None,
        "last_loss": float(np.mean(metrics.loss_curve[-20:])) if metrics.loss_curve else None,
        "backbone_pretrain_accuracy": bb.pretrain_accuracy, "pretrain_seconds": t_pre, "train_seconds": time.time() - t1,
    }
    print(json.dumps(summary, indent=2))
    with open(os.path.join(args.out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)


if __name__ == "__main__":
    main()
