"""Episodic training and evaluation."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from PIL import Image

from . import functional as F
from .backbone import Backbone, build_backbone, classification_accuracy, pretrain_backbone
from .checkpoint import Checkpoint
from .config import BackboneConfig, RunConfig, from_dict
from .decoder import DAM, dam_forward, predict_mask
from .metrics import Metrics, aggregate, episode_counts
from .optim import SGD
from .synthset import (
    NUM_CATEGORIES, FoldSpec, classification_dataset, eval_episode_seed, sample_episode,
    train_episode_seed,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


_BACKBONE_CACHE: dict[str, Backbone] = {}


def prepare_backbone(cfg: BackboneConfig, image_size: int = 64) -> Backbone:
    """Build the frozen backbone, loading or pretraining weights as configured.

    Pretrained backbones are memoized per configuration within the process.
    """
    key = json.dumps([cfg.__dict__, image_size], sort_keys=True, default=list)
    if key in _BACKBONE_CACHE:
        return _BACKBONE_CACHE[key]
    bb = build_backbone(cfg)
    if cfg.weights:
        from .checkpoint import load_checkpoint

        ck = load_checkpoint(cfg.weights)
        own = dict(bb.named_parameters())
        state = {}
        for name in own:
            full = name if name in ck.tensors else f"backbone.{name}"
            if full not in ck.tensors:
                raise KeyError(f"backbone weights file {cfg.weights} lacks {name}")
            state[name] = ck.tensors[full]
        bb.load_state_dict(state)
    elif cfg.pretrain_epochs > 0:
        data = classification_dataset(range(NUM_CATEGORIES), cfg.pretrain_images_per_class, cfg.seed, image_size)
        _, head = pretrain_backbone(bb, data, cfg.pretrain_epochs, lr=cfg.pretrain_lr, batch=cfg.pretrain_batch,
                                    seed=cfg.seed)
        bb.pretrain_accuracy = backbone_accuracy(bb, head, image_size=image_size)
        log.info("pretrained backbone: held-out image accuracy %.3f", bb.pretrain_accuracy)
    _BACKBONE_CACHE[key] = bb
    return bb


def backbone_accuracy(bb: Backbone, head, per_class: int = 20, seed: int = 99, image_size: int = 64) -> float:
    """Image-level accuracy over all categories on images the pretraining never saw."""
    data = classification_dataset(range(NUM_CATEGORIES), per_class, seed, image_size)
    return classification_accuracy(bb, head, data)


def checkpoint_from_model(model: DAM, opt: SGD | None = None, episodes: int = 0) -> Checkpoint:
    velocity = {}
    if opt is not None:
        velocity = {n: v for n, v in zip(opt.names, opt.state.velocity)}
    state = {n: np.array(a, dtype=np.float32) for n, a in model.state_dict().items()}
    cfg = model.cfg
    return Checkpoint(
        config=json.loads(cfg.echo()), tensors=state, velocity=velocity,
        rng_seed=cfg.train.seed, rng_counter=episodes, episodes=episodes,
    )


def model_from_checkpoint(ckpt: Checkpoint) -> DAM:
    cfg = from_dict(ckpt.config)
    model = DAM(cfg, build_backbone(cfg.backbone))
    model.load_state_dict(ckpt.tensors)
    return model


def train(cfg: RunConfig, backbone: Backbone | None = None, on_record=None, workers: int = 1):
    """Episodic SGD on the fold's training categories.

    Each step averages the BCE loss of ``batch_size`` episodes.  The backbone
    never changes.  ``on_record`` receives one dict per step (and per
    evaluation) for NDJSON logging; ``workers`` only fans out evaluation.
    Returns ``(Checkpoint, Metrics)``.
    """
    cfg.validate()
    t0 = time.time()
    d, tc = cfg.data, cfg.train
    if backbone is None:
        backbone = prepare_backbone(cfg.backbone, d.image_size)
    model = DAM(cfg, backbone)
    named = model.learnable()
    opt = SGD([p for _, p in named], lr=tc.lr, momentum=tc.momentum, names=[n for n, _ in named])
    metrics = Metrics()
    model.train()
    done = 0
    steps = math.ceil(tc.episodes / tc.batch_size) if tc.episodes else 0
    for step in range(steps):
        nb = min(tc.batch_size, tc.episodes - done)
        opt.zero_grad()
        total = 0.0
        for _ in range(nb):
            seed = train_episode_seed(tc.seed, d.fold, done)
            ep = sample_episode(d.fold, "train", d.kshot, seed, d.image_size)
            loss = F.bce_loss(dam_forward(ep, model), ep.query[1][None]) * (1.0 / nb)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (lr={tc.lr}, episode seed={seed})"
                )
            loss.backward()
            total += value
            done += 1
        opt.step()
        metrics.loss_curve.append(total)
        if on_record:
            on_record({"step": step, "loss": total, "episodes": done})
        if tc.eval_every and (step + 1) % tc.eval_every == 0 and step + 1 < steps:
            m = evaluate_model(model, d.fold, "test", tc.eval_episodes, d.kshot, tc.eval_seed, workers)
            model.train()
            if on_record:
                on_record(m.record(step=step, loss=total))
    ckpt = checkpoint_from_model(model, opt, done)
    if tc.eval_episodes:
        final = evaluate_model(model, d.fold, "test", tc.eval_episodes, d.kshot, tc.eval_seed, workers)
        metrics.per_category_iou = final.per_category_iou
        metrics.miou, metrics.fbiou = final.miou, final.fbiou
        metrics.fg_iou, metrics.bg_iou = final.fg_iou, final.bg_iou
        if on_record:
            on_record(final.record(step=steps, loss=metrics.loss_curve[-1] if metrics.loss_curve else None))
    metrics.episodes = done
    metrics.wall_time = time.time() - t0
    return ckpt, metrics


def evaluate_predictor(predict, fold: int, split: str, num_episodes: int, kshot: int, seed: int,
                       image_size: int = 64, workers: int = 1, dump_dir: str | None = None) -> Metrics:
    """Score ``predict(episode) -> binary mask`` on a fixed episode stream.

    Per-episode counts are stored by episode index and reduced in order, so
    any worker count yields identical metrics.
    """
    t0 = time.time()
    cats = FoldSpec(fold).categories(split)
    if os.environ.get("DAM_DETERMINISTIC") == "1":
        workers = 1
    if dump_dir:
        os.makedirs(dump_dir, exist_ok=True)

    def run(i):
        ep = sample_episode(fold, split, kshot, eval_episode_seed(seed, fold, split, kshot, i), image_size)
        pred = predict(ep)
        if dump_dir:
            Image.fromarray((np.asarray(pred) * 255).astype(np.uint8), mode="L").save(
                os.path.join(dump_dir, f"episode_{i:05d}_pred.png"))
        return episode_counts(ep.category, pred, ep.query[1])

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(run, range(num_episodes)))
    else:
        rows = [run(i) for i in range(num_episodes)]
    m = aggregate(rows, cats)
    m.wall_time = time.time() - t0
    return m


def evaluate_model(model: DAM, fold: int, split: str, num_episodes: int, kshot: int, seed: int,
                   workers: int = 1, dump_dir: str | None = None) -> Metrics:
    model.eval()
    return evaluate_predictor(lambda ep: predict_mask(model, ep), fold, split, num_episodes, kshot,
                              seed, model.cfg.data.image_size, workers, dump_dir)


def evaluate(ckpt: Checkpoint, fold: int | None = None, split: str = "test", num_episodes: int = 300,
             kshot: int | None = None, seed: int | None = None, workers: int = 1,
             dump_dir: str | None = None) -> Metrics:
    model = model_from_checkpoint(ckpt)
    cfg = model.cfg
    fold = cfg.data.fold if fold is None else fold
    if split == "test" and fold != cfg.data.fold:
        raise ValueError(
            f"fold/category mismatch: checkpoint trained on fold {cfg.data.fold}, "
            f"its categories overlap the test split of fold {fold}"
        )
    kshot = cfg.data.kshot if kshot is None else kshot
    if kshot != cfg.data.kshot and cfg.ablation.kshot_fusion == "channel_concat":
        raise ValueError(f"channel_concat model built for {cfg.data.kshot} shots cannot evaluate {kshot}")
    seed = cfg.train.eval_seed if seed is None else seed
    return evaluate_model(model, fold, split, num_episodes, kshot, seed, workers, dump_dir)
