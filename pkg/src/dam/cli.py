"""``dam`` command line: train, eval, gradcheck, params, gen-data, pretrain-backbone, ablate.

Exit status is 0 on success, 1 on a validation error (bad flag, bad or
missing config, conflicting ablation flags), 2 on a runtime failure.  Every
error path writes one JSON diagnostic line to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import ConfigError, RunConfig, load


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


ABLATION_FLAGS = {
    "b3d": ("--b3d", ("on", "off")),
    "support_background": ("--support-background", ("on", "off")),
    "skip_source": ("--skip-source", ("query", "support", "both", "none")),
    "linear_head": ("--linear-head", ("on", "off")),
}


def _config_flags(p: argparse.ArgumentParser, episodes_help: str = "training episodes") -> None:
    p.add_argument("--config", default="default", help="INI config path, or a preset: default, acceptance (default: %(default)s)")
    p.add_argument("--seed", type=int, help="training seed (overrides train.seed)")
    p.add_argument("--fold", type=int, choices=range(4), help="fold 0-3 (overrides data.fold)")
    p.add_argument("--kshot", type=int, choices=(1, 5), help="shots per episode (overrides data.kshot)")
    p.add_argument("--episodes", type=int, help=f"{episodes_help} (overrides train.episodes)")
    for key, (flag, choices) in ABLATION_FLAGS.items():
        p.add_argument(flag, choices=choices, dest=key, help=f"overrides ablation.{key}")


def _effective_config(args) -> RunConfig:
    cfg = load(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.fold is not None:
        cfg.data.fold = args.fold
    if args.kshot is not None:
        cfg.data.kshot = args.kshot
    if getattr(args, "episodes", None) is not None:
        cfg.train.episodes = args.episodes
    for key in ABLATION_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg.ablation, key, value)
    return cfg.validate()


def _echo(cfg: RunConfig) -> None:
    print(f"config {cfg.echo()}", flush=True)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dam", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="episodic training; writes model.damc and metrics.ndjson")
    _config_flags(p)
    p.add_argument("--out", default="runs/train", help="output directory (default: %(default)s)")
    p.add_argument("--workers", type=int, default=1, help="evaluation worker threads")

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out categories")
    p.add_argument("--checkpoint", required=True, help="path to a .damc checkpoint")
    p.add_argument("--seed", type=int, help="evaluation episode seed (default: the checkpoint's eval_seed)")
    p.add_argument("--fold", type=int, choices=range(4), help="fold (default: the checkpoint's fold)")
    p.add_argument("--kshot", type=int, choices=(1, 5), help="shots (default: the checkpoint's kshot)")
    p.add_argument("--episodes", type=int, default=300, help="evaluation episodes (default: %(default)s)")
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--out", help="directory for per-episode predicted-mask PNGs")
    p.add_argument("--workers", type=int, default=1, help="evaluation worker threads")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks in float64")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--all", action="store_true", help="every op plus the full-model probe (default)")
    g.add_argument("--ops", nargs="+", metavar="OP", help="subset of ops (names as in the report)")
    p.add_argument("--trials", type=int, default=5, help="random instances per op (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("params", help="learnable-parameter census")
    _config_flags(p)

    p = sub.add_parser("gen-data", help="write episodes as PNG files plus manifest.jsonl")
    p.add_argument("--fold", type=int, choices=range(4), default=0)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--kshot", type=int, choices=(1, 5), default=1)
    p.add_argument("--episodes", type=int, default=10, help="episodes to write (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    p.add_argument("--out", default="data/episodes")

    p = sub.add_parser("pretrain-backbone", help="pretrain the toy backbone and save its weights")
    p.add_argument("--config", default="default", help="INI config path, or a preset: default, acceptance")
    p.add_argument("--seed", type=int, help="backbone seed (overrides backbone.seed)")
    p.add_argument("--epochs", type=int, help="overrides backbone.pretrain_epochs")
    p.add_argument("--out", default="runs/backbone.damc", help="weights file (default: %(default)s)")

    p = sub.add_parser("ablate", help="train both arms of an ablation over seeds; print a verdict table")
    _config_flags(p, "training episodes per run")
    p.add_argument("--ablation", required=True, choices=("b3d", "support_background", "skip_source"))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", help="write the result as JSON here")
    return ap


def _cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .harness import train

    cfg = _effective_config(args)
    _echo(cfg)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.ndjson"), "w", encoding="utf-8") as log:
        ckpt, metrics = train(cfg, on_record=lambda r: log.write(json.dumps(r) + "\n"), workers=args.workers)
    path = os.path.join(args.out, "model.damc")
    digest = save_checkpoint(ckpt, path)
    print(json.dumps({"mIoU": metrics.miou, "FB-IoU": metrics.fbiou, "episodes": metrics.episodes,
                      "seconds": round(metrics.wall_time, 1)}))
    print(f"checkpoint {path} sha256 {digest}")
    return 0


def _cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .harness import evaluate

    ckpt = load_checkpoint(args.checkpoint)
    print(f"config {json.dumps(ckpt.config, sort_keys=True, separators=(',', ':'))}", flush=True)
    try:
        m = evaluate(ckpt, args.fold, args.split, args.episodes, args.kshot, args.seed, args.workers, args.out)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(json.dumps(m.record()))
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck_suite

    report = gradcheck_suite("all" if args.ops is None else args.ops, trials=args.trials, seed=args.seed)
    print("\n".join(report.lines()))
    print(f"{'PASS' if report.passed else 'FAIL'}  {len(report.errors)} checks in {report.seconds:.1f}s")
    if not report.passed:
        raise RuntimeError(f"gradient check failed for {report.failures}")
    return 0


def _cmd_params(args) -> int:
    from .census import count_parameters
    from .decoder import DAM

    cfg = _effective_config(args)
    _echo(cfg)
    print(count_parameters(DAM(cfg)).table())
    return 0


def _cmd_gen_data(args) -> int:
    from .synthset import eval_episode_seed, export_episode, sample_episode, train_episode_seed

    if args.size % 16:
        raise ConfigError(f"--size {args.size} must be divisible by 16")
    for i in range(args.episodes):
        if args.split == "train":
            seed = train_episode_seed(args.seed, args.fold, i)
        else:
            seed = eval_episode_seed(args.seed, args.fold, args.split, args.kshot, i)
        ep = sample_episode(args.fold, args.split, args.kshot, seed, args.size)
        export_episode(ep, os.path.join(args.out, f"episode_{i:05d}"))
    print(f"wrote {args.episodes} episodes to {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    from .checkpoint import Checkpoint, save_checkpoint
    from .harness import prepare_backbone

    cfg = load(args.config)
    if args.seed is not None:
        cfg.backbone.seed = args.seed
    if args.epochs is not None:
        cfg.backbone.pretrain_epochs = args.epochs
    cfg.backbone.weights = ""
    cfg.validate()
    _echo(cfg)
    bb = prepare_backbone(cfg.backbone, cfg.data.image_size)
    ckpt = Checkpoint(config=json.loads(cfg.echo()), tensors=bb.state_dict(), rng_seed=cfg.backbone.seed)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    print(f"backbone {args.out} sha256 {save_checkpoint(ckpt, args.out)}")
    return 0


def _cmd_ablate(args) -> int:
    from .ablation import ABLATIONS, run_ablation

    if getattr(args, ABLATIONS[args.ablation][0]) is not None:
        flag = ABLATION_FLAGS[ABLATIONS[args.ablation][0]][0]
        raise ConfigError(f"{flag} conflicts with --ablation {args.ablation}, which sets both arms")
    cfg = _effective_config(args)
    _echo(cfg)

    def on_run(seed, arm, m):
        print(json.dumps({"seed": seed, "arm": arm, "mIoU": m.miou, "seconds": round(m.wall_time, 1)}), flush=True)

    res = run_ablation(cfg, args.ablation, args.seeds, on_run=on_run)
    print(res.table())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(res.to_dict(), fh, indent=2)
    return 0


COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "params": _cmd_params,
    "gen-data": _cmd_gen_data,
    "pretrain-backbone": _cmd_pretrain,
    "ablate": _cmd_ablate,
}


def _diagnose(kind: str, command, exc: BaseException) -> None:
    line = {"error": kind, "command": command, "type": type(exc).__name__, "message": str(exc)}
    print(json.dumps(line), file=sys.stderr, flush=True)


def run(argv=None) -> int:
    parser = build_parser()
    command = None
    try:
        args = parser.parse_args(argv)
        command = args.command
        return COMMANDS[command](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        _diagnose("validation", command, exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - every failure maps to one diagnostic line
        _diagnose("runtime", command, exc)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
