"""Paired ablation runs with a majority direction verdict over seeds."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

from .config import RunConfig

# name -> (ablation field, arm expected to be at least as good, other arm)
ABLATIONS = {
    "b3d": ("b3d", "on", "off"),
    "support_background": ("support_background", "on", "off"),
    "skip_source": ("skip_source", "query", "support"),
}
INCONCLUSIVE_MARGIN = 0.02


@dataclass
class AblationResult:
    name: str
    better: str
    worse: str
    seeds: list[int] = field(default_factory=list)
    better_miou: list[float] = field(default_factory=list)
    worse_miou: list[float] = field(default_factory=list)

    @property
    def wins(self) -> int:
        return sum(a >= b for a, b in zip(self.better_miou, self.worse_miou))

    @property
    def mean_margin(self) -> float:
        diffs = [a - b for a, b in zip(self.better_miou, self.worse_miou)]
        return sum(diffs) / max(len(diffs), 1)

    @property
    def verdict(self) -> str:
        """``pass`` on a seed majority; a losing direction within the margin is ``inconclusive``."""
        if 2 * self.wins > len(self.seeds):
            return "pass"
        if -self.mean_margin < INCONCLUSIVE_MARGIN:
            return "inconclusive"
        return "fail"

    def table(self) -> str:
        field_name = ABLATIONS[self.name][0]
        head = f"{'seed':>4}  {field_name + '=' + self.better:>24}  {field_name + '=' + self.worse:>24}  {'diff':>7}"
        rows = [head]
        for s, a, b in zip(self.seeds, self.better_miou, self.worse_miou):
            rows.append(f"{s:>4}  {a:>24.4f}  {b:>24.4f}  {a - b:>+7.4f}")
        rows.append(f"wins {self.wins}/{len(self.seeds)}  mean diff {self.mean_margin:+.4f}  verdict {self.verdict}")
        return "\n".join(rows)

    def to_dict(self) -> dict:
        return {"name": self.name, "better": self.better, "worse": self.worse, "seeds": self.seeds,
                "better_miou": self.better_miou, "worse_miou": self.worse_miou,
                "wins": self.wins, "mean_margin": self.mean_margin, "verdict": self.verdict}


def arm_config(cfg: RunConfig, name: str, value: str, seed: int) -> RunConfig:
    out = copy.deepcopy(cfg)
    setattr(out.ablation, ABLATIONS[name][0], value)
    out.train.seed = seed
    return out.validate()


def run_ablation(cfg: RunConfig, name: str, seeds, backbone=None, on_run=None) -> AblationResult:
    """Train and evaluate both arms of ``name`` for every seed.

    ``on_run(seed, arm, metrics)`` is called after each training run.
    """
    from .harness import prepare_backbone, train

    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; known: {sorted(ABLATIONS)}")
    _, better, worse = ABLATIONS[name]
    if backbone is None:
        backbone = prepare_backbone(cfg.backbone, cfg.data.image_size)
    res = AblationResult(name, better, worse)
    for seed in seeds:
        scores = {}
        for arm in (better, worse):
            _, metrics = train(arm_config(cfg, name, arm, seed), backbone)
            scores[arm] = metrics.miou
            if on_run:
                on_run(seed, arm, metrics)
        res.seeds.append(int(seed))
        res.better_miou.append(scores[better])
        res.worse_miou.append(scores[worse])
    return res
