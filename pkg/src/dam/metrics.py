"""IoU bookkeeping.

Per-category IoU is dataset-level: intersections and unions are summed over
all episodes of a category before dividing.  A category whose union stays
zero scores 1.  FB-IoU averages the foreground and background IoU pooled
over every episode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def compute_iou(pred, gt) -> tuple[int, int]:
    """Foreground ``(intersection, union)`` pixel counts."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"compute_iou: prediction {p.shape} vs ground truth {g.shape}")
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p | g))


def _ratio(i: int, u: int) -> float:
    return 1.0 if u == 0 else i / u


@dataclass
class Metrics:
    per_category_iou: dict[int, float] = field(default_factory=dict)
    miou: float = float("nan")
    fbiou: float = float("nan")
    fg_iou: float = float("nan")
    bg_iou: float = float("nan")
    loss_curve: list[float] = field(default_factory=list)
    episodes: int = 0
    wall_time: float = 0.0

    def record(self, **extra) -> dict:
        rec = {
            "mIoU": self.miou,
            "FB-IoU": self.fbiou,
            "per_category_iou": {str(k): v for k, v in sorted(self.per_category_iou.items())},
            "episodes": self.episodes,
        }
        rec.update(extra)
        return rec


def aggregate(rows, categories=None) -> Metrics:
    """``rows``: iterable of ``(category, fg_inter, fg_union, bg_inter, bg_union)`` in episode order."""
    inter: dict[int, int] = {}
    union: dict[int, int] = {}
    fi = fu = bi = bu = 0
    n = 0
    for cat, a, b, c, d in rows:
        inter[cat] = inter.get(cat, 0) + a
        union[cat] = union.get(cat, 0) + b
        fi, fu, bi, bu = fi + a, fu + b, bi + c, bu + d
        n += 1
    cats = sorted(categories if categories is not None else inter)
    per = {c: _ratio(inter.get(c, 0), union.get(c, 0)) for c in cats if c in inter}
    m = Metrics(per_category_iou=per, episodes=n)
    if per:
        m.miou = float(np.mean(list(per.values())))
    m.fg_iou = _ratio(fi, fu)
    m.bg_iou = _ratio(bi, bu)
    m.fbiou = (m.fg_iou + m.bg_iou) / 2
    return m


def episode_counts(category: int, pred, gt) -> tuple[int, int, int, int, int]:
    fi, fu = compute_iou(pred, gt)
    bi, bu = compute_iou(~np.asarray(pred).astype(bool), ~np.asarray(gt).astype(bool))
    return category, fi, fu, bi, bu
