"""Procedural shapes for episodic few-shot segmentation.

Twelve shape families form the categories; four folds each hold out three
of them.  A sample is a smooth two-colour gradient with pixel noise, 0-2
distractor shapes from other categories drawn first, then 1-3 instances of
the target category on top.  The mask is the union of target instances.

Everything is a pure function of ``(category, seed)`` through
:mod:`dam.rng`, so a dataset never needs to be stored.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .rng import CounterRNG, derive

FAMILIES = (
    "circle", "square", "triangle", "ring", "cross", "star",
    "ellipse", "crescent", "diamond", "h-bar", "t-bar", "fourier-blob",
)
NUM_CATEGORIES = len(FAMILIES)
NUM_FOLDS = 4
SCALE_RANGE = (0.15, 0.4)
AREA_RANGE = (0.02, 0.60)
SPLITS = {"train": 0, "test": 1}


@dataclass(frozen=True)
class Category:
    id: int
    family: str
    scale: tuple[float, float] = SCALE_RANGE
    margin: float = 0.5  # centre keeps this fraction of the radius inside the image


CATEGORIES = tuple(Category(i, f) for i, f in enumerate(FAMILIES))


@dataclass(frozen=True)
class FoldSpec:
    fold: int

    def __post_init__(self):
        if not 0 <= self.fold < NUM_FOLDS:
            raise ValueError(f"fold must be in 0..{NUM_FOLDS - 1}, got {self.fold}")

    @property
    def test_categories(self) -> tuple[int, ...]:
        per = NUM_CATEGORIES // NUM_FOLDS
        return tuple(range(self.fold * per, (self.fold + 1) * per))

    @property
    def train_categories(self) -> tuple[int, ...]:
        return tuple(c for c in range(NUM_CATEGORIES) if c not in self.test_categories)

    def categories(self, split: str) -> tuple[int, ...]:
        if split == "train":
            return self.train_categories
        if split == "test":
            return self.test_categories
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")


@dataclass
class Episode:
    supports: list  # [(image (3, H, W) float32 in [0, 1], mask (H, W) uint8)]
    query: tuple
    category: int
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def kshot(self) -> int:
        return len(self.supports)


def _inside(family: str, u: np.ndarray, v: np.ndarray, blob: np.ndarray) -> np.ndarray:
    r = np.hypot(u, v)
    th = np.arctan2(v, u)
    if family == "circle":
        return r < 1.0
    if family == "square":
        return np.maximum(np.abs(u), np.abs(v)) < 0.75
    if family == "triangle":
        return (v > -0.5) & (v < 1.0 - np.sqrt(3.0) * np.abs(u))
    if family == "ring":
        return (r < 1.0) & (r > 0.55)
    if family == "cross":
        return ((np.abs(u) < 0.3) & (np.abs(v) < 0.95)) | ((np.abs(v) < 0.3) & (np.abs(u) < 0.95))
    if family == "star":
        return r < 0.35 + 0.65 * np.abs(np.cos(2.5 * th)) ** 2
    if family == "ellipse":
        return u * u + (v / 0.5) ** 2 < 1.0
    if family == "crescent":
        return (r < 1.0) & ((u - 0.45) ** 2 + v * v > 0.8 ** 2)
    if family == "diamond":
        return np.abs(u) / 0.7 + np.abs(v) < 1.0
    if family == "h-bar":
        au, av = np.abs(u), np.abs(v)
        return ((au > 0.5) & (au < 0.85) & (av < 0.9)) | ((au < 0.85) & (av < 0.18))
    if family == "t-bar":
        return ((np.abs(u) < 0.9) & (v > 0.55) & (v < 0.9)) | ((np.abs(u) < 0.2) & (v > -0.9) & (v <= 0.55))
    if family == "fourier-blob":
        rad = 0.7 + 0.18 * np.cos(3 * th + 0.5) + 0.12 * np.sin(2 * th) + blob[0] * np.cos(4 * th + blob[1])
        return r < rad
    raise ValueError(f"unknown shape family {family!r}")


def _shape_mask(cat: Category, rng: CounterRNG, size: int, shrink: float) -> np.ndarray:
    lo, hi = cat.scale
    radius = rng.uniform(lo, hi) * size * shrink
    angle = rng.uniform(0.0, 2 * np.pi)
    m = cat.margin * radius
    cy = rng.uniform(m, size - m)
    cx = rng.uniform(m, size - m)
    blob = np.array([rng.uniform(0.0, 0.06), rng.uniform(0.0, 2 * np.pi)])
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = (c * dx + s * dy) / radius
    v = (-s * dx + c * dy) / radius
    return _inside(cat.family, u, v, blob)


def _colour(rng: CounterRNG, avoid: list[np.ndarray], min_dist: float = 0.35) -> np.ndarray:
    for _ in range(64):
        col = rng.uniform(size=3)
        if all(np.linalg.norm(col - a) >= min_dist for a in avoid):
            return col
    return col


def _render_attempt(cat: Category, rng: CounterRNG, size: int, distractors: bool):
    c0, c1 = rng.uniform(size=3), rng.uniform(size=3)
    ang = rng.uniform(0.0, 2 * np.pi)
    yy, xx = (np.mgrid[0:size, 0:size] + 0.5) / size
    t = (np.cos(ang) * (xx - 0.5) + np.sin(ang) * (yy - 0.5)) / np.sqrt(0.5) + 0.5
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    used = [(c0 + c1) / 2]

    others = [c for c in range(NUM_CATEGORIES) if c != cat.id]
    n_distract = rng.integers(0, 3) if distractors else 0
    distract = np.zeros((size, size), dtype=bool)
    for _ in range(n_distract):
        other = CATEGORIES[others[rng.integers(0, len(others))]]
        sm = _shape_mask(other, rng, size, 0.8)
        col = _colour(rng, used)
        used.append(col)
        img[:, sm] = col[:, None]
        distract |= sm

    n_inst = rng.integers(1, 4)
    shrink = 1.0 if n_inst == 1 else 0.75
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(n_inst):
        sm = _shape_mask(cat, rng, size, shrink)
        col = _colour(rng, used)
        used.append(col)
        img[:, sm] = col[:, None]
        mask |= sm
    distract &= ~mask
    img = img + rng.normal(0.0, 0.04, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask.astype(np.uint8), distract


def render_sample(cat: Category | int, seed: int, size: int = 64, distractors: bool = True,
                  return_distractors: bool = False):
    """``(image (3, H, W) float32, mask (H, W) uint8)`` for one category and seed.

    Draws are retried on derived sub-seeds until the mask area lies within
    ``AREA_RANGE``.
    """
    if isinstance(cat, int):
        cat = CATEGORIES[cat]
    for attempt in range(1000):
        rng = CounterRNG(derive(seed, 6, attempt))
        img, mask, distract = _render_attempt(cat, rng, size, distractors)
        area = mask.mean()
        if AREA_RANGE[0] <= area <= AREA_RANGE[1]:
            break
    else:  # pragma: no cover - the area window is wide
        raise RuntimeError(f"no valid render for category {cat.id} seed {seed}")
    if return_distractors:
        return img, mask, distract
    return img, mask


def sample_episode(fold: FoldSpec | int, split: str, kshot: int, seed: int, size: int = 64) -> Episode:
    if kshot < 1:
        raise ValueError(f"kshot must be >= 1, got {kshot}")
    if isinstance(fold, int):
        fold = FoldSpec(fold)
    cats = fold.categories(split)
    cat = cats[CounterRNG(derive(seed, 5, 1 << 20)).integers(0, len(cats))]
    seeds = [derive(seed, 5, k) for k in range(kshot + 1)]
    samples = [render_sample(cat, s, size) for s in seeds]
    return Episode(samples[:kshot], samples[kshot], cat, seed,
                   {"fold": fold.fold, "split": split, "sample_seeds": seeds})


def train_episode_seed(seed: int, fold: int, index: int) -> int:
    return derive(seed, 3, fold, index)


def eval_episode_seed(seed: int, fold: int, split: str, kshot: int, index: int) -> int:
    return derive(seed, 4, fold, SPLITS[split], kshot, index)


def classification_dataset(categories, per_class: int, seed: int, size: int = 64):
    """``(image, mask, category)`` triples, one category per image, no distractors."""
    data = []
    for cat in categories:
        for i in range(per_class):
            img, mask = render_sample(cat, derive(seed, 7, cat, i), size, distractors=False)
            data.append((img, mask, int(cat)))
    return data


# export ---------------------------------------------------------------------------

def _to_png(path: str, arr: np.ndarray, mode: str) -> None:
    try:
        Image.fromarray(arr, mode=mode).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _image_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def export_episode(ep: Episode, directory: str) -> list[str]:
    """Write PNG images and masks plus ``manifest.jsonl``; returns written paths."""
    os.makedirs(directory, exist_ok=True)
    written = []
    records = [{"kind": "episode", "category": ep.category, "family": FAMILIES[ep.category],
                "kshot": ep.kshot, "seed": ep.seed, "size": int(ep.query[1].shape[0])}]
    roles = [("support", k, s) for k, s in enumerate(ep.supports)] + [("query", 0, ep.query)]
    for role, k, (img, mask) in roles:
        stem = f"{role}_{k}"
        ipath = os.path.join(directory, f"{stem}_image.png")
        mpath = os.path.join(directory, f"{stem}_mask.png")
        _to_png(ipath, _image_u8(img), "RGB")
        _to_png(mpath, (mask * 255).astype(np.uint8), "L")
        written += [ipath, mpath]
        records.append({"kind": "sample", "role": role, "index": k,
                        "image": os.path.basename(ipath), "mask": os.path.basename(mpath)})
    manifest = os.path.join(directory, "manifest.jsonl")
    with open(manifest, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return written + [manifest]


def import_episode(directory: str) -> Episode:
    """Inverse of :func:`export_episode` (images come back quantized to 8 bits)."""
    manifest = os.path.join(directory, "manifest.jsonl")
    try:
        with open(manifest, encoding="utf-8") as fh:
            records = [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise OSError(f"cannot read {manifest}: {exc}") from exc
    head = records[0]
    supports, query = [], None
    for rec in records[1:]:
        with Image.open(os.path.join(directory, rec["image"])) as im:
            img = np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
        with Image.open(os.path.join(directory, rec["mask"])) as im:
            mask = (np.asarray(im) > 127).astype(np.uint8)
        if rec["role"] == "support":
            supports.append((img, mask))
        else:
            query = (img, mask)
    return Episode(supports, query, head["category"], head["seed"])
