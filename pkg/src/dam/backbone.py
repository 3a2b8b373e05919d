"""Frozen convolutional feature extractor and its four-block pyramid."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .config import BackboneConfig
from .nn import ConvBlock, Module, Parameter
from .optim import SGD
from .rng import CounterRNG, derive
from .tensor import Tensor, as_tensor, no_grad

log = logging.getLogger(__name__)

# affinity blocks and skip blocks, 1-based
AFFINITY_BLOCKS = (3, 4)
SKIP_BLOCKS = (1, 2)


@dataclass
class FeaturePyramid:
    """Per-block lists of per-layer feature maps ``(C_b, H_b, W_b)``."""

    blocks: list[list[Tensor]]

    def block(self, b: int) -> list[Tensor]:
        return self.blocks[b - 1]

    def spatial(self, b: int) -> tuple[int, int]:
        return self.blocks[b - 1][0].shape[1:]


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, dtype=np.float32):
        super().__init__()
        rng = CounterRNG(derive(cfg.seed, 2))
        self.cfg = cfg
        self.pretrain_accuracy: float | None = None  # set by harness.prepare_backbone after pretraining
        layers = []
        cin = cfg.in_channels
        for n_layers, cout, down in cfg.blocks:
            block = []
            for i in range(n_layers):
                stride = down if i == 0 else 1
                block.append(ConvBlock(cin, cout, 3, rng, groups=cfg.groups, stride=stride, dtype=dtype))
                cin = cout
            layers.append(block)
        self.block1, self.block2, self.block3, self.block4 = layers

    @property
    def blocks(self):
        return [self.block1, self.block2, self.block3, self.block4]

    def __call__(self, image) -> FeaturePyramid:
        x = as_tensor(image)
        _, h, w = x.shape
        if h % 16 or w % 16:
            raise ValueError(f"backbone input {h}x{w} must be divisible by 16")
        x = (x - 0.5) * 4.0
        out = []
        for block in self.blocks:
            feats = []
            for layer in block:
                x = layer(x)
                feats.append(x)
            out.append(feats)
        return FeaturePyramid(out)


def build_backbone(cfg: BackboneConfig, dtype=np.float32) -> Backbone:
    """Deterministic He-initialized backbone with every parameter frozen."""
    bb = Backbone(cfg, dtype=dtype)
    bb.freeze()
    return bb


def extract_features(bb: Backbone, image) -> FeaturePyramid:
    img = np.asarray(image.data if isinstance(image, Tensor) else image)
    if img.ndim != 3 or img.shape[1] % 16 or img.shape[2] % 16:
        raise ValueError(f"extract_features: image must be (3, H, W) with H, W divisible by 16, got {img.shape}")
    with no_grad():
        return bb(img.astype(bb.block1[0].conv.weight.dtype))


def count_backbone_parameters(cfg: BackboneConfig) -> int:
    total = 0
    cin = cfg.in_channels
    for n_layers, cout, _ in cfg.blocks:
        for _ in range(n_layers):
            total += cout * cin * 9 + cout + 2 * cout
            cin = cout
    return total


class LinearHead(Module):
    """Per-pixel ``C -> C`` linear map, initialized to the identity."""

    def __init__(self, channels: int, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(np.eye(channels, dtype=dtype).reshape(channels, channels, 1, 1))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias)


def linear_head(features: Tensor, enabled: bool, head: LinearHead | None = None) -> Tensor:
    if not enabled:
        return features
    if head is None:
        raise ValueError("linear head enabled but no parameters given")
    return head(features)


class _PixelClassifier(Module):
    """Temporary per-pixel linear classifiers (1x1 convs) on blocks 3 and 4."""

    def __init__(self, cfg: BackboneConfig, num_classes: int, seed: int):
        super().__init__()
        rng = CounterRNG(derive(seed, 8))
        self.heads = []
        for b in AFFINITY_BLOCKS:
            c = cfg.blocks[b - 1][1]
            head = LinearHead(c)
            head.weight.data = rng.normal(0, 1 / np.sqrt(c), size=(num_classes + 1, c, 1, 1)).astype(np.float32)
            head.bias.data = np.zeros(num_classes + 1, dtype=np.float32)
            self.heads.append(head)

    def logits(self, pyr: FeaturePyramid) -> list[Tensor]:
        return [head(pyr.block(b)[-1]) for head, b in zip(self.heads, AFFINITY_BLOCKS)]


def _pixel_labels(mask: np.ndarray, label: int, hw, background: int) -> np.ndarray:
    cover = F.area_downsample(mask, hw)
    return np.where(cover >= 0.5, label, background)


def classification_accuracy(bb: Backbone, clf: _PixelClassifier, dataset) -> float:
    """Image-level accuracy: argmax of the summed foreground class probabilities."""
    correct = 0
    with no_grad():
        for image, _, label in dataset:
            z = clf.logits(bb(image))[0].data
            z = z.reshape(z.shape[0], -1)
            p = np.exp(z - z.max(axis=0))
            p /= p.sum(axis=0)
            correct += int(np.argmax(p[:-1].sum(axis=1)) == label)
    return correct / max(len(dataset), 1)


def pretrain_backbone(bb: Backbone, dataset, epochs: int, lr: float = 0.02, batch: int = 16,
                      seed: int = 0, num_classes: int | None = None, on_epoch=None):
    """Train the backbone with a temporary per-pixel linear classifier, then re-freeze it.

    ``dataset`` holds ``(image, mask, category)`` triples; every pixel of the
    block 3 and block 4 grids is labelled with the category where the mask
    covers at least half of it, background otherwise.  Returns the backbone
    and the temporary classifier.  ``on_epoch(epoch, mean_loss, clf)`` is
    called after every epoch.
    """
    if num_classes is None:
        num_classes = 1 + max((lbl for _, _, lbl in dataset), default=0)
    clf = _PixelClassifier(bb.cfg, num_classes, seed)
    if epochs <= 0:
        return bb, clf
    bb.unfreeze()
    opt = SGD(bb.parameters() + clf.parameters(), lr=lr, momentum=0.9)
    for epoch in range(epochs):
        order = CounterRNG(derive(seed, 8, epoch)).permutation(len(dataset))
        total = 0.0
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            opt.zero_grad()
            for i in idx:
                image, mask, label = dataset[i]
                loss = None
                for z in clf.logits(bb(image)):
                    target = _pixel_labels(mask, label, z.shape[1:], num_classes)
                    term = F.softmax_cross_entropy(z, target)
                    loss = term if loss is None else loss + term
                loss = loss * (1.0 / len(idx))
                loss.backward()
                total += loss.item() * len(idx)
            opt.step()
        log.info("pretrain epoch %d loss %.4f", epoch, total / len(dataset))
        if on_epoch:
            on_epoch(epoch, total / len(dataset), clf)
    bb.freeze()
    return bb, clf
