"""Decoder (Conv1, Conv2, classifier head) and the full few-shot model."""

from __future__ import annotations

import numpy as np

from .affinity import stack_block_affinities
from .backbone import AFFINITY_BLOCKS, Backbone, LinearHead, build_backbone, extract_features
from .config import RunConfig
from .functional import area_downsample, upsample_bilinear
from .hsfm import HSFM
from .nn import Conv2d, ConvBlock, Module
from .rng import CounterRNG, derive
from .tensor import Tensor, add, concat, mean, no_grad, relu, reshape, split


class Conv1Block(Module):
    """3x3 block, then twice: concat(1x1 block, 3x3 block) at half width each."""

    def __init__(self, cin: int, channels: int, rng: CounterRNG, groups: int = 4, dtype=np.float32):
        super().__init__()
        if channels % 2:
            raise ValueError(f"Conv1 channels must be even, got {channels}")
        half = channels // 2
        self.entry = ConvBlock(cin, channels, 3, rng, groups, dtype=dtype)
        self.point1 = ConvBlock(channels, half, 1, rng, groups, dtype=dtype)
        self.wide1 = ConvBlock(channels, half, 3, rng, groups, dtype=dtype)
        self.point2 = ConvBlock(channels, half, 1, rng, groups, dtype=dtype)
        self.wide2 = ConvBlock(channels, half, 3, rng, groups, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        f1 = self.entry(x)
        f2 = concat([self.point1(f1), self.wide1(f1)], 0)
        return concat([self.point2(f2), self.wide2(f2)], 0)


class Conv2Block(Module):
    """Half the channels through a 1x1 block; the other half through a 3x3 block,
    split again into 1x1 and 3x3 quarters; all parts concatenated."""

    def __init__(self, channels: int, rng: CounterRNG, groups: int = 4, dtype=np.float32):
        super().__init__()
        if channels % 4:
            raise ValueError(f"Conv2 channels must be divisible by 4, got {channels}")
        half, quarter = channels // 2, channels // 4
        self.point = ConvBlock(half, half, 1, rng, groups, dtype=dtype)
        self.wide = ConvBlock(half, half, 3, rng, groups, dtype=dtype)
        self.point_q = ConvBlock(quarter, quarter, 1, rng, groups, dtype=dtype)
        self.wide_q = ConvBlock(quarter, quarter, 3, rng, groups, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        a, b = split(x, 0, 2)
        a = self.point(a)
        b1, b2 = split(self.wide(b), 0, 2)
        return concat([a, self.point_q(b1), self.wide_q(b2)], 0)


def conv2_param_count(channels: int) -> int:
    """Conv weights and biases of one Conv2 block (norm affines excluded)."""
    h, q = channels // 2, channels // 4
    return (h * h + h) + (h * h * 9 + h) + (q * q + q) + (q * q * 9 + q)


def plain_conv_param_count(channels: int) -> int:
    """Two ordinary 3x3 ``C -> C`` convolutions, the baseline Conv2 replaces."""
    return 2 * (channels * channels * 9 + channels)


def fuse_blocks(f3: Tensor, f4: Tensor, conv2_blocks) -> Tensor:
    """Upsample the deeper map, add, then refine with the Conv2 blocks in order."""
    up = upsample_bilinear(f4, f3.shape[1:])
    if up.shape != f3.shape:
        raise ValueError(f"fuse_blocks: {up.shape} vs {f3.shape} after upsampling")
    x = add(f3, up)
    for block in conv2_blocks:
        x = block(x)
    return x


class _TwoConv(Module):
    def __init__(self, cin, cout, rng, dtype):
        super().__init__()
        self.conv_a = Conv2d(cin, cout, 3, rng, dtype=dtype)
        self.conv_b = Conv2d(cout, cout, 3, rng, dtype=dtype)

    def __call__(self, x):
        return relu(self.conv_b(relu(self.conv_a(x))))


class ClassifierHead(Module):
    """Three two-conv blocks with x2 upsampling between them; low-level
    features are concatenated after each upsampling, then a 1x1 conv to one
    logit channel and a bilinear resize to the image."""

    def __init__(self, cin: int, skip_channels: tuple[int, int], rng: CounterRNG,
                 channels=(16, 8), dtype=np.float32):
        super().__init__()
        c1, c2 = channels
        self.skip_channels = skip_channels
        self.block1 = _TwoConv(cin, c1, rng, dtype)
        self.block2 = _TwoConv(c1 + skip_channels[0], c2, rng, dtype)
        self.block3 = _TwoConv(c2 + skip_channels[1], c2, rng, dtype)
        self.out = Conv2d(c2, 1, 1, rng, dtype=dtype)

    def __call__(self, x: Tensor, skips, out_size) -> Tensor:
        """``skips`` is ``(block2_features, block1_features)``, entries may be None."""
        x = self.block1(x)
        for block, skip in ((self.block2, skips[0]), (self.block3, skips[1])):
            h, w = x.shape[1:]
            x = upsample_bilinear(x, (2 * h, 2 * w))
            if skip is not None:
                if skip.shape[1:] != x.shape[1:]:
                    raise ValueError(f"skip features {skip.shape} do not match decoder stage {x.shape}")
                x = concat([x, skip], 0)
            x = block(x)
        return upsample_bilinear(self.out(x), tuple(out_size))


class DAM(Module):
    """Few-shot segmentation model: frozen backbone + learnable head."""

    def __init__(self, cfg: RunConfig, backbone: Backbone | None = None, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        m, ab = cfg.model, cfg.ablation
        rng = CounterRNG(derive(cfg.train.seed, 1))
        self.backbone = backbone if backbone is not None else build_backbone(cfg.backbone, dtype)
        blocks = cfg.backbone.blocks
        if ab.linear_head == "on":
            self.head3 = LinearHead(blocks[2][1], dtype)
            self.head4 = LinearHead(blocks[3][1], dtype)
        hsfm_kw = dict(
            kshot=cfg.data.kshot, rng=rng, enabled=ab.b3d == "on", fusion=ab.kshot_fusion,
            hidden=m.b3d_hidden, out_channels=m.coarse_channels, kernel_planes=m.kernel_planes,
            depth_kernel=m.depth_kernel, bn_momentum=m.bn_momentum, dtype=dtype,
        )
        self.hsfm3 = HSFM(blocks[2][0], **hsfm_kw)
        self.hsfm4 = HSFM(blocks[3][0], **hsfm_kw)
        c = m.conv_channels
        self.conv1_3 = Conv1Block(self.hsfm3.out_channels, c, rng, m.groups, dtype)
        self.conv1_4 = Conv1Block(self.hsfm4.out_channels, c, rng, m.groups, dtype)
        self.conv2 = [Conv2Block(c, rng, m.groups, dtype), Conv2Block(c, rng, m.groups, dtype)]
        per_side = {"query": 1, "support": 1, "both": 2, "none": 0}[ab.skip_source]
        skip_ch = (per_side * blocks[1][1], per_side * blocks[0][1])
        self.classifier = ClassifierHead(c, skip_ch, rng, m.classifier_channels, dtype)

    @property
    def dtype(self):
        return self.conv1_3.entry.conv.weight.dtype

    def learnable(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad and not n.startswith("backbone.")]

    def _skips(self, pq, ps):
        src = self.cfg.ablation.skip_source
        if src == "none":
            return (None, None)
        out = []
        for b in (2, 1):
            q = pq.block(b)[-1]
            shots = [p.block(b)[-1] for p in ps]
            s = shots[0] if len(shots) == 1 else mean(concat([reshape(t, (1,) + t.shape) for t in shots], 0), 0)
            out.append({"query": q, "support": s, "both": concat([q, s], 0) if src == "both" else None}[src])
        return tuple(out)

    def __call__(self, episode) -> Tensor:
        return dam_forward(episode, self)


def dam_forward(episode, model: DAM) -> Tensor:
    """Episode -> query mask logits ``(1, H, W)``."""
    cfg = model.cfg
    q_img = episode.query[0]
    pq = extract_features(model.backbone, q_img)
    ps = [extract_features(model.backbone, img) for img, _ in episode.supports]
    bg_off = cfg.ablation.support_background == "off"
    fused_in = []
    for b in AFFINITY_BLOCKS:
        hw = pq.spatial(b)
        masks = [area_downsample(m, hw) for _, m in episode.supports]
        head = getattr(model, f"head{b}", None)
        stacks = [
            stack_block_affinities(p, pq, b, head, cfg.model.affinity_normalize, mk if bg_off else None)
            for p, mk in zip(ps, masks)
        ]
        coarse = getattr(model, f"hsfm{b}")(stacks, masks)
        fused_in.append(getattr(model, f"conv1_{b}")(coarse))
    x = fuse_blocks(fused_in[0], fused_in[1], model.conv2)
    return model.classifier(x, model._skips(pq, ps), q_img.shape[1:])


def predict_mask(model: DAM, episode) -> np.ndarray:
    """Binary query mask: ``sigmoid(logits) > 0.5``, i.e. ``logits > 0``."""
    with no_grad():
        return (dam_forward(episode, model).data[0] > 0).astype(np.uint8)


__all__ = [
    "Conv1Block", "Conv2Block", "ClassifierHead", "DAM", "dam_forward", "fuse_blocks",
    "conv2_param_count", "plain_conv_param_count", "predict_mask",
]
