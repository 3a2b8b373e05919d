"""Dense support-query affinities: one ``hw x hw`` inner-product matrix per layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import AFFINITY_BLOCKS, FeaturePyramid, LinearHead, linear_head
from .tensor import Tensor, as_tensor, concat, l2_normalize, matmul, mul, reshape, transpose


@dataclass
class AffinityStack:
    data: Tensor  # (L, N_s, N_q)
    block: int
    hw: tuple[int, int]

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def compute_affinity(fs: Tensor, fq: Tensor, normalize: bool = True) -> Tensor:
    """``S[p, q] = <fs[:, p], fq[:, q]>`` over channels, pixels in raster order.

    With ``normalize`` each pixel's feature vector is L2-normalized first, so
    entries lie in [-1, 1].
    """
    fs, fq = as_tensor(fs), as_tensor(fq)
    if fs.shape != fq.shape or fs.ndim != 3:
        raise ValueError(f"compute_affinity: feature shapes differ or are not (c, h, w): {fs.shape} vs {fq.shape}")
    c, h, w = fs.shape
    rs = reshape(fs, (c, h * w))
    rq = reshape(fq, (c, h * w))
    if normalize:
        rs = l2_normalize(rs, axis=0)
        rq = l2_normalize(rq, axis=0)
    return matmul(transpose(rs), rq)


def mask_support_features(fs: Tensor, mask) -> Tensor:
    """Zero the support features outside the (downsampled) mask."""
    m = np.asarray(mask, dtype=fs.dtype)
    return mul(fs, Tensor(m[None]))


def stack_block_affinities(
    pyr_s: FeaturePyramid,
    pyr_q: FeaturePyramid,
    block: int,
    head: LinearHead | None = None,
    normalize: bool = True,
    support_mask=None,
) -> AffinityStack:
    """One affinity channel per layer of ``block`` (3 or 4), in layer order.

    ``head`` is applied to both sides before the product when given;
    ``support_mask`` removes support background first (ablation arm).
    """
    if block not in AFFINITY_BLOCKS:
        raise ValueError(f"affinities are computed for blocks {AFFINITY_BLOCKS}, got {block}")
    hw = pyr_q.spatial(block)
    if pyr_s.spatial(block) != hw:
        raise ValueError(f"support grid {pyr_s.spatial(block)} != query grid {hw}")
    chans = []
    for fs, fq in zip(pyr_s.block(block), pyr_q.block(block)):
        fs = linear_head(fs, head is not None, head)
        fq = linear_head(fq, head is not None, head)
        if support_mask is not None:
            fs = mask_support_features(fs, support_mask)
        s = compute_affinity(fs, fq, normalize)
        chans.append(reshape(s, (1,) + s.shape))
    return AffinityStack(concat(chans, 0), block, tuple(hw))
