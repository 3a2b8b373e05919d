"""Hysteretic spatial filtering: enhance the affinity volume, then filter it with the support mask.

Enhancement runs the same 3D network over the stack in both orientations.
In one branch the query axis of ``S`` is unfolded into its ``(h, w)`` grid so
every support pixel is convolved against query patches; the other branch
does the same on ``S^T`` and is transposed back before the two are summed.
Filtering contracts the support axis with the downsampled support mask.
"""

from __future__ import annotations

import numpy as np

from .affinity import AffinityStack
from .nn import BatchNorm, Conv3d, Module
from .rng import CounterRNG
from .tensor import Tensor, add, concat, matmul, mean, relu, reshape, transpose


class _SubNetwork(Module):
    def __init__(self, cin, hidden, cout, plane, depth, rng, bn_momentum, dtype):
        super().__init__()
        k = (depth, plane, plane)
        self.conv1 = Conv3d(cin, hidden, k, rng, dtype=dtype)
        self.bn1 = BatchNorm(hidden, momentum=bn_momentum, dtype=dtype)
        self.conv2 = Conv3d(hidden, cout, k, rng, dtype=dtype)
        self.bn2 = BatchNorm(cout, momentum=bn_momentum, dtype=dtype)

    def __call__(self, vol: Tensor) -> Tensor:
        x = relu(self.bn1(self.conv1(vol)))
        return relu(self.bn2(self.conv2(x)))


class B3DNetwork(Module):
    """Parallel 3D conv sub-networks (one per kernel plane size), outputs summed."""

    def __init__(self, in_channels: int, rng: CounterRNG, hidden: int = 8, out_channels: int = 8,
                 kernel_planes=(3, 5), depth_kernel: int = 1, bn_momentum: float = 0.1,
                 dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.paths = [
            _SubNetwork(in_channels, hidden, out_channels, k, depth_kernel, rng, bn_momentum, dtype)
            for k in kernel_planes
        ]

    def __call__(self, vol: Tensor) -> Tensor:
        out = self.paths[0](vol)
        for path in self.paths[1:]:
            out = add(out, path(vol))
        return out


def b3d_enhance(stack: AffinityStack, net: B3DNetwork) -> Tensor:
    """``S_enh = R2(H(R1(S))) + R2(H(R1(S^T)))^T`` applied per stack channel set."""
    s = stack.data
    c, ns, nq = s.shape
    h, w = stack.hw
    if ns != nq or h * w != nq:
        raise ValueError(f"b3d_enhance: stack {s.shape} is not square over a {h}x{w} grid")
    cm = net.out_channels
    a = reshape(net(reshape(s, (c, ns, h, w))), (cm, ns, nq))
    st = transpose(s, (0, 2, 1))
    b = reshape(net(reshape(st, (c, nq, h, w))), (cm, nq, ns))
    return add(a, transpose(b, (0, 2, 1)))


def hysteretic_filter(s_enh: Tensor, support_mask, hw: tuple[int, int]) -> Tensor:
    """``M[c, q] = sum_p mask[p] * S_enh[c, p, q]``, returned as ``(C, h, w)``."""
    c, ns, nq = s_enh.shape
    m = support_mask if isinstance(support_mask, Tensor) else Tensor(np.asarray(support_mask, dtype=s_enh.dtype))
    if m.size != ns:
        raise ValueError(f"hysteretic_filter: mask has {m.size} entries, affinity has {ns} support pixels")
    out = matmul(reshape(m, (1, ns)), s_enh)  # (C, 1, N_q)
    return reshape(out, (c, hw[0], hw[1]))


def hsfm_forward(stacks: list[AffinityStack], masks, net: B3DNetwork | None, fusion: str = "mean") -> Tensor:
    """Coarse query mask for one block from K support shots.

    ``mean`` runs enhance+filter per shot with shared weights and averages;
    ``channel_concat`` concatenates the shots' stacks before enhancement and
    filters with the mean support mask.  ``net=None`` skips enhancement.
    """
    if not stacks:
        raise ValueError("hsfm_forward needs at least one shot")
    if len({st.block for st in stacks}) != 1:
        raise ValueError(f"hsfm_forward: mixed blocks {[st.block for st in stacks]}")
    hw = stacks[0].hw

    def enhance(st):
        return st.data if net is None else b3d_enhance(st, net)

    masks = [np.asarray(m, dtype=stacks[0].data.dtype).reshape(-1) for m in masks]
    if fusion == "mean":
        coarse = [hysteretic_filter(enhance(st), m, hw) for st, m in zip(stacks, masks)]
        if len(coarse) == 1:
            return coarse[0]
        return mean(concat([reshape(c, (1,) + c.shape) for c in coarse], 0), axis=0)
    if fusion == "channel_concat":
        merged = AffinityStack(concat([st.data for st in stacks], 0), stacks[0].block, hw)
        return hysteretic_filter(enhance(merged), np.mean(masks, axis=0), hw)
    raise ValueError(f"unknown k-shot fusion {fusion!r}")


class HSFM(Module):
    def __init__(self, layers: int, kshot: int, rng: CounterRNG, enabled: bool = True,
                 fusion: str = "mean", hidden: int = 8, out_channels: int = 8, kernel_planes=(3, 5),
                 depth_kernel: int = 1, bn_momentum: float = 0.1, dtype=np.float32):
        super().__init__()
        self.fusion = fusion
        in_ch = layers * kshot if fusion == "channel_concat" else layers
        self.net = (
            B3DNetwork(in_ch, rng, hidden, out_channels, kernel_planes, depth_kernel, bn_momentum, dtype)
            if enabled else None
        )
        self.out_channels = out_channels if enabled else in_ch

    def __call__(self, stacks: list[AffinityStack], masks) -> Tensor:
        return hsfm_forward(stacks, masks, self.net, self.fusion)
