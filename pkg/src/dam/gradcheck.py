"""Central finite-difference checks of every differentiable op, in float64.

Each probe draws random small shapes, contracts the op output with a fixed
random tensor ``R`` to get a scalar, and compares the backward-pass gradient
of every input with ``(f(x + h) - f(x - h)) / 2h``.  The error reported is
``||analytic - numeric|| / max(||analytic||, ||numeric||)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import functional as F
from .affinity import AffinityStack, compute_affinity
from .hsfm import B3DNetwork, b3d_enhance, hsfm_forward, hysteretic_filter
from .rng import CounterRNG, derive
from .tensor import (
    Tensor, add, concat, l2_normalize, matmul, mean, mul, neg, relu, reshape, sigmoid, slice_axis, split,
    transpose, tsum,
)

OP_TOL = 1e-4
MODEL_TOL = 1e-3
STEP = 1e-5


def rel_error(a: np.ndarray, n: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_gradients(fn: Callable, inputs: list[Tensor], rng: CounterRNG, h: float = STEP) -> float:
    """Max relative error over ``inputs`` of the gradient of ``sum(fn(*inputs) * R)``."""
    out = fn(*inputs)
    r = rng.normal(size=out.shape) if out.shape else np.asarray(rng.normal())
    for t in inputs:
        t.grad = None
    tsum(mul(out, Tensor(r))).backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def scalar():
        return float((fn(*inputs).data * r).sum())

    return max(rel_error(a, numerical_grad(scalar, t.data, h)) for a, t in zip(analytic, inputs))


def _t(rng: CounterRNG, *shape, away_from: float | None = None) -> Tensor:
    x = rng.normal(size=shape)
    if away_from is not None:
        # resample entries too close to a kink
        while np.any(np.abs(x) < away_from):
            bad = np.abs(x) < away_from
            x[bad] = rng.normal(size=int(bad.sum()))
    return Tensor(x.astype(np.float64), requires_grad=True)


def _probe_add(rng):
    # broadcasting in both directions
    return add, [_t(rng, rng.integers(1, 4), 1, 3), _t(rng, 1, rng.integers(1, 4), 3)]


def _probe_mul(rng):
    return mul, [_t(rng, rng.integers(1, 4), 3), _t(rng, 3)]


def _probe_neg(rng):
    return (lambda a, b: neg(a) - b), [_t(rng, 2, 3), _t(rng, 2, 3)]


def _probe_sum(rng):
    axis = (None, 0, 1)[rng.integers(0, 3)]
    return (lambda x: tsum(x, axis)), [_t(rng, 3, 4)]


def _probe_mean(rng):
    axis = (None, 0, 1)[rng.integers(0, 3)]
    return (lambda x: mean(x, axis)), [_t(rng, 3, 4)]


def _probe_reshape(rng):
    return (lambda x: reshape(x, (3, 4))), [_t(rng, 2, 6)]


def _probe_transpose(rng):
    return (lambda x: transpose(x, (2, 0, 1))), [_t(rng, 2, 3, 4)]


def _probe_slice(rng):
    lo = rng.integers(0, 3)
    return (lambda x: slice_axis(x, 1, lo, lo + 2)), [_t(rng, 2, 5)]


def _probe_matmul(rng):
    m, k, n = (rng.integers(1, 6) for _ in range(3))
    return matmul, [_t(rng, m, k), _t(rng, k, n)]


def _probe_conv2d(rng):
    cin, cout = rng.integers(1, 4), rng.integers(1, 4)
    h, w = rng.integers(3, 7), rng.integers(3, 7)
    k = (1, 3)[rng.integers(0, 2)]
    stride = rng.integers(1, 3)
    pad = rng.integers(0, 2)
    return (lambda x, wt, b: F.conv2d(x, wt, b, pad=pad, stride=stride),
            [_t(rng, cin, h, w), _t(rng, cout, cin, k, k), _t(rng, cout)])


def _probe_conv3d(rng):
    cin, cout = rng.integers(1, 3), rng.integers(1, 3)
    d, h, w = rng.integers(1, 4), rng.integers(3, 5), rng.integers(3, 5)
    kd, k = (1, 3)[rng.integers(0, 2)], (1, 3)[rng.integers(0, 2)]
    return F.conv3d, [_t(rng, cin, d, h, w), _t(rng, cout, cin, kd, k, k), _t(rng, cout)]


def _probe_batchnorm(rng):
    c = rng.integers(1, 4)
    shape = (c, rng.integers(2, 4), rng.integers(2, 4))
    rm, rv = np.zeros(c), np.ones(c)
    return (lambda x, g, b: F.batchnorm(x, g, b, rm, rv, training=True),
            [_t(rng, *shape), _t(rng, c), _t(rng, c)])


def _probe_batchnorm_eval(rng):
    c = rng.integers(1, 4)
    rm, rv = rng.normal(size=c), rng.uniform(0.5, 2.0, size=c)
    return (lambda x, g, b: F.batchnorm(x, g, b, rm, rv, training=False),
            [_t(rng, c, 3, 2), _t(rng, c), _t(rng, c)])


def _probe_groupnorm(rng):
    groups = rng.integers(1, 3)
    c = groups * rng.integers(1, 3)
    return (lambda x, g, b: F.groupnorm(x, groups, g, b),
            [_t(rng, c, rng.integers(2, 4), rng.integers(2, 4)), _t(rng, c), _t(rng, c)])


def _probe_relu(rng):
    return relu, [_t(rng, rng.integers(1, 4), rng.integers(1, 5), away_from=1e-3)]


def _probe_sigmoid(rng):
    return sigmoid, [_t(rng, rng.integers(1, 4), rng.integers(1, 5))]


def _probe_upsample(rng):
    h, w = rng.integers(1, 4), rng.integers(1, 4)
    size = (rng.integers(1, 7), rng.integers(1, 7))
    return (lambda x: F.upsample_bilinear(x, size)), [_t(rng, rng.integers(1, 3), h, w)]


def _probe_concat(rng):
    a, b = rng.integers(1, 4), rng.integers(1, 4)
    return (lambda x, y: concat([x, y], 0)), [_t(rng, a, 2, 3), _t(rng, b, 2, 3)]


def _probe_split(rng):
    n = 2 * rng.integers(1, 4)
    return (lambda x: concat([2.0 * p for p in reversed(split(x, 0, 2))], 0)), [_t(rng, n, 2, 2)]


def _probe_bce(rng):
    shape = (1, rng.integers(1, 5), rng.integers(1, 5))
    y = (rng.uniform(size=shape) > 0.5).astype(np.float64)
    return (lambda z: F.bce_loss(z, y)), [_t(rng, *shape)]


def _probe_softmax_ce(rng):
    c, n = rng.integers(2, 5), rng.integers(1, 5)
    lab = rng.integers(0, c, size=n)
    return (lambda z: F.softmax_cross_entropy(z, lab)), [_t(rng, c, n)]


def _probe_l2_normalize(rng):
    return (lambda x: l2_normalize(x, 0)), [_t(rng, rng.integers(2, 5), rng.integers(1, 5))]


def _probe_affinity(rng):
    # one channel normalizes to a constant +-1 map whose gradient is pure noise
    c, h, w = rng.integers(2, 5), rng.integers(1, 4), rng.integers(1, 4)
    normalize = bool(rng.integers(0, 2))
    return (lambda a, b: compute_affinity(a, b, normalize)), [_t(rng, c, h, w), _t(rng, c, h, w)]


def _probe_b3d(rng):
    h, w = rng.integers(2, 4), rng.integers(2, 4)
    n = h * w
    net = B3DNetwork(2, CounterRNG(rng.integers(0, 1 << 30)), hidden=2, out_channels=2,
                     kernel_planes=(3,), depth_kernel=(1, 3)[rng.integers(0, 2)], dtype=np.float64)
    weight = net.paths[0].conv1.weight
    return (lambda s, wt: b3d_enhance(AffinityStack(s, 3, (h, w)), net)), [_t(rng, 2, n, n), weight]


def _probe_filter(rng):
    h, w = rng.integers(1, 4), rng.integers(1, 4)
    n = h * w
    return (lambda s, m: hysteretic_filter(s, m, (h, w))), [_t(rng, rng.integers(1, 4), n, n), _t(rng, n)]


def _probe_kshot_mean(rng):
    h, w = 2, 2
    n = h * w

    def fn(s1, s2):
        stacks = [AffinityStack(s1, 3, (h, w)), AffinityStack(s2, 3, (h, w))]
        return hsfm_forward(stacks, [np.ones(n), np.arange(n) % 2], None, "mean")

    return fn, [_t(rng, 2, n, n), _t(rng, 2, n, n)]


PROBES: dict[str, Callable] = {
    "add": _probe_add,
    "mul": _probe_mul,
    "neg_sub": _probe_neg,
    "sum": _probe_sum,
    "mean": _probe_mean,
    "reshape": _probe_reshape,
    "transpose": _probe_transpose,
    "slice_axis": _probe_slice,
    "matmul": _probe_matmul,
    "conv2d": _probe_conv2d,
    "conv3d": _probe_conv3d,
    "batchnorm": _probe_batchnorm,
    "batchnorm_eval": _probe_batchnorm_eval,
    "groupnorm": _probe_groupnorm,
    "relu": _probe_relu,
    "sigmoid": _probe_sigmoid,
    "upsample_bilinear": _probe_upsample,
    "concat": _probe_concat,
    "split": _probe_split,
    "bce_loss": _probe_bce,
    "softmax_cross_entropy": _probe_softmax_ce,
    "l2_normalize": _probe_l2_normalize,
    "compute_affinity": _probe_affinity,
    "b3d_enhance": _probe_b3d,
    "hysteretic_filter": _probe_filter,
    "kshot_mean_fusion": _probe_kshot_mean,
}


def full_model_probe(seed: int = 0, image_size: int = 16, param: str = "hsfm3.net.paths.0.conv1.weight") -> float:
    """Gradient of the episode BCE w.r.t. one HSFM weight tensor, float64 model."""
    from .config import RunConfig
    from .decoder import DAM, dam_forward
    from .synthset import sample_episode

    cfg = RunConfig()
    cfg.data.image_size = image_size
    cfg.train.seed = seed
    model = DAM(cfg).astype(np.float64)
    ep = sample_episode(0, "train", 1, derive(seed, 99), image_size)
    target = ep.query[1][None].astype(np.float64)
    p = dict(model.named_parameters())[param]

    def loss():
        return F.bce_loss(dam_forward(ep, model), target)

    p.grad = None
    loss().backward()
    numeric = numerical_grad(lambda: loss().item(), p.data)
    return rel_error(p.grad, numeric)


@dataclass
class GradcheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerances: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e <= self.tolerances[k]]

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        out = []
        for k, e in self.errors.items():
            status = "PASS" if e <= self.tolerances[k] else "FAIL"
            out.append(f"{status}  {k:<24} max rel err {e:.2e}  (tol {self.tolerances[k]:.0e})")
        return out


def gradcheck_suite(ops="all", trials: int = 5, seed: int = 0, model_probe: bool = True) -> GradcheckReport:
    t0 = time.time()
    names = list(PROBES) if ops == "all" else list(ops)
    report = GradcheckReport()
    for name in names:
        if name == "full_model":
            continue
        if name not in PROBES:
            raise KeyError(f"no gradient probe for {name!r}; known: {sorted(PROBES)}")
        worst = 0.0
        for trial in range(trials):
            rng = CounterRNG(derive(seed, 11, list(PROBES).index(name), trial))
            fn, inputs = PROBES[name](rng)
            worst = max(worst, check_gradients(fn, inputs, rng))
        report.errors[name] = worst
        report.tolerances[name] = OP_TOL
    if model_probe and (ops == "all" or "full_model" in names):
        report.errors["full_model"] = full_model_probe(seed)
        report.tolerances["full_model"] = MODEL_TOL
    report.seconds = time.time() - t0
    return report
