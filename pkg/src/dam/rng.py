"""Counter-based random numbers built on the splitmix64 finalizer.

Every draw is a pure function of ``(key, counter)``:

    state_i = key + (counter + i + 1) * GOLDEN        (mod 2**64)
    u64_i   = mix(state_i)

where ``mix`` is the splitmix64 output function.  Uniform floats take the top
53 bits, normals use Box-Muller on consecutive uniform pairs.

Streams are split by hashing tags into the key::

    derive(key, t0, t1, ...) = mix(... mix(mix(key ^ mix(t0 + GOLDEN)) ^ mix(t1 + GOLDEN)) ...)

Split table used by the package (tags are small integers):

    ======================  ==============================================
    stream                  key
    ======================  ==============================================
    model init              derive(seed, 1)
    backbone init           derive(backbone_seed, 2)
    train episode i         derive(seed, 3, fold, i)
    eval episode i          derive(eval_seed, 4, fold, split, kshot, i)
    episode sample k        derive(episode_seed, 5, k)
    render attempt a        derive(sample_seed, 6, a)
    pretrain data / order   derive(seed, 7, ...) / derive(seed, 8, epoch)
    ======================  ==============================================
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


def mix64(x: int) -> int:
    return int(_mix(np.array([x & MASK64], dtype=np.uint64))[0])


def derive(key: int, *tags: int) -> int:
    """Derive an independent stream key from ``key`` and integer tags."""
    k = key & MASK64
    for t in tags:
        k = mix64(k ^ mix64((int(t) + GOLDEN) & MASK64))
    return k


class CounterRNG:
    """Sequential view over the counter-based stream of one key."""

    def __init__(self, key: int, counter: int = 0):
        self.key = int(key) & MASK64
        self.counter = int(counter)

    def u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        state = np.uint64(self.key) + idx * np.uint64(GOLDEN)
        return _mix(state)

    def uniform(self, low=0.0, high=1.0, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        out = low + (high - low) * u
        return float(out[0]) if size is None else out.reshape(size)

    def integers(self, low: int, high: int, size=None):
        """Integers in ``[low, high)``."""
        span = high - low
        if span <= 0:
            raise ValueError(f"empty range [{low}, {high})")
        u = self.uniform(size=size)
        out = low + np.minimum((np.asarray(u) * span).astype(np.int64), span - 1)
        return int(out) if size is None else out

    def normal(self, loc=0.0, scale=1.0, size=None):
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u1 = self.uniform(size=m)
        u2 = self.uniform(size=m)
        r = np.sqrt(-2.0 * np.log1p(-u1))  # 1 - u1 in (0, 1]
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        out = loc + scale * z
        return float(out[0]) if size is None else out.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        # stable argsort of uniforms: deterministic on every platform
        return np.argsort(self.uniform(size=n), kind="stable")

    def choice(self, seq):
        return seq[self.integers(0, len(seq))]
