"""SplitMix64 random streams.

SplitMix64 is counter based: the i-th output of a stream with state ``s`` is
``mix(s + i * GAMMA)``, so blocks of outputs vectorise cleanly in numpy and
every draw is reproducible from the integer seed alone.
"""

import math

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GAMMA = 0x9E3779B97F4A7C15

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31, _S11 = np.uint64(30), np.uint64(27), np.uint64(31), np.uint64(11)


def _mix_array(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def mix64(z):
    """Scalar SplitMix64 finaliser on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed, *tags):
    """Fold integer or string tags into ``seed`` to obtain an independent stream key."""
    z = mix64(int(seed) & MASK64)
    for tag in tags:
        if isinstance(tag, str):
            t = int.from_bytes(tag.encode("utf-8")[:8].ljust(8, b"\0"), "little")
            t ^= len(tag) << 56
        else:
            t = int(tag) & MASK64
        z = mix64(z ^ ((t * GAMMA) & MASK64))
    return z


class SplitMix64:
    def __init__(self, seed):
        self.state = int(seed) & MASK64

    def next_u64(self, n):
        """Return the next ``n`` outputs as a uint64 array."""
        n = int(n)
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GAMMA)
        out = _mix_array(steps + np.uint64(self.state))
        self.state = (self.state + n * GAMMA) & MASK64
        return out

    def uniform(self, n):
        """Doubles in [0, 1) built from the top 53 bits."""
        return (self.next_u64(n) >> _S11).astype(np.float64) * (1.0 / 9007199254740992.0)

    def normal(self, shape, scale=1.0):
        """Standard normals (Box-Muller) times ``scale``, in C order."""
        size = int(np.prod(shape, dtype=np.int64)) if np.ndim(shape) else int(shape)
        pairs = (size + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        angle = 2.0 * math.pi * u[:, 1]
        z = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1).ravel()
        return (z[:size] * scale).reshape(shape)

    def permutation(self, n):
        """Random permutation of range(n) by sorting random keys."""
        return np.argsort(self.next_u64(n), kind="stable")

    def sample(self, n, k):
        """``k`` distinct integers from range(n), sorted ascending."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot sample {k} of {n}")
        return np.sort(self.permutation(n)[:k])
