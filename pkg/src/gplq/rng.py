"""Deterministic PRNG: parallel xoshiro256** streams seeded via splitmix64.

numpy's builtin generators would be reproducible on any one install, but
pinning the algorithm here keeps the integer stream bit-identical across
platforms and numpy versions. Floating-point derivations (uniform, normal)
go through numpy arithmetic on that exact integer stream.
"""

from __future__ import annotations

import numpy as np

_U = np.uint64
_GOLDEN = _U(0x9E3779B97F4A7C15)
_MIX1 = _U(0xBF58476D1CE4E5B9)
_MIX2 = _U(0x94D049BB133111EB)
_INV_2_53 = 1.0 / float(1 << 53)


def _splitmix_step(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Advance a splitmix64 lane array one step; returns (state, output)."""
    z = z + _GOLDEN
    x = z
    x = (x ^ (x >> _U(30))) * _MIX1
    x = (x ^ (x >> _U(27))) * _MIX2
    return z, x ^ (x >> _U(31))


def mix_seed(seed: int, salt: int = 0) -> int:
    """Derive a decorrelated 64-bit subseed from (seed, salt)."""
    z = np.array([(seed + salt * int(_GOLDEN)) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    _, out = _splitmix_step(z)
    return int(out[0])


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << _U(k)) | (x >> _U(64 - k))


class Rng:
    """Vectorized xoshiro256** over a fixed number of parallel streams.

    Draws are consumed round-robin across streams in row-major order, so the
    produced sequence depends only on (seed, streams).
    """

    def __init__(self, seed: int, streams: int = 1024):
        if streams < 1:
            raise ValueError("need at least one stream")
        self.streams = streams
        lane = np.arange(1, streams + 1, dtype=np.uint64)
        z = _U(seed & 0xFFFFFFFFFFFFFFFF) + lane * _GOLDEN
        words = []
        for _ in range(4):
            z, out = _splitmix_step(z)
            words.append(out)
        self._s = words  # four uint64 arrays of shape (streams,)

    def _next_block(self) -> np.ndarray:
        s0, s1, s2, s3 = self._s
        out = _rotl(s1 * _U(5), 7) * _U(9)
        t = s1 << _U(17)
        s2 = s2 ^ s0
        s3 = s3 ^ s1
        s1 = s1 ^ s2
        s0 = s0 ^ s3
        s2 = s2 ^ t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return out

    def raw(self, n: int) -> np.ndarray:
        """Next n raw uint64 draws."""
        if n < 0:
            raise ValueError("negative draw count")
        blocks = [self._next_block() for _ in range(-(-n // self.streams) or 0)]
        if not blocks:
            return np.empty(0, dtype=np.uint64)
        return np.concatenate(blocks)[:n]

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform floats in [low, high) with 53-bit resolution."""
        shape = tuple(np.atleast_1d(shape).astype(int)) if shape != () else ()
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self.raw(n) >> _U(11)).astype(np.float64) * _INV_2_53
        out = low + (high - low) * u
        return out.reshape(shape) if shape else float(out[0])

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Standard Box-Muller normals (pairs share two uniform draws)."""
        shape = tuple(np.atleast_1d(shape).astype(int)) if shape != () else ()
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        half = (n + 1) // 2
        # u1 in (0, 1] so the log never sees zero
        u1 = ((self.raw(half) >> _U(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (self.raw(half) >> _U(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        out = mean + std * z
        return out.reshape(shape) if shape else float(out[0])

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high). Modulo reduction; the bias is
        below 2**-50 for any span used here."""
        if high <= low:
            raise ValueError("empty integer range")
        shape = tuple(np.atleast_1d(shape).astype(int)) if shape != () else ()
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        span = _U(high - low)
        vals = (self.raw(n) % span).astype(np.int64) + low
        return vals.reshape(shape) if shape else int(vals[0])

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) by sorting raw 64-bit keys."""
        keys = self.raw(n)
        return np.argsort(keys, kind="stable")

    def subset(self, n: int, k: int) -> np.ndarray:
        """First k indices of a fresh permutation of range(n)."""
        if k > n:
            raise ValueError(f"cannot take {k} of {n}")
        return self.permutation(n)[:k]
