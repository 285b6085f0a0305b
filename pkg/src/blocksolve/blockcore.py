"""Block-partitioned vectors, weighted norms and the block sampler.

Every randomized solver in the package draws its block indices through
:func:`sample_block` fed by a :class:`UniformStream`, so two solvers given
the same seed visit the same sequence of blocks.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when vectors, partitions or weights do not line up."""


@dataclass(frozen=True)
class BlockPartition:
    """Contiguous split of ``R^p`` into ``n`` blocks of the given sizes."""

    sizes: tuple[int, ...]
    offsets: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if len(sizes) < 1:
            raise DimensionError("a partition needs at least one block")
        if any(s < 1 for s in sizes):
            raise DimensionError(f"block sizes must be >= 1, got {sizes}")
        object.__setattr__(self, "sizes", sizes)
        offsets = [0]
        for s in sizes[:-1]:
            offsets.append(offsets[-1] + s)
        object.__setattr__(self, "offsets", tuple(offsets))

    @classmethod
    def uniform(cls, n: int, p: int) -> "BlockPartition":
        """``n`` blocks of (almost) equal size covering dimension ``p``."""
        if n < 1 or p < n:
            raise DimensionError(f"cannot split p={p} into n={n} blocks")
        base, extra = divmod(p, n)
        return cls(tuple(base + (1 if i < extra else 0) for i in range(n)))

    @property
    def n(self) -> int:
        return len(self.sizes)

    @property
    def p(self) -> int:
        return self.offsets[-1] + self.sizes[-1]

    def slice(self, i: int) -> slice:
        if not 0 <= i < self.n:
            raise IndexError(f"block index {i} out of range for n={self.n}")
        start = self.offsets[i]
        return slice(start, start + self.sizes[i])

    def slices(self) -> list[slice]:
        return [self.slice(i) for i in range(self.n)]

    def block_ids(self) -> np.ndarray:
        """Length-``p`` array mapping each coordinate to its block."""
        return np.repeat(np.arange(self.n), self.sizes)


@dataclass
class BlockVector:
    """Dense float64 vector carrying its block partition."""

    data: np.ndarray
    partition: BlockPartition

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 1 or self.data.shape[0] != self.partition.p:
            raise DimensionError(
                f"vector of shape {self.data.shape} does not match p={self.partition.p}"
            )

    @classmethod
    def zeros(cls, partition: BlockPartition) -> "BlockVector":
        return cls(np.zeros(partition.p), partition)

    def block(self, i: int) -> np.ndarray:
        return self.data[self.partition.slice(i)]

    def copy(self) -> "BlockVector":
        return BlockVector(self.data.copy(), self.partition)


@dataclass(frozen=True)
class WeightVector:
    """Per-block weights of the norm ``sum_i sigma_i ||x_i||^2``."""

    sigma: tuple[float, ...]

    def __post_init__(self):
        sigma = tuple(float(s) for s in self.sigma)
        if not sigma or any(not s > 0 for s in sigma):
            raise ValueError(f"weights must be positive, got {sigma}")
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def ones(cls, n: int) -> "WeightVector":
        return cls((1.0,) * n)

    @property
    def n(self) -> int:
        return len(self.sigma)


@dataclass(frozen=True)
class BlockDistribution:
    """Categorical distribution over block indices."""

    probs: tuple[float, ...]
    cumulative: tuple[float, ...] = field(init=False, repr=False)

    def __post_init__(self):
        probs = tuple(float(q) for q in self.probs)
        if not probs:
            raise ValueError("empty distribution")
        if any(not (0.0 < q <= 1.0) for q in probs):
            raise ValueError(f"probabilities must lie in (0, 1], got {probs}")
        if abs(sum(probs) - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {sum(probs)!r}, not 1")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "cumulative", tuple(np.cumsum(probs).tolist()))

    @classmethod
    def uniform(cls, n: int) -> "BlockDistribution":
        return cls((1.0 / n,) * n)

    @property
    def n(self) -> int:
        return len(self.probs)

    @property
    def p_min(self) -> float:
        return min(self.probs)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.probs)


def weighted_norm_sq(x, sigma: WeightVector, partition: BlockPartition | None = None) -> float:
    """Return ``sum_i sigma_i ||x_i||^2``.

    ``x`` is a :class:`BlockVector`, or a plain array together with
    ``partition``.
    """
    if isinstance(x, BlockVector):
        partition, data = x.partition, x.data
    else:
        if partition is None:
            raise DimensionError("a plain array needs an explicit partition")
        data = np.asarray(x, dtype=float)
        if data.shape != (partition.p,):
            raise DimensionError(f"vector of shape {data.shape} does not match p={partition.p}")
    if sigma.n != partition.n:
        raise DimensionError(f"{sigma.n} weights for {partition.n} blocks")
    total = 0.0
    for s, sl in zip(sigma.sigma, partition.slices()):
        blk = data[sl]
        total += s * float(blk @ blk)
    return total


def sample_block(dist: BlockDistribution, u: float) -> int:
    """Inverse-CDF draw: the smallest ``i`` with ``cumulative[i] > u``."""
    if not u >= 0.0:
        u = 0.0
    elif u >= 1.0:
        u = np.nextafter(1.0, 0.0)
    i = bisect.bisect_right(dist.cumulative, u)
    # cumulative[-1] can round to just below 1
    return min(i, dist.n - 1)


def block_scatter(x: BlockVector, i: int, v: Sequence[float]) -> BlockVector:
    """Copy of ``x`` with block ``i`` replaced by ``v``."""
    sl = x.partition.slice(i)
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape[0] != sl.stop - sl.start:
        raise DimensionError(f"block {i} has size {sl.stop - sl.start}, got {v.shape[0]} values")
    out = x.data.copy()
    out[sl] = v
    return BlockVector(out, x.partition)


class UniformStream:
    """Seedable stream of uniforms on ``[0, 1)``.

    Values are pulled from a PCG64 generator in chunks; the sequence does not
    depend on the chunk size.
    """

    def __init__(self, seed: int, chunk: int = 4096):
        self.seed = int(seed)
        self._rng = np.random.Generator(np.random.PCG64(self.seed))
        self._chunk = int(chunk)
        self._buf: list[float] = []
        self._pos = 0

    def next(self) -> float:
        if self._pos >= len(self._buf):
            self._buf = self._rng.random(self._chunk).tolist()
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return u

    def next_block(self, dist: BlockDistribution) -> int:
        return sample_block(dist, self.next())

    def blocks(self, dist: BlockDistribution, count: int) -> list[int]:
        return [sample_block(dist, self.next()) for _ in range(count)]


def index_stream(dist: BlockDistribution, seed: int, count: int) -> list[int]:
    """The first ``count`` block indices drawn for ``seed``."""
    return UniformStream(seed).blocks(dist, count)
