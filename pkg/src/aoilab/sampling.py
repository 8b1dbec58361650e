"""Reproducible random-variate generation.

Streams are counter-based: stream ``i`` of a given master seed is a Philox
generator whose 256-bit counter starts at block ``i * BLOCK_TICKS``.
Distinct stream indices therefore draw from disjoint counter ranges of the
same keyed cipher, which is the standard way to get statistically
independent, order-independent parallel streams.

All exponential-family draws go through the inverse CDF so that a draw is
a fixed, deterministic function of one uniform.  That keeps replay exact,
lets order statistics of arbitrarily many variables be drawn in O(1), and
makes draws at different rates exact scalings of each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MAX_UINT64 = 2**64 - 1

# Counter ticks reserved per stream (one tick = 4 uniform doubles).  A
# stream would have to draw ~2.7e11 uniforms before touching its neighbor.
BLOCK_TICKS = 2**36

# Smallest uniform the generator grid can emit; zeros are remapped to it so
# inverse-CDF draws stay strictly positive.
_TINY_UNIFORM = 2.0**-53


@dataclass(frozen=True)
class StreamSpec:
    """Identity of one reproducible stream: (master_seed, stream_index)."""

    master_seed: int
    stream_index: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.master_seed <= _MAX_UINT64:
            raise ValueError(f"master_seed must fit in 64 bits, got {self.master_seed!r}")
        if not 0 <= self.stream_index <= _MAX_UINT64:
            raise ValueError(f"stream_index must fit in 64 bits, got {self.stream_index!r}")


def make_stream(spec: StreamSpec) -> np.random.Generator:
    """Deterministic generator for ``spec``.

    Equal specs emit identical sequences; recreating a handle replays the
    stream from its start.
    """
    bit_gen = np.random.Philox(key=spec.master_seed)
    bit_gen.advance(spec.stream_index * BLOCK_TICKS)
    return np.random.Generator(bit_gen)


def fill_stream_rows(master_seed: int, first_index: int, out: np.ndarray) -> np.ndarray:
    """Fill ``out[i]`` with the first ``out.shape[1]`` uniforms of stream
    ``first_index + i``.

    Bit-identical to calling ``make_stream`` per row but reuses one Philox
    object, advancing its counter between rows.  ``advance`` moves the
    counter in ticks of four 64-bit words, so consumption is rounded up to
    whole ticks.
    """
    rows, width = out.shape
    bit_gen = np.random.Philox(key=master_seed)
    gen = np.random.Generator(bit_gen)
    ticks_used = (width + 3) // 4
    pos = 0
    for i in range(rows):
        target = (first_index + i) * BLOCK_TICKS
        bit_gen.advance(target - pos)
        gen.random(out=out[i])
        pos = target + ticks_used
    return out


def _clean_uniform(u):
    """Remap u == 0 to the smallest positive uniform (avoids -log(0))."""
    if np.isscalar(u) or np.ndim(u) == 0:
        return _TINY_UNIFORM if u == 0.0 else u
    return np.where(u == 0.0, _TINY_UNIFORM, u)


def exp_from_uniform(u, rate: float):
    """Inverse-CDF exponential transform: -log(1 - u) / rate."""
    return -np.log1p(-_clean_uniform(u)) / rate


def max_exp_from_uniform(u, count: int, rate: float):
    """Max of ``count`` i.i.d. exponentials from a single uniform.

    Inverts the CDF (1 - e^(-rate x))**count.  Computed via
    -log(-expm1(log(u)/count)) for accuracy at large ``count``.
    ``count == 0`` yields 0 (empty max), ``count == 1`` reduces exactly to
    :func:`exp_from_uniform`.
    """
    if count == 0:
        return np.zeros_like(u) if np.ndim(u) else 0.0
    if count == 1:
        return exp_from_uniform(u, rate)
    u = _clean_uniform(u)
    return -np.log(-np.expm1(np.log(u) / count)) / rate


def min_exp_from_uniform(u, count: int, rate: float):
    """Min of ``count`` i.i.d. exponentials: exponential at rate count*rate."""
    return exp_from_uniform(u, count * rate)


def _validate(count: int, rate: float) -> None:
    if not isinstance(count, (int, np.integer)) or count < 1:
        raise ValueError(f"count must be a positive integer, got {count!r}")
    if not rate > 0:
        raise ValueError(f"rate must be > 0, got {rate}")


def sample_exp(stream: np.random.Generator, rate: float, size=None):
    """One exponential variate (or ``size`` of them) at the given rate."""
    if not rate > 0:
        raise ValueError(f"rate must be > 0, got {rate}")
    u = stream.random() if size is None else stream.random(size)
    return exp_from_uniform(u, rate)


def sample_max_exp(stream: np.random.Generator, count: int, rate: float, size=None):
    """One draw of the maximum of ``count`` i.i.d. exponentials."""
    _validate(count, rate)
    u = stream.random() if size is None else stream.random(size)
    return max_exp_from_uniform(u, count, rate)


def sample_min_exp(stream: np.random.Generator, count: int, rate: float, size=None):
    """One draw of the minimum of ``count`` i.i.d. exponentials."""
    _validate(count, rate)
    u = stream.random() if size is None else stream.random(size)
    return min_exp_from_uniform(u, count, rate)
