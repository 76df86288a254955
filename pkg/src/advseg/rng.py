"""Seeded pseudo-random streams.

All randomness in the package goes through :func:`make_rng`, which wraps
NumPy's PCG64 bit generator (PCG-XSL-RR 128/64) seeded from
``SeedSequence([seed, stream])``. Only three draws are used:

* ``uniform``  -- ``(next_uint64 >> 11) * 2**-53``, i.e. ``Generator.random``
* ``normal``   -- Box-Muller on two uniforms, ``sqrt(-2 ln(1-u1)) * cos(2 pi u2)``
* ``integers`` -- ``floor(uniform * n)``

so a stream is reproducible from the PCG64 definition alone.
"""

from __future__ import annotations

import numpy as np

# Named streams so independent consumers never share draws.
STREAM_PHANTOM = 0
STREAM_SPECKLE = 1
STREAM_GENERATOR_INIT = 2
STREAM_DISCRIMINATOR_INIT = 3
STREAM_BATCHES = 4
STREAM_DATASET = 5


class Rng:
    def __init__(self, seed: int, stream: int = 0):
        ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream)])
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        u = self._gen.random(size)
        return low + (high - low) * u

    def normal(self, size=None, scale: float = 1.0):
        n = 1 if size is None else int(np.prod(size))
        u1 = self._gen.random(n)
        u2 = self._gen.random(n)
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
        z = z * scale
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def integers(self, n: int, size=None):
        u = self._gen.random(size)
        return np.floor(u * n).astype(np.int64)

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self._gen.bit_generator.state = value


def make_rng(seed: int, stream: int = 0) -> Rng:
    return Rng(seed, stream)
