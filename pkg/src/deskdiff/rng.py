"""Counter-based random number streams.

All stochastic inputs to the engine are drawn from Philox counter-based
streams addressed by ``(seed, domain, index)``. Streams are mutually
independent by construction: the 128-bit Philox key encodes ``(seed,
domain)`` and the 256-bit counter is offset by ``index << 128``, giving
every index 2**128 blocks of separation. Draws are reproducible across
processes and platforms and never depend on call order.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DOMAIN_FORWARD_NOISE",
    "DOMAIN_INPUT",
    "DOMAIN_SAMPLER",
    "DOMAIN_DATASET",
    "DOMAIN_WEIGHTS",
    "DOMAIN_TRAINING",
    "stream_generator",
    "normal_field",
]

DOMAIN_FORWARD_NOISE = 0
DOMAIN_INPUT = 1
DOMAIN_SAMPLER = 2
DOMAIN_DATASET = 3
DOMAIN_WEIGHTS = 4
DOMAIN_TRAINING = 5

_U64 = (1 << 64) - 1


def stream_generator(seed: int, domain: int, index: int) -> np.random.Generator:
    """Return a fresh generator for stream ``(seed, domain, index)``.

    The same triple always yields the same draw sequence; distinct triples
    yield independent sequences.
    """
    if index < 0:
        raise ValueError(f"stream index must be non-negative, got {index}")
    key = (int(seed) & _U64) | ((int(domain) & _U64) << 64)
    counter = int(index) << 128
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def normal_field(seed: int, domain: int, index: int, shape: tuple[int, ...]) -> np.ndarray:
    """Draw a float32 standard-normal array from the addressed stream."""
    gen = stream_generator(seed, domain, index)
    return gen.standard_normal(shape, dtype=np.float32)
