"""
Library utility functions: bit packing and popcounts, the operation counter used by the
instrumented extraction path, and a synthetic texture generator used for benchmarks and tests.
"""

import numpy as np
from scipy import ndimage


# Number of set bits in every byte value.
POPCOUNT_TABLE = np.array([bin(i).count('1') for i in range(256)], dtype=np.uint8)


def popcount(packed):
    """
    Counts set bits along the last axis of a ``uint8`` array of packed bytes.
    """
    return POPCOUNT_TABLE[packed].sum(axis=-1, dtype=np.int64)


def pack_bits(bits):
    """
    Packs a ``(..., M)`` array of 0/1 values into ``(..., ceil(M / 8))`` bytes. Bit ``j`` of the
    input lands in the lowest-order position first, so bit 0 is the lowest bit of byte 0.
    """
    return np.packbits(np.asarray(bits, dtype=np.uint8), axis=-1, bitorder='little')


def unpack_bits(packed, n_bits):
    """
    Inverse of ``pack_bits``.
    """
    return np.unpackbits(
        np.asarray(packed, dtype=np.uint8), axis=-1, count=n_bits, bitorder='little'
    )


def bits_to_str(bits):
    """
    Renders a 1D bit array as a string, e.g. ``[0, 0, 1, 1] -> '0011'``.
    """
    return ''.join(str(int(b)) for b in np.asarray(bits).ravel())


class OpCounter:
    """
    Tallies the basic algebraic and relational operations performed by the bit formulation
    stage of extraction. Pass one to ``descriptor.extract`` to get per-run totals.
    """
    def __init__(self):
        self.algebraic = 0
        self.relational = 0
        self.descriptors = 0

    def add(self, algebraic=0, relational=0):
        self.algebraic += int(algebraic)
        self.relational += int(relational)

    def merge(self, other):
        self.algebraic += other.algebraic
        self.relational += other.relational
        self.descriptors += other.descriptors

    def per_descriptor(self):
        if self.descriptors == 0:
            return 0.0, 0.0
        return self.algebraic / self.descriptors, self.relational / self.descriptors

    def __repr__(self):
        return (
            f'OpCounter(algebraic={self.algebraic}, relational={self.relational}, '
            f'descriptors={self.descriptors})'
        )


def synthetic_texture(width=256, height=256, seed=0, smoothing=3.0, contrast=40.0):
    """
    Generates a deterministic natural-looking grayscale texture: smoothed white noise at two
    scales plus a gentle illumination gradient, rescaled into [0, 255] and rounded to integers.
    Useful when no real image is at hand (the ``bench`` command, tests).
    """
    rng = np.random.default_rng(seed)
    fine = ndimage.gaussian_filter(rng.standard_normal((height, width)), smoothing)
    coarse = ndimage.gaussian_filter(rng.standard_normal((height, width)), smoothing * 4)
    texture = fine / (fine.std() + 1e-12) + 0.5 * coarse / (coarse.std() + 1e-12)

    rows, cols = np.mgrid[0:height, 0:width]
    ramp = (cols / max(width - 1, 1) - 0.5) + 0.5 * (rows / max(height - 1, 1) - 0.5)

    img = 128.0 + contrast * texture + 20.0 * ramp
    return np.clip(np.round(img), 0, 255)


__all__ = [
    'POPCOUNT_TABLE', 'popcount', 'pack_bits', 'unpack_bits', 'bits_to_str', 'OpCounter',
    'synthetic_texture'
]
