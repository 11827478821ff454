"""
Module containing the descriptor itself. The region of support (ROS) around a keypoint is split
recursively into a quadtree of local patches at granularities ``g = 1..G``. At every granularity,
each quadruple of adjacent patches (a 2x2 super-cell) yields four patch means ``x`` per channel,
and a mapping function turns those means into one or two bits per patch. Concatenating all bits
granularity by granularity gives the binary descriptor.

Bit layout is granularity-major, then channel (in config order), then quadruple (row-major over
super-cells), then patch (top-left, top-right, bottom-left, bottom-right). Two-bit codes are
written most significant bit first. Each granularity is therefore a contiguous segment, which is
what hierarchical matching relies on.
"""

import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd
from scipy import ndimage

from iib_descriptor.channels import (
    DEFAULT_CHANNELS, canonical_channel_name, compute_channels, grid_sums, region_mean
)
from iib_descriptor.utils import OpCounter, pack_bits


MAPPINGS = ('mean', 'max', 'min', 'quartile', 'sort')
BITS_PER_PATCH = {'mean': 1, 'max': 1, 'min': 1, 'quartile': 2, 'sort': 2}
DEFAULT_RADIUS = 32
KEYPOINT_COLUMNS = ['x', 'y', 'radius', 'angle']


##########
# CONFIG #
##########

def quadruple_count(level, overlap=False):
    """
    Number of quadruples at a granularity level: ``4^(g - 1)`` super-cells without overlap, or
    ``(2^g - 1)^2`` sliding 2x2 windows with overlap.
    """
    n = 2 ** level
    return (n - 1) ** 2 if overlap else (n // 2) ** 2


class DescriptorConfig:
    """
    Descriptor parameters. ``granularity`` is the maximal quadtree level G, ``mapping`` one of
    ``mean, max, min, quartile, sort``, ``overlap`` switches to overlapping quadruples,
    ``channels`` lists the channel names used (aliases such as ``gx`` are accepted),
    ``rotation`` enables rotated ROS extraction for keypoints carrying an angle, and ``radius``
    is the ROS half-side given to keypoints that do not carry their own.
    """
    def __init__(self, granularity=4, mapping='mean', overlap=False, channels=DEFAULT_CHANNELS,
                 rotation=False, radius=DEFAULT_RADIUS):
        granularity = int(granularity)
        if granularity < 1:
            raise ValueError(f'The granularity must be at least 1, but {granularity} was given.')

        mapping = str(mapping).lower()
        if mapping not in MAPPINGS:
            raise ValueError(
                f'"mapping" must be one of {", ".join(MAPPINGS)}, but the value {mapping!r} '
                f'was provided instead.'
            )

        if isinstance(channels, str):
            channels = channels.split(',')
        channels = tuple(canonical_channel_name(c) for c in channels)
        if len(channels) == 0:
            raise ValueError('At least one channel is required.')
        if len(set(channels)) != len(channels):
            raise ValueError(f'Channels must not repeat, got {list(channels)}.')

        radius = float(radius)
        if radius < 2 ** granularity:
            raise ValueError(
                f'A radius of {radius:g} is too small for granularity {granularity}: every '
                f'finest-level patch must span at least one pixel, so the minimum radius is '
                f'{2 ** granularity}.'
            )

        self.granularity = granularity
        self.mapping = mapping
        self.overlap = bool(overlap)
        self.channels = channels
        self.rotation = bool(rotation)
        self.radius = radius

    @property
    def bits_per_patch(self):
        return BITS_PER_PATCH[self.mapping]

    @property
    def n_channels(self):
        return len(self.channels)

    def quadruple_counts(self):
        return [quadruple_count(g, self.overlap) for g in range(1, self.granularity + 1)]

    def segment_lengths(self):
        """
        Bit count of every granularity segment, all channels included.
        """
        return [
            self.bits_per_patch * 4 * self.n_channels * q for q in self.quadruple_counts()
        ]

    def segment_bounds(self):
        return [0] + np.cumsum(self.segment_lengths()).tolist()

    def fingerprint(self):
        return {
            'granularity': self.granularity,
            'mapping': self.mapping,
            'overlap': self.overlap,
            'channels': self.channels,
            'radius': self.radius,
            'selection': None,
        }

    @classmethod
    def from_fingerprint(cls, fingerprint):
        return cls(
            granularity=fingerprint['granularity'], mapping=fingerprint['mapping'],
            overlap=fingerprint['overlap'], channels=fingerprint['channels'],
            radius=fingerprint['radius']
        )

    def __eq__(self, other):
        return (isinstance(other, DescriptorConfig)
                and self.fingerprint() == other.fingerprint()
                and self.rotation == other.rotation)

    def __repr__(self):
        return (
            f'DescriptorConfig(granularity={self.granularity}, mapping={self.mapping!r}, '
            f'overlap={self.overlap}, channels={self.channels}, rotation={self.rotation}, '
            f'radius={self.radius:g})'
        )


def descriptor_size(config):
    """
    Descriptor length in bits. Without overlap this is ``bpp * N * sum_g 4^g``; with overlap it
    is ``bpp * N * sum_g 4 (2^g - 1)^2``, where ``bpp`` is 1 for the mean, max and min mappings
    and 2 for quartile and sort.
    """
    return int(sum(config.segment_lengths()))


def quadruple_table(config):
    """
    Every quadruple of a full descriptor in bit order, as a DataFrame with ``granularity``,
    ``channel``, ``quadruple``, ``bit_start`` and ``bit_stop`` columns. Each quadruple owns a
    contiguous run of ``4 * bits_per_patch`` bits.
    """
    width = 4 * config.bits_per_patch
    rows = [
        (level, channel, q)
        for level, n_quads in zip(range(1, config.granularity + 1), config.quadruple_counts())
        for channel in config.channels
        for q in range(n_quads)
    ]
    table = pd.DataFrame(rows, columns=['granularity', 'channel', 'quadruple'])
    table['bit_start'] = np.arange(len(table)) * width
    table['bit_stop'] = table['bit_start'] + width
    return table


def segment_bounds_for(config, quadruples=None):
    """
    Granularity segment bounds of a descriptor made of the given quadruple ids (all of them when
    ``quadruples`` is None). Granularities without any quadruple get an empty segment.
    """
    if quadruples is None:
        return config.segment_bounds()
    width = 4 * config.bits_per_patch
    counts = np.zeros(config.granularity, dtype=np.int64)
    for granularity, _, _ in quadruples:
        counts[granularity - 1] += width
    return [0] + np.cumsum(counts).tolist()


###############
# DESCRIPTORS #
###############

class BinaryDescriptor:
    """
    A single descriptor: ``bits`` is a length-M array of 0/1 values, ``segment_bounds`` the bit
    offsets delimiting granularity segments, ``fingerprint`` the config it was built with.
    """
    def __init__(self, bits, segment_bounds, fingerprint):
        self.bits = np.asarray(bits, dtype=np.uint8)
        self.segment_bounds = list(segment_bounds)
        self.fingerprint = fingerprint

    def __len__(self):
        return len(self.bits)

    def __eq__(self, other):
        return (isinstance(other, BinaryDescriptor)
                and self.fingerprint == other.fingerprint
                and np.array_equal(self.bits, other.bits))

    def __repr__(self):
        return f'BinaryDescriptor(n_bits={len(self.bits)}, segments={self.segment_bounds})'

    def packed(self):
        return pack_bits(self.bits)


class DescriptorSet:
    """
    The descriptors of a collection of keypoints. ``bits`` is a ``(K, M)`` array of 0/1 values,
    ``keypoints`` a DataFrame of the K described keypoints (the original position of each
    keypoint in the input is kept in ``keypoint_idx``), and ``quadruples`` the ordered quadruple
    ids the bits were gathered from when a selection mask was applied (``None`` otherwise).
    """
    def __init__(self, bits, segment_bounds, fingerprint, keypoints=None, quadruples=None):
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.ndim != 2:
            raise ValueError(f'Expected a (K, M) bit array, got shape {bits.shape}.')
        if segment_bounds[0] != 0 or segment_bounds[-1] != bits.shape[1]:
            raise ValueError(
                f'Segment bounds {list(segment_bounds)} do not partition {bits.shape[1]} bits.'
            )
        if keypoints is None:
            keypoints = pd.DataFrame(
                {'x': np.nan, 'y': np.nan, 'radius': np.nan, 'angle': np.nan,
                 'keypoint_idx': np.arange(len(bits))}
            )

        self.bits = bits
        self.segment_bounds = [int(b) for b in segment_bounds]
        self.fingerprint = fingerprint
        self.keypoints = keypoints.reset_index(drop=True)
        self.quadruples = quadruples

    @property
    def n_bits(self):
        return self.bits.shape[1]

    @property
    def n_segments(self):
        return len(self.segment_bounds) - 1

    def segment(self, level):
        """
        ``(start, stop)`` bit offsets of granularity ``level`` (1-based).
        """
        if not 1 <= level <= self.n_segments:
            raise ValueError(
                f'Granularity {level} is out of range; this descriptor has {self.n_segments} '
                f'granularity segments.'
            )
        return self.segment_bounds[level - 1], self.segment_bounds[level]

    def __len__(self):
        return self.bits.shape[0]

    def __getitem__(self, idx):
        return BinaryDescriptor(self.bits[idx], self.segment_bounds, self.fingerprint)

    def __repr__(self):
        return f'DescriptorSet(n={len(self)}, n_bits={self.n_bits}, fingerprint={self.fingerprint})'

    def take(self, idxs):
        idxs = np.asarray(idxs, dtype=np.intp)
        return DescriptorSet(
            self.bits[idxs], self.segment_bounds, self.fingerprint,
            keypoints=self.keypoints.iloc[idxs], quadruples=self.quadruples
        )


def as_keypoints(keypoints, radius=DEFAULT_RADIUS):
    """
    Normalizes keypoints into a DataFrame with ``x`` (column), ``y`` (row), ``radius`` and
    ``angle`` (radians, NaN for upright) columns. Accepts a DataFrame or an array-like of rows
    ``(x, y[, radius[, angle]])``. Missing radii get ``radius``.
    """
    if isinstance(keypoints, pd.DataFrame):
        kps = keypoints.copy()
    else:
        arr = np.asarray(keypoints, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.size == 0:
            arr = arr.reshape(0, 2)
        if arr.shape[1] < 2 or arr.shape[1] > 4:
            raise ValueError(
                f'Keypoint rows must be (x, y[, radius[, angle]]), got rows of length '
                f'{arr.shape[1]}.'
            )
        kps = pd.DataFrame(arr, columns=KEYPOINT_COLUMNS[:arr.shape[1]])

    for column in ['x', 'y']:
        if column not in kps.columns:
            raise ValueError(f'Keypoints are missing the {column!r} column.')
    if 'radius' not in kps.columns:
        kps['radius'] = radius
    if 'angle' not in kps.columns:
        kps['angle'] = np.nan

    kps['radius'] = kps['radius'].astype(float).fillna(radius)
    kps['angle'] = kps['angle'].astype(float)
    kps['x'] = kps['x'].astype(float)
    kps['y'] = kps['y'].astype(float)
    return kps.reset_index(drop=True)


##########
# LAYOUT #
##########

def _level_edges(centers, radii, level):
    """
    Integer pixel boundaries of the ``2^g x 2^g`` patch grid along one axis, for many keypoints
    at once: ``floor(c - r + j * 2r / 2^g + 0.5)`` for ``j = 0..2^g``. Adjacent patches share
    boundaries, and the boundaries of level ``g - 1`` are the even boundaries of level ``g``.
    """
    n = 2 ** level
    j = np.arange(n + 1)
    centers = np.asarray(centers, dtype=np.float64)[:, None]
    radii = np.asarray(radii, dtype=np.float64)[:, None]
    return np.floor(centers - radii + (j[None, :] * (2 * radii)) / n + 0.5).astype(np.intp)


def _quadruple_values(grid, overlap):
    """
    Gathers the ``(..., n, n)`` patch grid into ``(..., Q, 4)`` quadruples, patches ordered
    top-left, top-right, bottom-left, bottom-right and quadruples row-major.
    """
    if overlap:
        parts = [grid[..., :-1, :-1], grid[..., :-1, 1:], grid[..., 1:, :-1], grid[..., 1:, 1:]]
    else:
        parts = [grid[..., 0::2, 0::2], grid[..., 0::2, 1::2],
                 grid[..., 1::2, 0::2], grid[..., 1::2, 1::2]]
    stacked = np.stack(parts, axis=-1)
    return stacked.reshape(stacked.shape[:-3] + (-1, 4))


class QuadtreeLayout:
    """
    The patch geometry of one ROS: a square of side ``2 * radius`` centered on ``center``
    (``(x, y)`` in pixel edge coordinates, so pixel ``c`` spans ``[c, c + 1)``), split into
    ``2^g x 2^g`` patches at every level ``g = 1..G``.
    """
    def __init__(self, radius, granularity, center):
        self.radius = float(radius)
        self.granularity = int(granularity)
        self.center = (float(center[0]), float(center[1]))

    def edges(self, level):
        """
        ``(row_edges, col_edges)`` of a level, each of length ``2^g + 1``.
        """
        self._check_level(level)
        cx, cy = self.center
        cols = _level_edges([cx], [self.radius], level)[0]
        rows = _level_edges([cy], [self.radius], level)[0]
        return rows, cols

    def patch_side(self, level):
        return 2 * self.radius / 2 ** level

    def patch_count(self, level):
        self._check_level(level)
        return 4 ** level

    def patch_rects(self, level):
        """
        Patch rectangles ``(x, y, width, height)`` of a level, row-major.
        """
        rows, cols = self.edges(level)
        return [
            (cols[j], rows[i], cols[j + 1] - cols[j], rows[i + 1] - rows[i])
            for i in range(len(rows) - 1) for j in range(len(cols) - 1)
        ]

    def quadruples(self, level, overlap=False):
        """
        ``(Q, 4)`` array of row-major patch indices making up every quadruple of a level.
        """
        self._check_level(level)
        n = 2 ** level
        return _quadruple_values(np.arange(n * n).reshape(n, n), overlap)

    def quadruple_count(self, level, overlap=False):
        self._check_level(level)
        return quadruple_count(level, overlap)

    def _check_level(self, level):
        if not 1 <= level <= self.granularity:
            raise ValueError(
                f'Granularity level {level} is outside of this layout\'s range 1..'
                f'{self.granularity}.'
            )

    def __repr__(self):
        return (
            f'QuadtreeLayout(radius={self.radius:g}, granularity={self.granularity}, '
            f'center={self.center})'
        )


def layout_patches(radius, granularity, center=None):
    """
    Builds the quadtree layout of a ROS. Without a ``center`` the ROS is placed with its top-left
    corner on the origin, i.e. centered on ``(radius, radius)``.
    """
    if radius < 2 ** granularity:
        raise ValueError(
            f'A radius of {radius:g} is too small for granularity {granularity}; the minimum '
            f'radius is {2 ** granularity}.'
        )
    if center is None:
        center = (radius, radius)
    return QuadtreeLayout(radius, granularity, center)


def quad_stats(stack, channel, layout, quadruple, overlap=False):
    """
    The four patch means ``[x1, x2, x3, x4]`` of one quadruple on one channel, in top-left,
    top-right, bottom-left, bottom-right order. ``channel`` is a channel index or name and
    ``quadruple`` a ``(level, index)`` pair. Raises if a patch leaves the image.
    """
    level, index = quadruple
    if isinstance(channel, str):
        channel = stack.index(channel)
    integral = stack.integrals[channel]
    rects = layout.patch_rects(level)
    patch_idxs = layout.quadruples(level, overlap=overlap)[index]
    return np.array([region_mean(integral, rects[p]) for p in patch_idxs])


####################
# MAPPING FUNCTIONS #
####################
# Every mapping takes an array of shape (..., 4) and returns bits of shape (..., 4) or (..., 8).

def _as_quadruples(x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 4:
        raise ValueError(f'Mapping functions take quadruples of 4 values, got shape {x.shape}.')
    return x


def _codes_to_bits(codes):
    codes = codes.astype(np.uint8)
    bits = np.stack([(codes >> 1) & 1, codes & 1], axis=-1)
    return bits.reshape(codes.shape[:-1] + (8,))


def map_mean(x, reference=None):
    """
    Bit ``i`` is 1 iff ``x_i > mean(x)``; ties give 0. A precomputed ``reference`` mean may be
    passed in, which is how extraction reuses the previous granularity.
    """
    x = _as_quadruples(x)
    if reference is None:
        reference = x.sum(axis=-1) / 4
    return (x > np.asarray(reference)[..., None]).astype(np.uint8)


def map_max(x):
    """
    Bit ``i`` is 1 iff ``x_i`` equals the quadruple maximum; tied maxima all get 1.
    """
    x = _as_quadruples(x)
    return (x == x.max(axis=-1, keepdims=True)).astype(np.uint8)


def map_min(x):
    """
    Bit ``i`` is 1 iff ``x_i`` equals the quadruple minimum; tied minima all get 1.
    """
    x = _as_quadruples(x)
    return (x == x.min(axis=-1, keepdims=True)).astype(np.uint8)


def map_quartile(x):
    """
    Two bits per patch from the position of ``x_i - min(x)`` within the range
    ``R = max(x) - min(x)``: ``11`` above 0.75R, ``10`` in (0.5R, 0.75R], ``01`` in
    (0.25R, 0.5R] and ``00`` otherwise. ``R = 0`` gives all ``00``.
    """
    x = _as_quadruples(x)
    lo = x.min(axis=-1, keepdims=True)
    spread = x.max(axis=-1, keepdims=True) - lo
    d = x - lo
    codes = ((d > 0.25 * spread).astype(np.uint8) + (d > 0.5 * spread)
             + (d > 0.75 * spread))
    return _codes_to_bits(codes)


def map_sort(x):
    """
    Two bits per patch encoding the ascending rank of ``x_i`` (``00`` smallest, ``11`` largest);
    ties go to the lower patch index first.
    """
    x = _as_quadruples(x)
    ranks = np.argsort(np.argsort(x, axis=-1, kind='stable'), axis=-1, kind='stable')
    return _codes_to_bits(ranks)


MAPPING_FUNCTIONS = {
    'mean': map_mean,
    'max': map_max,
    'min': map_min,
    'quartile': map_quartile,
    'sort': map_sort,
}


# (algebraic, relational) operations per quadruple spent by each mapping, excluding the
# computation of the reference mean for the mean mapping.
_MAPPING_OPS = {
    'mean': (0, 4),
    'max': (0, 3 + 4),
    'min': (0, 3 + 4),
    'quartile': (1 + 4 + 3, 6 + 12),
    'sort': (0, 5),
}


##############
# EXTRACTION #
##############

def _formulate(stack, keypoints, config, counter, origins=None):
    """
    Computes the bits of in-bounds upright keypoints, vectorized over keypoints. Returns a
    ``(K, M)`` bit array. ``origins`` is a ``(K, 2)`` array of ``(col, row)`` offsets subtracted
    from the patch edges, for stacks that only cover part of the image.

    Where a level tiles every patch with the same pixel area, the raw patch sums stand in for the
    patch means: every mapping is invariant to a common positive scale factor. The mean
    mapping without overlap then takes its reference straight from the parent patch of the
    previous granularity (the root for level 1), so no per-quadruple averaging is needed.
    """
    cx = keypoints['x'].values
    cy = keypoints['y'].values
    radii = keypoints['radius'].values
    integrals = stack.integrals
    n_channels, n_keypoints = integrals.shape[0], len(keypoints)
    mapping = MAPPING_FUNCTIONS[config.mapping]

    segments = []
    parent_sums = None
    for level in range(1, config.granularity + 1):
        row_edges = _level_edges(cy, radii, level)
        col_edges = _level_edges(cx, radii, level)
        if origins is not None:
            col_edges = col_edges - origins[:, :1]
            row_edges = row_edges - origins[:, 1:]
        sums = grid_sums(integrals, row_edges, col_edges)  # (N, K, n, n)
        areas = (np.diff(row_edges, axis=1)[:, :, None]
                 * np.diff(col_edges, axis=1)[:, None, :]).astype(np.float64)
        uniform = (areas == areas[:, :1, :1]).all(axis=(1, 2))  # per keypoint
        n_patches = sums.shape[-1] * sums.shape[-2]

        grid = np.where(uniform[None, :, None, None], sums, sums / areas[None])
        x = _quadruple_values(grid, config.overlap)  # (N, K, Q, 4)
        n_quads = x.shape[-2]

        counter.add(algebraic=3 * n_channels * n_keypoints * n_patches)
        counter.add(algebraic=n_channels * n_patches * int((~uniform).sum()))

        if config.mapping == 'mean':
            direct = x.sum(axis=-1) / 4
            if config.overlap:
                reference = direct
                counter.add(algebraic=4 * n_channels * n_keypoints * n_quads)
            else:
                if parent_sums is None:
                    parent = sums.sum(axis=(-2, -1)).reshape(n_channels, n_keypoints, 1)
                    counter.add(algebraic=3 * n_channels * n_keypoints)
                else:
                    parent = parent_sums.reshape(n_channels, n_keypoints, -1)
                reused = uniform[None, :, None]
                reference = np.where(reused, parent / 4, direct)
                counter.add(algebraic=n_channels * n_quads * int(uniform.sum()))
                counter.add(algebraic=4 * n_channels * n_quads * int((~uniform).sum()))
            bits = map_mean(x, reference=reference)
        else:
            bits = mapping(x)

        algebraic, relational = _MAPPING_OPS[config.mapping]
        counter.add(
            algebraic=algebraic * n_channels * n_keypoints * n_quads,
            relational=relational * n_channels * n_keypoints * n_quads
        )

        # (N, K, Q, bits) -> (K, N * Q * bits)
        segments.append(bits.transpose(1, 0, 2, 3).reshape(n_keypoints, -1))
        parent_sums = sums

    counter.descriptors += n_keypoints
    return np.concatenate(segments, axis=1)


def _upright_in_bounds(stack, keypoints):
    cols = _level_edges(keypoints['x'].values, keypoints['radius'].values, 1)
    rows = _level_edges(keypoints['y'].values, keypoints['radius'].values, 1)
    return ((cols[:, 0] >= 0) & (cols[:, -1] <= stack.width)
            & (rows[:, 0] >= 0) & (rows[:, -1] <= stack.height))


def _rotated_sample_grid(x, y, radius, angle):
    """
    Sampling positions (array index coordinates, ``(rows, cols)``) of the rotated ROS of a
    keypoint. The local buffer is laid out on the pixels of the upright ROS, starting at its top
    left pixel ``floor(c - r + 0.5)``, with a one pixel margin for the gradients, and is rotated
    about the keypoint. Also returns the index of the upright pixel at local ``(0, 0)``.

    Positions are written as the upright pixel plus a rotation correction, so that angle 0 lands
    exactly on the upright pixels.
    """
    cols0 = _level_edges([x], [radius], 1)[0]
    rows0 = _level_edges([y], [radius], 1)[0]
    origin = (int(cols0[0]) - 1, int(rows0[0]) - 1)
    col_idx = origin[0] + np.arange(cols0[-1] - cols0[0] + 2)
    row_idx = origin[1] + np.arange(rows0[-1] - rows0[0] + 2)
    base_cols, base_rows = np.meshgrid(col_idx.astype(np.float64), row_idx.astype(np.float64))
    du, dv = base_cols + 0.5 - x, base_rows + 0.5 - y
    cos, sin = np.cos(angle), np.sin(angle)
    cols = base_cols + (cos - 1) * du - sin * dv
    rows = base_rows + sin * du + (cos - 1) * dv
    return origin, rows, cols


def _rotated_in_bounds(stack, keypoint):
    # the margin is clamped to the image border; only the ROS itself must lie inside
    _, rows, cols = _rotated_sample_grid(
        keypoint['x'], keypoint['y'], keypoint['radius'], keypoint['angle']
    )
    rows, cols = rows[1:-1, 1:-1], cols[1:-1, 1:-1]
    return (rows.min() >= 0 and cols.min() >= 0
            and rows.max() <= stack.height - 1 and cols.max() <= stack.width - 1)


def _rotated_stack(stack, keypoint):
    """
    Resamples the rotated ROS of a keypoint bilinearly from the intensity channel (and any extra
    channels) and recomputes channels and integral images on the local buffer. Returns the local
    stack and the ``(col, row)`` image index of its top left pixel.
    """
    origin, rows, cols = _rotated_sample_grid(
        keypoint['x'], keypoint['y'], keypoint['radius'], keypoint['angle']
    )
    coords = np.stack([rows, cols])

    def resample(channel):
        return ndimage.map_coordinates(channel, coords, order=1, mode='nearest', prefilter=False)

    local = resample(stack.channel('intensity'))
    extras = [
        (kind, resample(stack.channels[i]))
        for i, kind in enumerate(stack.kinds) if kind not in DEFAULT_CHANNELS
    ]
    return compute_channels(local, extras=extras), origin


def _extract_chunk(stack, keypoints, config):
    """
    Extracts a chunk of keypoints. Returns ``(bits, kept_positions, errors, counter)``.
    """
    counter = OpCounter()
    errors = []
    n_bits = descriptor_size(config)
    bits = np.zeros((len(keypoints), n_bits), dtype=np.uint8)

    rotated = config.rotation & keypoints['angle'].notnull().values
    in_bounds = np.zeros(len(keypoints), dtype=bool)
    upright_idxs = np.flatnonzero(~rotated)
    if len(upright_idxs) > 0:
        in_bounds[upright_idxs] = _upright_in_bounds(stack, keypoints.iloc[upright_idxs])
    for idx in np.flatnonzero(rotated):
        in_bounds[idx] = _rotated_in_bounds(stack, keypoints.iloc[idx])

    for idx in np.flatnonzero(~in_bounds):
        kp = keypoints.iloc[idx]
        errors.append({
            'type': 'keypoint_region_out_of_bounds',
            'details': {
                'keypoint_idx': int(kp['keypoint_idx']),
                'x': float(kp['x']),
                'y': float(kp['y']),
                'radius': float(kp['radius']),
                'angle': float(kp['angle']),
                'image_width': stack.width,
                'image_height': stack.height
            }
        })

    selected = stack.select(config.channels)
    upright = np.flatnonzero(~rotated & in_bounds)
    if len(upright) > 0:
        bits[upright] = _formulate(selected, keypoints.iloc[upright], config, counter)

    for idx in np.flatnonzero(rotated & in_bounds):
        local_stack, origin = _rotated_stack(stack, keypoints.iloc[idx])
        bits[idx] = _formulate(
            local_stack.select(config.channels), keypoints.iloc[[idx]], config, counter,
            origins=np.array([origin])
        )[0]

    kept = np.flatnonzero(in_bounds)
    return bits[kept], kept, errors, counter


def extract(stack, keypoints, config=None, counter=None, workers=1):
    """
    Extracts descriptors for a collection of keypoints. Example usage:

    .. code:: python

        import iib_descriptor as iib

        img = iib.ops.read_image('graffiti.pgm')
        stack = iib.compute_channels(img)
        keypoints = iib.ops.grid_keypoints(img.shape[1], img.shape[0], 10, 10)
        descriptors, errors = iib.extract(stack, keypoints)

    Upright keypoints are described from the shared full-image integral images. When
    ``config.rotation`` is set, keypoints carrying an angle are described from a bilinearly
    resampled, rotated copy of their ROS with locally recomputed channels and integrals.

    Keypoints whose ROS leaves the image are skipped rather than padded, as are keypoints whose
    own radius is below ``2^G``. Output is a ``(descriptors, errors)`` tuple: ``descriptors`` is a
    ``DescriptorSet`` of the kept keypoints in input order, ``errors`` a list of
    ``keypoint_region_out_of_bounds`` and ``keypoint_radius_too_small`` records, one per skipped
    keypoint. Pass an ``OpCounter`` as ``counter`` to tally the operations spent on bit
    formulation. ``workers > 1`` splits the keypoints into chunks extracted on a thread pool; the
    result does not depend on the worker count.
    """
    config = config if config is not None else DescriptorConfig()
    keypoints = as_keypoints(keypoints, radius=config.radius)
    keypoints['keypoint_idx'] = np.arange(len(keypoints))

    # keypoint files may carry radii too small for the configured granularity
    min_radius = 2 ** config.granularity
    too_small = (keypoints['radius'] < min_radius).values
    radius_errors = [
        {
            'type': 'keypoint_radius_too_small',
            'details': {
                'keypoint_idx': int(kp['keypoint_idx']),
                'radius': float(kp['radius']),
                'min_radius': min_radius
            }
        } for _, kp in keypoints[too_small].iterrows()
    ]
    if radius_errors:
        warnings.warn(
            f"{len(radius_errors)} of {len(keypoints)} keypoints have a radius below "
            f"{min_radius}, the minimum for granularity {config.granularity}. These keypoints "
            f"were skipped."
        )
    candidates = np.flatnonzero(~too_small)

    n_bits = descriptor_size(config)
    workers = max(int(workers), 1)
    chunks = [c for c in np.array_split(candidates, workers) if len(c) > 0]

    if len(chunks) <= 1:
        chunks = [candidates]
        results = [_extract_chunk(stack, keypoints.iloc[candidates], config)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda chunk: _extract_chunk(stack, keypoints.iloc[chunk], config), chunks
            ))

    all_bits, kept, bounds_errors = [np.zeros((0, n_bits), dtype=np.uint8)], [], []
    for chunk, (bits, chunk_kept, chunk_errors, chunk_counter) in zip(chunks, results):
        all_bits.append(bits)
        kept.append(chunk[chunk_kept])
        bounds_errors += chunk_errors
        if counter is not None:
            counter.merge(chunk_counter)

    kept = np.concatenate(kept) if kept else np.zeros(0, dtype=np.intp)
    if bounds_errors:
        warnings.warn(
            f"{len(bounds_errors)} of {len(keypoints)} keypoints have a region of support that "
            f"extends outside of the {stack.width}x{stack.height} image. These keypoints were "
            f"skipped."
        )
    errors = sorted(radius_errors + bounds_errors, key=lambda e: e['details']['keypoint_idx'])

    descriptors = DescriptorSet(
        np.concatenate(all_bits, axis=0), config.segment_bounds(), config.fingerprint(),
        keypoints=keypoints.iloc[kept]
    )
    return descriptors, errors


def extract_keypoint(stack, keypoint, config=None):
    """
    Extracts the descriptor of a single keypoint ``(x, y[, radius[, angle]])``. Raises if the
    keypoint's ROS leaves the image.
    """
    config = config if config is not None else DescriptorConfig()
    with warnings.catch_warnings():
        warnings.simplefilter('ignore')
        descriptors, errors = extract(stack, [keypoint], config)
    if errors and errors[0]['type'] == 'keypoint_radius_too_small':
        raise ValueError(
            f'A keypoint radius of {errors[0]["details"]["radius"]:g} is too small; the minimum '
            f'for granularity {config.granularity} is {2 ** config.granularity}.'
        )
    if errors:
        details = errors[0]['details']
        raise ValueError(
            f'The region of support of the keypoint at ({details["x"]:g}, {details["y"]:g}) '
            f'with radius {details["radius"]:g} extends outside of the '
            f'{details["image_width"]}x{details["image_height"]} image.'
        )
    return descriptors[0]


__all__ = [
    'MAPPINGS', 'BITS_PER_PATCH', 'DEFAULT_RADIUS', 'quadruple_count', 'DescriptorConfig',
    'descriptor_size', 'quadruple_table', 'segment_bounds_for', 'BinaryDescriptor',
    'DescriptorSet', 'as_keypoints', 'QuadtreeLayout',
    'layout_patches', 'quad_stats', 'map_mean', 'map_max', 'map_min', 'map_quartile', 'map_sort',
    'MAPPING_FUNCTIONS', 'extract', 'extract_keypoint'
]
