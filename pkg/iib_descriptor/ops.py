"""
Operations defined on keypoints and homographies, plus reading and writing of every file format
the package uses.
"""

import io
import math
import struct

import imageio.v2 as imageio
import numpy as np
import pandas as pd

from iib_descriptor.channels import DEFAULT_CHANNELS, as_gray_image
from iib_descriptor.descriptor import (
    DEFAULT_RADIUS, MAPPINGS, DescriptorConfig, DescriptorSet, as_keypoints, segment_bounds_for
)
from iib_descriptor.utils import pack_bits, unpack_bits


#############
# KEYPOINTS #
#############

# ROS rescale factors applied to detector keypoint sizes, and fixed radii for detectors that
# report no meaningful size.
DETECTOR_RESCALE_FACTORS = {
    'akaze': 12,
    'orb': 2,
    'brisk': 4,
    'sift': 20,
    'kaze': 20,
    'surf': 4,
}
DETECTOR_FIXED_RADII = {
    'superpoint': 64,
    'aslfeat': 64,
    'alike': 64,
}


def grid_keypoints(width, height, rows, cols, radius=DEFAULT_RADIUS):
    """
    A ``rows x cols`` grid of upright keypoints spread evenly over the interior of a
    ``width x height`` image, so that every keypoint's ROS lies fully inside the image. This is a
    sampler for experiments and tests, not a feature detector.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f'A keypoint grid needs at least one row and column, got {rows}x{cols}.')
    if width < 2 * radius or height < 2 * radius:
        raise ValueError(
            f'A {width}x{height} image is too small to hold a region of support of radius '
            f'{radius:g}.'
        )

    def axis(length, n):
        if n == 1:
            return np.array([math.floor(length / 2)], dtype=np.float64)
        lo, hi = math.ceil(radius), math.floor(length - radius)
        return np.round(np.linspace(lo, hi, n))

    xs, ys = np.meshgrid(axis(width, cols), axis(height, rows))
    return pd.DataFrame({
        'x': xs.ravel(), 'y': ys.ravel(), 'radius': float(radius), 'angle': np.nan
    })


def rescale_keypoints(keypoints, detector, size_column='size'):
    """
    Sets keypoint radii from a detector preset. For detectors with a rescale factor the radius is
    ``factor * size / 2``, where ``size`` is the detector-reported keypoint diameter stored in
    ``size_column``; superpoint, aslfeat and alike keypoints get a fixed radius of 64.
    """
    detector = detector.lower()
    kps = keypoints.copy()
    if detector in DETECTOR_FIXED_RADII:
        kps['radius'] = float(DETECTOR_FIXED_RADII[detector])
    elif detector in DETECTOR_RESCALE_FACTORS:
        if size_column not in kps.columns:
            raise ValueError(
                f'Rescaling {detector} keypoints requires a {size_column!r} column with the '
                f'detector keypoint sizes.'
            )
        kps['radius'] = DETECTOR_RESCALE_FACTORS[detector] * kps[size_column].astype(float) / 2
    else:
        known = sorted(list(DETECTOR_RESCALE_FACTORS) + list(DETECTOR_FIXED_RADII))
        raise ValueError(
            f'Unknown detector {detector!r}; the known presets are {", ".join(known)}.'
        )
    return kps


################
# HOMOGRAPHIES #
################

def check_homography(H):
    H = np.asarray(H, dtype=np.float64)
    if H.shape != (3, 3):
        raise ValueError(f'A homography must be a 3x3 matrix, got shape {H.shape}.')
    if not np.isfinite(H).all() or abs(np.linalg.det(H)) <= 1e-12:
        raise ValueError(f'The homography {H.tolist()} is degenerate (not invertible).')
    return H


def project_points(H, points):
    """
    Applies a homography to a ``(K, 2)`` array of ``(x, y)`` points, dehomogenizing the result.
    Raises if any point is mapped to infinity.
    """
    H = check_homography(H)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    homogeneous = np.column_stack([points, np.ones(len(points))]) @ H.T
    w = homogeneous[:, 2]
    at_infinity = np.abs(w) < 1e-12
    if at_infinity.any():
        raise ValueError(
            f'The point {tuple(points[at_infinity][0])} is projected to the point at infinity.'
        )
    return homogeneous[:, :2] / w[:, None]


def project_keypoints(keypoints, H):
    """
    Test-image keypoints defined as the exact projections of reference keypoints under ``H``.
    Radii and angles are carried over unchanged.
    """
    kps = as_keypoints(keypoints)
    projected = project_points(H, kps[['x', 'y']].values)
    kps['x'] = projected[:, 0]
    kps['y'] = projected[:, 1]
    return kps


#######
# I/O #
#######

FORMAT_MAGIC = b'IIBD'
FORMAT_VERSION = 1

# Channel ids of the descriptor file format; extra channels are stored by name.
_CHANNEL_IDS = {kind: i for i, kind in enumerate(DEFAULT_CHANNELS)}
_EXTRA_CHANNEL_ID = 255
_KEYPOINT_RECORD = struct.Struct('<ddddI')


def read_image(filename):
    """
    Reads an image file (PGM, PNG, JPEG, ...) as a float64 grayscale image. Color images are
    converted using ITU-R BT.601 luma weights; alpha is ignored.
    """
    pixels = np.asarray(imageio.imread(filename), dtype=np.float64)
    if pixels.ndim == 3:
        if pixels.shape[2] < 3:
            pixels = pixels[:, :, 0]
        else:
            pixels = pixels[:, :, :3] @ np.array([0.299, 0.587, 0.114])
    return as_gray_image(pixels)


def write_image(filename, img):
    """
    Writes a grayscale image as 8 bits, rounding and clipping into [0, 255]. The format follows
    the file extension.
    """
    img = as_gray_image(img)
    imageio.imwrite(filename, np.clip(np.round(img), 0, 255).astype(np.uint8))


def read_keypoints(filename, radius=DEFAULT_RADIUS):
    """
    Reads a keypoint file: headerless CSV, one ``x,y,radius,angle`` line per keypoint, where
    radius and angle (radians) may be left empty.
    """
    kps = pd.read_csv(
        filename, header=None, names=['x', 'y', 'radius', 'angle'], skip_blank_lines=True,
        comment='#'
    )
    if kps[['x', 'y']].isnull().values.any():
        raise ValueError(f'The keypoint file {filename!r} has rows without an x or y position.')
    return as_keypoints(kps, radius=radius)


def to_keypoints_csv(keypoints, filename, output=False):
    """
    Writes keypoints in the format read by ``read_keypoints``.
    """
    df = as_keypoints(keypoints)[['x', 'y', 'radius', 'angle']]
    if output:
        return df
    else:
        df.to_csv(filename, index=False, header=False)


def read_homography(filename):
    """
    Reads a homography file: 9 whitespace-separated reals, row-major.
    """
    values = np.loadtxt(filename, dtype=np.float64).ravel()
    if len(values) != 9:
        raise ValueError(
            f'The homography file {filename!r} holds {len(values)} values instead of 9.'
        )
    return check_homography(values.reshape(3, 3))


def write_homography(filename, H):
    np.savetxt(filename, check_homography(H), fmt='%.17g')


def to_matches_csv(matches, filename, output=False):
    """
    Writes matches as CSV with a ``query_idx,train_idx,distance`` header.
    """
    df = matches[['query_idx', 'train_idx', 'distance']]
    if output:
        return df
    else:
        df.to_csv(filename, index=False)


def from_matches_csv(filename):
    return pd.read_csv(filename, dtype=np.int64)


def _pack_fingerprint(fingerprint):
    if 'mapping' not in fingerprint:
        raise ValueError(
            f'Only quadtree descriptors can be written to a descriptor file, got descriptors '
            f'with fingerprint {fingerprint}.'
        )
    fragments = [struct.pack(
        '<BBBB', fingerprint['granularity'], MAPPINGS.index(fingerprint['mapping']),
        int(fingerprint['overlap']), len(fingerprint['channels'])
    )]
    for kind in fingerprint['channels']:
        if kind in _CHANNEL_IDS:
            fragments.append(struct.pack('<B', _CHANNEL_IDS[kind]))
        else:
            name = kind.encode('utf-8')
            fragments.append(struct.pack('<BH', _EXTRA_CHANNEL_ID, len(name)) + name)
    fragments.append(struct.pack('<d', fingerprint['radius']))

    selection = fingerprint['selection'] or ()
    fragments.append(struct.pack('<I', len(selection)))
    for granularity, channel, quadruple in selection:
        fragments.append(struct.pack(
            '<BBI', granularity, fingerprint['channels'].index(channel), quadruple
        ))
    return b''.join(fragments)


class _Reader:
    def __init__(self, buffer, filename):
        self.buffer = buffer
        self.filename = filename

    def read(self, fmt):
        size = struct.calcsize(fmt)
        chunk = self.buffer.read(size)
        if len(chunk) != size:
            raise ValueError(f'The descriptor file {self.filename!r} is truncated.')
        return struct.unpack(fmt, chunk)

    def read_bytes(self, size):
        chunk = self.buffer.read(size)
        if len(chunk) != size:
            raise ValueError(f'The descriptor file {self.filename!r} is truncated.')
        return chunk


def _unpack_fingerprint(reader):
    granularity, mapping_id, overlap, n_channels = reader.read('<BBBB')
    if mapping_id >= len(MAPPINGS):
        raise ValueError(f'Unknown mapping id {mapping_id} in {reader.filename!r}.')
    channels = []
    for _ in range(n_channels):
        (channel_id,) = reader.read('<B')
        if channel_id == _EXTRA_CHANNEL_ID:
            (length,) = reader.read('<H')
            channels.append(reader.read_bytes(length).decode('utf-8'))
        elif channel_id < len(DEFAULT_CHANNELS):
            channels.append(DEFAULT_CHANNELS[channel_id])
        else:
            raise ValueError(f'Unknown channel id {channel_id} in {reader.filename!r}.')
    (radius,) = reader.read('<d')

    (n_selected,) = reader.read('<I')
    selection = []
    for _ in range(n_selected):
        g, channel_idx, quadruple = reader.read('<BBI')
        selection.append((g, channels[channel_idx], quadruple))

    return {
        'granularity': granularity,
        'mapping': MAPPINGS[mapping_id],
        'overlap': bool(overlap),
        'channels': tuple(channels),
        'radius': radius,
        'selection': tuple(selection) if selection else None,
    }


def to_descriptor_file(descriptors, filename):
    """
    Writes a descriptor set to a binary descriptor file: the magic ``IIBD``, a u16 format
    version, the config fingerprint (including the selected quadruples of masked descriptors),
    the u32 keypoint count and u32 bit count, then one keypoint record and ``ceil(M / 8)``
    descriptor bytes per keypoint. All integers are little-endian; bit 0 is the lowest bit of
    the first byte.
    """
    packed = pack_bits(descriptors.bits)
    kps = descriptors.keypoints
    with open(filename, 'wb') as f:
        f.write(FORMAT_MAGIC)
        f.write(struct.pack('<H', FORMAT_VERSION))
        f.write(_pack_fingerprint(descriptors.fingerprint))
        f.write(struct.pack('<II', len(descriptors), descriptors.n_bits))
        for i in range(len(descriptors)):
            kp = kps.iloc[i]
            f.write(_KEYPOINT_RECORD.pack(
                kp['x'], kp['y'], kp['radius'], kp['angle'], int(kp['keypoint_idx'])
            ))
            f.write(packed[i].tobytes())


def read_descriptor_file(filename):
    """
    Reads a descriptor file written by ``to_descriptor_file`` back into a ``DescriptorSet``.
    """
    with open(filename, 'rb') as f:
        reader = _Reader(io.BytesIO(f.read()), filename)

    if reader.read_bytes(4) != FORMAT_MAGIC:
        raise ValueError(f'{filename!r} is not a descriptor file.')
    (version,) = reader.read('<H')
    if version != FORMAT_VERSION:
        raise ValueError(
            f'{filename!r} uses descriptor format version {version}, but only version '
            f'{FORMAT_VERSION} is supported.'
        )
    fingerprint = _unpack_fingerprint(reader)
    n_keypoints, n_bits = reader.read('<II')
    n_bytes = math.ceil(n_bits / 8)

    records, packed = [], np.zeros((n_keypoints, n_bytes), dtype=np.uint8)
    for i in range(n_keypoints):
        records.append(reader.read(_KEYPOINT_RECORD.format))
        packed[i] = np.frombuffer(reader.read_bytes(n_bytes), dtype=np.uint8)

    keypoints = pd.DataFrame(
        records, columns=['x', 'y', 'radius', 'angle', 'keypoint_idx']
    ).astype({'keypoint_idx': np.int64})
    quadruples = list(fingerprint['selection']) if fingerprint['selection'] else None

    config = DescriptorConfig.from_fingerprint(fingerprint)
    bounds = segment_bounds_for(config, quadruples)
    if bounds[-1] != n_bits:
        raise ValueError(
            f'{filename!r} declares {n_bits} bits per descriptor, but its configuration implies '
            f'{bounds[-1]}.'
        )
    return DescriptorSet(
        unpack_bits(packed, n_bits), bounds, fingerprint, keypoints=keypoints,
        quadruples=quadruples
    )


__all__ = [
    'DETECTOR_RESCALE_FACTORS', 'DETECTOR_FIXED_RADII', 'grid_keypoints', 'rescale_keypoints',
    'check_homography', 'project_points', 'project_keypoints', 'FORMAT_MAGIC', 'FORMAT_VERSION',
    'read_image', 'write_image', 'read_keypoints', 'to_keypoints_csv', 'read_homography',
    'write_homography', 'to_matches_csv', 'from_matches_csv', 'to_descriptor_file',
    'read_descriptor_file'
]
