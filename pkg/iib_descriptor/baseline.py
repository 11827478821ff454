"""
A BRIEF-style point-pair descriptor used as the comparison baseline in evaluations: every bit
compares the raw intensities of two pixels drawn at random around the keypoint.
"""

import warnings

import numpy as np

from iib_descriptor.channels import as_gray_image
from iib_descriptor.descriptor import DEFAULT_RADIUS, DescriptorSet, as_keypoints


def point_pair_pattern(n_bits=256, seed=0):
    """
    ``(n_bits, 4)`` array of ``(dx1, dy1, dx2, dy2)`` sampling offsets in units of the ROS
    radius, drawn from an isotropic Gaussian and clipped to ``[-1, 1)``.
    """
    rng = np.random.default_rng(seed)
    # standard deviation of a fifth of the ROS side
    offsets = rng.normal(0.0, 0.4, size=(n_bits, 4))
    return np.clip(offsets, -1.0, np.nextafter(1.0, 0.0))


def extract_point_pairs(img, keypoints, n_bits=256, radius=DEFAULT_RADIUS, seed=0):
    """
    Extracts point-pair descriptors: bit ``j`` is 1 iff the pixel at the first offset of pair
    ``j`` is darker than the pixel at the second. Offsets scale with each keypoint's radius.

    Returns a ``(descriptors, errors)`` tuple like ``descriptor.extract``; keypoints whose ROS
    leaves the image are skipped and reported.
    """
    img = as_gray_image(img)
    height, width = img.shape
    kps = as_keypoints(keypoints, radius=radius)
    kps['keypoint_idx'] = np.arange(len(kps))

    x, y, r = kps['x'].values, kps['y'].values, kps['radius'].values
    in_bounds = (
        (np.floor(x - r + 0.5) >= 0) & (np.floor(x + r + 0.5) <= width)
        & (np.floor(y - r + 0.5) >= 0) & (np.floor(y + r + 0.5) <= height)
    )
    errors = [
        {
            'type': 'keypoint_region_out_of_bounds',
            'details': {
                'keypoint_idx': int(idx), 'x': float(x[idx]), 'y': float(y[idx]),
                'radius': float(r[idx]), 'angle': float(kps['angle'].iat[idx]),
                'image_width': width, 'image_height': height
            }
        } for idx in np.flatnonzero(~in_bounds)
    ]
    if errors:
        warnings.warn(
            f"{len(errors)} of {len(kps)} keypoints have a region of support that extends "
            f"outside of the {width}x{height} image. These keypoints were skipped."
        )

    kept = np.flatnonzero(in_bounds)
    pattern = point_pair_pattern(n_bits=n_bits, seed=seed)
    x, y, r = x[kept, None], y[kept, None], r[kept, None]

    def sample(dx, dy):
        cols = np.clip(np.floor(x + dx[None, :] * r), 0, width - 1).astype(np.intp)
        rows = np.clip(np.floor(y + dy[None, :] * r), 0, height - 1).astype(np.intp)
        return img[rows, cols]

    bits = (sample(pattern[:, 0], pattern[:, 1]) < sample(pattern[:, 2], pattern[:, 3]))
    fingerprint = {'kind': 'point_pair', 'n_bits': n_bits, 'seed': seed}
    descriptors = DescriptorSet(
        bits.astype(np.uint8).reshape(len(kept), n_bits), [0, n_bits], fingerprint,
        keypoints=kps.iloc[kept]
    )
    return descriptors, errors


__all__ = ['point_pair_pattern', 'extract_point_pairs']
