"""
Homography ground truth evaluation: geometric correspondences, precision and recall of mutual
matches, recall versus 1-precision sweeps, whole-directory benchmarks, and a generator of
synthetic illumination-changed image pairs.
"""

import os
import glob
import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd
from scipy import ndimage

from iib_descriptor.baseline import extract_point_pairs
from iib_descriptor.channels import as_gray_image, compute_channels
from iib_descriptor.descriptor import DescriptorConfig, extract
from iib_descriptor.matching import brute_force_mutual, match
from iib_descriptor.ops import (
    check_homography, grid_keypoints, project_keypoints, project_points, read_homography,
    read_image
)
from iib_descriptor.selection import apply_mask


DEFAULT_EPSILON = 3.0
REPORT_COLUMNS = [
    'pair_id', 'putative', 'correct', 'correspondences', 'precision', 'recall', 'MC'
]
IMAGE_EXTENSIONS = ('.ppm', '.pgm', '.png', '.jpg', '.jpeg', '.bmp', '.tif', '.tiff')


############
# GEOMETRY #
############

def project_point(H, p):
    """
    Projects a single ``(x, y)`` point with a homography. Raises if it goes to infinity.
    """
    x, y = project_points(H, [p])[0]
    return float(x), float(y)


def reprojection_distances(H, ref_xy, test_xy):
    """
    Symmetric reprojection distances between paired points: the larger of
    ``|H p_ref - p_test|`` and ``|H^-1 p_test - p_ref|``.
    """
    H = check_homography(H)
    ref_xy = np.asarray(ref_xy, dtype=np.float64).reshape(-1, 2)
    test_xy = np.asarray(test_xy, dtype=np.float64).reshape(-1, 2)
    forward = np.linalg.norm(project_points(H, ref_xy) - test_xy, axis=1)
    backward = np.linalg.norm(project_points(np.linalg.inv(H), test_xy) - ref_xy, axis=1)
    return np.maximum(forward, backward)


def _check_epsilon(epsilon):
    if epsilon < 0:
        raise ValueError(f'The reprojection threshold must be nonnegative, got {epsilon}.')


def correspondences(ref_keypoints, test_keypoints, H, epsilon=DEFAULT_EPSILON):
    """
    Ground truth correspondences between two keypoint sets. Candidate pairs are those within
    ``epsilon`` pixels under the symmetric reprojection distance; they are assigned one-to-one
    greedily by ascending distance (ties by reference then test index).

    Returns a DataFrame of ``ref_idx, test_idx, distance`` rows, indices being positions in the
    two keypoint tables.
    """
    _check_epsilon(epsilon)
    H = check_homography(H)
    ref_xy = np.asarray(ref_keypoints[['x', 'y']].values, dtype=np.float64)
    test_xy = np.asarray(test_keypoints[['x', 'y']].values, dtype=np.float64)

    empty = pd.DataFrame({
        'ref_idx': pd.Series(dtype=np.int64), 'test_idx': pd.Series(dtype=np.int64),
        'distance': pd.Series(dtype=np.float64)
    })
    if len(ref_xy) == 0 or len(test_xy) == 0:
        return empty

    projected = project_points(H, ref_xy)
    back = project_points(np.linalg.inv(H), test_xy)
    forward = np.linalg.norm(projected[:, None, :] - test_xy[None, :, :], axis=2)
    backward = np.linalg.norm(back[None, :, :] - ref_xy[:, None, :], axis=2)
    distances = np.maximum(forward, backward)

    ref_idxs, test_idxs = np.nonzero(distances <= epsilon)
    if len(ref_idxs) == 0:
        return empty
    candidate_distances = distances[ref_idxs, test_idxs]
    order = np.lexsort((test_idxs, ref_idxs, candidate_distances))

    used_ref, used_test, rows = set(), set(), []
    for k in order:
        i, j = ref_idxs[k], test_idxs[k]
        if i in used_ref or j in used_test:
            continue
        used_ref.add(i)
        used_test.add(j)
        rows.append((int(i), int(j), float(candidate_distances[k])))

    return pd.DataFrame(rows, columns=['ref_idx', 'test_idx', 'distance'])


#####################
# PRECISION, RECALL #
#####################

def precision_recall(matches, corr, ref_keypoints, test_keypoints, H,
                     epsilon=DEFAULT_EPSILON, threshold=np.nan):
    """
    Precision and recall of a set of putative (mutual) matches. A putative match is correct iff
    its two keypoints are within ``epsilon`` under the symmetric reprojection distance.
    Precision is correct over putative matches, recall correct over ``len(corr)``
    correspondences.

    Returns a ``(point, errors)`` tuple: ``point`` is a dict with ``threshold, putative, correct,
    correspondences, precision, recall`` keys. With no putative matches precision is 0 and a
    ``no_putative_matches`` record is emitted; with no correspondences recall is 0 and a
    ``no_correspondences`` record is emitted. Recall is capped at 1, with a
    ``correct_matches_exceed_correspondences`` record, when the correct matches outnumber the
    correspondences.
    """
    _check_epsilon(epsilon)
    errors = []
    putative = len(matches)
    n_corr = len(corr)

    if putative > 0:
        ref_xy = ref_keypoints[['x', 'y']].values[matches['query_idx'].values]
        test_xy = test_keypoints[['x', 'y']].values[matches['train_idx'].values]
        correct = int((reprojection_distances(H, ref_xy, test_xy) <= epsilon).sum())
        precision = correct / putative
    else:
        correct = 0
        precision = 0.0
        errors.append({'type': 'no_putative_matches', 'details': {'threshold': threshold}})

    if n_corr > 0:
        recall = correct / n_corr
        if recall > 1:
            warnings.warn(
                f'{correct} correct matches were found, but there are only {n_corr} ground '
                f'truth correspondences. Recall was capped at 1.'
            )
            errors.append({
                'type': 'correct_matches_exceed_correspondences',
                'details': {'correct': correct, 'correspondences': n_corr}
            })
            recall = 1.0
    else:
        recall = 0.0
        errors.append({'type': 'no_correspondences', 'details': {'threshold': threshold}})

    point = {
        'threshold': threshold,
        'putative': putative,
        'correct': correct,
        'correspondences': n_corr,
        'precision': precision,
        'recall': recall
    }
    return point, errors


def pr_sweep(query, train, corr, thresholds, H, epsilon=DEFAULT_EPSILON, workers=1):
    """
    Recall versus 1-precision curve data. For every distance threshold, candidate matches farther
    apart than the threshold are dropped before the mutual check, and the precision and recall
    of the surviving mutual matches are computed. ``query`` and ``train`` are descriptor sets of
    the reference and test images; keypoints are taken from them.

    Returns a DataFrame with one row per threshold and a ``one_minus_precision`` column.
    """
    thresholds = list(thresholds)
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError(f'Sweep thresholds must be ascending, got {thresholds}.')

    points = []
    for threshold in thresholds:
        matches, _ = brute_force_mutual(query, train, max_distance=threshold, workers=workers)
        point, _ = precision_recall(
            matches, corr, query.keypoints, train.keypoints, H, epsilon=epsilon,
            threshold=threshold
        )
        points.append(point)

    curve = pd.DataFrame(points, columns=[
        'threshold', 'putative', 'correct', 'correspondences', 'precision', 'recall'
    ])
    curve['one_minus_precision'] = 1 - curve['precision']
    return curve


##################
# SYNTHETIC DATA #
##################

def warp_image(img, H, cval=0.0):
    """
    Warps an image by ``H`` with bilinear sampling: output pixel ``p`` takes the input value at
    ``H^-1 p``. Pixels that map outside of the input get ``cval``.
    """
    img = as_gray_image(img)
    H_inv = np.linalg.inv(check_homography(H))
    rows, cols = np.mgrid[0:img.shape[0], 0:img.shape[1]]
    # pixel (r, c) covers [c, c + 1) x [r, r + 1) in keypoint coordinates
    centers = np.column_stack([cols.ravel() + 0.5, rows.ravel() + 0.5])
    source = project_points(H_inv, centers) - 0.5
    coords = np.stack([source[:, 1].reshape(img.shape), source[:, 0].reshape(img.shape)])
    return ndimage.map_coordinates(img, coords, order=1, mode='constant', cval=cval,
                                   prefilter=False)


def synth_pair(img, gain=1.0, bias=0.0, gamma=1.0, H=None, noise=0.0, seed=0, quantize=False):
    """
    Generates the test image of a synthetic pair: ``img`` warped by ``H`` (identity by default),
    then mapped through ``clip(255 * (gain * I / 255 + bias) ^ gamma)``, with optional Gaussian
    sensor noise of standard deviation ``noise`` added before clipping. ``quantize`` rounds the
    result to integers, as an 8-bit sensor would.

    Returns an ``(image, H)`` tuple.
    """
    if gain <= 0 or gamma <= 0:
        raise ValueError(f'Gain and gamma must be positive, got gain={gain}, gamma={gamma}.')
    if noise < 0:
        raise ValueError(f'The noise standard deviation must be nonnegative, got {noise}.')
    img = as_gray_image(img)
    H = check_homography(np.eye(3) if H is None else H)

    warped = img if np.array_equal(H, np.eye(3)) else warp_image(img, H)
    base = np.clip(gain * warped / 255 + bias, 0, None)
    out = 255 * base ** gamma
    if noise > 0:
        out = out + np.random.default_rng(seed).normal(0.0, noise, size=out.shape)
    out = np.clip(out, 0, 255)
    if quantize:
        out = np.round(out)
    return out, H


##############
# BENCHMARKS #
##############

def _describe_pair(ref_img, test_img, keypoints, test_keypoints, config, descriptor,
                   workers=1):
    """
    Describes both images of a pair with the IIB descriptor or the point-pair baseline. Returns
    ``(query, train, errors)``.
    """
    with warnings.catch_warnings():
        warnings.simplefilter('ignore')
        if descriptor == 'iib':
            query, errors_q = extract(compute_channels(ref_img), keypoints, config, workers=workers)
            train, errors_t = extract(
                compute_channels(test_img), test_keypoints, config, workers=workers
            )
        elif descriptor == 'point_pair':
            query, errors_q = extract_point_pairs(ref_img, keypoints, radius=config.radius)
            train, errors_t = extract_point_pairs(test_img, test_keypoints, radius=config.radius)
        else:
            raise ValueError(
                f'"descriptor" must be one of "iib" or "point_pair", but the value '
                f'{descriptor!r} was provided.'
            )
    return query, train, errors_q + errors_t


def evaluate_pair(ref_img, test_img, H, keypoints=None, config=None, descriptor='iib',
                  mode='brute', threshold=0.5, epsilon=DEFAULT_EPSILON, grid=(10, 10),
                  mask=None, pair_id='', workers=1):
    """
    Evaluates one image pair under the predefined keypoint protocol. Reference keypoints are
    ``keypoints`` (or a ``grid`` of interior keypoints) and test keypoints their exact
    projections under ``H``. Both images are described (``descriptor='iib'``, or
    ``'point_pair'`` for the baseline), optionally reduced with a selection ``mask``, matched
    (``mode`` ``brute`` or ``hier``) and scored.

    Returns a ``(row, errors)`` tuple, ``row`` being a dict with the report columns
    ``pair_id, putative, correct, correspondences, precision, recall, MC``.
    """
    config = config if config is not None else DescriptorConfig()
    ref_img, test_img = as_gray_image(ref_img), as_gray_image(test_img)
    H = check_homography(H)
    if keypoints is None:
        keypoints = grid_keypoints(
            ref_img.shape[1], ref_img.shape[0], grid[0], grid[1], radius=config.radius
        )
    test_keypoints = project_keypoints(keypoints, H)

    query, train, errors = _describe_pair(
        ref_img, test_img, keypoints, test_keypoints, config, descriptor, workers
    )

    if mask is not None:
        query, train = apply_mask(query, mask), apply_mask(train, mask)

    matches, stats = match(query, train, mode=mode, threshold=threshold, workers=workers)
    corr = correspondences(query.keypoints, train.keypoints, H, epsilon=epsilon)
    point, pr_errors = precision_recall(
        matches, corr, query.keypoints, train.keypoints, H, epsilon=epsilon
    )
    errors += pr_errors

    row = {
        'pair_id': pair_id,
        'putative': point['putative'],
        'correct': point['correct'],
        'correspondences': point['correspondences'],
        'precision': point['precision'],
        'recall': point['recall'],
        'MC': stats.match_cost
    }
    return row, errors


def find_sequence_pairs(root):
    """
    Finds the image pairs of a directory laid out like HPatches: one subdirectory per sequence,
    holding a reference image ``1.<ext>``, test images ``k.<ext>`` and homographies ``H_1_k``.
    Returns a list of ``(pair_id, ref_path, test_path, homography_path)`` tuples.
    """
    if not os.path.isdir(root):
        raise ValueError(f'The evaluation directory {root!r} does not exist.')

    def images(seq_dir):
        found = {}
        for path in glob.glob(os.path.join(seq_dir, '*')):
            stem, ext = os.path.splitext(os.path.basename(path))
            if ext.lower() in IMAGE_EXTENSIONS and stem.isdigit():
                found[int(stem)] = path
        return found

    pairs = []
    for seq in sorted(os.listdir(root)):
        seq_dir = os.path.join(root, seq)
        if not os.path.isdir(seq_dir):
            continue
        found = images(seq_dir)
        if 1 not in found:
            continue
        for k in sorted(found):
            homography_path = os.path.join(seq_dir, f'H_1_{k}')
            if k == 1 or not os.path.exists(homography_path):
                continue
            pairs.append((f'{seq}/1-{k}', found[1], found[k], homography_path))
    return pairs


def evaluate_directory(root, config=None, thresholds=None, workers=1, **kwargs):
    """
    Evaluates every image pair of an HPatches-style directory (see ``find_sequence_pairs``).
    Extra keyword arguments go to ``evaluate_pair``. Pairs run concurrently on ``workers``
    threads; rows keep the directory order.

    Returns a ``(report, curves, errors)`` tuple: ``report`` has one row per pair with the
    ``REPORT_COLUMNS``, ``curves`` holds the ``pr_sweep`` rows of every pair (tagged with
    ``pair_id``) when distance ``thresholds`` are given and is None otherwise.
    """
    config = config if config is not None else DescriptorConfig()
    pairs = find_sequence_pairs(root)

    def run(pair):
        pair_id, ref_path, test_path, homography_path = pair
        ref_img, test_img = read_image(ref_path), read_image(test_path)
        H = read_homography(homography_path)
        row, errors = evaluate_pair(ref_img, test_img, H, config=config, pair_id=pair_id, **kwargs)
        errors = [{**e, 'details': {**e['details'], 'pair_id': pair_id}} for e in errors]

        curve = None
        if thresholds is not None:
            grid = kwargs.get('grid', (10, 10))
            keypoints = kwargs.get('keypoints')
            if keypoints is None:
                keypoints = grid_keypoints(
                    ref_img.shape[1], ref_img.shape[0], grid[0], grid[1], radius=config.radius
                )
            query, train, _ = _describe_pair(
                ref_img, test_img, keypoints, project_keypoints(keypoints, H), config,
                kwargs.get('descriptor', 'iib')
            )
            mask = kwargs.get('mask')
            if mask is not None:
                query, train = apply_mask(query, mask), apply_mask(train, mask)
            epsilon = kwargs.get('epsilon', DEFAULT_EPSILON)
            corr = correspondences(query.keypoints, train.keypoints, H, epsilon=epsilon)
            curve = pr_sweep(query, train, corr, thresholds, H, epsilon=epsilon)
            curve.insert(0, 'pair_id', pair_id)
        return row, curve, errors

    workers = max(int(workers), 1)
    if workers == 1:
        results = [run(pair) for pair in pairs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, pairs))

    report = pd.DataFrame([r for r, _, _ in results], columns=REPORT_COLUMNS)
    curves = None
    if thresholds is not None:
        curves = pd.concat([c for _, c, _ in results], ignore_index=True) if results else None
    errors = [e for _, _, errs in results for e in errs]
    return report, curves, errors


def aggregate_report(report):
    """
    Aggregates a per-pair report: mAP and mAR are the mean per-pair precision and recall at the
    mutual matching operating point, MC the mean match cost.
    """
    if len(report) == 0:
        return {'pairs': 0, 'mAP': np.nan, 'mAR': np.nan, 'MC': np.nan}
    return {
        'pairs': len(report),
        'mAP': float(report['precision'].mean()),
        'mAR': float(report['recall'].mean()),
        'MC': float(report['MC'].mean())
    }


__all__ = [
    'DEFAULT_EPSILON', 'REPORT_COLUMNS', 'project_point', 'reprojection_distances',
    'correspondences', 'precision_recall', 'pr_sweep', 'warp_image', 'synth_pair',
    'evaluate_pair', 'find_sequence_pairs', 'evaluate_directory', 'aggregate_report'
]
