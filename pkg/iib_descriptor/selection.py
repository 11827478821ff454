"""
Descriptor size reduction. AdaBoost learns a weight per quadruple from pairs of descriptors at
corresponding (positive) and non-corresponding (negative) keypoints; the quadruples with the top
weights then define a selection mask, and applying the mask to full descriptors yields reduced
descriptors that still match with the same machinery.
"""

import json
import warnings

import numpy as np
import pandas as pd

from iib_descriptor.channels import compute_channels
from iib_descriptor.descriptor import (
    BinaryDescriptor, DescriptorConfig, DescriptorSet, extract, quadruple_table, segment_bounds_for
)
from iib_descriptor.ops import grid_keypoints, project_keypoints


#################
# TRAINING DATA #
#################

class TrainingPairs:
    """
    A labelled set of descriptor pairs. ``a_bits`` and ``b_bits`` are ``(P, M)`` bit arrays and
    ``labels`` a length-P boolean array, True for pairs at corresponding keypoints.
    """
    def __init__(self, a_bits, b_bits, labels, fingerprint):
        a_bits = np.asarray(a_bits, dtype=np.uint8)
        b_bits = np.asarray(b_bits, dtype=np.uint8)
        labels = np.asarray(labels, dtype=bool)
        if a_bits.shape != b_bits.shape or a_bits.ndim != 2 or len(labels) != len(a_bits):
            raise ValueError(
                f'Training pairs need two equally shaped (P, M) bit arrays and P labels, got '
                f'{a_bits.shape}, {b_bits.shape} and {labels.shape}.'
            )
        self.a_bits = a_bits
        self.b_bits = b_bits
        self.labels = labels
        self.fingerprint = fingerprint

    @property
    def config(self):
        return DescriptorConfig.from_fingerprint(self.fingerprint)

    @property
    def n_positives(self):
        return int(self.labels.sum())

    @property
    def n_negatives(self):
        return int((~self.labels).sum())

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, idx):
        bounds = self.config.segment_bounds()
        return (
            BinaryDescriptor(self.a_bits[idx], bounds, self.fingerprint),
            BinaryDescriptor(self.b_bits[idx], bounds, self.fingerprint),
            bool(self.labels[idx])
        )

    def __repr__(self):
        return f'TrainingPairs(positives={self.n_positives}, negatives={self.n_negatives})'

    def quadruple_distances(self):
        """
        ``(P, Q)`` matrix of per-quadruple Hamming distances, quadruples in bit order.
        """
        width = 4 * self.config.bits_per_patch
        diff = np.bitwise_xor(self.a_bits, self.b_bits)
        return diff.reshape(len(diff), -1, width).sum(axis=-1, dtype=np.int64)

    @classmethod
    def concat(cls, parts):
        fingerprints = {repr(p.fingerprint) for p in parts}
        if len(fingerprints) != 1:
            raise ValueError(f'Cannot concatenate training pairs with fingerprints {fingerprints}.')
        return cls(
            np.concatenate([p.a_bits for p in parts]), np.concatenate([p.b_bits for p in parts]),
            np.concatenate([p.labels for p in parts]), parts[0].fingerprint
        )


def train_test_split(items, train_fraction=2 / 3, seed=0):
    """
    Shuffles a list (of image pairs, typically) and splits it into a ``(train, test)`` tuple,
    two-thirds for training by default.
    """
    if not 0 < train_fraction <= 1:
        raise ValueError(f'The train fraction must lie in (0, 1], got {train_fraction}.')
    items = list(items)
    order = np.random.default_rng(seed).permutation(len(items))
    n_train = int(round(len(items) * train_fraction))
    if len(items) > 0:
        n_train = min(max(n_train, 1), len(items))
    return [items[i] for i in order[:n_train]], [items[i] for i in order[n_train:]]


def build_training_set(image_pairs, config=None, keypoints=None, grid=(16, 16),
                       n_positives=None, min_positives=10, epsilon=3.0, seed=0):
    """
    Builds a balanced training set from ``(reference image, test image, H)`` triples, where ``H``
    maps reference to test coordinates. Example usage:

    .. code:: python

        import iib_descriptor as iib

        pairs, errors = iib.selection.build_training_set(
            [(img, img_gamma, np.eye(3)) for img, img_gamma in scenes]
        )

    Reference keypoints are ``keypoints`` (or a ``grid`` of interior keypoints) and test keypoints
    their exact projections under ``H``. Every keypoint described in both images yields a
    positive pair; each positive is matched with one negative pair, its reference descriptor
    against the test descriptor of a randomly drawn keypoint whose projection lies more than
    ``epsilon`` pixels away. When ``n_positives`` is given, that many positives (and as many
    negatives) are sampled.

    Returns a ``(TrainingPairs, errors)`` tuple, ``errors`` holding the extraction records of
    skipped keypoints. Raises if fewer than ``min_positives`` positives are available.
    """
    config = config if config is not None else DescriptorConfig()
    rng = np.random.default_rng(seed)
    pos_a, pos_b, neg_b, errors = [], [], [], []

    for img_a, img_b, H in image_pairs:
        img_a, img_b = np.asarray(img_a), np.asarray(img_b)
        ref_kps = keypoints
        if ref_kps is None:
            ref_kps = grid_keypoints(
                img_a.shape[1], img_a.shape[0], grid[0], grid[1], radius=config.radius
            )
        test_kps = project_keypoints(ref_kps, H)

        with warnings.catch_warnings():
            warnings.simplefilter('ignore')
            desc_a, errors_a = extract(compute_channels(img_a), ref_kps, config)
            desc_b, errors_b = extract(compute_channels(img_b), test_kps, config)
        errors += errors_a + errors_b

        idx_a = desc_a.keypoints['keypoint_idx'].values
        idx_b = desc_b.keypoints['keypoint_idx'].values
        common, pos_in_a, pos_in_b = np.intersect1d(idx_a, idx_b, return_indices=True)
        if len(common) < 2:
            continue

        xy = desc_b.keypoints[['x', 'y']].values[pos_in_b]
        far = np.hypot(*(xy[:, None, :] - xy[None, :, :]).transpose(2, 0, 1)) > epsilon
        for k in range(len(common)):
            candidates = np.flatnonzero(far[k])
            if len(candidates) == 0:
                continue
            other = rng.choice(candidates)
            pos_a.append(desc_a.bits[pos_in_a[k]])
            pos_b.append(desc_b.bits[pos_in_b[k]])
            neg_b.append(desc_b.bits[pos_in_b[other]])

    available = len(pos_a)
    required = max(min_positives, n_positives or 0)
    if available < required:
        raise ValueError(
            f'Only {available} positive training pairs could be built, but at least {required} '
            f'are required. Provide more image pairs or keypoints.'
        )

    pos_a, pos_b, neg_b = np.array(pos_a), np.array(pos_b), np.array(neg_b)
    if n_positives is not None:
        chosen = np.sort(rng.choice(available, size=n_positives, replace=False))
        pos_a, pos_b, neg_b = pos_a[chosen], pos_b[chosen], neg_b[chosen]

    n = len(pos_a)
    pairs = TrainingPairs(
        np.concatenate([pos_a, pos_a]), np.concatenate([pos_b, neg_b]),
        np.concatenate([np.ones(n, dtype=bool), np.zeros(n, dtype=bool)]),
        config.fingerprint()
    )
    return pairs, errors


############
# ADABOOST #
############

def adaboost_train(pairs, rounds=64):
    """
    Learns quadruple weights with discrete AdaBoost. The weak learner of quadruple ``q`` is a
    threshold stump on the per-quadruple Hamming distance between the two descriptors of a pair,
    predicting "positive" iff the distance is at most ``theta``; each round picks the
    ``(q, theta)`` of least weighted error, ties going to the lowest quadruple then threshold.
    The weight of a quadruple is the sum of the ``alpha`` of the rounds that picked it.

    Training stops early when the best stump has a weighted error of 0.5 or more.

    Returns a ``(weights, history, errors)`` tuple. ``weights`` is a DataFrame with
    ``granularity, channel, quadruple, weight`` columns in bit order. ``history`` has one row per
    round with the chosen quadruple (``feature`` is its column position), stump ``threshold``,
    ``weighted_error``, ``alpha``, the strong classifier's ``training_error`` and the
    exponential loss bound ``loss_bound``, which never increases. ``errors`` holds an
    ``adaboost_stopped_early`` record if training stopped early.
    """
    labels = pairs.labels
    if labels.all() or not labels.any():
        raise ValueError('AdaBoost training needs both positive and negative pairs.')
    if rounds < 1:
        raise ValueError(f'At least one boosting round is required, got {rounds}.')

    config = pairs.config
    table = quadruple_table(config)
    distances = pairs.quadruple_distances()
    n_pairs, n_quads = distances.shape
    n_levels = 4 * config.bits_per_patch + 1
    flat = np.arange(n_quads)[None, :] * n_levels + distances
    signs = np.where(labels, 1.0, -1.0)

    sample_weights = np.full(n_pairs, 1.0 / n_pairs)
    quadruple_weights = np.zeros(n_quads)
    scores = np.zeros(n_pairs)
    loss_bound = 1.0
    history, errors = [], []

    for round_idx in range(rounds):
        # weighted histograms of distances per quadruple, split by label
        pos_hist = np.bincount(
            flat[labels].ravel(), weights=np.repeat(sample_weights[labels], n_quads),
            minlength=n_quads * n_levels
        ).reshape(n_quads, n_levels)
        neg_hist = np.bincount(
            flat[~labels].ravel(), weights=np.repeat(sample_weights[~labels], n_quads),
            minlength=n_quads * n_levels
        ).reshape(n_quads, n_levels)

        # positives above theta plus negatives at or below theta are misclassified
        pos_le = pos_hist.cumsum(axis=1)
        neg_le = neg_hist.cumsum(axis=1)
        stump_errors = np.round(pos_hist.sum(axis=1, keepdims=True) - pos_le + neg_le, 12)

        best = int(stump_errors.argmin())
        feature, threshold = divmod(best, n_levels)
        error = float(stump_errors[feature, threshold])
        if error >= 0.5:
            warnings.warn(
                f'AdaBoost stopped after {round_idx} of {rounds} rounds because no weak learner '
                f'does better than chance (best weighted error {error:.4f}).'
            )
            errors.append({
                'type': 'adaboost_stopped_early',
                'details': {'round': round_idx, 'rounds': rounds, 'weighted_error': error}
            })
            break

        clipped = min(max(error, 1e-10), 1 - 1e-10)
        alpha = 0.5 * np.log((1 - clipped) / clipped)
        predictions = np.where(distances[:, feature] <= threshold, 1.0, -1.0)

        sample_weights = sample_weights * np.exp(-alpha * signs * predictions)
        sample_weights /= sample_weights.sum()
        quadruple_weights[feature] += alpha
        scores += alpha * predictions
        loss_bound *= 2 * np.sqrt(clipped * (1 - clipped))

        history.append({
            'round': round_idx,
            'feature': feature,
            'granularity': int(table['granularity'].iat[feature]),
            'channel': table['channel'].iat[feature],
            'quadruple': int(table['quadruple'].iat[feature]),
            'threshold': threshold,
            'weighted_error': error,
            'alpha': alpha,
            'training_error': float(np.mean(np.where(scores >= 0, 1.0, -1.0) != signs)),
            'loss_bound': loss_bound
        })

    weights = table[['granularity', 'channel', 'quadruple']].assign(weight=quadruple_weights)
    history = pd.DataFrame(history, columns=[
        'round', 'feature', 'granularity', 'channel', 'quadruple', 'threshold',
        'weighted_error', 'alpha', 'training_error', 'loss_bound'
    ])
    return weights, history, errors


def adaboost_predict(history, pairs):
    """
    Applies the strong classifier described by an ``adaboost_train`` history to training pairs.
    Returns a boolean array, True where a pair is predicted to be positive.
    """
    distances = pairs.quadruple_distances()
    scores = np.zeros(len(pairs))
    for _, step in history.iterrows():
        scores += step['alpha'] * np.where(
            distances[:, int(step['feature'])] <= step['threshold'], 1.0, -1.0
        )
    return scores >= 0


#############
# SELECTION #
#############

class SelectionMask:
    """
    A subset of quadruples defining a reduced descriptor. ``quadruples`` are
    ``(granularity, channel, quadruple)`` ids in bit order, ``fingerprint`` the fingerprint of
    the full descriptors the mask applies to.
    """
    def __init__(self, quadruples, fingerprint):
        quadruples = [(int(g), str(c), int(q)) for g, c, q in quadruples]
        if len(set(quadruples)) != len(quadruples):
            raise ValueError('The quadruples of a selection mask must be distinct.')
        config = DescriptorConfig.from_fingerprint(fingerprint)
        table = quadruple_table(config)
        positions = {
            key: i for i, key in enumerate(
                table[['granularity', 'channel', 'quadruple']].itertuples(index=False, name=None)
            )
        }
        unknown = [q for q in quadruples if q not in positions]
        if unknown:
            raise ValueError(
                f'The quadruple {unknown[0]} does not exist in descriptors with configuration '
                f'{config}.'
            )
        order = np.argsort([positions[q] for q in quadruples], kind='stable')

        self.quadruples = [quadruples[i] for i in order]
        self.fingerprint = dict(fingerprint)
        self.config = config
        self.bit_idxs = np.concatenate(
            [np.zeros(0, dtype=np.intp)]
            + [np.arange(table['bit_start'].iat[positions[q]], table['bit_stop'].iat[positions[q]])
               for q in self.quadruples]
        )

    @property
    def n_bits(self):
        return len(self.bit_idxs)

    def __len__(self):
        return len(self.quadruples)

    def __repr__(self):
        return f'SelectionMask(quadruples={len(self)}, n_bits={self.n_bits})'

    def reduced_fingerprint(self):
        return {**self.fingerprint, 'selection': tuple(self.quadruples)}

    def segment_bounds(self):
        return segment_bounds_for(self.config, self.quadruples)

    def to_dict(self):
        fingerprint = {**self.fingerprint, 'channels': list(self.fingerprint['channels'])}
        return {
            'fingerprint': fingerprint,
            'n_bits': self.n_bits,
            'quadruples': [list(q) for q in self.quadruples]
        }

    @classmethod
    def from_dict(cls, data):
        fingerprint = dict(data['fingerprint'])
        fingerprint['channels'] = tuple(fingerprint['channels'])
        fingerprint['selection'] = None
        mask = cls(data['quadruples'], fingerprint)
        if 'n_bits' in data and data['n_bits'] != mask.n_bits:
            raise ValueError(
                f'The mask declares {data["n_bits"]} bits but its quadruples make up '
                f'{mask.n_bits}.'
            )
        return mask


def select_top_m(weights, n_bits, config=None):
    """
    The selection mask of the ``n_bits / (4 * bits_per_patch)`` quadruples with the highest
    weights, weight ties going to the quadruple that comes first in bit order. ``weights`` is
    the weight table returned by ``adaboost_train``.
    """
    config = config if config is not None else DescriptorConfig()
    per_quadruple = 4 * config.bits_per_patch
    table = quadruple_table(config)
    if n_bits % per_quadruple != 0:
        raise ValueError(
            f'The reduced size must be a multiple of {per_quadruple} bits, got {n_bits}.'
        )
    if n_bits > per_quadruple * len(table) or n_bits < per_quadruple:
        raise ValueError(
            f'The reduced size of {n_bits} bits is outside of the range {per_quadruple}..'
            f'{per_quadruple * len(table)} bits of this configuration.'
        )
    if len(weights) != len(table):
        raise ValueError(
            f'Expected {len(table)} quadruple weights for configuration {config}, got '
            f'{len(weights)}.'
        )

    weight = weights['weight'].values
    order = np.lexsort((np.arange(len(weight)), -weight))
    chosen = np.sort(order[:n_bits // per_quadruple])
    quadruples = list(table[['granularity', 'channel', 'quadruple']].iloc[chosen]
                      .itertuples(index=False, name=None))
    return SelectionMask(quadruples, config.fingerprint())


def full_mask(config=None):
    """
    The identity mask selecting every quadruple.
    """
    config = config if config is not None else DescriptorConfig()
    table = quadruple_table(config)
    return SelectionMask(
        table[['granularity', 'channel', 'quadruple']].itertuples(index=False, name=None),
        config.fingerprint()
    )


def apply_mask(descriptors, mask):
    """
    Reduces full descriptors (a ``DescriptorSet`` or a single ``BinaryDescriptor``) to the bits
    of the mask's quadruples. Segment bounds are recomputed per granularity, so reduced
    descriptors still work with ``hierarchical_match``.
    """
    if descriptors.fingerprint != mask.fingerprint:
        raise ValueError(
            f'The selection mask was learned for descriptors with fingerprint '
            f'{mask.fingerprint}, but the descriptors have fingerprint {descriptors.fingerprint}.'
        )
    bits = descriptors.bits[..., mask.bit_idxs]
    if isinstance(descriptors, DescriptorSet):
        return DescriptorSet(
            bits, mask.segment_bounds(), mask.reduced_fingerprint(),
            keypoints=descriptors.keypoints, quadruples=list(mask.quadruples)
        )
    return BinaryDescriptor(bits, mask.segment_bounds(), mask.reduced_fingerprint())


#######
# I/O #
#######

def write_mask(mask, filename):
    """
    Writes a selection mask as a UTF-8 JSON file.
    """
    with open(filename, 'w', encoding='utf-8') as f:
        json.dump(mask.to_dict(), f, indent=2)


def read_mask(filename):
    with open(filename, 'r', encoding='utf-8') as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f'The mask file {filename!r} is not valid JSON: {e}.')
    return SelectionMask.from_dict(data)


__all__ = [
    'TrainingPairs', 'train_test_split', 'build_training_set', 'adaboost_train',
    'adaboost_predict', 'SelectionMask', 'select_top_m', 'full_mask', 'apply_mask',
    'write_mask', 'read_mask'
]
