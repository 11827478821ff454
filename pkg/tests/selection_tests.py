"""
Selection test module. Asserts that training sets, AdaBoost quadruple weights and selection masks
behave correctly.
"""
import unittest
import pytest
import numpy as np

from iib_descriptor.channels import compute_channels
from iib_descriptor.descriptor import DescriptorConfig, DescriptorSet, extract, quadruple_table
from iib_descriptor.matching import brute_force_mutual, hamming, hierarchical_match
from iib_descriptor.ops import grid_keypoints
from iib_descriptor.selection import (
    SelectionMask, TrainingPairs, adaboost_predict, adaboost_train, apply_mask,
    build_training_set, full_mask, select_top_m, train_test_split
)
from iib_descriptor.utils import synthetic_texture


def texture(size=128, seed=0):
    rng = np.random.default_rng(seed + 1000)
    return synthetic_texture(size, size, seed=seed) + rng.random((size, size))


def planted_pairs(n=200, feature=7, seed=0, config=None):
    """
    Random training pairs in which only quadruple ``feature`` carries the label: positives agree
    on it nine times out of ten, negatives never do.
    """
    config = config if config is not None else DescriptorConfig()
    rng = np.random.default_rng(seed)
    n_bits = config.segment_bounds()[-1]
    width = 4 * config.bits_per_patch
    labels = np.arange(n) < n // 2
    a = rng.integers(0, 2, size=(n, n_bits), dtype=np.uint8)
    b = rng.integers(0, 2, size=(n, n_bits), dtype=np.uint8)
    lo, hi = feature * width, (feature + 1) * width
    agree = labels & (rng.random(n) < 0.9)
    b[agree, lo:hi] = a[agree, lo:hi]
    b[~agree, lo:hi] = 1 - a[~agree, lo:hi]
    return TrainingPairs(a, b, labels, config.fingerprint())


class TestTrainingPairs(unittest.TestCase):
    def test_quadruple_distances(self):
        pairs = planted_pairs(10)
        d = pairs.quadruple_distances()
        assert d.shape == (10, 340)
        assert (d.sum(axis=1) == (pairs.a_bits != pairs.b_bits).sum(axis=1)).all()
        assert (d[:, 7] <= 4).all()

    def test_getitem(self):
        pairs = planted_pairs(10)
        a, b, label = pairs[0]
        assert len(a) == 1360 and len(b) == 1360
        assert label is True
        assert pairs[9][2] is False

    def test_invalid(self):
        with pytest.raises(ValueError):
            TrainingPairs(np.zeros((3, 8)), np.zeros((2, 8)), [True, False, True],
                          DescriptorConfig().fingerprint())

    def test_concat(self):
        pairs = planted_pairs(10)
        both = TrainingPairs.concat([pairs, pairs])
        assert len(both) == 20
        assert both.n_positives == 10
        with pytest.raises(ValueError):
            TrainingPairs.concat([pairs, planted_pairs(10, config=DescriptorConfig(granularity=2))])


class TestBuildTrainingSet(unittest.TestCase):
    def test_identity_homography(self):
        img = texture(seed=1)
        pairs, errors = build_training_set([(img, img, np.eye(3))], grid=(6, 6))
        assert errors == []
        assert pairs.n_positives == 36
        assert pairs.n_negatives == 36
        assert pairs.labels[:36].all() and not pairs.labels[36:].any()

        d = (pairs.a_bits != pairs.b_bits).sum(axis=1)
        assert (d[:36] == 0).all()
        assert (d[36:] > 0).all()
        # every negative reuses the reference descriptor of its positive
        assert (pairs.a_bits[:36] == pairs.a_bits[36:]).all()

    def test_n_positives(self):
        img = texture(seed=2)
        pairs, _ = build_training_set(
            [(img, img, np.eye(3))], grid=(6, 6), n_positives=10, min_positives=5
        )
        assert pairs.n_positives == 10
        assert pairs.n_negatives == 10

    def test_gamma_pairs_separate(self):
        pairs_list = []
        for seed in range(3):
            img = texture(seed=seed)
            pairs_list.append((img, 255 * (img / 255) ** 0.6, np.eye(3)))
        pairs, _ = build_training_set(pairs_list, grid=(6, 6))
        d = (pairs.a_bits != pairs.b_bits).sum(axis=1)
        assert d[pairs.labels].mean() < d[~pairs.labels].mean()

    def test_shifted_homography(self):
        big = texture(size=200, seed=3)
        img, shifted = big[:160, 20:180], big[:160, 10:170]
        H = np.array([[1.0, 0, 10], [0, 1, 0], [0, 0, 1]])
        keypoints = [(x, y) for y in (40, 60, 80) for x in (40, 60, 80)]
        pairs, errors = build_training_set(
            [(img, shifted, H)], keypoints=keypoints, min_positives=5
        )
        assert errors == []
        assert pairs.n_positives == 9
        d = (pairs.a_bits != pairs.b_bits).sum(axis=1)
        assert (d[pairs.labels] == 0).all()
        assert (d[~pairs.labels] > 0).all()

    def test_too_few_positives(self):
        img = texture(seed=4)
        with pytest.raises(ValueError, match='positive'):
            build_training_set([(img, img, np.eye(3))], grid=(2, 2), min_positives=1000)


class TestAdaBoost(unittest.TestCase):
    def test_planted_quadruple_wins(self):
        pairs = planted_pairs()
        weights, history, errors = adaboost_train(pairs, rounds=16)
        assert errors == []
        assert list(weights.columns) == ['granularity', 'channel', 'quadruple', 'weight']
        assert len(weights) == 340
        assert int(weights['weight'].values.argmax()) == 7
        assert tuple(weights.iloc[7][['granularity', 'channel', 'quadruple']]) == (2, 'grad_x', 3)

        first = history.iloc[0]
        assert first['feature'] == 7
        assert first['threshold'] == 0
        assert first['weighted_error'] == pytest.approx(0.05, abs=0.05)

    def test_weights_sum_of_alphas(self):
        pairs = planted_pairs(seed=1)
        weights, history, _ = adaboost_train(pairs, rounds=10)
        assert weights['weight'].sum() == pytest.approx(history['alpha'].sum())
        for feature, group in history.groupby('feature'):
            assert weights['weight'].iat[feature] == pytest.approx(group['alpha'].sum())

    def test_loss_bound_non_increasing(self):
        pairs = planted_pairs(seed=2)
        _, history, _ = adaboost_train(pairs, rounds=32)
        bound = history['loss_bound'].values
        assert (np.diff(bound) <= 1e-15).all()
        assert (history['training_error'].values <= bound + 1e-12).all()

    def test_random_labels(self):
        """
        With labels unrelated to the bits no quadruple dominates: averaged over random labelings,
        the largest weight share stays below twice the mean share of the 20 quadruples. Within
        a single labeling of 64 rounds the ratio scatters well above that.
        """
        config = DescriptorConfig(granularity=2)
        n_bits = config.segment_bounds()[-1]
        shares = []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            a = rng.integers(0, 2, size=(400, n_bits), dtype=np.uint8)
            b = rng.integers(0, 2, size=(400, n_bits), dtype=np.uint8)
            labels = rng.random(400) < 0.5
            pairs = TrainingPairs(a, b, labels, config.fingerprint())
            weights, history, _ = adaboost_train(pairs, rounds=64)
            assert history['weighted_error'].iat[0] > 0.35
            shares.append(weights['weight'].values / weights['weight'].sum())

        mean_shares = np.mean(shares, axis=0)
        assert len(mean_shares) == 20
        assert mean_shares.max() < 2 * mean_shares.mean()

    def test_duplicated_pairs(self):
        pairs = planted_pairs(seed=3)
        weights, _, _ = adaboost_train(pairs, rounds=8)
        doubled, _, _ = adaboost_train(TrainingPairs.concat([pairs, pairs]), rounds=8)
        np.testing.assert_allclose(weights['weight'].values, doubled['weight'].values, rtol=1e-9)

    def test_stops_early(self):
        config = DescriptorConfig(granularity=2)
        a = np.random.default_rng(0).integers(0, 2, size=(20, 80), dtype=np.uint8)
        labels = np.arange(20) % 2 == 0
        pairs = TrainingPairs(a, a.copy(), labels, config.fingerprint())
        with pytest.warns(UserWarning, match='AdaBoost stopped'):
            weights, history, errors = adaboost_train(pairs, rounds=5)
        assert len(history) == 0
        assert (weights['weight'] == 0).all()
        assert errors[0]['type'] == 'adaboost_stopped_early'
        assert errors[0]['details']['round'] == 0

    def test_single_label(self):
        pairs = planted_pairs()
        only_positives = TrainingPairs(
            pairs.a_bits, pairs.b_bits, np.ones(len(pairs), dtype=bool), pairs.fingerprint
        )
        with pytest.raises(ValueError):
            adaboost_train(only_positives)
        with pytest.raises(ValueError):
            adaboost_train(pairs, rounds=0)

    def test_predict(self):
        pairs = planted_pairs(seed=4)
        _, history, _ = adaboost_train(pairs, rounds=16)
        predicted = adaboost_predict(history, pairs)
        assert predicted.dtype == bool
        assert (predicted == pairs.labels).mean() >= 0.9
        assert (predicted == pairs.labels).mean() == pytest.approx(
            1 - history['training_error'].iat[-1]
        )


class TestSelectTopM(unittest.TestCase):
    def setUp(self):
        self.weights, _, _ = adaboost_train(planted_pairs(seed=5), rounds=64)

    def test_sizes(self):
        for n_bits, n_quadruples in [(128, 32), (256, 64), (512, 128)]:
            mask = select_top_m(self.weights, n_bits)
            assert len(mask) == n_quadruples
            assert mask.n_bits == n_bits
            assert mask.segment_bounds()[-1] == n_bits
        assert (2, 'grad_x', 3) in select_top_m(self.weights, 128).quadruples

    def test_nested(self):
        small = set(select_top_m(self.weights, 128).quadruples)
        medium = set(select_top_m(self.weights, 256).quadruples)
        large = set(select_top_m(self.weights, 512).quadruples)
        assert small <= medium <= large

    def test_bit_order(self):
        mask = select_top_m(self.weights, 256)
        assert (np.diff(mask.bit_idxs) > 0).all()
        levels = [g for g, _, _ in mask.quadruples]
        assert levels == sorted(levels)

    def test_weight_ties(self):
        weights = quadruple_table(DescriptorConfig())[['granularity', 'channel', 'quadruple']]
        weights = weights.assign(weight=0.0)
        mask = select_top_m(weights, 64)
        assert (mask.bit_idxs == np.arange(64)).all()

    def test_full_mask(self):
        mask = full_mask()
        assert len(mask) == 340
        assert (mask.bit_idxs == np.arange(1360)).all()
        assert mask.segment_bounds() == DescriptorConfig().segment_bounds()

    def test_invalid_sizes(self):
        for n_bits in [0, 130, 1364]:
            with pytest.raises(ValueError):
                select_top_m(self.weights, n_bits)
        with pytest.raises(ValueError):
            select_top_m(self.weights.iloc[:10], 40)

    def test_invalid_quadruples(self):
        fingerprint = DescriptorConfig().fingerprint()
        with pytest.raises(ValueError, match='does not exist'):
            SelectionMask([(5, 'grad_x', 0)], fingerprint)
        with pytest.raises(ValueError, match='distinct'):
            SelectionMask([(1, 'grad_x', 0), (1, 'grad_x', 0)], fingerprint)


class TestApplyMask(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.weights, _, _ = adaboost_train(planted_pairs(seed=6), rounds=64)
        img = texture(seed=7)
        cls.keypoints = grid_keypoints(128, 128, 4, 4)
        cls.descriptors, _ = extract(compute_channels(img), cls.keypoints)
        cls.img = img

    def test_naive_gather(self):
        mask = select_top_m(self.weights, 256)
        reduced = apply_mask(self.descriptors, mask)
        spans = {
            (g, c, q): (start, stop) for g, c, q, start, stop in
            quadruple_table(DescriptorConfig()).itertuples(index=False, name=None)
        }
        expected = np.hstack([
            self.descriptors.bits[:, spans[q][0]:spans[q][1]] for q in mask.quadruples
        ])
        assert (reduced.bits == expected).all()
        assert reduced.quadruples == mask.quadruples
        assert reduced.fingerprint['selection'] == tuple(mask.quadruples)
        assert len(reduced.keypoints) == len(self.descriptors)

    def test_single_descriptor(self):
        mask = select_top_m(self.weights, 128)
        single = apply_mask(self.descriptors[3], mask)
        assert (single.bits == apply_mask(self.descriptors, mask).bits[3]).all()

    def test_locality(self):
        """
        Bits outside of the mask do not reach the reduced descriptor.
        """
        mask = select_top_m(self.weights, 128)
        outside = np.setdiff1d(np.arange(1360), mask.bit_idxs)
        bits = self.descriptors.bits.copy()
        bits[:, outside] ^= 1
        flipped = DescriptorSet(bits, self.descriptors.segment_bounds,
                                self.descriptors.fingerprint)
        assert (apply_mask(flipped, mask).bits == apply_mask(self.descriptors, mask).bits).all()

    def test_distance_monotone_in_size(self):
        a, b = self.descriptors[0], self.descriptors[5]
        sizes = [128, 256, 512, 1360]
        distances = [hamming(apply_mask(a, select_top_m(self.weights, m)),
                             apply_mask(b, select_top_m(self.weights, m))) for m in sizes]
        assert distances == sorted(distances)
        assert distances[-1] == hamming(a, b)

    def test_fingerprint_mismatch(self):
        mask = full_mask(DescriptorConfig(granularity=3))
        with pytest.raises(ValueError, match='fingerprint'):
            apply_mask(self.descriptors, mask)

    def test_reduced_descriptors_match(self):
        mask = select_top_m(self.weights, 512)
        changed, _ = extract(compute_channels(1.5 * self.img + 20), self.keypoints)
        query = apply_mask(self.descriptors, mask)
        train = apply_mask(changed, mask)
        for matches, _ in [brute_force_mutual(query, train),
                           hierarchical_match(query, train, threshold=0.5)]:
            assert [(q, t) for q, t in matches[['query_idx', 'train_idx']].values] == \
                [(i, i) for i in range(16)]

        # reduced and full descriptors are not comparable
        with pytest.raises(ValueError):
            brute_force_mutual(query, changed)


class TestTrainTestSplit(unittest.TestCase):
    def test_split(self):
        train, test = train_test_split(range(9))
        assert len(train) == 6 and len(test) == 3
        assert sorted(train + test) == list(range(9))
        assert train_test_split(range(9)) == (train, test)
        assert train_test_split(range(9), seed=1) != (train, test)

    def test_invalid_fraction(self):
        with pytest.raises(ValueError):
            train_test_split(range(9), train_fraction=0)
