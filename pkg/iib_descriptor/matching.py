"""
Operations defined on descriptor sets: Hamming distances, mutual brute-force matching and the
coarse-to-fine hierarchical matcher.
"""

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd

from iib_descriptor.utils import pack_bits, popcount


MATCH_COLUMNS = ['query_idx', 'train_idx', 'distance']

# Upper bound on the bytes of XOR scratch space materialized by a single distance chunk.
_CHUNK_BYTES = 2 ** 24

# Distance assigned to pruned or filtered candidates.
_NO_MATCH = np.iinfo(np.int64).max


class MatchStats:
    """
    Bit comparison accounting of a matching run. ``match_cost`` is the ratio of the bits compared
    by the hierarchical matcher to those a brute-force matcher compares on the same inputs; it is
    NaN when nothing was compared.
    """
    def __init__(self, bit_comparisons_hierarchical=0, bit_comparisons_bruteforce=0):
        self.bit_comparisons_hierarchical = int(bit_comparisons_hierarchical)
        self.bit_comparisons_bruteforce = int(bit_comparisons_bruteforce)

    @property
    def match_cost(self):
        if self.bit_comparisons_bruteforce == 0:
            return np.nan
        return self.bit_comparisons_hierarchical / self.bit_comparisons_bruteforce

    def merge(self, other):
        self.bit_comparisons_hierarchical += other.bit_comparisons_hierarchical
        self.bit_comparisons_bruteforce += other.bit_comparisons_bruteforce

    def to_dict(self):
        return {
            'bit_comparisons_hierarchical': self.bit_comparisons_hierarchical,
            'bit_comparisons_bruteforce': self.bit_comparisons_bruteforce,
            'match_cost': self.match_cost
        }

    def __repr__(self):
        return (
            f'MatchStats(hierarchical={self.bit_comparisons_hierarchical}, '
            f'bruteforce={self.bit_comparisons_bruteforce}, MC={self.match_cost:.4f})'
        )


def _check_fingerprints(a, b):
    if a.fingerprint != b.fingerprint:
        raise ValueError(
            f'Cannot compare descriptors built with different configurations: '
            f'{a.fingerprint} vs {b.fingerprint}.'
        )


def _segment_slice(descriptor, segment):
    """
    Bit offsets of a granularity segment. ``segment`` is ``None`` (everything), a level ``g`` or
    an inclusive ``(first, last)`` level range.
    """
    bounds = descriptor.segment_bounds
    n_segments = len(bounds) - 1
    if segment is None:
        return 0, bounds[-1]
    first, last = (segment, segment) if np.isscalar(segment) else segment
    if not 1 <= first <= last <= n_segments:
        raise ValueError(
            f'The granularity segment {segment} is out of range; these descriptors have '
            f'{n_segments} granularity segments.'
        )
    return bounds[first - 1], bounds[last]


def hamming(a, b, segment=None):
    """
    Hamming distance between two descriptors: the popcount of their XOR over the full bit vector,
    or over the granularity ``segment`` (a level or an inclusive level range).
    """
    _check_fingerprints(a, b)
    lo, hi = _segment_slice(a, segment)
    return int(popcount(np.bitwise_xor(pack_bits(a.bits[lo:hi]), pack_bits(b.bits[lo:hi]))))


def _distance_rows(query_packed, train_packed):
    """
    ``(Q, T)`` Hamming distances between two packed byte arrays, computed in query chunks.
    """
    n_query, n_train = len(query_packed), len(train_packed)
    n_bytes = max(query_packed.shape[1], 1)
    chunk = max(_CHUNK_BYTES // max(n_train * n_bytes, 1), 1)
    distances = np.empty((n_query, n_train), dtype=np.int64)
    for start in range(0, n_query, chunk):
        stop = min(start + chunk, n_query)
        xor = np.bitwise_xor(query_packed[start:stop, None, :], train_packed[None, :, :])
        distances[start:stop] = popcount(xor)
    return distances


def pairwise_distances(query, train, segment=None, workers=1):
    """
    The ``(|query|, |train|)`` matrix of Hamming distances between two descriptor sets.
    """
    _check_fingerprints(query, train)
    lo, hi = _segment_slice(query, segment)
    query_packed = pack_bits(query.bits[:, lo:hi])
    train_packed = pack_bits(train.bits[:, lo:hi])

    workers = max(int(workers), 1)
    if workers == 1 or len(query) < 2:
        return _distance_rows(query_packed, train_packed)

    chunks = [c for c in np.array_split(np.arange(len(query)), workers) if len(c) > 0]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda c: _distance_rows(query_packed[c], train_packed), chunks))
    return np.concatenate(parts, axis=0)


def mutual_matches(distances):
    """
    Mutual nearest neighbours of a distance matrix. Pair ``(i, j)`` is kept iff ``j`` is the
    nearest train item of query ``i`` and ``i`` the nearest query of train item ``j``; ties go to
    the lowest index. Entries equal to the no-match sentinel never match.
    """
    n_query, n_train = distances.shape
    if n_query == 0 or n_train == 0:
        return pd.DataFrame({c: pd.Series(dtype=np.int64) for c in MATCH_COLUMNS})

    forward = distances.argmin(axis=1)
    backward = distances.argmin(axis=0)
    query_idxs = np.arange(n_query)
    best = distances[query_idxs, forward]
    keep = (backward[forward] == query_idxs) & (best != _NO_MATCH)

    return pd.DataFrame({
        'query_idx': query_idxs[keep].astype(np.int64),
        'train_idx': forward[keep].astype(np.int64),
        'distance': best[keep].astype(np.int64)
    })


def brute_force_mutual(query, train, max_distance=None, workers=1):
    """
    Mutual brute-force matching. Every query is compared against every train descriptor over the
    full bit vector. When ``max_distance`` is given, candidate pairs farther apart are dropped
    before the mutual check.

    Returns a ``(matches, stats)`` tuple: ``matches`` is a DataFrame of
    ``query_idx, train_idx, distance`` rows ordered by query, ``stats`` a ``MatchStats`` with
    ``|Q| * |T| * M`` bits compared.
    """
    _check_fingerprints(query, train)
    comparisons = len(query) * len(train) * query.n_bits
    stats = MatchStats(comparisons, comparisons)
    if len(query) == 0 or len(train) == 0:
        return mutual_matches(np.zeros((len(query), len(train)), dtype=np.int64)), stats

    distances = pairwise_distances(query, train, workers=workers)
    if max_distance is not None:
        distances = np.where(distances <= max_distance, distances, _NO_MATCH)
    return mutual_matches(distances), stats


def _hierarchical_rows(query_segments, train_segments, limits):
    """
    Accumulated distances of a block of queries against all train descriptors, with candidates
    pruned level by level. Returns the distance matrix (pruned entries set to the no-match
    sentinel) and the number of bits compared.
    """
    n_query, n_train = len(query_segments[0][0]), len(train_segments[0][0])
    accumulated = np.zeros((n_query, n_train), dtype=np.int64)
    alive = np.ones((n_query, n_train), dtype=bool)
    compared = 0

    for (query_packed, n_bits), (train_packed, _), limit in zip(
        query_segments, train_segments, limits
    ):
        if n_bits == 0:
            continue
        qi, ti = np.nonzero(alive)
        distance = popcount(np.bitwise_xor(query_packed[qi], train_packed[ti]))
        accumulated[qi, ti] += distance
        compared += len(qi) * n_bits
        if limit is not None:
            alive[qi, ti] = distance < limit

    return np.where(alive, accumulated, _NO_MATCH), compared


def hierarchical_match(query, train, threshold=0.5, workers=1):
    """
    Coarse-to-fine matching. For every query the candidates start as all of ``train``; at each
    granularity ``g < G`` candidates whose segment-``g`` distance is at least
    ``ceil(threshold * segment_g_bits)`` are pruned, and survivors accumulate their segment
    distances. The last granularity is compared for all survivors without pruning. The mutual
    rule of ``brute_force_mutual`` then runs over the accumulated distances of survivors, so a
    query whose candidates were all pruned gets no match.

    Returns a ``(matches, stats)`` tuple; ``stats`` counts every compared segment bit.
    """
    if not 0 < threshold <= 1:
        raise ValueError(
            f'The hierarchical matching threshold must lie in (0, 1], but {threshold} was given.'
        )
    _check_fingerprints(query, train)

    stats = MatchStats(0, len(query) * len(train) * query.n_bits)
    if len(query) == 0 or len(train) == 0:
        return mutual_matches(np.zeros((len(query), len(train)), dtype=np.int64)), stats

    bounds = query.segment_bounds
    n_segments = len(bounds) - 1
    query_segments, train_segments, limits = [], [], []
    for level in range(1, n_segments + 1):
        lo, hi = bounds[level - 1], bounds[level]
        query_segments.append((pack_bits(query.bits[:, lo:hi]), hi - lo))
        train_segments.append((pack_bits(train.bits[:, lo:hi]), hi - lo))
        limits.append(math.ceil(threshold * (hi - lo)) if level < n_segments else None)

    n_bytes = max(sum(p.shape[1] for p, _ in query_segments), 1)
    chunk = max(_CHUNK_BYTES // max(len(train) * n_bytes, 1), 1)
    blocks = [np.arange(start, min(start + chunk, len(query)))
              for start in range(0, len(query), chunk)]

    def run(block):
        return _hierarchical_rows(
            [(packed[block], n) for packed, n in query_segments], train_segments, limits
        )

    workers = max(int(workers), 1)
    if workers == 1 or len(blocks) == 1:
        results = [run(block) for block in blocks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, blocks))

    distances = np.concatenate([d for d, _ in results], axis=0)
    stats.bit_comparisons_hierarchical = sum(c for _, c in results)
    return mutual_matches(distances), stats


def match(query, train, mode='brute', threshold=0.5, max_distance=None, workers=1):
    """
    Dispatches to ``brute_force_mutual`` (``mode='brute'``) or ``hierarchical_match``
    (``mode='hier'``).
    """
    if mode == 'brute':
        return brute_force_mutual(query, train, max_distance=max_distance, workers=workers)
    elif mode == 'hier':
        return hierarchical_match(query, train, threshold=threshold, workers=workers)
    else:
        raise ValueError(
            f'"mode" must be one of "brute" or "hier", but the value {mode!r} was provided.'
        )


__all__ = [
    'MATCH_COLUMNS', 'MatchStats', 'hamming', 'pairwise_distances', 'mutual_matches',
    'brute_force_mutual', 'hierarchical_match', 'match'
]
