"""Independent oracles and generators shared across the test suite.

Everything here recomputes results from first principles (set-based linkage
recomputation, Fraction arithmetic for ARI) so the library implementations
are checked against a genuinely different code path.
"""

from __future__ import annotations

from fractions import Fraction
from itertools import combinations
from math import comb

import numpy as np

from kpgroup.schema import ClassSpec, KeypointSchema


def brute_force_partitions(values: np.ndarray, linkage: str) -> list[list[list[int]]]:
    """All partitions along the merge path, recomputed from scratch.

    Returns partitions[m] = member lists at exactly m clusters, for
    m = n down to 1 (indexed by m).  Every step recomputes the full
    inter-cluster distance table from the original matrix: average is the
    plain mean over cross pairs, complete the max.  Ties break on the
    lexicographically smallest (min member, max of the two min members).
    """
    n = values.shape[0]
    clusters: list[list[int]] = [[i] for i in range(n)]
    levels: dict[int, list[list[int]]] = {n: [list(c) for c in clusters]}
    while len(clusters) > 1:
        best_key = None
        best_pair = None
        for i, j in combinations(range(len(clusters)), 2):
            block = values[np.ix_(clusters[i], clusters[j])]
            dist = block.mean() if linkage == "average" else block.max()
            ra, rb = min(clusters[i]), min(clusters[j])
            key = (dist, min(ra, rb), max(ra, rb))
            if best_key is None or key < best_key:
                best_key = key
                best_pair = (i, j)
        i, j = best_pair
        merged = clusters[i] + clusters[j]
        clusters = [c for k, c in enumerate(clusters) if k not in (i, j)]
        clusters.append(merged)
        levels[len(clusters)] = [list(c) for c in clusters]
    out = [None] * (n + 1)
    for m, cl in levels.items():
        out[m] = cl
    return out


def labels_from_partition(partition: list[list[int]], n: int) -> np.ndarray:
    """Labels 0..m-1 in order of smallest member."""
    labels = np.empty(n, dtype=np.int64)
    for lab, members in enumerate(sorted(partition, key=min)):
        labels[members] = lab
    return labels


def ari_fraction_oracle(labels_a, labels_b) -> Fraction:
    """ARI via the pair-confusion closed form, exact rational arithmetic.

    a = pairs together in both partitions, b = together in A only,
    c = together in B only, d = apart in both:
    ARI = 2(ad - bc) / ((a+b)(b+d) + (a+c)(c+d)).
    Degenerate zero denominator means both partitions trivial: 1.
    """
    la, lb = list(labels_a), list(labels_b)
    n = len(la)
    a = b = c = d = 0
    for i, j in combinations(range(n), 2):
        sa = la[i] == la[j]
        sb = lb[i] == lb[j]
        if sa and sb:
            a += 1
        elif sa:
            b += 1
        elif sb:
            c += 1
        else:
            d += 1
    denom = (a + b) * (b + d) + (a + c) * (c + d)
    if denom == 0:
        return Fraction(1)
    return Fraction(2 * ((a * d) - (b * c)), denom)


def set_partitions(items: list[int]):
    """All set partitions of items (Bell-number many)."""
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1 :]
        yield [[first]] + part


def partition_to_labels(partition: list[list[int]], n: int) -> list[int]:
    labels = [0] * n
    for lab, members in enumerate(partition):
        for m in members:
            labels[m] = lab
    return labels


def random_symmetric_matrix(rng: np.random.Generator, n: int, tie_prone: bool) -> np.ndarray:
    """Random nonnegative symmetric zero-diagonal matrix.

    tie_prone draws from a small integer set so duplicated distances (and
    exact linkage ties) are common; otherwise entries are dyadic rationals,
    which keeps every average exactly representable.
    """
    if tie_prone:
        vals = rng.integers(1, 8, size=(n, n)).astype(np.float64)
    else:
        vals = rng.integers(1, 513, size=(n, n)).astype(np.float64) / 64.0
    upper = np.triu(vals, k=1)
    return upper + upper.T


def random_schema(rng: np.random.Generator, max_classes: int = 6, max_kps: int = 8) -> KeypointSchema:
    n_classes = int(rng.integers(1, max_classes + 1))
    return KeypointSchema(
        tuple(
            ClassSpec(cid, f"class{cid}", int(rng.integers(1, max_kps + 1)))
            for cid in range(n_classes)
        )
    )


def random_ambiguity_free_grouping(schema: KeypointSchema, rng: np.random.Generator):
    """Random label pair where no same-class pair shares both heads."""
    from kpgroup.cluster import make_grouping
    from kpgroup.schema import check_grouping

    n = schema.n
    while True:
        reg = rng.integers(0, max(2, n // 2), size=n)
        heat = rng.integers(0, max(2, n // 2), size=n)
        g = make_grouping(schema, reg.tolist(), heat.tolist())
        if check_grouping(schema, g, "unrestricted").ambiguous_pairs_total == 0:
            return g
