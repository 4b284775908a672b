"""Grouping analysis: partition agreement, merged-pair counts, decodability.

All pair counting is exact integer arithmetic; floats only appear in the
final ARI division.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from itertools import combinations
from math import comb
from typing import Sequence

import numpy as np

from .cluster import Dendrogram, cut
from .errors import ValidationError
from .schema import KeypointSchema


def adjusted_rand_index(labels_a: Sequence[int], labels_b: Sequence[int]) -> float:
    """Chance-corrected pair-counting agreement between two partitions.

    1.0 for identical partitions up to relabeling, ~0 at chance level.
    Degenerate case (both partitions all-singletons or both one-cluster)
    returns 1.0 by convention.
    """
    a = list(labels_a)
    b = list(labels_b)
    if len(a) != len(b):
        raise ValidationError(f"label arrays differ in length: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise ValidationError("need at least 2 elements")

    contingency = Counter(zip(a, b))
    index = sum(comb(c, 2) for c in contingency.values())
    sum_a = sum(comb(c, 2) for c in Counter(a).values())
    sum_b = sum(comb(c, 2) for c in Counter(b).values())
    total = comb(n, 2)

    # ARI = (index - expected) / (max - expected) with
    # expected = sum_a*sum_b/total and max = (sum_a+sum_b)/2, all scaled by
    # 2*total to stay integral until the one division below.
    numerator = 2 * (index * total - sum_a * sum_b)
    denominator = total * (sum_a + sum_b) - 2 * sum_a * sum_b
    if denominator == 0:
        return 1.0
    return numerator / denominator


def inconsistent_pairs(
    schema: KeypointSchema, labels: Sequence[int], head: str
) -> tuple[int, tuple[tuple[int, int, int], ...]]:
    """Same-class keypoint pairs sharing a cluster in one head.

    Returns the count and the pair list as (class_id, kp_a, kp_b) with
    kp_a < kp_b in global indices.
    """
    labels = list(labels)
    if len(labels) != schema.n:
        raise ValidationError(
            f"labels have length {len(labels)}, schema has n={schema.n}"
        )
    if head not in ("reg", "heat"):
        raise ValidationError(f"head must be 'reg' or 'heat', got {head!r}")
    pairs = []
    for c, rng in schema.class_ranges():
        for i, j in combinations(rng, 2):
            if labels[i] == labels[j]:
                pairs.append((c.class_id, i, j))
    return len(pairs), tuple(pairs)


def _merged_pair_set(schema: KeypointSchema, labels: np.ndarray) -> set[tuple[int, int]]:
    merged = set()
    for _, rng in schema.class_ranges():
        for i, j in combinations(rng, 2):
            if labels[i] == labels[j]:
                merged.add((i, j))
    return merged


@dataclass(frozen=True)
class AmbiguityMatrix:
    """Simultaneously-merged same-class pair counts over a grid of cuts."""

    counts_reg: tuple[int, ...]
    counts_heat: tuple[int, ...]
    cells: np.ndarray  # shape (len(counts_reg), len(counts_heat))
    zero_frontier: tuple[tuple[int, int], ...]

    def to_dict(self) -> dict:
        return {
            "counts_reg": list(self.counts_reg),
            "counts_heat": list(self.counts_heat),
            "cells": self.cells.tolist(),
            "zero_frontier": [list(p) for p in self.zero_frontier],
        }

    def to_text(self) -> str:
        width = max(5, max(len(str(v)) for v in self.cells.flatten().tolist()) + 1)
        head = "reg\\heat".rjust(9) + "".join(
            str(mh).rjust(width) for mh in self.counts_heat
        )
        lines = [head]
        for i, mr in enumerate(self.counts_reg):
            row = str(mr).rjust(9) + "".join(
                str(int(v)).rjust(width) for v in self.cells[i]
            )
            lines.append(row)
        return "\n".join(lines)


def ambiguity_matrix(
    schema: KeypointSchema,
    dendrogram_reg: Dendrogram,
    dendrogram_heat: Dendrogram,
    counts_reg: Sequence[int],
    counts_heat: Sequence[int],
) -> AmbiguityMatrix:
    """Count undecodable pairs for every (m_reg, m_heat) on the grid.

    A pair is counted when the two keypoints share a cluster in both heads
    at the given cuts.  Also reports the Pareto-minimal zero cells: the
    cheapest cluster budgets with unambiguous decoding.
    """
    if dendrogram_reg.n != schema.n or dendrogram_heat.n != schema.n:
        raise ValidationError("dendrogram size does not match schema")
    counts_reg = [int(m) for m in counts_reg]
    counts_heat = [int(m) for m in counts_heat]

    reg_sets = {m: _merged_pair_set(schema, cut(dendrogram_reg, m)) for m in counts_reg}
    heat_sets = {
        m: _merged_pair_set(schema, cut(dendrogram_heat, m)) for m in counts_heat
    }
    cells = np.zeros((len(counts_reg), len(counts_heat)), dtype=np.int64)
    for i, mr in enumerate(counts_reg):
        for j, mh in enumerate(counts_heat):
            cells[i, j] = len(reg_sets[mr] & heat_sets[mh])

    zeros = [
        (mr, mh)
        for i, mr in enumerate(counts_reg)
        for j, mh in enumerate(counts_heat)
        if cells[i, j] == 0
    ]
    frontier = tuple(
        sorted(
            (mr, mh)
            for mr, mh in zeros
            if not any(
                (omr <= mr and omh <= mh and (omr, omh) != (mr, mh))
                for omr, omh in zeros
            )
        )
    )
    return AmbiguityMatrix(tuple(counts_reg), tuple(counts_heat), cells, frontier)


def consensus_curve(
    dendrogram_a: Dendrogram, dendrogram_b: Dendrogram, counts: Sequence[int]
) -> list[tuple[int, float]]:
    """ARI between same-size cuts of two dendrograms, per cluster count."""
    if dendrogram_a.n != dendrogram_b.n:
        raise ValidationError("dendrograms cluster different numbers of items")
    out = []
    for m in counts:
        la = cut(dendrogram_a, int(m)).tolist()
        lb = cut(dendrogram_b, int(m)).tolist()
        out.append((int(m), adjusted_rand_index(la, lb)))
    return out
