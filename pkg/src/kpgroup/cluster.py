"""Deterministic agglomerative clustering and cluster weight averaging.

Merge order is fully pinned: at every step the pair with minimal linkage
distance merges; ties break by the lexicographically smallest pair of
cluster representatives (a cluster's representative is its smallest member
index).  Average linkage tracks exact sums of the original entries, so the
linkage value equals the plain mean over all cross pairs -- the same number
a from-scratch recomputation yields, which keeps tie comparisons exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .dissim import DissimilarityMatrix
from .errors import FormatError, ValidationError
from .schema import Grouping, KeypointSchema

AVERAGE = "average"
COMPLETE = "complete"


class MergeRecord(NamedTuple):
    cluster_a: int
    cluster_b: int
    distance: float
    new_cluster_id: int


@dataclass(frozen=True)
class Dendrogram:
    """n leaves (ids 0..n-1) and n-1 merges (new ids n..2n-2, in order)."""

    n: int
    linkage: str
    merges: tuple[MergeRecord, ...]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "linkage": self.linkage,
            "merges": [[m.cluster_a, m.cluster_b, m.distance, m.new_cluster_id]
                       for m in self.merges],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Dendrogram":
        try:
            merges = tuple(
                MergeRecord(int(a), int(b), float(d), int(nid))
                for a, b, d, nid in data["merges"]
            )
            return cls(int(data["n"]), str(data["linkage"]), merges)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed dendrogram document: {exc}") from exc


def agglomerate(matrix: DissimilarityMatrix, linkage: str = AVERAGE) -> Dendrogram:
    """Cluster bottom-up until a single root remains.

    average: d(A,B) = mean of original entries over all cross pairs
    complete: d(A,B) = max of original entries over all cross pairs
    """
    if linkage not in (AVERAGE, COMPLETE):
        raise ValidationError(f"linkage must be 'average' or 'complete', got {linkage!r}")
    n = matrix.n
    if n < 2:
        raise ValidationError("need at least 2 items to cluster")

    # Slot i starts as leaf i.  On merge the surviving slot is the one with
    # the smaller representative; the other goes inactive.
    acc = matrix.values.astype(np.float64).copy()  # sums (average) or maxes (complete)
    size = np.ones(n, dtype=np.int64)
    rep = np.arange(n)
    cid = np.arange(n)
    active = np.ones(n, dtype=bool)

    merges = []
    for step in range(n - 1):
        idx = np.flatnonzero(active)
        sub = acc[np.ix_(idx, idx)]
        if linkage == AVERAGE:
            sub = sub / np.outer(size[idx], size[idx])
        np.fill_diagonal(sub, np.inf)

        best = sub.min()
        ti, tj = np.nonzero(np.triu(sub == best, k=1))
        pairs = [(idx[i], idx[j]) for i, j in zip(ti.tolist(), tj.tolist())]
        si, sj = min(
            pairs,
            key=lambda p: (min(rep[p[0]], rep[p[1]]), max(rep[p[0]], rep[p[1]])),
        )

        new_id = n + step
        a, b = sorted((int(cid[si]), int(cid[sj])))
        merges.append(MergeRecord(a, b, float(best), new_id))

        keep, drop = (si, sj) if rep[si] < rep[sj] else (sj, si)
        if linkage == AVERAGE:
            acc[keep, :] += acc[drop, :]
            acc[:, keep] = acc[keep, :]
        else:
            acc[keep, :] = np.maximum(acc[keep, :], acc[drop, :])
            acc[:, keep] = acc[keep, :]
        acc[keep, keep] = 0.0
        size[keep] += size[drop]
        cid[keep] = new_id
        active[drop] = False

    return Dendrogram(n, linkage, tuple(merges))


def cut(dendrogram: Dendrogram, m: int) -> np.ndarray:
    """Labels for the m clusters present before the (n-m+1)-th merge.

    Clusters are renumbered 0..m-1 in order of their smallest member.
    """
    n = dendrogram.n
    if not 1 <= m <= n:
        raise ValidationError(f"m={m} outside [1, {n}]")
    clusters: dict[int, list[int]] = {i: [i] for i in range(n)}
    for rec in dendrogram.merges[: n - m]:
        merged = clusters.pop(rec.cluster_a) + clusters.pop(rec.cluster_b)
        clusters[rec.new_cluster_id] = merged

    labels = np.empty(n, dtype=np.int64)
    for label, members in enumerate(sorted(clusters.values(), key=min)):
        labels[members] = label
    return labels


def min_clean_cut(dendrogram: Dendrogram, schema: KeypointSchema) -> int:
    """Smallest m whose cut keeps every same-class pair in distinct clusters.

    Greedy agglomeration on a sentineled matrix performs all conflict-free
    merges before any conflicted one, but it can strand more than
    min_restricted_clusters clusters: no algorithm that only merges can
    always reach the bound.  This reports the bound this dendrogram
    actually achieves.
    """
    n = dendrogram.n
    if n != schema.n:
        raise ValidationError("dendrogram size does not match schema")
    class_of = np.empty(n, dtype=np.int64)
    for c, rng in schema.class_ranges():
        class_of[list(rng)] = c.class_id

    members: dict[int, list[int]] = {i: [i] for i in range(n)}
    for step, rec in enumerate(dendrogram.merges):
        a = members.pop(rec.cluster_a)
        b = members.pop(rec.cluster_b)
        if set(class_of[a].tolist()) & set(class_of[b].tolist()):
            return n - step
        members[rec.new_cluster_id] = a + b
    return 1


def cut_restricted(dendrogram: Dendrogram, schema: KeypointSchema, m: int) -> np.ndarray:
    """Cut and verify no same-class pair shares a cluster; raise otherwise."""
    labels = cut(dendrogram, m)
    for _, rng in schema.class_ranges():
        seen: dict[int, int] = {}
        for k in rng:
            g = int(labels[k])
            if g in seen:
                raise ValidationError(
                    f"restriction violated at m={m}: keypoints {seen[g]} and {k} "
                    f"share a cluster; smallest clean cut is "
                    f"m={min_clean_cut(dendrogram, schema)}"
                )
            seen[g] = k
    return labels


def canonical_labels(labels: Sequence[int]) -> np.ndarray:
    """Renumber labels surjectively onto [0, m) by smallest member index."""
    labels = np.asarray(labels, dtype=np.int64)
    remap: dict[int, int] = {}
    for v in labels.tolist():
        if v not in remap:
            remap[v] = len(remap)
    return np.array([remap[v] for v in labels.tolist()], dtype=np.int64)


def make_grouping(
    schema: KeypointSchema,
    reg_labels: Sequence[int],
    heat_labels: Sequence[int],
) -> Grouping:
    """Assemble a fingerprinted Grouping from two label arrays."""
    reg = canonical_labels(reg_labels)
    heat = canonical_labels(heat_labels)
    if len(reg) != schema.n or len(heat) != schema.n:
        raise ValidationError(
            f"label arrays of length {len(reg)}/{len(heat)} do not match n={schema.n}"
        )
    return Grouping(
        schema_fingerprint=schema.fingerprint,
        reg_labels=tuple(reg.tolist()),
        heat_labels=tuple(heat.tolist()),
        m_reg=int(reg.max()) + 1,
        m_heat=int(heat.max()) + 1,
    )


@dataclass(frozen=True)
class WeightInitMap:
    """Cluster membership plus the averaged weight rows for one head."""

    head: str
    members: tuple[tuple[int, ...], ...]
    rows: np.ndarray


def average_weights(
    weights: np.ndarray, labels: Sequence[int], head: str
) -> tuple[WeightInitMap, np.ndarray]:
    """Initialize grouped-head weights as the mean of member keypoint rows.

    Heatmap head: input (n, F) -> output (m, F), row g = mean of member rows.
    Regression head: input (2n, F) -> output (2m, F); dx rows average with dx
    rows and dy with dy, never across.
    """
    weights = np.asarray(weights, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    m = int(labels.max()) + 1
    if set(labels.tolist()) != set(range(m)):
        raise ValidationError("labels must be surjective onto [0, m)")
    if weights.ndim != 2:
        raise ValidationError(f"weights must be 2-d, got shape {weights.shape}")

    members = tuple(
        tuple(np.flatnonzero(labels == g).tolist()) for g in range(m)
    )

    def row_mean(rows_g: np.ndarray) -> np.ndarray:
        # base + mean(deltas) instead of plain mean: identical rows average
        # to exactly themselves, so expand-and-reaverage is a fixpoint.
        return rows_g[0] + (rows_g - rows_g[0]).mean(axis=0)

    if head == "heat":
        if weights.shape[0] != n:
            raise ValidationError(
                f"heat weights have {weights.shape[0]} rows, labels imply {n}"
            )
        rows = np.stack([row_mean(weights[list(g)]) for g in members])
    elif head == "reg":
        if weights.shape[0] != 2 * n:
            raise ValidationError(
                f"reg weights have {weights.shape[0]} rows, labels imply {2 * n}"
            )
        rows = np.empty((2 * m, weights.shape[1]))
        for g, mem in enumerate(members):
            mem = list(mem)
            rows[2 * g] = row_mean(weights[[2 * k for k in mem]])
            rows[2 * g + 1] = row_mean(weights[[2 * k + 1 for k in mem]])
    else:
        raise ValidationError(f"head must be 'reg' or 'heat', got {head!r}")

    return WeightInitMap(head, members, rows), rows


def save_dendrogram(dendrogram: Dendrogram, path: str | Path) -> None:
    Path(path).write_text(json.dumps(dendrogram.to_dict(), indent=2) + "\n")


def load_dendrogram(path: str | Path) -> Dendrogram:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    return Dendrogram.from_dict(data)
