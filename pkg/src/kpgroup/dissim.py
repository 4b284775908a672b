"""Dissimilarity matrices between keypoint types.

Three sources: mean annotation offsets from object centers, rows of the
last-layer convolution weights (per head), and negated offsets for the
spread-out heatmap strategy.  Same-class restrictions are expressed by a
huge-but-finite sentinel so linkage arithmetic stays finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .ingest import AnnotationSet, write_tensor
from .schema import KeypointSchema

OFFSETS = "offsets"
CONV_REG = "conv_reg"
CONV_HEAT = "conv_heat"
ANTI_OFFSETS = "anti_offsets"

_PROVENANCES = (OFFSETS, CONV_REG, CONV_HEAT, ANTI_OFFSETS)
_SENTINEL_FACTOR = 1e6


@dataclass(frozen=True)
class DissimilarityMatrix:
    """Symmetric n x n distances with a mask marking restriction sentinels."""

    values: np.ndarray
    restricted_mask: np.ndarray
    provenance: str

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValidationError(f"matrix must be square, got shape {v.shape}")
        if self.provenance not in _PROVENANCES:
            raise ValidationError(f"unknown provenance {self.provenance!r}")
        if not np.array_equal(v, v.T):
            raise ValidationError("matrix is not exactly symmetric")
        if np.any(np.diagonal(v) != 0.0):
            raise ValidationError("matrix diagonal is not zero")
        if not np.all(np.isfinite(v)):
            raise ValidationError("matrix contains NaN/Inf")
        finite = v[~self.restricted_mask]
        if self.provenance != ANTI_OFFSETS and np.any(finite < 0.0):
            raise ValidationError("negative entries only allowed for anti_offsets")
        if self.restricted_mask.any():
            off_diag = ~np.eye(self.n, dtype=bool)
            sentinels = v[self.restricted_mask & off_diag]
            plain = v[~self.restricted_mask & off_diag]
            if plain.size and sentinels.size and sentinels.min() <= plain.max():
                raise ValidationError("sentinel entries must dominate finite entries")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_values(cls, values: np.ndarray, provenance: str) -> "DissimilarityMatrix":
        values = np.asarray(values, dtype=np.float64)
        mask = np.zeros(values.shape, dtype=bool)
        return cls(values, mask, provenance)

    def save(self, path) -> None:
        write_tensor(self.values.astype(np.float64), path)


def mean_offsets(annotations: AnnotationSet, schema: KeypointSchema) -> np.ndarray:
    """Per keypoint type, the mean offset from the object center.

    Offsets are normalized per axis by bbox width/height, so an offset of
    (0.5, 0) means the right edge midpoint regardless of object size.
    Every keypoint type must be observed visible at least once.
    """
    n = schema.n
    sums = np.zeros((n, 2))
    counts = np.zeros(n, dtype=np.int64)
    start = {c.class_id: rng.start for c, rng in schema.class_ranges()}

    for obj in annotations.objects:
        x0, y0, w, h = obj.bbox
        cx, cy = x0 + w / 2.0, y0 + h / 2.0
        base = start[obj.class_id]
        for local, x, y in obj.visible():
            sums[base + local] += ((x - cx) / w, (y - cy) / h)
            counts[base + local] += 1

    unobserved = np.flatnonzero(counts == 0)
    if unobserved.size:
        raise ValidationError(
            "keypoint types never observed visible: "
            + ", ".join(str(i) for i in unobserved.tolist())
        )
    return sums / counts[:, None]


def _pairwise_euclidean(features: np.ndarray) -> np.ndarray:
    diff = features[:, None, :] - features[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def offsets_distance(means: np.ndarray) -> DissimilarityMatrix:
    """Euclidean distance between mean offsets."""
    means = np.asarray(means, dtype=np.float64)
    if means.shape[0] < 2:
        raise ValidationError("need at least 2 keypoint types")
    return DissimilarityMatrix.from_values(_pairwise_euclidean(means), OFFSETS)


def anti_offsets_distance(means: np.ndarray) -> DissimilarityMatrix:
    """Negated offsets distance: far-apart keypoints look most similar.

    Meant for complete linkage, so clusters collect spatially distant
    keypoints and shared heatmap channels keep their peaks separated.
    """
    means = np.asarray(means, dtype=np.float64)
    if means.shape[0] < 2:
        raise ValidationError("need at least 2 keypoint types")
    return DissimilarityMatrix.from_values(-_pairwise_euclidean(means), ANTI_OFFSETS)


def conv_weight_distance(
    weights: np.ndarray,
    head: str,
    schema: KeypointSchema,
    bias: np.ndarray | None = None,
) -> DissimilarityMatrix:
    """Euclidean distance between per-keypoint weight rows of one head.

    Heatmap head: one row per keypoint type, shape (n, F).  Regression
    head: two rows per keypoint type (dx then dy), shape (2n, F); the
    feature vector is their concatenation.  Bias terms are excluded unless
    passed explicitly (one value per weight row), in which case each is
    appended to its row's features.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2:
        raise ValidationError(f"weights must be 2-d, got shape {weights.shape}")
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64).reshape(-1)
        if bias.shape[0] != weights.shape[0]:
            raise ValidationError(
                f"bias has {bias.shape[0]} values for {weights.shape[0]} weight rows"
            )
        weights = np.concatenate([weights, bias[:, None]], axis=1)
    n = schema.n
    if head == "heat":
        if weights.shape[0] != n:
            raise ValidationError(
                f"heat weights have {weights.shape[0]} rows, schema needs {n}"
            )
        features = weights
        provenance = CONV_HEAT
    elif head == "reg":
        if weights.shape[0] != 2 * n:
            raise ValidationError(
                f"reg weights have {weights.shape[0]} rows, schema needs {2 * n}"
            )
        features = weights.reshape(n, -1)
        provenance = CONV_REG
    else:
        raise ValidationError(f"head must be 'reg' or 'heat', got {head!r}")
    return DissimilarityMatrix.from_values(_pairwise_euclidean(features), provenance)


def apply_restrictions(
    matrix: DissimilarityMatrix, schema: KeypointSchema
) -> DissimilarityMatrix:
    """Replace same-class off-diagonal entries with a dominating sentinel.

    Sentinel = 1e6 * (1 + max entry that stays finite), i.e. the maximum is
    taken over the entries the restriction leaves untouched.  Computing it
    that way makes the operation idempotent.
    """
    if matrix.n != schema.n:
        raise ValidationError(
            f"matrix is {matrix.n}x{matrix.n}, schema has n={schema.n}"
        )
    values = matrix.values.copy()
    mask = matrix.restricted_mask.copy()

    same_class = np.zeros((matrix.n, matrix.n), dtype=bool)
    for _, rng in schema.class_ranges():
        idx = np.fromiter(rng, dtype=np.int64)
        block = np.ix_(idx, idx)
        same_class[block] = ~np.eye(len(idx), dtype=bool)

    keep = ~same_class & ~mask & ~np.eye(matrix.n, dtype=bool)
    finite_max = float(values[keep].max()) if keep.any() else 0.0
    # Clamp at 0 so negative-valued (anti-offsets) matrices still get a
    # sentinel that dominates everything.
    sentinel = _SENTINEL_FACTOR * (1.0 + max(finite_max, 0.0))

    values[same_class] = sentinel
    mask |= same_class
    return DissimilarityMatrix(values, mask, matrix.provenance)
