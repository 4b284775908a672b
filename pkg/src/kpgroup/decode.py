"""Center-based detector decoding: boxes, coarse keypoints, refinement.

Input is the six head maps for one image.  Object centers come from local
maxima of the per-class center heatmap; boxes from the size map plus the
sub-pixel offset map.  Keypoints start as displacements regressed at the
center pixel (one channel pair per regression cluster) and are refined on
the keypoint heatmap (one channel per heatmap cluster), either by snapping
to the closest qualifying local maximum (base) or by multiplying the
channel with a Gaussian mask centered at the coarse position and taking
the argmax of the product (rescore).  Because a keypoint's regression
cluster and heatmap cluster never coincide for two keypoints of one class
in a decodable grouping, the original keypoints are recovered exactly.

All coordinates are (x, y) in feature-grid units; scaling to input pixels
happens only at serialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .ingest import read_tensor
from .schema import Grouping, KeypointSchema, check_grouping

BASE = "base"
RESCORE = "rescore"


@dataclass(frozen=True)
class HeadTensors:
    """The six output maps for one image, shapes validated and clamped."""

    center_heatmap: np.ndarray  # (C, H, W) in [0, 1]
    center_offset: np.ndarray   # (2, H, W) dx, dy
    object_size: np.ndarray     # (2, H, W) w, h
    kp_regression: np.ndarray   # (2*m_reg, H, W) dx, dy per cluster
    kp_heatmap: np.ndarray      # (m_heat, H, W) in [0, 1]
    kp_offset: np.ndarray       # (2, H, W) dx, dy

    def __post_init__(self):
        maps = {
            "center_heatmap": self.center_heatmap,
            "center_offset": self.center_offset,
            "object_size": self.object_size,
            "kp_regression": self.kp_regression,
            "kp_heatmap": self.kp_heatmap,
            "kp_offset": self.kp_offset,
        }
        shapes = {k: v.shape for k, v in maps.items()}
        if any(v.ndim != 3 for v in maps.values()):
            raise ValidationError(f"head maps must be 3-d, got {shapes}")
        hw = {v.shape[1:] for v in maps.values()}
        if len(hw) != 1:
            raise ValidationError(f"head maps disagree on H, W: {shapes}")
        for name in ("center_offset", "object_size", "kp_offset"):
            if maps[name].shape[0] != 2:
                raise ValidationError(f"{name} must have 2 channels, got {shapes[name]}")
        if self.kp_regression.shape[0] % 2:
            raise ValidationError("kp_regression must have an even channel count")

    @classmethod
    def from_arrays(cls, **maps: np.ndarray) -> "HeadTensors":
        """Build from raw arrays, clamping heatmap values into [0, 1]."""
        for name in ("center_heatmap", "kp_heatmap"):
            maps[name] = np.clip(maps[name], 0.0, 1.0)
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in maps.items()})

    @property
    def height(self) -> int:
        return self.center_heatmap.shape[1]

    @property
    def width(self) -> int:
        return self.center_heatmap.shape[2]

    @property
    def n_classes(self) -> int:
        return self.center_heatmap.shape[0]

    @property
    def m_reg(self) -> int:
        return self.kp_regression.shape[0] // 2

    @property
    def m_heat(self) -> int:
        return self.kp_heatmap.shape[0]


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    score: float
    source: str  # "refined" | "coarse"


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple[float, float, float, float]  # x1, y1, x2, y2
    center_pixel: tuple[int, int]           # x, y of the center peak
    keypoints: tuple[Keypoint, ...] = ()


@dataclass(frozen=True)
class GaussianMask:
    """Distance penalty mask: 1 at the pixel nearest the center, Gaussian
    falloff within 3*sigma, exactly zero beyond."""

    center: tuple[float, float]
    sigma: float
    values: np.ndarray

    @property
    def support_radius(self) -> int:
        return math.ceil(3.0 * self.sigma)


def local_peaks(channel: np.ndarray, threshold: float) -> list[tuple[int, int, float]]:
    """Pixels >= all 8 neighbors with score >= threshold.

    On plateaus the lexicographically smallest (y, x) within each 3x3
    window wins.  Returned sorted by descending score, then (y, x).
    """
    channel = np.asarray(channel, dtype=np.float64)
    h, w = channel.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = channel

    is_peak = np.ones((h, w), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
            if (dy, dx) < (0, 0):
                is_peak &= nb < channel  # equal-valued smaller (y,x) suppresses
            else:
                is_peak &= nb <= channel
    is_peak &= channel >= threshold

    ys, xs = np.nonzero(is_peak)
    peaks = [(int(x), int(y), float(channel[y, x])) for y, x in zip(ys, xs)]
    peaks.sort(key=lambda p: (-p[2], p[1], p[0]))
    return peaks


def decode_detections(
    heads: HeadTensors,
    schema: KeypointSchema,
    top_k: int = 100,
    score_threshold: float = 0.1,
) -> list[Detection]:
    """Boxes from center peaks: center+offset gives the refined center,
    the size map gives width/height.  Keypoints are not filled in here."""
    if heads.n_classes != len(schema.classes):
        raise ValidationError(
            f"center heatmap has {heads.n_classes} channels, "
            f"schema has {len(schema.classes)} classes"
        )
    candidates = []
    for ci, (cls, _) in enumerate(schema.class_ranges()):
        for x, y, score in local_peaks(heads.center_heatmap[ci], score_threshold):
            candidates.append((score, ci, cls.class_id, x, y))
    candidates.sort(key=lambda t: (-t[0], t[1], t[4], t[3]))

    detections = []
    for score, _, class_id, x, y in candidates[:top_k]:
        cx = x + float(heads.center_offset[0, y, x])
        cy = y + float(heads.center_offset[1, y, x])
        bw = float(heads.object_size[0, y, x])
        bh = float(heads.object_size[1, y, x])
        box = (cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0)
        detections.append(Detection(class_id, score, box, (x, y)))
    return detections


def coarse_keypoints(
    detection: Detection,
    heads: HeadTensors,
    grouping: Grouping,
    schema: KeypointSchema,
) -> np.ndarray:
    """Coarse positions for every original keypoint of the detection's class.

    Keypoint k reads the displacement regressed on its cluster's channel
    pair at the center pixel; keypoints sharing a regression cluster get
    identical coarse positions.
    """
    x, y = detection.center_pixel
    if not (0 <= x < heads.width and 0 <= y < heads.height):
        raise ValidationError(f"center pixel {detection.center_pixel} outside grid")
    rng = _class_range(schema, detection.class_id)
    out = np.empty((len(rng), 2))
    for i, k in enumerate(rng):
        g = grouping.reg_labels[k]
        out[i, 0] = x + float(heads.kp_regression[2 * g, y, x])
        out[i, 1] = y + float(heads.kp_regression[2 * g + 1, y, x])
    return out


def gaussian_mask(
    center: tuple[float, float], sigma: float, height: int, width: int
) -> GaussianMask:
    """exp(-d^2 / 2 sigma^2) within 3 sigma of center, zero outside, and the
    pixel nearest the center forced to exactly 1."""
    if sigma <= 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    cx, cy = float(center[0]), float(center[1])
    values = np.zeros((height, width))

    r = math.ceil(3.0 * sigma)
    x0 = max(0, math.floor(cx) - r)
    x1 = min(width - 1, math.ceil(cx) + r)
    y0 = max(0, math.floor(cy) - r)
    y1 = min(height - 1, math.ceil(cy) + r)
    if x0 <= x1 and y0 <= y1:
        xs = np.arange(x0, x1 + 1)
        ys = np.arange(y0, y1 + 1)
        d2 = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2
        window = np.exp(-d2 / (2.0 * sigma * sigma))
        window[d2 > (3.0 * sigma) ** 2] = 0.0
        values[y0 : y1 + 1, x0 : x1 + 1] = window

    nx = min(max(int(math.floor(cx + 0.5)), 0), width - 1)
    ny = min(max(int(math.floor(cy + 0.5)), 0), height - 1)
    values[ny, nx] = 1.0
    return GaussianMask((cx, cy), float(sigma), values)


def _clamp_point(
    point: tuple[float, float], height: int, width: int
) -> tuple[float, float]:
    return (
        min(max(float(point[0]), 0.0), width - 1.0),
        min(max(float(point[1]), 0.0), height - 1.0),
    )


def _subpixel(kp_offset: np.ndarray | None, x: int, y: int) -> tuple[float, float]:
    if kp_offset is None:
        return 0.0, 0.0
    return float(kp_offset[0, y, x]), float(kp_offset[1, y, x])


def rescore_refine(
    channel: np.ndarray,
    coarse: tuple[float, float],
    sigma: float,
    kp_offset: np.ndarray | None = None,
) -> Keypoint:
    """Argmax of channel * Gaussian mask around the coarse position.

    The mask penalizes heatmap scores by distance from the coarse keypoint,
    so a strong-but-far peak can still beat a weak-but-near one.  Sub-pixel
    offset at the winning pixel is added; the rescored value is the score.
    """
    channel = np.asarray(channel, dtype=np.float64)
    h, w = channel.shape
    coarse = _clamp_point(coarse, h, w)
    mask = gaussian_mask(coarse, sigma, h, w)
    product = channel * mask.values

    best = product.max()
    if best <= 0.0:
        return Keypoint(coarse[0], coarse[1], 0.0, "coarse")
    ys, xs = np.nonzero(product == best)
    y, x = int(ys[0]), int(xs[0])  # np.nonzero scans in (y, x) order
    ox, oy = _subpixel(kp_offset, x, y)
    return Keypoint(x + ox, y + oy, float(best), "refined")


def base_refine(
    channel: np.ndarray,
    coarse: tuple[float, float],
    box: tuple[float, float, float, float],
    threshold: float = 0.1,
    kp_offset: np.ndarray | None = None,
) -> Keypoint:
    """Snap to the in-box local maximum closest to the coarse position.

    Ties on distance go to the higher score, then smallest (y, x).  With no
    qualifying peak the coarse position is kept.
    """
    channel = np.asarray(channel, dtype=np.float64)
    h, w = channel.shape
    coarse = _clamp_point(coarse, h, w)
    x1, y1, x2, y2 = box

    best = None
    for x, y, score in local_peaks(channel, threshold):
        if not (x1 <= x <= x2 and y1 <= y <= y2):
            continue
        d2 = (x - coarse[0]) ** 2 + (y - coarse[1]) ** 2
        key = (d2, -score, y, x)
        if best is None or key < best[0]:
            best = (key, x, y, score)
    if best is None:
        return Keypoint(coarse[0], coarse[1], 0.0, "coarse")
    _, x, y, score = best
    ox, oy = _subpixel(kp_offset, x, y)
    return Keypoint(x + ox, y + oy, float(score), "refined")


def decode_full(
    heads: HeadTensors,
    schema: KeypointSchema,
    grouping: Grouping,
    refine: str = RESCORE,
    sigma: float = 2.0,
    top_k: int = 100,
    center_threshold: float = 0.1,
    kp_threshold: float = 0.1,
) -> list[Detection]:
    """Detections with every original keypoint of the class reconstructed.

    Rejects groupings with ambiguous pairs up front: a pair merged in both
    heads cannot be told apart by any decoder.
    """
    if refine not in (BASE, RESCORE):
        raise ValidationError(f"refine must be 'base' or 'rescore', got {refine!r}")
    report = check_grouping(schema, grouping, mode="unrestricted")
    if report.ambiguous_pairs_total:
        raise ValidationError(
            f"grouping has {report.ambiguous_pairs_total} ambiguous pair(s); "
            "original keypoints cannot be decoded"
        )
    if heads.m_reg != grouping.m_reg or heads.m_heat != grouping.m_heat:
        raise ValidationError(
            f"head channels (m_reg={heads.m_reg}, m_heat={heads.m_heat}) do not "
            f"match grouping ({grouping.m_reg}, {grouping.m_heat})"
        )

    detections = decode_detections(heads, schema, top_k, center_threshold)
    out = []
    for det in detections:
        rng = _class_range(schema, det.class_id)
        coarse = coarse_keypoints(det, heads, grouping, schema)
        kps = []
        for i, k in enumerate(rng):
            channel = heads.kp_heatmap[grouping.heat_labels[k]]
            point = (float(coarse[i, 0]), float(coarse[i, 1]))
            if refine == RESCORE:
                kp = rescore_refine(channel, point, sigma, heads.kp_offset)
            else:
                kp = base_refine(channel, point, det.box, kp_threshold, heads.kp_offset)
            kps.append(kp)
        out.append(replace(det, keypoints=tuple(kps)))
    return out


def load_scene_heads(entry_paths: dict) -> HeadTensors:
    """Read the six head tensors named by a manifest entry."""
    return HeadTensors.from_arrays(
        **{name: read_tensor(path) for name, path in entry_paths.items()}
    )


def sweep_sigma(
    scenes: Sequence[tuple[HeadTensors, list]],
    schema: KeypointSchema,
    grouping: Grouping,
    sigma_grid: Sequence[float],
    top_k: int = 100,
    center_threshold: float = 0.1,
    pck_threshold: float = 0.05,
) -> tuple[float, list[tuple[float, float]]]:
    """Pick the rescoring sigma with the best keypoint accuracy.

    scenes: (head tensors, ground-truth object list) pairs.  Accuracy is
    PCK at pck_threshold * max(box side).  Ties go to the smaller sigma.
    """
    from .synth import evaluate  # local import, synth builds on decode

    grid = [float(s) for s in sigma_grid]
    if not grid:
        raise ValidationError("sigma grid is empty")
    if any(s <= 0 for s in grid):
        raise ValidationError("sigmas must be positive")

    results = []
    for sig in grid:
        correct, total = 0, 0
        for heads, truth in scenes:
            dets = decode_full(
                heads, schema, grouping,
                refine=RESCORE, sigma=sig,
                top_k=top_k, center_threshold=center_threshold,
            )
            report = evaluate(dets, truth, threshold=pck_threshold)
            correct += report.correct
            total += report.total
        results.append((sig, correct / total if total else 1.0))

    best_sigma, _ = max(results, key=lambda t: (t[1], -t[0]))
    return best_sigma, results


def detections_to_jsonable(detections: Sequence[Detection], stride: int = 4) -> list:
    """Serialize detections, scaling coordinates to input-pixel units."""
    out = []
    for d in detections:
        out.append(
            {
                "class_id": d.class_id,
                "score": d.score,
                "box": [v * stride for v in d.box],
                "keypoints": [
                    [kp.x * stride, kp.y * stride, kp.score, kp.source]
                    for kp in d.keypoints
                ],
            }
        )
    return out


def _class_range(schema: KeypointSchema, class_id: int) -> range:
    for c, rng in schema.class_ranges():
        if c.class_id == class_id:
            return rng
    raise ValidationError(f"class id {class_id} not in schema")
