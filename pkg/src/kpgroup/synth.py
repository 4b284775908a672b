"""Synthetic scenes: render ground-truth-consistent head tensors and score
decodes against the known geometry.

Rendering mirrors the decoder's conventions exactly, so a well-separated
scene round-trips through decode with zero coordinate error: Gaussians sit
on the floored pixel of each (fractional) position, offset maps carry the
fractional parts at those pixels, and overlapping bumps composite by
elementwise max, never sum.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .decode import Detection, HeadTensors
from .errors import FormatError, ValidationError
from .schema import Grouping, KeypointSchema, check_grouping


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    center: tuple[float, float]
    size: tuple[float, float]
    keypoints: tuple[tuple[float, float], ...]
    kp_amplitudes: tuple[float, ...] | None = None  # default 1.0 each


@dataclass(frozen=True)
class Distractor:
    """Extra bump on one keypoint-heatmap channel, not in the ground truth."""

    channel: int
    position: tuple[float, float]
    amplitude: float
    sigma: float | None = None  # falls back to the scene's keypoint sigma


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    sigma_center: float
    sigma_keypoint: float
    objects: tuple[SceneObject, ...]
    distractors: tuple[Distractor, ...] = ()

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "sigma_center": self.sigma_center,
            "sigma_keypoint": self.sigma_keypoint,
            "objects": [
                {
                    "class_id": o.class_id,
                    "center": list(o.center),
                    "size": list(o.size),
                    "keypoints": [list(k) for k in o.keypoints],
                    **(
                        {"kp_amplitudes": list(o.kp_amplitudes)}
                        if o.kp_amplitudes is not None
                        else {}
                    ),
                }
                for o in self.objects
            ],
            "distractors": [
                {
                    "channel": d.channel,
                    "position": list(d.position),
                    "amplitude": d.amplitude,
                    **({"sigma": d.sigma} if d.sigma is not None else {}),
                }
                for d in self.distractors
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        try:
            objects = tuple(
                SceneObject(
                    int(o["class_id"]),
                    tuple(float(v) for v in o["center"]),
                    tuple(float(v) for v in o["size"]),
                    tuple(tuple(float(v) for v in k) for k in o["keypoints"]),
                    tuple(float(v) for v in o["kp_amplitudes"])
                    if "kp_amplitudes" in o
                    else None,
                )
                for o in data["objects"]
            )
            distractors = tuple(
                Distractor(
                    int(d["channel"]),
                    tuple(float(v) for v in d["position"]),
                    float(d["amplitude"]),
                    float(d["sigma"]) if "sigma" in d else None,
                )
                for d in data.get("distractors", [])
            )
            return cls(
                int(data["height"]),
                int(data["width"]),
                float(data["sigma_center"]),
                float(data["sigma_keypoint"]),
                objects,
                distractors,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed scene document: {exc}") from exc


@dataclass(frozen=True)
class GTObject:
    """Ground truth for one rendered object, in feature-grid units."""

    class_id: int
    center: tuple[float, float]
    size: tuple[float, float]
    keypoints: tuple[tuple[float, float], ...]

    @property
    def box(self) -> tuple[float, float, float, float]:
        cx, cy = self.center
        w, h = self.size
        return (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "center": list(self.center),
            "size": list(self.size),
            "keypoints": [list(k) for k in self.keypoints],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GTObject":
        return cls(
            int(data["class_id"]),
            tuple(float(v) for v in data["center"]),
            tuple(float(v) for v in data["size"]),
            tuple(tuple(float(v) for v in k) for k in data["keypoints"]),
        )


def _validate_spec(spec: SceneSpec, schema: KeypointSchema) -> None:
    kp_counts = {c.class_id: c.kp_count for c in schema.classes}
    for obj in spec.objects:
        if obj.class_id not in kp_counts:
            raise ValidationError(f"scene object has unknown class {obj.class_id}")
        if len(obj.keypoints) != kp_counts[obj.class_id]:
            raise ValidationError(
                f"object of class {obj.class_id} has {len(obj.keypoints)} keypoints, "
                f"schema says {kp_counts[obj.class_id]}"
            )
        pts = [obj.center, *obj.keypoints]
        for x, y in pts:
            if not (0 <= x < spec.width and 0 <= y < spec.height):
                raise ValidationError(f"coordinate ({x}, {y}) outside the grid")
        if obj.size[0] <= 0 or obj.size[1] <= 0:
            raise ValidationError(f"object size {obj.size} must be positive")
        amps = obj.kp_amplitudes
        if amps is not None:
            if len(amps) != len(obj.keypoints):
                raise ValidationError("kp_amplitudes length != keypoint count")
            if any(not 0 < a <= 1 for a in amps):
                raise ValidationError("keypoint amplitudes must be in (0, 1]")
    for d in spec.distractors:
        x, y = d.position
        if not (0 <= x < spec.width and 0 <= y < spec.height):
            raise ValidationError(f"distractor at ({x}, {y}) outside the grid")
        if not 0 < d.amplitude <= 1:
            raise ValidationError("distractor amplitude must be in (0, 1]")


def _splat(channel: np.ndarray, px: int, py: int, sigma: float, amplitude: float) -> None:
    """Max-composite a truncated Gaussian bump centered at an integer pixel."""
    h, w = channel.shape
    r = math.ceil(3.0 * sigma)
    x0, x1 = max(0, px - r), min(w - 1, px + r)
    y0, y1 = max(0, py - r), min(h - 1, py + r)
    xs = np.arange(x0, x1 + 1)
    ys = np.arange(y0, y1 + 1)
    d2 = (xs[None, :] - px) ** 2 + (ys[:, None] - py) ** 2
    bump = amplitude * np.exp(-d2 / (2.0 * sigma * sigma))
    bump[d2 > (3.0 * sigma) ** 2] = 0.0
    window = channel[y0 : y1 + 1, x0 : x1 + 1]
    np.maximum(window, bump, out=window)


def render(
    spec: SceneSpec, schema: KeypointSchema, grouping: Grouping
) -> tuple[HeadTensors, list[GTObject]]:
    """Render the six head maps a perfect detector would output.

    Keypoint displacement channels are written at each object's center
    pixel; when a regression cluster covers several keypoints of the class,
    the channel gets their mean displacement (the best any shared channel
    could do).  Heatmap channels receive one bump per member keypoint.
    """
    _validate_spec(spec, schema)
    report = check_grouping(schema, grouping, mode="unrestricted")
    if report.ambiguous_pairs_total:
        raise ValidationError("grouping has ambiguous pairs; scene would be undecodable")

    h, w = spec.height, spec.width
    n_classes = len(schema.classes)
    class_index = {c.class_id: i for i, (c, _) in enumerate(schema.class_ranges())}
    class_start = {c.class_id: rng.start for c, rng in schema.class_ranges()}

    center_heatmap = np.zeros((n_classes, h, w))
    center_offset = np.zeros((2, h, w))
    object_size = np.zeros((2, h, w))
    kp_regression = np.zeros((2 * grouping.m_reg, h, w))
    kp_heatmap = np.zeros((grouping.m_heat, h, w))
    kp_offset = np.zeros((2, h, w))

    truth = []
    for obj in spec.objects:
        cx, cy = obj.center
        px, py = int(math.floor(cx)), int(math.floor(cy))
        _splat(center_heatmap[class_index[obj.class_id]], px, py, spec.sigma_center, 1.0)
        center_offset[0, py, px] = cx - px
        center_offset[1, py, px] = cy - py
        object_size[0, py, px] = obj.size[0]
        object_size[1, py, px] = obj.size[1]

        base = class_start[obj.class_id]
        by_reg_cluster: dict[int, list[int]] = {}
        for local, _ in enumerate(obj.keypoints):
            by_reg_cluster.setdefault(grouping.reg_labels[base + local], []).append(local)
        for g, locals_ in by_reg_cluster.items():
            dx = np.mean([obj.keypoints[l][0] - px for l in locals_])
            dy = np.mean([obj.keypoints[l][1] - py for l in locals_])
            kp_regression[2 * g, py, px] = dx
            kp_regression[2 * g + 1, py, px] = dy

        amps = obj.kp_amplitudes or (1.0,) * len(obj.keypoints)
        for local, (kx, ky) in enumerate(obj.keypoints):
            qx, qy = int(math.floor(kx)), int(math.floor(ky))
            channel = grouping.heat_labels[base + local]
            _splat(kp_heatmap[channel], qx, qy, spec.sigma_keypoint, amps[local])
            kp_offset[0, qy, qx] = kx - qx
            kp_offset[1, qy, qx] = ky - qy

        truth.append(GTObject(obj.class_id, obj.center, obj.size, obj.keypoints))

    for d in spec.distractors:
        if not 0 <= d.channel < grouping.m_heat:
            raise ValidationError(
                f"distractor channel {d.channel} outside [0, {grouping.m_heat})"
            )
        dx, dy = int(math.floor(d.position[0])), int(math.floor(d.position[1]))
        _splat(kp_heatmap[d.channel], dx, dy, d.sigma or spec.sigma_keypoint, d.amplitude)

    heads = HeadTensors.from_arrays(
        center_heatmap=center_heatmap,
        center_offset=center_offset,
        object_size=object_size,
        kp_regression=kp_regression,
        kp_heatmap=kp_heatmap,
        kp_offset=kp_offset,
    )
    return heads, truth


@dataclass(frozen=True)
class ClosestPeakTrapCase:
    """Canned pathology scene plus everything needed to decode it."""

    spec: SceneSpec
    schema: KeypointSchema
    grouping: Grouping
    expected: dict


def closest_peak_trap_case() -> ClosestPeakTrapCase:
    """Scene where closest-peak refinement picks the wrong peak.

    One object of a 2-keypoint class whose regression clusters are merged,
    so both keypoints share the coarse position (14, 12), midway between
    them.  Keypoint 0's true peak (amplitude 0.9) sits 2 px from the coarse
    position; a weak distractor (0.15) sits 1 px away on the other side.
    Base refinement snaps to the distractor; rescoring with sigma=2 weighs
    0.9*exp(-4/8) = 0.546 against 0.15*exp(-1/8) = 0.132 and recovers the
    true peak.  Raising the distractor amplitude above 0.9*exp(-3/8) ~
    0.6186 flips rescoring too.
    """
    from .schema import ClassSpec

    schema = KeypointSchema((ClassSpec(0, "thing", 2),))
    # Regression merged, heatmap separate: decodable, coarse = midpoint.
    grouping = Grouping(schema.fingerprint, (0, 0), (0, 1), 1, 2)

    center = (14.0, 12.0)
    coarse = (14.0, 12.0)
    true_kp = (16.0, 12.0)
    partner_kp = (12.0, 12.0)
    distractor_pos = (13.0, 12.0)
    sigma_rescore = 2.0

    spec = SceneSpec(
        height=24,
        width=28,
        sigma_center=1.5,
        sigma_keypoint=1.0,
        objects=(
            SceneObject(
                class_id=0,
                center=center,
                size=(12.0, 9.0),
                keypoints=(true_kp, partner_kp),
                kp_amplitudes=(0.9, 0.9),
            ),
        ),
        distractors=(Distractor(channel=0, position=distractor_pos, amplitude=0.15),),
    )
    d_true = math.dist(coarse, true_kp)
    d_distr = math.dist(coarse, distractor_pos)
    break_even = 0.9 * math.exp(
        (d_distr**2 - d_true**2) / (2.0 * sigma_rescore**2)
    )
    expected = {
        "keypoint_index": 0,
        "coarse": coarse,
        "true_keypoint": true_kp,
        "distractor": distractor_pos,
        "sigma": sigma_rescore,
        "base_picks": distractor_pos,
        "rescore_picks": true_kp,
        "break_even_amplitude": break_even,
    }
    return ClosestPeakTrapCase(spec, schema, grouping, expected)


def random_scene(
    schema: KeypointSchema,
    grouping: Grouping,
    rng: np.random.Generator,
    height: int = 96,
    width: int = 96,
    max_objects: int = 4,
) -> SceneSpec:
    """Random scene laid out so decoding is exact by construction.

    Objects occupy separate grid quadrants.  Within an object, keypoints
    sharing a regression cluster scatter (+-1 px) around a common site and
    distinct sites sit >= 12 px apart, so every keypoint's own heatmap bump
    is always the one nearest its coarse position, with a wide margin over
    the bump spacing.  Suitable for roundtrip checks with any
    ambiguity-free grouping.
    """
    if max(c.kp_count for c in schema.classes) > 9:
        raise ValidationError("random_scene supports at most 9 keypoints per class")
    if max_objects > 4:
        raise ValidationError("random_scene supports at most 4 objects")
    if height < 96 or width < 96:
        raise ValidationError("grid must be at least 96x96")

    class_start = {c.class_id: rng_.start for c, rng_ in schema.class_ranges()}
    quadrants = [(0, 0), (1, 0), (0, 1), (1, 1)]
    n_objects = int(rng.integers(1, max_objects + 1))

    objects = []
    for qcol, qrow in quadrants[:n_objects]:
        cls = schema.classes[int(rng.integers(len(schema.classes)))]
        qx0, qy0 = qcol * width // 2, qrow * height // 2

        lattice = [
            (qx0 + 8 + 12 * i, qy0 + 8 + 12 * j) for i in range(3) for j in range(3)
        ]
        base = class_start[cls.class_id]
        cluster_ids = sorted(
            {grouping.reg_labels[base + local] for local in range(cls.kp_count)}
        )
        picks = rng.permutation(len(lattice))[: len(cluster_ids)]
        site_of = {g: lattice[int(p)] for g, p in zip(cluster_ids, picks)}

        # Members of one regression cluster scatter over distinct pixels of
        # the 3x3 block around their site: the shared sub-pixel offset map
        # holds one value per pixel, so no two keypoints may share one.
        block = [(0, 0), (1, 0), (0, 1), (1, 1), (-1, 0),
                 (0, -1), (-1, 1), (1, -1), (-1, -1)]
        slot_of: dict[int, int] = {}
        keypoints = []
        for local in range(cls.kp_count):
            g = grouping.reg_labels[base + local]
            sx, sy = site_of[g]
            ox, oy = block[slot_of.get(g, 0)]
            slot_of[g] = slot_of.get(g, 0) + 1
            keypoints.append(
                (
                    sx + ox + float(rng.uniform(0.05, 0.95)),
                    sy + oy + float(rng.uniform(0.05, 0.95)),
                )
            )

        cx = qx0 + width / 4 + float(rng.uniform(-2.0, 2.0))
        cy = qy0 + height / 4 + float(rng.uniform(-2.0, 2.0))
        spread_x = max(abs(kx - cx) for kx, _ in keypoints)
        spread_y = max(abs(ky - cy) for _, ky in keypoints)
        objects.append(
            SceneObject(
                class_id=cls.class_id,
                center=(cx, cy),
                size=(2.0 * spread_x + 6.0, 2.0 * spread_y + 6.0),
                keypoints=tuple(keypoints),
            )
        )

    return SceneSpec(
        height=height,
        width=width,
        sigma_center=1.5,
        sigma_keypoint=1.0,
        objects=tuple(objects),
    )


@dataclass(frozen=True)
class PckReport:
    """Correct-keypoint fractions at a distance threshold."""

    threshold: float
    correct: int
    total: int
    per_type: dict[int, tuple[int, int]]  # global index -> (correct, total)

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 1.0


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix2 - ix1), max(0.0, iy2 - iy1)
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def evaluate(
    detections: Sequence[Detection],
    truth: Sequence[GTObject],
    schema: KeypointSchema | None = None,
    threshold: float = 0.05,
) -> PckReport:
    """PCK against ground truth: a keypoint counts as correct when within
    threshold * max(box side) of its true position.

    Detections match ground-truth objects greedily by score, same class
    only, box IoU >= 0.5, one detection per object.  Objects left without
    a match contribute all their keypoints as misses.
    """
    start: dict[int, int] = {}
    if schema is not None:
        start = {c.class_id: rng.start for c, rng in schema.class_ranges()}

    matched: dict[int, Detection] = {}
    taken: set[int] = set()
    for det in sorted(detections, key=lambda d: -d.score):
        for gi, gt in enumerate(truth):
            if gi in taken or gt.class_id != det.class_id:
                continue
            if iou(det.box, gt.box) >= 0.5:
                matched[gi] = det
                taken.add(gi)
                break

    correct_total = 0
    total = 0
    per_type: dict[int, list[int]] = {}
    for gi, gt in enumerate(truth):
        tol = threshold * max(gt.size)
        det = matched.get(gi)
        for local, (tx, ty) in enumerate(gt.keypoints):
            gidx = start.get(gt.class_id, 0) + local if start else local
            bucket = per_type.setdefault(gidx, [0, 0])
            bucket[1] += 1
            total += 1
            if det is None or local >= len(det.keypoints):
                continue
            kp = det.keypoints[local]
            if math.dist((kp.x, kp.y), (tx, ty)) <= tol:
                bucket[0] += 1
                correct_total += 1

    return PckReport(
        threshold=threshold,
        correct=correct_total,
        total=total,
        per_type={k: (v[0], v[1]) for k, v in sorted(per_type.items())},
    )


def save_scene_spec(spec: SceneSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n")


def load_scene_spec(path: str | Path) -> SceneSpec:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    return SceneSpec.from_dict(data)


def save_truth(truth: Sequence[GTObject], path: str | Path) -> None:
    Path(path).write_text(
        json.dumps({"objects": [o.to_dict() for o in truth]}, indent=2) + "\n"
    )


def load_truth(path: str | Path) -> list[GTObject]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    return [GTObject.from_dict(o) for o in data["objects"]]
