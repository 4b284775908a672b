"""Keypoint universe, groupings, and validity checks.

A schema lists object classes and how many keypoint types each class owns.
Keypoint types get a single global index space: contiguous blocks per class,
classes ordered by ascending class id.  A grouping maps every keypoint type
to a regression cluster and to a heatmap cluster; validity of a grouping is
judged per class (which pairs got merged where).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Sequence

from .errors import FormatError, ValidationError

RESTRICTED = "restricted"
UNRESTRICTED = "unrestricted"


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    name: str
    kp_count: int


@dataclass(frozen=True)
class KeypointSchema:
    """Ordered class list plus the derived global keypoint index space."""

    classes: tuple[ClassSpec, ...]

    def __post_init__(self):
        ordered = tuple(sorted(self.classes, key=lambda c: c.class_id))
        object.__setattr__(self, "classes", ordered)
        validate_schema(self)

    @property
    def n(self) -> int:
        """Total number of unique keypoint types."""
        return sum(c.kp_count for c in self.classes)

    @property
    def fingerprint(self) -> str:
        """Content hash of the canonical class list."""
        canon = json.dumps(
            [[c.class_id, c.name, c.kp_count] for c in self.classes],
            separators=(",", ":"),
        )
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def class_ranges(self) -> list[tuple[ClassSpec, range]]:
        """Each class with its global keypoint index range."""
        out, start = [], 0
        for c in self.classes:
            out.append((c, range(start, start + c.kp_count)))
            start += c.kp_count
        return out

    def class_of(self, index: int) -> tuple[ClassSpec, int]:
        """Map a global keypoint index to (class, class-local index)."""
        if not 0 <= index < self.n:
            raise ValidationError(f"keypoint index {index} outside [0, {self.n})")
        for c, rng in self.class_ranges():
            if index in rng:
                return c, index - rng.start
        raise AssertionError("unreachable")

    def to_dict(self) -> dict:
        return {
            "classes": [
                {"id": c.class_id, "name": c.name, "kp_count": c.kp_count}
                for c in self.classes
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KeypointSchema":
        try:
            classes = tuple(
                ClassSpec(int(c["id"]), str(c["name"]), int(c["kp_count"]))
                for c in data["classes"]
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed schema document: {exc}") from exc
        return cls(classes)


def validate_schema(schema: KeypointSchema) -> None:
    """Check all schema invariants; raises ValidationError on the first hit."""
    if not schema.classes:
        raise ValidationError("schema has no classes")
    seen = set()
    for c in schema.classes:
        if c.class_id in seen:
            raise ValidationError(f"duplicate class id {c.class_id}")
        seen.add(c.class_id)
        if c.kp_count < 1:
            raise ValidationError(
                f"class {c.class_id} has kp_count {c.kp_count} < 1"
            )


def min_restricted_clusters(schema: KeypointSchema) -> int:
    """Smallest cluster count any restriction-respecting grouping can have.

    Equals the largest per-class keypoint count: keypoints of one class must
    all land in distinct clusters.
    """
    return max(c.kp_count for c in schema.classes)


@dataclass(frozen=True)
class Grouping:
    """Two surjections keypoint type -> cluster, one per head."""

    schema_fingerprint: str
    reg_labels: tuple[int, ...]
    heat_labels: tuple[int, ...]
    m_reg: int
    m_heat: int

    def __post_init__(self):
        if len(self.reg_labels) != len(self.heat_labels):
            raise ValidationError(
                "reg and heat label arrays differ in length: "
                f"{len(self.reg_labels)} vs {len(self.heat_labels)}"
            )
        _check_labels(self.reg_labels, self.m_reg, "reg")
        _check_labels(self.heat_labels, self.m_heat, "heat")

    @property
    def n(self) -> int:
        return len(self.reg_labels)

    @classmethod
    def identity(cls, schema: KeypointSchema) -> "Grouping":
        """One cluster per keypoint type in both heads."""
        labels = tuple(range(schema.n))
        return cls(schema.fingerprint, labels, labels, schema.n, schema.n)

    def to_dict(self) -> dict:
        return {
            "schema_fingerprint": self.schema_fingerprint,
            "m_reg": self.m_reg,
            "m_heat": self.m_heat,
            "reg_labels": list(self.reg_labels),
            "heat_labels": list(self.heat_labels),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Grouping":
        try:
            return cls(
                str(data["schema_fingerprint"]),
                tuple(int(v) for v in data["reg_labels"]),
                tuple(int(v) for v in data["heat_labels"]),
                int(data["m_reg"]),
                int(data["m_heat"]),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed grouping document: {exc}") from exc


def _check_labels(labels: Sequence[int], m: int, head: str) -> None:
    if m < 1:
        raise ValidationError(f"{head}: cluster count {m} < 1")
    used = set(labels)
    if any(g < 0 or g >= m for g in used):
        raise ValidationError(f"{head}: label outside [0, {m})")
    if used != set(range(m)):
        missing = sorted(set(range(m)) - used)
        raise ValidationError(f"{head}: labels not surjective, missing {missing}")


@dataclass(frozen=True)
class OffendingPair:
    """Same-class keypoint pair sharing a cluster; head is reg|heat|both."""

    class_id: int
    kp_a: int
    kp_b: int
    head: str


@dataclass(frozen=True)
class ValidityReport:
    restricted_ok: bool
    ambiguous_pairs_total: int
    inconsistent_reg: int
    inconsistent_heat: int
    offending_pairs: tuple[OffendingPair, ...]

    def to_dict(self) -> dict:
        return {
            "restricted_ok": self.restricted_ok,
            "ambiguous_pairs_total": self.ambiguous_pairs_total,
            "inconsistent_reg": self.inconsistent_reg,
            "inconsistent_heat": self.inconsistent_heat,
            "offending_pairs": [
                {"class_id": p.class_id, "kp_a": p.kp_a, "kp_b": p.kp_b, "head": p.head}
                for p in self.offending_pairs
            ],
        }


def check_grouping(
    schema: KeypointSchema, grouping: Grouping, mode: str = UNRESTRICTED
) -> ValidityReport:
    """Count same-class cluster collisions per head and simultaneous ones.

    restricted mode lists every same-class pair merged in either head;
    unrestricted mode lists only pairs merged in both heads at once (the
    pairs that make original keypoints undecodable).
    """
    if mode not in (RESTRICTED, UNRESTRICTED):
        raise ValidationError(f"unknown mode {mode!r}")
    if grouping.schema_fingerprint != schema.fingerprint:
        raise ValidationError("grouping was built for a different schema")
    if grouping.n != schema.n:
        raise ValidationError(
            f"label arrays have length {grouping.n}, schema has n={schema.n}"
        )

    shared_reg, shared_heat, shared_both = [], [], []
    for c, rng in schema.class_ranges():
        for a, b in combinations(rng, 2):
            in_reg = grouping.reg_labels[a] == grouping.reg_labels[b]
            in_heat = grouping.heat_labels[a] == grouping.heat_labels[b]
            if in_reg:
                shared_reg.append((c.class_id, a, b))
            if in_heat:
                shared_heat.append((c.class_id, a, b))
            if in_reg and in_heat:
                shared_both.append((c.class_id, a, b))

    restricted_ok = not shared_reg and not shared_heat
    if mode == RESTRICTED:
        both = set(shared_both)
        offending = [
            OffendingPair(cid, a, b, "both" if (cid, a, b) in both else "reg")
            for cid, a, b in shared_reg
        ]
        offending += [
            OffendingPair(cid, a, b, "heat")
            for cid, a, b in shared_heat
            if (cid, a, b) not in set(shared_reg)
        ]
        offending.sort(key=lambda p: (p.class_id, p.kp_a, p.kp_b))
    else:
        offending = [OffendingPair(cid, a, b, "both") for cid, a, b in shared_both]

    return ValidityReport(
        restricted_ok=restricted_ok,
        ambiguous_pairs_total=len(shared_both),
        inconsistent_reg=len(shared_reg),
        inconsistent_heat=len(shared_heat),
        offending_pairs=tuple(offending),
    )


def load_schema(path: str | Path) -> KeypointSchema:
    return KeypointSchema.from_dict(_load_json(path))


def save_schema(schema: KeypointSchema, path: str | Path) -> None:
    Path(path).write_text(json.dumps(schema.to_dict(), indent=2) + "\n")


def load_grouping(path: str | Path) -> Grouping:
    return Grouping.from_dict(_load_json(path))


def save_grouping(grouping: Grouping, path: str | Path) -> None:
    Path(path).write_text(json.dumps(grouping.to_dict(), indent=2) + "\n")


def _load_json(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError:
        raise
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
