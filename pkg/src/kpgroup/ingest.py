"""Bit-exact readers/writers: NPY tensors, annotation JSON, decode manifests.

The tensor container is a strict subset of NPY v1.0: little-endian f32/f64,
C order, no pickled payloads.  Anything outside the subset is rejected so
downstream code never has to reason about layout.
"""

from __future__ import annotations

import ast
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

_MAGIC = b"\x93NUMPY"
_VERSION = b"\x01\x00"
_ALIGN = 64
_DESCRS = {"<f4": np.float32, "<f8": np.float64}

HEAD_NAMES = (
    "center_heatmap",
    "center_offset",
    "object_size",
    "kp_regression",
    "kp_heatmap",
    "kp_offset",
)


def write_tensor(array: np.ndarray, path: str | Path) -> None:
    """Write a float32/float64 array as NPY v1.0 (C order, little endian)."""
    array = np.asarray(array)
    if array.dtype == np.float32:
        descr = "<f4"
    elif array.dtype == np.float64:
        descr = "<f8"
    else:
        raise ValidationError(f"unsupported dtype {array.dtype}; use f32 or f64")
    if array.ndim < 1:
        raise ValidationError("0-d tensors are not supported")

    header = "{'descr': '%s', 'fortran_order': False, 'shape': %s, }" % (
        descr,
        str(tuple(int(d) for d in array.shape)),
    )
    # Pad with spaces so magic+version+length+header is 64-byte aligned,
    # newline-terminated (same layout numpy itself emits for v1.0).
    hlen = len(header) + 1
    pad = _ALIGN - ((len(_MAGIC) + 2 + 2 + hlen) % _ALIGN)
    header = header + " " * pad + "\n"

    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_VERSION)
        fh.write(struct.pack("<H", len(header)))
        fh.write(header.encode("latin1"))
        fh.write(np.ascontiguousarray(array).tobytes("C"))


def read_tensor(path: str | Path, allow_non_finite: bool = False) -> np.ndarray:
    """Read an NPY v1.0 file within the supported subset.

    Rejects: wrong magic, versions other than 1.0, fortran order, dtypes
    other than '<f4'/'<f8', and payload size mismatches.  NaN/Inf values
    are rejected unless allow_non_finite is set.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 10 or blob[:6] != _MAGIC:
        raise FormatError(f"{path}: bad magic, not an NPY file")
    if blob[6:8] != _VERSION:
        raise FormatError(f"{path}: unsupported NPY version {blob[6]}.{blob[7]}")
    (hlen,) = struct.unpack("<H", blob[8:10])
    if len(blob) < 10 + hlen:
        raise FormatError(f"{path}: truncated header")
    header = blob[10 : 10 + hlen].decode("latin1")

    try:
        meta = ast.literal_eval(header)
    except (ValueError, SyntaxError) as exc:
        raise FormatError(f"{path}: unparseable header") from exc
    if not isinstance(meta, dict) or set(meta) != {"descr", "fortran_order", "shape"}:
        raise FormatError(f"{path}: unexpected header fields")
    if meta["fortran_order"]:
        raise FormatError(f"{path}: fortran-order layout is not supported")
    descr = meta["descr"]
    if descr not in _DESCRS:
        raise FormatError(f"{path}: unsupported dtype {descr!r}; expected <f4 or <f8")
    shape = meta["shape"]
    if (
        not isinstance(shape, tuple)
        or len(shape) < 1
        or not all(isinstance(d, int) and d >= 0 for d in shape)
    ):
        raise FormatError(f"{path}: bad shape {shape!r}")

    dtype = np.dtype(_DESCRS[descr]).newbyteorder("<")
    count = int(np.prod(shape, dtype=np.int64))
    payload = blob[10 + hlen :]
    if len(payload) != count * dtype.itemsize:
        raise FormatError(
            f"{path}: payload has {len(payload)} bytes, "
            f"expected {count * dtype.itemsize}"
        )
    array = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if not allow_non_finite and count and not np.all(np.isfinite(array)):
        raise ValidationError(f"{path}: tensor contains NaN/Inf")
    return array


@dataclass(frozen=True)
class ImageInfo:
    image_id: int
    width: int
    height: int


@dataclass(frozen=True)
class ObjectAnn:
    image_id: int
    class_id: int
    bbox: tuple[float, float, float, float]  # x, y, w, h in pixels
    keypoints: tuple[tuple[float, float, int], ...]  # (x, y, v) per local index

    def visible(self) -> list[tuple[int, float, float]]:
        """(local index, x, y) for keypoints with v > 0."""
        return [(i, x, y) for i, (x, y, v) in enumerate(self.keypoints) if v > 0]


@dataclass(frozen=True)
class AnnotationSet:
    images: tuple[ImageInfo, ...]
    objects: tuple[ObjectAnn, ...]


def read_annotations(path: str | Path, schema) -> AnnotationSet:
    """Parse the COCO-style annotation subset and validate it against schema."""
    data = _load_json(path)
    kp_counts = {c.class_id: c.kp_count for c in schema.classes}

    try:
        images = tuple(
            ImageInfo(int(im["id"]), int(im["width"]), int(im["height"]))
            for im in data["images"]
        )
        raw_objects = data["annotations"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed annotation document: {exc}") from exc

    objects = []
    for ann in raw_objects:
        try:
            class_id = int(ann["category_id"])
            image_id = int(ann["image_id"])
            bbox = tuple(float(v) for v in ann["bbox"])
            flat = list(ann["keypoints"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed annotation entry: {exc}") from exc
        if class_id not in kp_counts:
            raise ValidationError(f"{path}: unknown class id {class_id}")
        if len(bbox) != 4 or bbox[2] <= 0 or bbox[3] <= 0:
            raise ValidationError(f"{path}: nonpositive bbox {bbox} (class {class_id})")
        if len(flat) != 3 * kp_counts[class_id]:
            raise ValidationError(
                f"{path}: keypoint array length {len(flat)} != "
                f"{3 * kp_counts[class_id]} for class {class_id}"
            )
        triplets = []
        for i in range(0, len(flat), 3):
            x, y, v = flat[i], flat[i + 1], flat[i + 2]
            if v not in (0, 1, 2):
                raise ValidationError(f"{path}: visibility flag {v!r} not in {{0,1,2}}")
            triplets.append((float(x), float(y), int(v)))
        objects.append(ObjectAnn(image_id, class_id, bbox, tuple(triplets)))

    return AnnotationSet(images, tuple(objects))


def annotations_to_json(aset: AnnotationSet) -> str:
    """Canonical serialization: fixed key order, integral values stay integers."""

    def num(v):
        return int(v) if float(v).is_integer() else float(v)

    doc = {
        "images": [
            {"id": im.image_id, "width": im.width, "height": im.height}
            for im in aset.images
        ],
        "annotations": [
            {
                "image_id": o.image_id,
                "category_id": o.class_id,
                "bbox": [num(v) for v in o.bbox],
                "keypoints": [num(v) for xyv in o.keypoints for v in xyv],
            }
            for o in aset.objects
        ],
    }
    return json.dumps(doc, indent=1)


def write_annotations(aset: AnnotationSet, path: str | Path) -> None:
    Path(path).write_text(annotations_to_json(aset) + "\n")


@dataclass(frozen=True)
class ManifestEntry:
    """Head tensor files for one image, plus optional ground truth."""

    image_id: int
    head_paths: dict[str, Path]
    truth_path: Path | None = None


@dataclass(frozen=True)
class Manifest:
    schema_path: Path
    grouping_path: Path
    stride: int
    entries: tuple[ManifestEntry, ...]


def read_manifest(path: str | Path) -> Manifest:
    """Load a decode manifest; all paths resolve relative to the manifest."""
    path = Path(path)
    data = _load_json(path)
    base = path.parent
    try:
        schema_path = base / data["schema"]
        grouping_path = base / data["grouping"]
        stride = int(data.get("stride", 4))
        entries = []
        for im in data["images"]:
            heads = {name: base / im[name] for name in HEAD_NAMES}
            truth = base / im["truth"] if "truth" in im else None
            entries.append(ManifestEntry(int(im["id"]), heads, truth))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed manifest: {exc}") from exc
    return Manifest(schema_path, grouping_path, stride, tuple(entries))


def write_manifest(
    out_path: str | Path,
    schema_file: str,
    grouping_file: str,
    images: list[dict],
    stride: int = 4,
) -> None:
    """Write a manifest with paths already relative to out_path's directory."""
    doc = {
        "schema": schema_file,
        "grouping": grouping_file,
        "stride": stride,
        "images": images,
    }
    Path(out_path).write_text(json.dumps(doc, indent=2) + "\n")


def _load_json(path: str | Path):
    try:
        text = Path(path).read_text()
    except OSError:
        raise
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
