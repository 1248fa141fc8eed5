"""On-disk formats: the HGM1 tensor blob, manifest directories, clouds and annotations.

A blob is ``b"HGM1"``, a u8 dtype code (0 = f32, 1 = i32), a u8 ndim, two zero
bytes, ``ndim`` little-endian u32 dims, then the row-major little-endian payload.
A manifest directory holds ``manifest.json`` plus one ``<name>.hgm`` per array.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .correspondence import DemoAnnotation
from .errors import HGMError
from .features import ObjectCategory
from .geometry import PointCloud, Rotation3

MAGIC = b"HGM1"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}
CODES = {np.dtype("<f4"): 0, np.dtype("<i4"): 1}
SCHEMA_VERSION = 1


def encode_blob(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype.kind == "f":
        arr = arr.astype("<f4")
    elif arr.dtype.kind in "iub":
        arr = arr.astype("<i4")
    else:
        raise HGMError("bad-dtype", str(arr.dtype))
    if arr.ndim > 255:
        raise HGMError("bad-shape", f"ndim {arr.ndim}")
    header = MAGIC + struct.pack("<BBxx", CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def decode_blob(data: bytes) -> np.ndarray:
    if len(data) < 8 or data[:4] != MAGIC:
        raise HGMError("bad-blob", "missing HGM1 magic")
    code, ndim, r0, r1 = struct.unpack_from("<BBBB", data, 4)
    if code not in DTYPES or r0 or r1:
        raise HGMError("bad-blob", f"dtype code {code}, reserved bytes {r0},{r1}")
    if len(data) < 8 + 4 * ndim:
        raise HGMError("bad-blob", "truncated header")
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    dtype = DTYPES[code]
    expected = 8 + 4 * ndim + dtype.itemsize * int(np.prod(shape, dtype=np.int64))
    if len(data) != expected:
        raise HGMError("bad-blob", f"length {len(data)} != {expected}")
    return np.frombuffer(data, dtype=dtype, offset=8 + 4 * ndim).reshape(shape).copy()


def read_blob_header(path: Path) -> tuple[np.dtype, tuple[int, ...]]:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != MAGIC:
            raise HGMError("bad-blob", f"{path}: missing HGM1 magic")
        code, ndim = head[4], head[5]
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    if code not in DTYPES:
        raise HGMError("bad-blob", f"{path}: dtype code {code}")
    return DTYPES[code], tuple(shape)


def write_blob(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_blob(array))


def read_blob(path) -> np.ndarray:
    return decode_blob(Path(path).read_bytes())


def dump_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_manifest_dir(directory, manifest: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> None:
    """Write arrays as blobs plus ``manifest.json`` with an ``arrays`` index (name -> file, dtype, shape)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    index = {}
    for name in sorted(arrays):
        blob = encode_blob(arrays[name])
        fname = f"{name}.hgm"
        (d / fname).write_bytes(blob)
        code, ndim = blob[4], blob[5]
        shape = list(struct.unpack_from(f"<{ndim}I", blob, 8))
        index[name] = {"file": fname, "dtype": "f32" if code == 0 else "i32", "shape": shape}
    body = dict(manifest)
    body["schema_version"] = SCHEMA_VERSION
    body["arrays"] = index
    (d / "manifest.json").write_text(dump_json(body), encoding="utf-8")


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise HGMError("missing-manifest", str(path))
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise HGMError("bad-manifest", f"{path}: {err}") from err
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise HGMError("bad-manifest", f"schema version {manifest.get('schema_version')!r}")
    return manifest


def validate_manifest_dir(directory) -> dict:
    """Check every indexed blob exists and its header matches the declared dtype and shape."""
    d = Path(directory)
    manifest = read_manifest(d)
    for name, entry in manifest.get("arrays", {}).items():
        path = d / entry["file"]
        if not path.is_file():
            raise HGMError("missing-blob", f"{name}: {path}")
        dtype, shape = read_blob_header(path)
        want = DTYPES[0] if entry["dtype"] == "f32" else DTYPES[1]
        if dtype != want or list(shape) != list(entry["shape"]):
            raise HGMError("shape-mismatch", f"{name}: header {dtype}{list(shape)} vs manifest "
                                             f"{entry['dtype']}{entry['shape']}")
        expected = 8 + 4 * len(shape) + dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if os.path.getsize(path) != expected:
            raise HGMError("shape-mismatch", f"{name}: file length {os.path.getsize(path)} != {expected}")
    return manifest


def read_manifest_dir(directory) -> tuple[dict, dict[str, np.ndarray]]:
    d = Path(directory)
    manifest = validate_manifest_dir(d)
    arrays = {name: read_blob(d / entry["file"]) for name, entry in manifest["arrays"].items()}
    return manifest, arrays


# ---------------------------------------------------------- clouds, annotations

def cloud_arrays(cloud: PointCloud, prefix: str = "") -> dict[str, np.ndarray]:
    out = {f"{prefix}points": cloud.points}
    for name, values in cloud.payloads.items():
        out[f"{prefix}payload.{name}"] = values
    return out


def cloud_from_arrays(arrays: Mapping[str, np.ndarray], prefix: str = "") -> PointCloud:
    key = f"{prefix}points"
    if key not in arrays:
        raise HGMError("bad-cloud", f"missing {key!r}")
    payloads = {}
    tag = f"{prefix}payload."
    for name, values in arrays.items():
        if name.startswith(tag):
            v = np.asarray(values)
            payloads[name[len(tag):]] = v.astype(np.float64) if v.dtype.kind == "f" else v
    return PointCloud(np.asarray(arrays[key], dtype=np.float64), payloads)


def write_cloud(directory, cloud: PointCloud, extra: Mapping[str, Any] | None = None) -> None:
    write_manifest_dir(directory, {"kind": "cloud", **(extra or {})}, cloud_arrays(cloud))


def read_cloud(directory) -> PointCloud:
    _, arrays = read_manifest_dir(directory)
    return cloud_from_arrays(arrays)


def annotation_to_json(ann: DemoAnnotation) -> dict:
    return {
        "manipulation_index": int(ann.manipulation_index),
        "reference_indices": [int(i) for i in ann.reference_indices],
        "category": ann.category.value,
        "grasp_orientation": [float(x) for x in ann.grasp_orientation.as_array()],
        "fixed_orientation": None if ann.fixed_orientation is None
        else [float(x) for x in ann.fixed_orientation.as_array()],
    }


def annotation_from_json(meta: Mapping[str, Any], cloud: PointCloud) -> DemoAnnotation:
    try:
        fixed = meta.get("fixed_orientation")
        return DemoAnnotation(
            demo_cloud=cloud,
            manipulation_index=int(meta["manipulation_index"]),
            reference_indices=tuple(meta.get("reference_indices", ())),
            category=ObjectCategory(meta["category"]),
            grasp_orientation=Rotation3.from_array(meta["grasp_orientation"]),
            fixed_orientation=None if fixed is None else Rotation3.from_array(fixed),
        )
    except (KeyError, ValueError, TypeError) as err:
        if isinstance(err, HGMError):
            raise
        raise HGMError("bad-annotation", str(err)) from err


def write_annotation(directory, ann: DemoAnnotation) -> None:
    write_manifest_dir(directory, {"kind": "annotation", "annotation": annotation_to_json(ann)},
                       cloud_arrays(ann.demo_cloud))


def read_annotation(directory) -> DemoAnnotation:
    manifest, arrays = read_manifest_dir(directory)
    if "annotation" not in manifest:
        raise HGMError("bad-annotation", f"{directory}: manifest has no annotation block")
    return annotation_from_json(manifest["annotation"], cloud_from_arrays(arrays))
