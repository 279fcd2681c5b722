"""File formats: label PNGs, OWFM feature maps, descriptor banks, manifests, reports.

OWFM layout (little-endian)::

    b"OWFM" | u16 version | u32 H | u32 W | u32 D | H*W*D float32 (row-major, D innermost)

Bank layout::

    b"OWDB" | u16 version | u32 header length | JSON header | OWFM record

The JSON header lists per-class counts and frozen flags; the embedded OWFM
record has H = 2 (means, variances), W = classes, D = descriptor dim.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .descriptors import DescriptorBank
from .errors import (
    BadMagic,
    DepthUnsupported,
    ManifestError,
    NonFinite,
    OWSegError,
    TruncatedFile,
)

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
OWFM_MAGIC = b"OWFM"
OWFM_VERSION = 1
_OWFM_HEADER = struct.Struct("<4sHIII")
BANK_MAGIC = b"OWDB"
BANK_VERSION = 1
_BANK_HEADER = struct.Struct("<4sHI")


# --------------------------------------------------------------------------
# masks


def write_mask(path, labels) -> None:
    """Write an integer raster as a single-channel 16-bit PNG."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise OWSegError(f"mask must be 2-D, got {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 0xFFFF):
        raise OWSegError("mask labels must fit in 16 bits")
    Image.fromarray(arr.astype(np.uint16)).save(path, format="PNG")


def read_mask(path) -> np.ndarray:
    """Read an 8- or 16-bit single-channel PNG as int64 labels."""
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(8) != PNG_SIGNATURE:
            raise BadMagic(f"{path} is not a PNG file")
    with Image.open(path) as im:
        if im.mode == "L":
            return np.asarray(im, dtype=np.int64)
        if im.mode in ("I;16", "I;16B", "I;16L"):
            return np.asarray(im).astype(np.int64)
        if im.mode == "I":
            arr = np.asarray(im)
            if arr.size and (arr.min() < 0 or arr.max() > 0xFFFF):
                raise DepthUnsupported(f"{path}: values exceed 16 bits")
            return arr.astype(np.int64)
        raise DepthUnsupported(f"{path}: mode {im.mode!r}, need 8/16-bit single channel")


# --------------------------------------------------------------------------
# feature maps


def _owfm_bytes(values) -> bytes:
    arr = np.asarray(values)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise OWSegError(f"feature map must be (H, W, D), got {arr.shape}")
    arr = arr.astype("<f4")
    if not np.all(np.isfinite(arr)):
        raise NonFinite("refusing to write NaN/Inf")
    h, w, d = arr.shape
    return _OWFM_HEADER.pack(OWFM_MAGIC, OWFM_VERSION, h, w, d) + arr.tobytes(order="C")


def _parse_owfm(buf: bytes, where: str) -> np.ndarray:
    if len(buf) < _OWFM_HEADER.size:
        raise TruncatedFile(f"{where}: header truncated")
    magic, version, h, w, d = _OWFM_HEADER.unpack_from(buf)
    if magic != OWFM_MAGIC:
        raise BadMagic(f"{where}: bad magic {magic!r}")
    if version != OWFM_VERSION:
        raise OWSegError(f"{where}: unsupported version {version}")
    n = h * w * d * 4
    payload = buf[_OWFM_HEADER.size:]
    if len(payload) < n:
        raise TruncatedFile(f"{where}: expected {n} payload bytes, got {len(payload)}")
    arr = np.frombuffer(payload[:n], dtype="<f4").reshape(h, w, d)
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{where}: payload contains NaN/Inf")
    return arr.astype(np.float32)


def write_feature_map(path, values) -> None:
    Path(path).write_bytes(_owfm_bytes(values))


def read_feature_map(path) -> np.ndarray:
    """Read an OWFM file as a float32 ``(H, W, D)`` array."""
    return _parse_owfm(Path(path).read_bytes(), str(path))


# --------------------------------------------------------------------------
# descriptor bank


def write_bank(path, bank: DescriptorBank) -> None:
    header = json.dumps({
        "counts": bank.count.tolist(),
        "frozen": bank.frozen.tolist(),
        "dim": bank.dim,
    }, sort_keys=True).encode()
    var = np.nan_to_num(bank.var, nan=0.0)
    body = _owfm_bytes(np.stack([bank.mean, var])) if bank.num_classes else _OWFM_HEADER.pack(
        OWFM_MAGIC, OWFM_VERSION, 2, 0, bank.dim)
    Path(path).write_bytes(_BANK_HEADER.pack(BANK_MAGIC, BANK_VERSION, len(header)) + header + body)


def read_bank(path) -> DescriptorBank:
    buf = Path(path).read_bytes()
    if len(buf) < _BANK_HEADER.size:
        raise TruncatedFile(f"{path}: header truncated")
    magic, version, n = _BANK_HEADER.unpack_from(buf)
    if magic != BANK_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != BANK_VERSION:
        raise OWSegError(f"{path}: unsupported bank version {version}")
    start = _BANK_HEADER.size
    if len(buf) < start + n:
        raise TruncatedFile(f"{path}: JSON header truncated")
    meta = json.loads(buf[start:start + n])
    arr = _parse_owfm(buf[start + n:], str(path)).astype(np.float64)
    counts = np.asarray(meta["counts"], dtype=np.int64)
    if arr.shape != (2, counts.size, meta["dim"]):
        raise OWSegError(f"{path}: body shape {arr.shape} does not match header")
    return DescriptorBank.from_moments(arr[0], arr[1], counts, np.asarray(meta["frozen"], bool))


# --------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class ClassInfo:
    id: int
    name: str
    thing: bool = False
    ignore: bool = False


@dataclass(frozen=True)
class ImageEntry:
    id: str
    semantic: Path
    instance: Path | None = None


@dataclass(frozen=True)
class DatasetManifest:
    version: int
    task: str
    classes: tuple
    images: tuple

    @property
    def ignore_label(self) -> int:
        return next(c.id for c in self.classes if c.ignore)

    @property
    def thing_classes(self) -> frozenset:
        return frozenset(c.id for c in self.classes if c.thing)


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a JSON manifest; referenced files must exist."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest {path} not found") from None
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: invalid JSON ({e})") from None
    root = path.parent
    try:
        classes = tuple(ClassInfo(int(c["id"]), str(c.get("name", c["id"])),
                                  bool(c.get("thing", False)), bool(c.get("ignore", False)))
                        for c in doc["classes"])
        images = []
        for im in doc["images"]:
            inst = im.get("instance")
            images.append(ImageEntry(str(im["id"]), root / im["semantic"],
                                     root / inst if inst else None))
        manifest = DatasetManifest(int(doc.get("version", 1)), str(doc["task"]),
                                   classes, tuple(images))
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"{path}: malformed manifest ({e})") from None
    ids = [c.id for c in classes]
    if len(set(ids)) != len(ids):
        raise ManifestError(f"{path}: duplicate class ids")
    if sum(c.ignore for c in classes) != 1:
        raise ManifestError(f"{path}: exactly one ignore class required")
    img_ids = [im.id for im in images]
    if len(set(img_ids)) != len(img_ids):
        raise ManifestError(f"{path}: duplicate image ids")
    for im in images:
        for p in (im.semantic, im.instance):
            if p is not None and not p.exists():
                raise ManifestError(f"{path}: missing file {p}")
    return manifest


def write_manifest(path, task: str, classes, images) -> None:
    """``classes``: iterable of ClassInfo; ``images``: dicts with id/semantic/instance."""
    doc = {
        "version": 1,
        "task": task,
        "classes": [
            {"id": c.id, "name": c.name, "thing": c.thing, "ignore": c.ignore} for c in classes
        ],
        "images": list(images),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# reports


def format_report(report: dict) -> str:
    """Flat JSON object, sorted keys, floats at 6 decimals, undefined -> null."""
    lines = []
    for key in sorted(report):
        v = report[key]
        if v is None or (isinstance(v, float) and math.isnan(v)):
            s = "null"
        elif isinstance(v, (int, np.integer)) and not isinstance(v, bool):
            s = str(int(v))
        else:
            s = f"{float(v):.6f}"
        lines.append(f"  {json.dumps(key)}: {s}")
    return "{\n" + ",\n".join(lines) + "\n}\n"


def write_report(path, report: dict) -> None:
    Path(path).write_text(format_report(report))
