"""MXT1 tensor files and calibration bundles.

MXT1 layout (all integers little-endian)::

    magic     4 bytes  b"MXT1"
    dtype     u8       0 = f32 (others reserved)
    ndim      u8
    reserved  u16      must be 0
    dims      ndim x u64
    payload   prod(dims) x f32, row-major

A calibration bundle is a directory holding ``manifest.json`` plus the tensor
files it references.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BundleError, TensorFormatError

MAGIC = b"MXT1"
DTYPE_F32 = 0
HEADER = struct.Struct("<4sBBH")
ROLES = ("activation", "weight", "query", "key", "value")
_MAX_ELEMENTS = 1 << 48


def encode_tensor_bytes(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    if t.ndim == 0 or t.ndim > 255:
        raise TensorFormatError(f"cannot store a {t.ndim}-d tensor", "bad_header", "ndim")
    if any(d < 1 for d in t.shape):
        raise TensorFormatError(f"all dims must be >= 1, got {t.shape}", "bad_header", "dims")
    data = np.ascontiguousarray(t, dtype="<f4")
    head = HEADER.pack(MAGIC, DTYPE_F32, t.ndim, 0)
    dims = struct.pack(f"<{t.ndim}Q", *t.shape)
    return head + dims + data.tobytes()


def decode_tensor_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < HEADER.size:
        raise TensorFormatError("file shorter than the 8-byte header", "truncated_header", "magic")
    magic, dtype, ndim, reserved = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", "bad_magic", "magic")
    if dtype != DTYPE_F32:
        raise TensorFormatError(f"unsupported dtype code {dtype}", "bad_header", "dtype")
    if ndim == 0:
        raise TensorFormatError("ndim must be >= 1", "bad_header", "ndim")
    if reserved != 0:
        raise TensorFormatError(f"reserved field is {reserved}, expected 0", "bad_header", "reserved")
    off = HEADER.size
    if len(buf) < off + 8 * ndim:
        raise TensorFormatError("header truncated inside dims", "truncated_header", "dims")
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    count = 1
    for d in dims:
        if d == 0:
            raise TensorFormatError("zero-sized dimension", "bad_header", "dims")
        count *= d
        if count > _MAX_ELEMENTS:
            raise TensorFormatError(f"dims {dims} overflow the element limit", "dim_overflow", "dims")
    expected = off + 4 * count
    if len(buf) < expected:
        raise TensorFormatError(
            f"payload has {(len(buf) - off) // 4} floats, header promises {count}",
            "truncated_payload",
            "payload",
        )
    if len(buf) > expected:
        raise TensorFormatError(f"{len(buf) - expected} trailing bytes after payload", "trailing_data", "payload")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
    if not np.isfinite(data).all():
        raise TensorFormatError("payload contains NaN or Inf", "non_finite", "payload")
    return data.astype(np.float32).reshape(dims)


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    """Load an MXT1 file as a float32 array."""
    return decode_tensor_bytes(Path(path).read_bytes())


def write_tensor(t: np.ndarray, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_tensor_bytes(t))


@dataclass(frozen=True)
class BundleEntry:
    layer: str
    timestep: int
    role: str
    path: str


@dataclass
class CalibrationBundle:
    root: Path
    entries: dict[tuple[str, int, str], BundleEntry] = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.entries)

    def layers(self) -> list[str]:
        return sorted({k[0] for k in self.entries})

    def timesteps(self, layer: str, role: str | None = None) -> list[int]:
        return sorted({t for (l, t, r) in self.entries if l == layer and (role is None or r == role)})

    def has(self, layer: str, timestep: int, role: str) -> bool:
        return (layer, timestep, role) in self.entries

    def path(self, layer: str, timestep: int, role: str) -> Path:
        try:
            entry = self.entries[(layer, timestep, role)]
        except KeyError:
            raise BundleError(f"bundle has no {role} tensor for {layer!r} at timestep {timestep}", "missing_entry")
        return self.root / entry.path

    def load(self, layer: str, timestep: int, role: str) -> np.ndarray:
        key = (layer, timestep, role)
        if key not in self._cache:
            t = read_tensor(self.path(layer, timestep, role))
            t.flags.writeable = False
            self._cache[key] = t
        return self._cache[key]

    def load_weight(self, layer: str, timestep: int) -> np.ndarray:
        """Weights are timestep-invariant; fall back to the timestep-0 copy."""
        if self.has(layer, timestep, "weight"):
            return self.load(layer, timestep, "weight")
        return self.load(layer, 0, "weight")


def load_bundle(root: str | os.PathLike) -> CalibrationBundle:
    root = Path(root)
    manifest = root / "manifest.json"
    if not manifest.is_file():
        raise BundleError(f"{manifest} not found", "missing_manifest")
    try:
        doc = json.loads(manifest.read_text())
    except json.JSONDecodeError as exc:
        raise BundleError(f"manifest.json is not valid JSON: {exc}", "bad_manifest")
    raw = doc.get("entries") if isinstance(doc, dict) else None
    if not isinstance(raw, list):
        raise BundleError('manifest.json must be an object with an "entries" list', "bad_manifest")

    bundle = CalibrationBundle(root)
    for i, item in enumerate(raw):
        try:
            entry = BundleEntry(str(item["layer"]), item["timestep"], str(item["role"]), str(item["path"]))
        except (KeyError, TypeError):
            raise BundleError(f"entry {i} needs layer, timestep, role and path", "bad_manifest")
        if not isinstance(entry.timestep, int) or isinstance(entry.timestep, bool) or entry.timestep < 0:
            raise BundleError(f"entry {i}: timestep must be an integer >= 0", "bad_manifest")
        if entry.role not in ROLES:
            raise BundleError(f"entry {i}: unknown role {entry.role!r}", "bad_manifest")
        key = (entry.layer, entry.timestep, entry.role)
        if key in bundle.entries:
            raise BundleError(f"duplicate manifest key {key}", "duplicate_key")
        if not (root / entry.path).is_file():
            raise BundleError(f"entry {i}: file {entry.path} does not exist", "missing_file")
        t = read_tensor(root / entry.path)
        t.flags.writeable = False
        bundle.entries[key] = entry
        bundle._cache[key] = t

    for layer in bundle.layers():
        ts = bundle.timesteps(layer)
        if ts != list(range(len(ts))):
            raise BundleError(f"timesteps of {layer!r} are not contiguous from 0: {ts}", "bad_timesteps")
    return bundle


def write_manifest(root: str | os.PathLike, entries: list[BundleEntry]) -> None:
    doc = {"entries": [{"layer": e.layer, "timestep": e.timestep, "role": e.role, "path": e.path} for e in entries]}
    Path(root, "manifest.json").write_text(json.dumps(doc, indent=2) + "\n")
