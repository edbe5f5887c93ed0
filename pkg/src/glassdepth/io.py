"""File formats.

Depth PNG
    Single-channel 16-bit PNG, depth in millimetres, 0 = invalid.

Float array container (``.dpf``)
    16-byte header: magic ``b"DPF1"`` then H, W, channels as little-endian
    uint32; followed by H*W*channels little-endian float32 values in
    row-major (H, W, channels) order.

Checkpoint container (``.ckpt``)
    magic ``b"GDCK"``, uint32 format version, uint32 header length N, then N
    bytes of UTF-8 JSON ``{"kind", "config", "extra", "tensors": [{"name",
    "shape", "offset", "nbytes"}]}``, then the raw little-endian float32
    tensor data. Written byte-for-byte deterministically.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import cv2
import numpy as np

from .geometry import DepthMap

FLOAT_MAGIC = b"DPF1"
CKPT_MAGIC = b"GDCK"
CKPT_VERSION = 1


class FormatError(ValueError):
    pass


def write_depth_png(path, depth: DepthMap) -> None:
    mm = np.rint(depth.filled(0.0) * 1000.0)
    if mm.max(initial=0) > 65535:
        raise FormatError("depth exceeds the 16-bit millimetre range")
    mm[~depth.validity] = 0
    if not cv2.imwrite(str(path), mm.astype(np.uint16)):
        raise OSError(f"could not write {path}")


def read_depth_png(path, scale: float = 1e-3) -> DepthMap:
    img = cv2.imread(str(path), cv2.IMREAD_ANYDEPTH)
    if img is None:
        raise FormatError(f"unreadable depth image {path}")
    if img.ndim != 2:
        raise FormatError(f"{path} is not single-channel")
    return DepthMap.from_sensor(img.astype(np.float64) * scale)


def write_float_array(path, array) -> None:
    a = np.asarray(array, dtype="<f4")
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise FormatError("float container holds (H, W) or (H, W, C) arrays")
    h, w, c = a.shape
    with open(path, "wb") as f:
        f.write(FLOAT_MAGIC + struct.pack("<3I", h, w, c))
        f.write(np.ascontiguousarray(a).tobytes())


def read_float_array(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != FLOAT_MAGIC:
        raise FormatError(f"{path}: bad magic")
    h, w, c = struct.unpack("<3I", data[4:16])
    body = data[16:]
    if len(body) != 4 * h * w * c:
        raise FormatError(f"{path}: expected {4 * h * w * c} data bytes, found {len(body)}")
    a = np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float32)
    return a[..., 0] if c == 1 else a


def save_checkpoint(path, kind: str, tensors: dict[str, np.ndarray], config: dict, extra: dict | None = None) -> str:
    """Write a checkpoint and return the sha256 of its bytes."""
    index, blobs, offset = [], [], 0
    for name in tensors:
        a = np.asarray(tensors[name], dtype="<f4", order="C")
        blob = a.tobytes()
        index.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"kind": kind, "config": config, "extra": extra or {}, "tensors": index}, sort_keys=True
    ).encode()
    payload = CKPT_MAGIC + struct.pack("<2I", CKPT_VERSION, len(header)) + header + b"".join(blobs)
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def load_checkpoint(path, kind: str | None = None):
    """Return ``(tensors, config, extra)``."""
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack("<2I", data[4:12])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + hlen])
    if kind is not None and header["kind"] != kind:
        raise FormatError(f"{path}: expected a {kind} checkpoint, found {header['kind']}")
    base = 12 + hlen
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        raw = data[start : start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise FormatError(f"{path}: truncated tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
    return tensors, header["config"], header["extra"]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tree_digest(root) -> str:
    """Digest over every file path and content under ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
