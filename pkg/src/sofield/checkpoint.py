"""Named-tensor binary container used for checkpoints, GMM, and PCA state.

Layout: 4-byte magic, u32 version, u32 tensor count, then per tensor
{u16 name length, name bytes, u8 ndim, u32 dims..., float32 LE values}.
Non-tensor payloads (config echo, step counter, JSON blobs) ride along as
byte-valued float32 tensors under `meta/` names.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"SOFC"
GMM_MAGIC = b"SOFG"
PCA_MAGIC = b"SOFP"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or wrong-version container."""


def _encode_tensor(name: str, arr: np.ndarray) -> bytes:
    nm = name.encode("utf-8")
    if len(nm) > 0xFFFF:
        raise CheckpointError(f"tensor name too long: {name[:40]}...")
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim > 255:
        raise CheckpointError("tensor rank exceeds container limit")
    head = struct.pack("<H", len(nm)) + nm + struct.pack("<B", arr.ndim)
    head += b"".join(struct.pack("<I", d) for d in arr.shape)
    return head + arr.tobytes()


def save_tensors(path, tensors: dict[str, np.ndarray], magic: bytes = CKPT_MAGIC) -> None:
    """Write the container atomically (temp file + rename)."""
    blob = magic + struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        blob += _encode_tensor(name, arr)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_tensors(path, magic: bytes = CKPT_MAGIC) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != magic:
        raise CheckpointError(f"bad magic in {path} (expected {magic!r})")
    version, count = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    out: dict[str, np.ndarray] = {}
    off = 12
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode("utf-8")
            if len(raw[off:off + nlen]) != nlen:
                raise CheckpointError("truncated container")
            off += nlen
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            n = int(np.prod(dims)) if ndim else 1
            body = raw[off:off + 4 * n]
            if len(body) != 4 * n:
                raise CheckpointError("truncated container")
            off += 4 * n
            out[name] = np.frombuffer(body, dtype="<f4").reshape(dims).copy()
    except struct.error as exc:
        raise CheckpointError(f"truncated container: {exc}") from exc
    if off != len(raw):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def pack_json(obj) -> np.ndarray:
    """Encode a JSON-serializable object as a byte-valued float32 vector."""
    data = json.dumps(obj, sort_keys=True).encode("utf-8")
    return np.frombuffer(data, dtype=np.uint8).astype(np.float32)


def unpack_json(arr: np.ndarray):
    data = bytes(np.asarray(arr).astype(np.uint8))
    return json.loads(data.decode("utf-8"))
