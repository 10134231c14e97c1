"""Binary containers for segmentation maps and depth maps, plus PNG export.

Segmap: magic `SOFS`, u32 version=1, u32 H, u32 W, u16 K, then H*W class
bytes row-major. Depth: magic `SOFD`, u32 H, u32 W, u32 reserved, then
H*W float32 values row-major. All integers little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .scene import PALETTE

SEGMAP_MAGIC = b"SOFS"
DEPTH_MAGIC = b"SOFD"
SEGMAP_VERSION = 1


class FormatError(ValueError):
    """Raised on malformed container files."""


def save_segmap(path, seg: np.ndarray, num_classes: int) -> None:
    seg = np.asarray(seg)
    if seg.ndim != 2 or seg.dtype != np.uint8:
        raise FormatError(f"segmap must be 2-d uint8, got {seg.shape} {seg.dtype}")
    if seg.max(initial=0) >= num_classes:
        raise FormatError("segmap contains class ids outside [0, K)")
    h, w = seg.shape
    header = SEGMAP_MAGIC + struct.pack("<IIIH", SEGMAP_VERSION, h, w, num_classes)
    Path(path).write_bytes(header + seg.tobytes())


def load_segmap(path) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    if len(raw) < 18 or raw[:4] != SEGMAP_MAGIC:
        raise FormatError(f"not a segmap container: {path}")
    version, h, w, k = struct.unpack("<IIIH", raw[4:18])
    if version != SEGMAP_VERSION:
        raise FormatError(f"unsupported segmap version {version}")
    body = raw[18:]
    if len(body) != h * w:
        raise FormatError(f"segmap payload length {len(body)} != {h}*{w}")
    seg = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    if seg.max(initial=0) >= k:
        raise FormatError("segmap contains class ids outside [0, K)")
    return seg.copy(), k


def save_depth(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype=np.float32)
    if depth.ndim != 2:
        raise FormatError(f"depth must be 2-d, got {depth.shape}")
    h, w = depth.shape
    header = DEPTH_MAGIC + struct.pack("<III", h, w, 0)
    Path(path).write_bytes(header + depth.astype("<f4").tobytes())


def load_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != DEPTH_MAGIC:
        raise FormatError(f"not a depth container: {path}")
    h, w, _ = struct.unpack("<III", raw[4:16])
    body = raw[16:]
    if len(body) != h * w * 4:
        raise FormatError(f"depth payload length {len(body)} != {h}*{w}*4")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32)


def segmap_to_png(path, seg: np.ndarray) -> None:
    """Palette render of a class map; classes beyond the palette wrap."""
    seg = np.asarray(seg)
    rgb = PALETTE[seg % len(PALETTE)]
    Image.fromarray(rgb, mode="RGB").save(path)


def write_manifest(path, entries: list[tuple[str, str, str, str]]) -> None:
    """One line per view: `scene_id view_id segmap_path camera_path`."""
    lines = [" ".join(e) for e in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[tuple[str, str, str, str]]:
    entries = []
    for ln in Path(path).read_text().strip().splitlines():
        parts = ln.split()
        if len(parts) != 4:
            raise FormatError(f"manifest line must have 4 fields: {ln!r}")
        entries.append(tuple(parts))
    return entries
