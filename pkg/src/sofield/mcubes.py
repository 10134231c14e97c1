"""Marching-cubes isosurface extraction over [-1,1]^3 grids.

Classic 256-case table walk with linear edge interpolation. Vertices are
deduplicated across neighboring cells by global edge key, so shared edges
produce a single vertex and the mesh is watertight away from the volume
boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._mc_tables import EDGE_TABLE, TRI_TABLE
from .tensor import Tensor, no_grad

# Corner k of a cell at integer coords (x,y,z): bottom face 0-3 circularly,
# top face 4-7 in the same order.
CORNER_OFFSETS = np.array(
    [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
     (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)], dtype=np.int64)

# Edge e connects CORNER_OFFSETS[EDGE_CORNERS[e]].
EDGE_CORNERS = np.array(
    [(0, 1), (1, 2), (2, 3), (3, 0),
     (4, 5), (5, 6), (6, 7), (7, 4),
     (0, 4), (1, 5), (2, 6), (3, 7)], dtype=np.int64)

# Global identity of each cube-local edge: (corner offset, axis). Two cells
# sharing an edge derive the same key, which drives vertex dedup.
_EDGE_KEY = []
for _a, _b in EDGE_CORNERS:
    lo = np.minimum(CORNER_OFFSETS[_a], CORNER_OFFSETS[_b])
    axis = int(np.argmax(CORNER_OFFSETS[_a] != CORNER_OFFSETS[_b]))
    _EDGE_KEY.append((lo[0], lo[1], lo[2], axis))


@dataclass
class TriMesh:
    vertices: np.ndarray   # (V, 3) float64
    triangles: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")
        if len(self.vertices) and not np.isfinite(self.vertices).all():
            raise ValueError("mesh contains non-finite vertices")


def marching_cubes(values: np.ndarray, origin, spacing, level: float = 0.0) -> TriMesh:
    """Extract the isosurface ``values == level`` from a dense grid.

    ``values[i,j,k]`` samples the scalar field at ``origin + (i,j,k)*spacing``
    (axis order x, y, z). Points with value below the level count as inside.
    """
    values = np.asarray(values, dtype=np.float64)
    g = values - level
    origin = np.asarray(origin, dtype=np.float64)
    spacing = np.asarray(spacing, dtype=np.float64) * np.ones(3)
    inside = g < 0.0

    # Cells worth visiting: any corner sign differs.
    c = inside
    occ8 = (c[:-1, :-1, :-1].astype(np.uint8) + c[1:, :-1, :-1] + c[1:, 1:, :-1]
            + c[:-1, 1:, :-1] + c[:-1, :-1, 1:] + c[1:, :-1, 1:]
            + c[1:, 1:, 1:] + c[:-1, 1:, 1:])
    active = np.argwhere((occ8 > 0) & (occ8 < 8))

    verts: list[np.ndarray] = []
    vert_ids: dict[tuple, int] = {}
    tris: list[tuple[int, int, int]] = []

    for cx, cy, cz in active:
        corner_idx = CORNER_OFFSETS + (cx, cy, cz)
        vals = g[corner_idx[:, 0], corner_idx[:, 1], corner_idx[:, 2]]
        case = 0
        for k in range(8):
            if vals[k] < 0.0:
                case |= 1 << k
        mask = EDGE_TABLE[case]
        if mask == 0:
            continue
        edge_vid = [-1] * 12
        for e in range(12):
            if not (mask >> e) & 1:
                continue
            ko = _EDGE_KEY[e]
            key = (int(cx + ko[0]), int(cy + ko[1]), int(cz + ko[2]), ko[3])
            vid = vert_ids.get(key)
            if vid is None:
                a, b = EDGE_CORNERS[e]
                pa = origin + corner_idx[a] * spacing
                pb = origin + corner_idx[b] * spacing
                va, vb = vals[a], vals[b]
                t = -va / (vb - va)
                verts.append(pa + t * (pb - pa))
                vid = len(verts) - 1
                vert_ids[key] = vid
            edge_vid[e] = vid
        tt = TRI_TABLE[case]
        for i in range(0, len(tt), 3):
            # Swap winding so normals point from inside (negative) out.
            tris.append((edge_vid[tt[i]], edge_vid[tt[i + 2]], edge_vid[tt[i + 1]]))

    if not verts:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return TriMesh(np.asarray(verts), np.asarray(tris, dtype=np.int64))


def foreground_grid(hyper, classifier, z: Tensor, grid_res: int,
                    batch: int = 8192) -> np.ndarray:
    """Sample foreground probability (1 - P_background) on a grid over [-1,1]^3.

    Returns (res, res, res) float32 indexed [ix, iy, iz].
    """
    from .field import sof_features

    axes = np.linspace(-1.0, 1.0, grid_res, dtype=np.float32)
    xs, ys, zs = np.meshgrid(axes, axes, axes, indexing="ij")
    pts = np.stack([xs, ys, zs], axis=-1).reshape(-1, 3)
    out = np.empty(len(pts), dtype=np.float32)
    with no_grad():
        params = hyper(z)
        for lo in range(0, len(pts), batch):
            chunk = Tensor(pts[lo:lo + batch])
            probs = classifier(sof_features(params, chunk))
            out[lo:lo + batch] = 1.0 - probs.data[:, 0]
    return out.reshape(grid_res, grid_res, grid_res)


def mc_extract(hyper, classifier, z: Tensor, grid_res: int = 64,
               level: float = 0.5) -> TriMesh:
    """Isosurface of the latent's foreground occupancy at the given level."""
    if grid_res < 8:
        raise ValueError("grid_res must be at least 8")
    if not (0.0 < level < 1.0):
        raise ValueError("level must lie in (0, 1)")
    fg = foreground_grid(hyper, classifier, z, grid_res)
    spacing = 2.0 / (grid_res - 1)
    # Inside means foreground above the level; feed level - fg so the
    # negative side is inside, matching the table convention.
    return marching_cubes(level - fg.astype(np.float64), origin=(-1.0, -1.0, -1.0),
                          spacing=spacing, level=0.0)


def voxel_diagonal(grid_res: int) -> float:
    return float(np.sqrt(3.0) * 2.0 / (grid_res - 1))


def save_obj(path, mesh: TriMesh) -> None:
    lines = [f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}" for v in mesh.vertices]
    lines += [f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}" for t in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")
