"""Pinhole cameras, look-at poses, and ray generation.

Conventions: R maps camera coordinates to world coordinates and T is the
center of projection, so a pixel direction d_cam becomes the world ray
(origin=T, dir=R @ d_cam). Camera axes follow the image layout: x right,
y down, z forward (into the scene). Pixel coordinates are integer array
indices; (u, v) = (column, row).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Camera:
    R: np.ndarray          # (3,3) camera-to-world rotation
    T: np.ndarray          # (3,) center of projection, world units
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        if R.shape != (3, 3) or not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation must be 3x3 orthonormal")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", np.asarray(self.T, dtype=np.float64).reshape(3))


def generate_rays(cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel world rays; returns (origins, dirs), each (H, W, 3).

    Origins are constant (the CoP); directions are unit length.
    """
    u = np.arange(cam.width, dtype=np.float64)
    v = np.arange(cam.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    d = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    dirs = d @ cam.R.T
    origins = np.broadcast_to(cam.T, dirs.shape).copy()
    return origins, dirs


def project_points(cam: Camera, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World points -> (pixel (N,2) as (u,v), ray distance (N,), in-front mask).

    Distance is Euclidean from the center of projection, matching the ray
    parameter ``generate_rays`` directions use. Points at or behind the
    image plane get a False mask and undefined pixel values.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    local = (pts - cam.T) @ cam.R
    z = local[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    u = cam.fx * local[:, 0] / zs + cam.cx
    v = cam.fy * local[:, 1] / zs + cam.cy
    dist = np.linalg.norm(local, axis=-1)
    return np.stack([u, v], axis=-1), dist, front


def look_at(eye: np.ndarray, target: np.ndarray, world_up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world rotation for a camera at eye facing target.

    Built for y-down image axes: camera y aligns with -world_up projected
    off the view axis.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(world_up, dtype=np.float64)
    z = target - eye
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise ValueError("look_at: eye and target coincide")
    z = z / nz
    x = np.cross(-up, z)
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise ValueError("look_at: view axis parallel to world up")
    x = x / nx
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def orbit_camera(azimuth_deg: float, elevation_deg: float, radius: float,
                 width: int = 64, height: int = 64, fov_deg: float = 40.0) -> Camera:
    """Camera on a sphere around the origin, looking inward.

    Azimuth 0 / elevation 0 sits on +z (facing the scene front);
    positive azimuth swings toward +x, positive elevation climbs +y.
    """
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    eye = radius * np.array([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])
    R = look_at(eye, np.zeros(3))
    f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2.0)
    return Camera(R=R, T=eye, fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                  width=width, height=height)


def sample_cameras(n: int, radius: float, seed: int, width: int = 64, height: int = 64,
                   fov_deg: float = 40.0) -> list[Camera]:
    """n seeded orbit cameras, azimuth in [-90, 90] deg, elevation in [-30, 30] deg."""
    if n < 1:
        raise ValueError("need at least one camera")
    if radius <= 1.0:
        raise ValueError("cameras must sit outside the unit scene bounds")
    rng = np.random.default_rng(seed)
    cams = []
    for _ in range(n):
        az = rng.uniform(-90.0, 90.0)
        el = rng.uniform(-30.0, 30.0)
        cams.append(orbit_camera(az, el, radius, width, height, fov_deg))
    return cams


def save_camera(path, cam: Camera) -> None:
    """Text format: line 1 `width height fx fy cx cy`; lines 2-4 the 3x4 [R|T]."""
    lines = [f"{cam.width} {cam.height} {cam.fx:.17g} {cam.fy:.17g} {cam.cx:.17g} {cam.cy:.17g}"]
    for i in range(3):
        row = list(cam.R[i]) + [cam.T[i]]
        lines.append(" ".join(f"{x:.17g}" for x in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_camera(path) -> Camera:
    lines = Path(path).read_text().strip().splitlines()
    if len(lines) != 4:
        raise ValueError(f"camera file must have 4 lines, got {len(lines)}")
    try:
        head = lines[0].split()
        width, height = int(head[0]), int(head[1])
        fx, fy, cx, cy = (float(x) for x in head[2:6])
    except (ValueError, IndexError) as exc:
        raise ValueError(f"camera file line 1: expected "
                         f"'width height fx fy cx cy' ({exc})") from exc
    rows = []
    for i, ln in enumerate(lines[1:4], start=2):
        try:
            row = [float(x) for x in ln.split()]
        except ValueError as exc:
            raise ValueError(f"camera file line {i}: non-numeric pose entry ({exc})") from exc
        if len(row) != 4:
            raise ValueError(f"camera file line {i}: expected 4 values, got {len(row)}")
        rows.append(row)
    rt = np.array(rows)
    return Camera(R=rt[:, :3], T=rt[:, 3], fx=fx, fy=fy, cx=cx, cy=cy,
                  width=width, height=height)
