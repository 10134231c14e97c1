"""Procedural semantic head scenes and the analytic multi-view rasterizer.

Scenes are unions of ellipsoids tagged with class ids and priorities;
overlaps resolve by priority (eyes sit inside the skin but win). The
rasterizer intersects pixel rays analytically, so it doubles as the
ground-truth oracle for every geometric test downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, generate_rays

NUM_CLASSES = 6
CLASS_NAMES = ("background", "skin", "hair", "eye", "nose", "mouth")
# RGB palette for PNG export, indexed by class id.
PALETTE = np.array(
    [
        (0, 0, 0),        # background
        (224, 172, 138),  # skin
        (106, 62, 32),    # hair
        (64, 96, 255),    # eye
        (64, 192, 64),    # nose
        (224, 48, 48),    # mouth
    ],
    dtype=np.uint8,
)

DEPTH_MISS = np.inf

# Containment uses a hair of slack so points computed to lie exactly on a
# surface (ray hits) classify as inside rather than flipping on rounding.
CONTAIN_TOL = 1e-9


@dataclass(frozen=True)
class Primitive:
    kind: str              # "sphere" or "ellipsoid"
    center: np.ndarray     # (3,)
    radii: np.ndarray      # (3,)
    rotation: np.ndarray   # (3,3) local-to-world
    class_id: int
    priority: int

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "radii", np.asarray(self.radii, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))


@dataclass(frozen=True)
class Scene:
    primitives: tuple[Primitive, ...]
    seed: int = 0

    def __post_init__(self):
        prios = [p.priority for p in self.primitives]
        if len(set(prios)) != len(prios):
            raise ValueError("primitive priorities must be distinct")
        for p in self.primitives:
            lo = p.center - p.radii
            hi = p.center + p.radii
            if (lo < -1.0).any() or (hi > 1.0).any():
                raise ValueError(f"primitive exceeds [-1,1]^3 bounds: {p}")


def _rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def make_scene(seed: int) -> Scene:
    """Seeded head-like composition of six primitives.

    Eyes, nose, and mouth protrude slightly past the skin surface so every
    class is visible from frontal orbits; hair caps the top and back.
    """
    rng = np.random.default_rng(seed)

    def jit(scale):
        return rng.uniform(-scale, scale)

    skin_c = np.array([jit(0.03), -0.05 + jit(0.03), jit(0.02)])
    skin_r = np.array([0.52, 0.64, 0.50]) * (1.0 + rng.uniform(-0.08, 0.08, 3))
    hair_c = skin_c + np.array([jit(0.02), 0.30 + jit(0.04), -0.14 + jit(0.04)])
    hair_r = np.array([0.56, 0.46, 0.52]) * (1.0 + rng.uniform(-0.08, 0.08, 3))
    hair_tilt = _rot_y(rng.uniform(-0.15, 0.15))

    eye_y = 0.10 + jit(0.03)
    eye_x = 0.20 + jit(0.03)
    eye_z = skin_c[2] + skin_r[2] * 0.92
    eye_r = 0.085 * (1.0 + jit(0.12))
    nose_c = np.array([skin_c[0], -0.06 + jit(0.03), skin_c[2] + skin_r[2] * 0.98])
    nose_r = np.array([0.085, 0.13, 0.11]) * (1.0 + jit(0.1))
    mouth_c = np.array([skin_c[0], -0.30 + jit(0.03), skin_c[2] + skin_r[2] * 0.84])
    mouth_r = np.array([0.17, 0.06, 0.09]) * (1.0 + jit(0.1))

    eye = np.eye(3)
    prims = (
        Primitive("ellipsoid", skin_c, skin_r, eye, class_id=1, priority=1),
        Primitive("ellipsoid", hair_c, hair_r, hair_tilt, class_id=2, priority=2),
        Primitive("ellipsoid", nose_c, nose_r, eye, class_id=4, priority=3),
        Primitive("ellipsoid", mouth_c, mouth_r, eye, class_id=5, priority=4),
        Primitive("sphere", np.array([-eye_x, skin_c[1] + eye_y, eye_z]),
                  np.full(3, eye_r), eye, class_id=3, priority=5),
        Primitive("sphere", np.array([eye_x, skin_c[1] + eye_y, eye_z]),
                  np.full(3, eye_r), eye, class_id=3, priority=6),
    )
    return Scene(primitives=prims, seed=seed)


def oracle_class(scene: Scene, x: np.ndarray) -> np.ndarray:
    """Class id(s) at world point(s) x: highest-priority containing primitive.

    Accepts (3,) or (..., 3); returns scalar or matching-shape int array.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = x.reshape(-1, 3)
    cls = np.zeros(len(pts), dtype=np.int64)
    best = np.full(len(pts), -1, dtype=np.int64)
    for p in scene.primitives:
        local = (pts - p.center) @ p.rotation / p.radii
        inside = (local * local).sum(axis=1) <= 1.0 + CONTAIN_TOL
        take = inside & (p.priority > best)
        cls[take] = p.class_id
        best[take] = p.priority
    return int(cls[0]) if single else cls.reshape(x.shape[:-1])


def _ray_ellipsoid_entry(origins: np.ndarray, dirs: np.ndarray, p: Primitive) -> np.ndarray:
    """First nonnegative intersection parameter per ray, inf on miss.

    Transform the ray into the primitive's unit-sphere frame; t keeps its
    world-space meaning because only o and d are rescaled component-wise
    (the quadratic stays in the world parameter).
    """
    o = (origins - p.center) @ p.rotation / p.radii
    d = dirs @ p.rotation / p.radii
    a = (d * d).sum(axis=-1)
    b = 2.0 * (o * d).sum(axis=-1)
    c = (o * o).sum(axis=-1) - 1.0
    disc = b * b - 4.0 * a * c
    t = np.full(origins.shape[:-1], np.inf)
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / (2.0 * a)
    t1 = (-b + sq) / (2.0 * a)
    entry = np.where(t0 >= 0.0, t0, np.where(t1 >= 0.0, t1, np.inf))
    t[hit] = entry[hit]
    return t


def oracle_rasterize(scene: Scene, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Analytic per-pixel rasterization: (segmap uint8, depth float64).

    Nearest primitive entry wins; misses get class 0 and +inf depth.
    """
    origins, dirs = generate_rays(cam)
    seg = np.zeros((cam.height, cam.width), dtype=np.uint8)
    depth = np.full((cam.height, cam.width), DEPTH_MISS)
    for p in scene.primitives:
        t = _ray_ellipsoid_entry(origins, dirs, p)
        closer = t < depth
        seg[closer] = p.class_id
        depth[closer] = t[closer]
    return seg, depth


def scene_to_text(scene: Scene) -> str:
    """One primitive per record; kind/center/radii/rotation/class/priority."""
    lines = [f"scene seed {scene.seed} primitives {len(scene.primitives)}"]
    for p in scene.primitives:
        fields = [
            p.kind,
            "center", *(f"{v:.17g}" for v in p.center),
            "radii", *(f"{v:.17g}" for v in p.radii),
            "rotation", *(f"{v:.17g}" for v in p.rotation.reshape(-1)),
            "class", str(p.class_id),
            "priority", str(p.priority),
        ]
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def scene_from_text(text: str) -> Scene:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    head = lines[0].split()
    seed = int(head[2])
    prims = []
    for ln in lines[1:]:
        tok = ln.split()
        kind = tok[0]
        vals = {}
        i = 1
        while i < len(tok):
            key = tok[i]
            n = {"center": 3, "radii": 3, "rotation": 9, "class": 1, "priority": 1}[key]
            vals[key] = tok[i + 1:i + 1 + n]
            i += 1 + n
        prims.append(Primitive(
            kind,
            np.array([float(v) for v in vals["center"]]),
            np.array([float(v) for v in vals["radii"]]),
            np.array([float(v) for v in vals["rotation"]]).reshape(3, 3),
            class_id=int(vals["class"][0]),
            priority=int(vals["priority"][0]),
        ))
    return Scene(primitives=tuple(prims), seed=seed)
