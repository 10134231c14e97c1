"""Dataset construction and loading: scenes rendered to disk and back."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import segmap as segio
from .camera import Camera, load_camera, sample_cameras, save_camera
from .scene import NUM_CLASSES, Scene, make_scene, oracle_rasterize, scene_to_text


def build_dataset(root, num_scenes: int, views_per_scene: int, resolution: int,
                  seed: int, radius: float = 2.5) -> Path:
    """Render seeded scenes to segmap/camera/depth files plus a manifest.

    Layout: root/scene_XXX/{view_YYY.segmap,view_YYY.cam,view_YYY.depth}
    and root/manifest.txt. Deterministic for a fixed seed.
    """
    if num_scenes < 1 or views_per_scene < 1 or resolution < 1:
        raise ValueError("dataset sizes must be positive")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for si in range(num_scenes):
        scene = make_scene(seed + si)
        sdir = root / f"scene_{si:03d}"
        sdir.mkdir(exist_ok=True)
        (sdir / "scene.txt").write_text(scene_to_text(scene))
        # Per-scene camera seed derived from the dataset seed, not shared,
        # so scenes get independent orbits.
        cams = sample_cameras(views_per_scene, radius, seed=seed * 100003 + si,
                              width=resolution, height=resolution)
        for vi, cam in enumerate(cams):
            seg, depth = oracle_rasterize(scene, cam)
            seg_path = sdir / f"view_{vi:03d}.segmap"
            cam_path = sdir / f"view_{vi:03d}.cam"
            segio.save_segmap(seg_path, seg, NUM_CLASSES)
            save_camera(cam_path, cam)
            segio.save_depth(sdir / f"view_{vi:03d}.depth", np.where(np.isfinite(depth), depth, 0.0))
            entries.append((f"scene_{si:03d}", f"view_{vi:03d}",
                            str(seg_path.relative_to(root)), str(cam_path.relative_to(root))))
    segio.write_manifest(root / "manifest.txt", entries)
    return root


@dataclass
class View:
    scene_id: str
    view_id: str
    segmap: np.ndarray     # (H, W) uint8
    camera: Camera


@dataclass
class LoadedDataset:
    root: Path
    num_classes: int
    views: list[View]
    scene_ids: list[str]

    def views_of(self, scene_id: str) -> list[View]:
        return [v for v in self.views if v.scene_id == scene_id]


def load_dataset(root) -> LoadedDataset:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    views = []
    k = NUM_CLASSES
    scene_ids: list[str] = []
    for scene_id, view_id, seg_rel, cam_rel in segio.read_manifest(manifest):
        seg, k = segio.load_segmap(root / seg_rel)
        cam = load_camera(root / cam_rel)
        views.append(View(scene_id, view_id, seg, cam))
        if scene_id not in scene_ids:
            scene_ids.append(scene_id)
    return LoadedDataset(root=root, num_classes=k, views=views, scene_ids=scene_ids)
