"""Learned ray marching and full segmap rendering.

The marcher is an MLP over the field feature at the current point; each
of its layers receives the ray direction through a companion 3->W map
acting as the layer bias. The scalar output, ReLU-gated, is a step size:
x advances by dir*step, the field is re-queried, and after N rounds the
accumulated distance is the depth. Everything stays on the autodiff tape,
so losses at the final point train the field, the marcher, and the latent
together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .camera import Camera, generate_rays
from .field import Classifier, HyperNet, SofParams, sof_features
from .layers import Linear, prefix_params
from .mcubes import TriMesh, mc_extract, voxel_diagonal
from .tensor import Tensor, no_grad

NEAR_PLANE = 0.05
DEFAULT_STEPS = 10


class Marcher:
    """Seven paired layers: feature path (no bias) + direction-to-bias path.

    Pairs 0..5 are W->W with 3->W companions; the last pair is W->1 with a
    3->1 companion, producing the scalar step.
    """

    def __init__(self, width: int, rng: np.random.Generator, dtype=np.float32,
                 initial_step: float = 0.2):
        self.width = width
        self.feat_layers = [Linear(width, width, rng, bias=False, dtype=dtype) for _ in range(6)]
        self.dir_layers = [Linear(3, width, rng, dtype=dtype) for _ in range(6)]
        self.feat_out = Linear(width, 1, rng, bias=False, dtype=dtype)
        self.dir_out = Linear(3, 1, rng, dtype=dtype)
        # The step head must start alive: with generic init the scalar
        # pre-activation is negative for entire camera regions and ReLU
        # then blocks all gradient forever. Small weights plus a positive
        # bias make every ray march ~initial_step per round at birth.
        self.feat_out.weight.data *= 0.1
        self.dir_out.weight.data *= 0.1
        self.dir_out.bias.data[:] = initial_step

    def direction_biases(self, d: Tensor) -> list[Tensor]:
        """Per-layer bias terms for a batch of ray directions (B,3)."""
        return [layer(d) for layer in self.dir_layers] + [self.dir_out(d)]

    def step_from_feature(self, f: Tensor, dir_biases: list[Tensor]) -> Tensor:
        h = f
        for i, layer in enumerate(self.feat_layers):
            h = T.relu(layer(h) + dir_biases[i])
        return T.relu(self.feat_out(h) + dir_biases[6])

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (fl, dl) in enumerate(zip(self.feat_layers, self.dir_layers)):
            out.update(prefix_params(f"marcher/feat{i}", fl.params()))
            out.update(prefix_params(f"marcher/dir{i}", dl.params()))
        out.update(prefix_params("marcher/feat_out", self.feat_out.params()))
        out.update(prefix_params("marcher/dir_out", self.dir_out.params()))
        return out


@dataclass
class MarchResult:
    depth: Tensor      # (B,)
    surface_x: Tensor  # (B, 3)
    feature: Tensor    # (B, W)
    steps: list        # N tensors of shape (B,)


def march_rays(params: SofParams, marcher: Marcher, origins: np.ndarray,
               dirs: np.ndarray, t0, n_steps: int = DEFAULT_STEPS) -> MarchResult:
    """March a batch of rays through the field; differentiable end to end.

    ``origins``/``dirs`` are (B,3) arrays treated as constants; ``t0`` is a
    scalar or (B,) array of starting distances (no gradient).
    """
    if n_steps < 0:
        raise ValueError("step count must be nonnegative")
    dtype = params.weights[0].data.dtype
    origins = np.asarray(origins, dtype=dtype).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=dtype).reshape(-1, 3)
    B = len(origins)
    t0 = np.broadcast_to(np.asarray(t0, dtype=dtype), (B,)).copy()
    if (t0 < 0).any():
        raise ValueError("t0 must be nonnegative")

    d_const = Tensor(dirs)
    x = Tensor(origins + dirs * t0[:, None])
    depth = Tensor(t0)
    steps: list[Tensor] = []
    dir_biases = marcher.direction_biases(d_const) if n_steps > 0 else []
    feature = None
    for _ in range(n_steps):
        feature = sof_features(params, x)
        step = marcher.step_from_feature(feature, dir_biases)  # (B,1)
        if not np.isfinite(step.data).all():
            bad = int(np.argwhere(~np.isfinite(step.data))[0][0])
            raise FloatingPointError(f"non-finite marching step at ray {bad}")
        x = x + d_const * step
        steps.append(step.reshape(B))
        depth = depth + step.reshape(B)
    final_feature = sof_features(params, x)
    return MarchResult(depth=depth, surface_x=x, feature=final_feature, steps=steps)


REFINE_WINDOW = 0.45
REFINE_SCAN = 64
REFINE_BISECT = 24


def first_crossing(inside, origins: np.ndarray, dirs: np.ndarray, t_star,
                   window: float = REFINE_WINDOW, n_scan: int = REFINE_SCAN,
                   n_bisect: int = REFINE_BISECT) -> tuple[np.ndarray, np.ndarray]:
    """Locate the first outside->inside transition along each ray.

    ``inside`` maps an (M, 3) point array to an (M,) bool array. A window
    around each ray's ``t_star`` is scanned at ``n_scan`` evenly spaced
    distances; the first transition interval is then bisected ``n_bisect``
    times. The scan pitch 2*window/(n_scan-1) is the thinnest feature this
    can resolve, so keep it below the smallest geometry of interest.

    Returns (t, found): refined distances (``t_star`` where no transition
    lies in the window) and the mask of rays that had one.
    """
    origins = np.asarray(origins, dtype=np.float32).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float32).reshape(-1, 3)
    B = len(origins)
    t_star = np.broadcast_to(np.asarray(t_star, dtype=np.float32), (B,))
    lo0 = np.maximum(t_star - window, NEAR_PLANE)
    offsets = np.linspace(0.0, 2.0 * window, n_scan, dtype=np.float32)
    ts = lo0[:, None] + offsets[None, :]
    hit = inside((origins[:, None, :] + ts[..., None] * dirs[:, None, :])
                 .reshape(-1, 3)).reshape(B, n_scan)
    trans = ~hit[:, :-1] & hit[:, 1:]
    found = trans.any(axis=1)
    first = np.argmax(trans, axis=1)
    idx = np.arange(B)
    lo, hi = ts[idx, first], ts[idx, first + 1]
    for _ in range(n_bisect):
        mid = (0.5 * (lo + hi)).astype(np.float32)
        m = inside(origins + mid[:, None] * dirs)
        hi = np.where(m, mid, hi)
        lo = np.where(m, lo, mid)
    t = np.where(found, 0.5 * (lo + hi), t_star).astype(np.float32)
    return t, found


def refine_depth_along_rays(params: SofParams, classifier: Classifier,
                            origins: np.ndarray, dirs: np.ndarray,
                            t_star) -> np.ndarray:
    """Sharpen marched stop distances to the field's background boundary.

    The marcher is trained only to stop somewhere consistent with the ray's
    class, which leaves its distances a little inside the geometry; the
    field's own background/foreground transition is much tighter. Rays whose
    window holds no transition (typically background) keep their marched
    distance. Pure inference.
    """
    with no_grad():
        def inside(pts: np.ndarray) -> np.ndarray:
            f = sof_features(params, Tensor(pts))
            return np.argmax(classifier.logits(f).data, axis=-1) != 0

        t, _ = first_crossing(inside, origins, dirs, t_star)
    return t


def depth_init(mesh: TriMesh, cam: Camera, near: float = NEAR_PLANE) -> np.ndarray:
    """Z-buffer the mesh into the camera; ray-distance map (H, W) float64.

    Perspective-correct interpolation (1/z linear in screen space); pixels
    the mesh never covers fall back to the near plane.
    """
    H, W = cam.height, cam.width
    zbuf = np.full((H, W), np.inf)
    if len(mesh.triangles):
        vc = (mesh.vertices - cam.T) @ cam.R  # camera frame
        tri = vc[mesh.triangles]              # (F, 3, 3)
        # Keep triangles fully in front of the camera; the proxy sits well
        # inside the view volume so clipping is unnecessary.
        ok = (tri[:, :, 2] > 1e-6).all(axis=1)
        for p0, p1, p2 in tri[ok]:
            us = np.array([p[0] / p[2] * cam.fx + cam.cx for p in (p0, p1, p2)])
            vs = np.array([p[1] / p[2] * cam.fy + cam.cy for p in (p0, p1, p2)])
            zs = np.array([p[2] for p in (p0, p1, p2)])
            lo_u = max(int(np.ceil(us.min())), 0)
            hi_u = min(int(np.floor(us.max())), W - 1)
            lo_v = max(int(np.ceil(vs.min())), 0)
            hi_v = min(int(np.floor(vs.max())), H - 1)
            if lo_u > hi_u or lo_v > hi_v:
                continue
            uu, vv = np.meshgrid(np.arange(lo_u, hi_u + 1), np.arange(lo_v, hi_v + 1))
            det = (vs[1] - vs[2]) * (us[0] - us[2]) + (us[2] - us[1]) * (vs[0] - vs[2])
            if abs(det) < 1e-12:
                continue
            l0 = ((vs[1] - vs[2]) * (uu - us[2]) + (us[2] - us[1]) * (vv - vs[2])) / det
            l1 = ((vs[2] - vs[0]) * (uu - us[2]) + (us[0] - us[2]) * (vv - vs[2])) / det
            l2 = 1.0 - l0 - l1
            cover = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
            if not cover.any():
                continue
            zinv = l0 / zs[0] + l1 / zs[1] + l2 / zs[2]
            z = np.where(cover & (zinv > 0), 1.0 / np.maximum(zinv, 1e-12), np.inf)
            patch = zbuf[lo_v:hi_v + 1, lo_u:hi_u + 1]
            np.minimum(patch, z, out=patch)

    # Convert camera-z to distance along the unit pixel ray, then clamp.
    u = np.arange(W) - cam.cx
    v = np.arange(H) - cam.cy
    uu, vv = np.meshgrid(u / cam.fx, v / cam.fy)
    ray_scale = np.sqrt(uu * uu + vv * vv + 1.0)
    dist = zbuf * ray_scale
    return np.where(np.isfinite(dist), np.maximum(dist, near), near)


def render_segmap(hyper: HyperNet, classifier: Classifier, marcher: Marcher,
                  z: Tensor, cam: Camera, n_steps: int = DEFAULT_STEPS,
                  use_mc_init: bool = False, grid_res: int = 64,
                  return_depth: bool = False, refine_depth: bool = False):
    """Render one view: per-pixel march, classify, argmax.

    Returns the (H, W) uint8 segmap; with ``return_depth`` also the (H, W)
    float32 ray-distance map, bisected onto the field's background boundary
    when ``refine_depth`` is set (classes are unaffected). Pure inference:
    nothing is recorded on the tape, and repeated calls are bit-identical.
    """
    origins, dirs = generate_rays(cam)
    B = cam.height * cam.width
    origins = origins.reshape(B, 3)
    dirs = dirs.reshape(B, 3)
    with no_grad():
        if use_mc_init:
            mesh = mc_extract(hyper, classifier, z, grid_res=grid_res)
            margin = voxel_diagonal(grid_res)
            t0 = np.maximum(depth_init(mesh, cam) - margin, NEAR_PLANE).reshape(B)
        else:
            t0 = np.full(B, NEAR_PLANE)
        params = hyper(z)
        result = march_rays(params, marcher, origins, dirs, t0, n_steps=n_steps)
        logits = classifier.logits(result.feature)
        seg = np.argmax(logits.data, axis=-1).astype(np.uint8).reshape(cam.height, cam.width)
    if return_depth:
        t = result.depth.data
        if refine_depth:
            t = refine_depth_along_rays(params, classifier, origins, dirs, t)
        depth = t.astype(np.float32).reshape(cam.height, cam.width)
        return seg, depth
    return seg
