"""Training loop: per-ray cross-entropy through the full marching pipeline.

One shared hypernetwork/classifier/marcher plus one trainable latent per
scene (auto-decoder). Each step samples a scene, a view, and a pixel
batch; rays march through the emitted field and the endpoint features are
classified against the ground-truth segmap.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .camera import generate_rays
from .checkpoint import (CKPT_MAGIC, CheckpointError, load_tensors, pack_json,
                         save_tensors, unpack_json)
from .dataset import LoadedDataset
from .field import Classifier, HyperNet, LATENT_DIM
from .marcher import NEAR_PLANE, Marcher, march_rays, render_segmap
from .optim import Adam, warmup_cosine_lr
from .tensor import Tensor


@dataclass
class TrainConfig:
    width: int = 64
    num_classes: int = 6
    lr: float = 1e-4
    warmup_steps: int = 2000
    total_steps: int = 60_000
    rays_per_batch: int = 96
    march_steps: int = 10
    seed: int = 0
    latent_std: float = 0.01
    latent_lr_scale: float = 10.0
    boundary_bias_after: int = 5000
    boundary_px: int = 3
    log_every: int = 100
    miou_every: int = 2000
    stop_train_miou: float = 0.0  # early stop once the running train mIoU clears this
    # Randomized per-ray march start, drawn from U[near, t0_max]. Off (0.0)
    # keeps the fixed near-plane start. Starting rays at varied depths is
    # what forces the marcher to react to the field and halt at first
    # contact instead of memorizing one advance schedule per scene; without
    # it rendered depth lands anywhere inside the object. Keep below the
    # closest possible surface for the camera rig (1.4 suits radius 2.5).
    t0_max: float = 0.0

    def __post_init__(self):
        if min(self.width, self.num_classes, self.rays_per_batch) < 1 or self.total_steps < 0:
            raise ValueError("config counts must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.t0_max and not NEAR_PLANE < self.t0_max:
            raise ValueError(f"t0_max must exceed the near plane {NEAR_PLANE}")


@dataclass
class SofModel:
    """Everything trainable, plus enough config to rebuild at load time."""

    hyper: HyperNet
    classifier: Classifier
    marcher: Marcher
    latents: dict[str, Tensor]
    config: TrainConfig
    step: int = 0

    def shared_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.hyper.params())
        out.update(self.classifier.params())
        out.update(self.marcher.params())
        return out

    def all_params(self) -> dict[str, Tensor]:
        out = self.shared_params()
        for sid, z in self.latents.items():
            out[f"latent/{sid}"] = z
        return out


def build_model(cfg: TrainConfig, scene_ids: list[str]) -> SofModel:
    rng = np.random.default_rng(cfg.seed)
    hyper = HyperNet(cfg.width, rng)
    classifier = Classifier(cfg.width, cfg.num_classes, rng)
    # A soft-spoken head keeps the initial distribution near uniform, so the
    # starting loss sits at ln K and early gradients stay well-scaled.
    classifier.head.weight.data *= np.float32(0.1)
    classifier.head.bias.data *= np.float32(0.0)
    marcher = Marcher(cfg.width, rng)
    latents = {
        sid: Tensor((rng.standard_normal(LATENT_DIM) * cfg.latent_std).astype(np.float32),
                    requires_grad=True)
        for sid in scene_ids
    }
    return SofModel(hyper=hyper, classifier=classifier, marcher=marcher,
                    latents=latents, config=cfg)


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int | None = None) -> float:
    """Mean IoU over classes present in either map; absent classes skipped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    classes = np.union1d(np.unique(pred), np.unique(gt))
    scores = []
    for c in classes:
        p = pred == c
        g = gt == c
        union = (p | g).sum()
        if union == 0:
            continue
        scores.append((p & g).sum() / union)
    return float(np.mean(scores)) if scores else 1.0


def boundary_mask(seg: np.ndarray, radius: int) -> np.ndarray:
    """Pixels within Chebyshev ``radius`` of a class boundary."""
    from scipy.ndimage import maximum_filter

    edge = np.zeros(seg.shape, dtype=bool)
    edge[:-1, :] |= seg[:-1, :] != seg[1:, :]
    edge[1:, :] |= seg[:-1, :] != seg[1:, :]
    edge[:, :-1] |= seg[:, :-1] != seg[:, 1:]
    edge[:, 1:] |= seg[:, :-1] != seg[:, 1:]
    if not edge.any():
        return edge
    return maximum_filter(edge, size=2 * radius + 1)


@dataclass
class MetricRow:
    step: int
    loss: float
    lr: float
    miou: float | None = None


def save_metrics(path, rows: list[MetricRow]) -> None:
    lines = ["step,loss,lr,miou"]
    for r in rows:
        tail = f"{r.miou:.6f}" if r.miou is not None else ""
        lines.append(f"{r.step},{r.loss:.8f},{r.lr:.10g},{tail}")
    Path(path).write_text("\n".join(lines) + "\n")


def cross_entropy_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean CE over a batch; logits (B, K), target (B,) int."""
    logp = T.log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(target)), target]
    return -picked.mean()


def train_sof(dataset: LoadedDataset, cfg: TrainConfig, progress=None,
              max_steps: int | None = None) -> tuple[SofModel, list[MetricRow]]:
    """Full training run; returns the model and the metric log.

    ``progress`` is an optional callable (step, loss) for CLI feedback.
    ``max_steps`` caps the number of optimizer steps without changing the
    lr schedule, which always spans ``cfg.total_steps``.
    """
    if not dataset.views:
        raise ValueError("dataset is empty")
    if dataset.num_classes != cfg.num_classes:
        raise ValueError(
            f"dataset has K={dataset.num_classes} but config expects K={cfg.num_classes}")

    model = build_model(cfg, dataset.scene_ids)
    # Latents see only ~1/num_scenes of the updates; give them a faster clock.
    scales = {f"latent/{sid}": cfg.latent_lr_scale for sid in model.latents}
    opt = Adam(model.all_params(), lr=cfg.lr, lr_scales=scales)
    rng = np.random.default_rng(cfg.seed + 1)

    views = dataset.views
    rays = [None] * len(views)        # lazy (origins, dirs) cache
    bmasks = [None] * len(views)      # lazy boundary pixel indices
    rows: list[MetricRow] = []
    last_miou: float | None = None
    probes_over = 0                   # consecutive probe views at/over the stop bar

    limit = cfg.total_steps if max_steps is None else min(max_steps, cfg.total_steps)
    for step in range(limit):
        vi = int(rng.integers(len(views)))
        view = views[vi]
        if rays[vi] is None:
            o, d = generate_rays(view.camera)
            rays[vi] = (o.reshape(-1, 3).astype(np.float32),
                        d.reshape(-1, 3).astype(np.float32))
        origins, dirs = rays[vi]
        npix = origins.shape[0]

        b = cfg.rays_per_batch
        if step >= cfg.boundary_bias_after:
            if bmasks[vi] is None:
                bmasks[vi] = np.flatnonzero(boundary_mask(view.segmap, cfg.boundary_px))
            bidx = bmasks[vi]
            if len(bidx):
                half = b // 2
                pick_b = bidx[rng.integers(len(bidx), size=half)]
                pick_u = rng.integers(npix, size=b - half)
                pick = np.concatenate([pick_b, pick_u])
            else:
                pick = rng.integers(npix, size=b)
        else:
            pick = rng.integers(npix, size=b)

        target = view.segmap.reshape(-1)[pick].astype(np.int64)
        z = model.latents[view.scene_id]
        params = model.hyper(z)
        t0 = (rng.uniform(NEAR_PLANE, cfg.t0_max, size=b).astype(np.float32)
              if cfg.t0_max else NEAR_PLANE)
        res = march_rays(params, model.marcher, origins[pick], dirs[pick],
                         t0=t0, n_steps=cfg.march_steps)
        logits = model.classifier.logits(res.feature)
        loss = cross_entropy_loss(logits, target)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise RuntimeError(f"training diverged: non-finite loss at step {step}")

        opt.zero_grad()
        loss.backward()
        lr_now = warmup_cosine_lr(step, cfg.lr, cfg.warmup_steps, cfg.total_steps)
        opt.step(lr=lr_now)

        if step % cfg.log_every == 0 or step == limit - 1:
            row = MetricRow(step=step, loss=loss_val, lr=lr_now)
            if cfg.miou_every and step and step % cfg.miou_every == 0:
                probe = views[(step // cfg.miou_every) % len(views)]
                seg = render_segmap(model.hyper, model.classifier, model.marcher,
                                    model.latents[probe.scene_id], probe.camera,
                                    n_steps=cfg.march_steps)
                last_miou = miou(seg, probe.segmap)
                row.miou = last_miou
                probes_over = probes_over + 1 if last_miou >= cfg.stop_train_miou else 0
            rows.append(row)
            if progress is not None:
                progress(step, loss_val)
            # One lucky view must not end the run; demand a short streak.
            if cfg.stop_train_miou and probes_over >= 3:
                break
        model.step = step + 1
    return model, rows


# -- checkpoint bridge -----------------------------------------------------------


def model_to_tensors(model: SofModel) -> dict[str, np.ndarray]:
    out = {name: p.data for name, p in model.all_params().items()}
    out["meta/config_json"] = pack_json(asdict(model.config))
    out["meta/step"] = np.array([model.step], dtype=np.float32)
    return out


def save_checkpoint(path, model: SofModel) -> None:
    save_tensors(path, model_to_tensors(model), magic=CKPT_MAGIC)


def load_checkpoint(path) -> SofModel:
    table = load_tensors(path, magic=CKPT_MAGIC)
    if "meta/config_json" not in table:
        raise CheckpointError("checkpoint missing config record")
    cfg = TrainConfig(**unpack_json(table["meta/config_json"]))
    scene_ids = sorted(name.split("/", 1)[1] for name in table if name.startswith("latent/"))
    model = build_model(cfg, scene_ids)
    model.step = int(table["meta/step"][0])
    params = model.all_params()
    missing = [n for n in params if n not in table]
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {missing[:3]}")
    for name, p in params.items():
        arr = table[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: file {arr.shape} vs model {p.data.shape}")
        p.data = arr.astype(np.float32)
    return model
