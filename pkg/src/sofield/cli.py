"""Command-line front end.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 numerical
failure. Every command accepts --seed and produces byte-identical outputs
for identical inputs; each writes a run.json with its resolved
configuration (no timestamps) beside its outputs.

BLAS thread pools are sized before numpy loads: --threads N (or
SOFIELD_THREADS) caps them, defaulting to 1, the reproducibility
reference.
"""

from __future__ import annotations

import os
import sys


def _thread_request() -> str:
    for i, arg in enumerate(sys.argv):
        if arg == "--threads" and i + 1 < len(sys.argv):
            return sys.argv[i + 1]
        if arg.startswith("--threads="):
            return arg.split("=", 1)[1]
    return os.environ.get("SOFIELD_THREADS", "1")


for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
             "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, _thread_request())

import functools
import json
from pathlib import Path

import click
import numpy as np

DATA_ROOT_VAR = "SOFIELD_DATA_ROOT"


def _write_run_record(out_dir: Path, command: str, config: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "config": config}
    (out_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _exit_codes(fn):
    """Map exception classes onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        from .segmap import FormatError
        from .checkpoint import CheckpointError
        from .tensor import ShapeError
        try:
            return fn(*args, **kwargs)
        except (ValueError, ShapeError, FormatError, CheckpointError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except OSError as exc:
            click.echo(f"i/o error: {exc}", err=True)
            sys.exit(3)
        except (ArithmeticError, RuntimeError) as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(4)

    return wrapper


@click.group()
@click.option("--threads", default=1, show_default=True,
              help="BLAS thread cap; 1 is the reproducibility reference.")
def main(threads):
    """Semantic occupancy field engine."""
    # Threads were already applied before numpy import; the option exists
    # so the value shows up in --help and argument validation.


@main.command("gen-data")
@click.option("--out", type=click.Path(), default=None,
              help=f"Output dataset root (default ${DATA_ROOT_VAR}).")
@click.option("--scenes", default=24, show_default=True)
@click.option("--views", default=32, show_default=True)
@click.option("--res", default=64, show_default=True)
@click.option("--radius", default=2.5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_exit_codes
def gen_data(out, scenes, views, res, radius, seed):
    """Build a procedural multi-view segmap dataset."""
    from .dataset import build_dataset

    root = out or os.environ.get(DATA_ROOT_VAR)
    if not root:
        raise ValueError(f"pass --out or set ${DATA_ROOT_VAR}")
    build_dataset(root, num_scenes=scenes, views_per_scene=views,
                  resolution=res, seed=seed, radius=radius)
    _write_run_record(Path(root), "gen-data", {
        "out": ".", "scenes": scenes, "views": views, "res": res,
        "radius": radius, "seed": seed})
    click.echo(f"wrote {scenes * views} views ({scenes} scenes) under {root}")


@main.command()
@click.option("--data", type=click.Path(exists=True), default=None,
              help=f"Dataset root (default ${DATA_ROOT_VAR}).")
@click.option("--out", type=click.Path(), required=True, help="Output directory.")
@click.option("--steps", default=60000, show_default=True)
@click.option("--width", default=64, show_default=True)
@click.option("--rays", default=96, show_default=True)
@click.option("--march-steps", default=10, show_default=True)
@click.option("--warmup", default=2000, show_default=True)
@click.option("--lr", default=1e-4, show_default=True)
@click.option("--miou-every", default=2000, show_default=True)
@click.option("--stop-miou", default=0.0, show_default=True,
              help="Early-stop once probe views sustain this mIoU.")
@click.option("--t0-max", default=0.0, show_default=True,
              help="Randomize ray starts in [near, t0-max]; needed for "
                   "accurate depth, keep below the closest surface.")
@click.option("--seed", default=0, show_default=True)
@_exit_codes
def train(data, out, steps, width, rays, march_steps, warmup, lr,
          miou_every, stop_miou, t0_max, seed):
    """Train the field on a dataset; writes model.sofc and metrics.csv."""
    from .dataset import load_dataset
    from .train import TrainConfig, save_checkpoint, save_metrics, train_sof

    root = data or os.environ.get(DATA_ROOT_VAR)
    if not root:
        raise ValueError(f"pass --data or set ${DATA_ROOT_VAR}")
    ds = load_dataset(root)
    cfg = TrainConfig(width=width, total_steps=steps, rays_per_batch=rays,
                      march_steps=march_steps, warmup_steps=min(warmup, max(steps, 1)),
                      lr=lr, miou_every=miou_every, stop_train_miou=stop_miou,
                      t0_max=t0_max, seed=seed)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def report(step, loss):
        click.echo(f"step {step} loss {loss:.4f}")

    model, rows = train_sof(ds, cfg, progress=report)
    save_checkpoint(out_dir / "model.sofc", model)
    save_metrics(out_dir / "metrics.csv", rows)
    _write_run_record(out_dir, "train", {
        "data": str(root), "out": ".", **cfg.__dict__})
    final = [r.miou for r in rows if r.miou is not None]
    click.echo(f"done: {model.step} steps" +
               (f", last probe mIoU {final[-1]:.4f}" if final else ""))


def _load_latent(model, scene, latent_file):
    from .checkpoint import load_tensors
    from .tensor import Tensor

    if latent_file is not None:
        table = load_tensors(latent_file)
        if "z" not in table:
            raise ValueError(f"{latent_file} has no tensor named 'z'")
        return Tensor(table["z"].astype(np.float32))
    if scene is None:
        raise ValueError("pass --scene or --latent")
    if scene not in model.latents:
        raise ValueError(f"unknown scene {scene!r}; checkpoint has "
                         f"{sorted(model.latents)}")
    return model.latents[scene]


@main.command()
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--scene", default=None, help="Scene id whose latent to render.")
@click.option("--latent", "latent_file", type=click.Path(exists=True), default=None,
              help="Latent tensor file (overrides --scene).")
@click.option("--camera", "camera_file", type=click.Path(exists=True), default=None,
              help="Camera text file; otherwise an orbit is rendered.")
@click.option("--orbit", default=15, show_default=True,
              help="Number of evenly spaced azimuths when no camera file is given.")
@click.option("--res", default=64, show_default=True, help="Orbit render size.")
@click.option("--radius", default=2.5, show_default=True)
@click.option("--march-steps", default=10, show_default=True)
@click.option("--mc-init/--no-mc-init", default=False, show_default=True,
              help="Initialize ray depths from a coarse extracted surface.")
@click.option("--depth/--no-depth", default=False, show_default=True,
              help="Also write per-view depth maps.")
@click.option("--refine-depth/--no-refine-depth", "refine", default=False,
              show_default=True,
              help="Bisect depths onto the field's background boundary "
                   "(only affects --depth output).")
@click.option("--out", type=click.Path(), required=True)
@click.option("--seed", default=0, show_default=True)
@_exit_codes
def render(ckpt, scene, latent_file, camera_file, orbit, res, radius,
           march_steps, mc_init, depth, refine, out, seed):
    """Render segmaps from a checkpoint latent."""
    from .camera import load_camera, orbit_camera, save_camera
    from .marcher import render_segmap
    from .segmap import save_depth, save_segmap, segmap_to_png
    from .train import load_checkpoint

    model = load_checkpoint(ckpt)
    z = _load_latent(model, scene, latent_file)
    if camera_file is not None:
        cams = [load_camera(camera_file)]
    else:
        azimuths = np.linspace(-90.0, 90.0, orbit)
        cams = [orbit_camera(az, 0.0, radius, width=res, height=res)
                for az in azimuths]
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    k = model.config.num_classes
    for i, cam in enumerate(cams):
        result = render_segmap(model.hyper, model.classifier, model.marcher, z, cam,
                               n_steps=march_steps, use_mc_init=mc_init,
                               return_depth=depth)
        seg = result[0] if depth else result
        save_segmap(out_dir / f"view_{i:03d}.sofs", seg, k)
        segmap_to_png(out_dir / f"view_{i:03d}.png", seg)
        save_camera(out_dir / f"view_{i:03d}.cam", cam)
        if depth:
            save_depth(out_dir / f"view_{i:03d}.sofd", result[1])
    _write_run_record(out_dir, "render", {
        "ckpt": str(ckpt), "scene": scene, "latent": latent_file,
        "camera": camera_file, "orbit": orbit, "res": res, "radius": radius,
        "march_steps": march_steps, "mc_init": mc_init, "depth": depth,
        "out": ".", "seed": seed})
    click.echo(f"rendered {len(cams)} view(s) into {out_dir}")


@main.command()
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--n", default=4, show_default=True, help="Number of samples.")
@click.option("--truncation", default=10, show_default=True)
@click.option("--render/--no-render", "do_render", default=True, show_default=True)
@click.option("--res", default=64, show_default=True)
@click.option("--march-steps", default=10, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--seed", default=0, show_default=True)
@_exit_codes
def sample(ckpt, n, truncation, do_render, res, march_steps, out, seed):
    """Fit a mixture over the checkpoint latents and draw new ones."""
    from .camera import orbit_camera
    from .checkpoint import save_tensors
    from .latent import fit_gmm, sample_gmm, save_gmm
    from .marcher import render_segmap
    from .segmap import save_segmap, segmap_to_png
    from .tensor import Tensor
    from .train import load_checkpoint

    model = load_checkpoint(ckpt)
    latents = np.stack([z.data for _, z in sorted(model.latents.items())])
    gmm = fit_gmm(latents, truncation=truncation, seed=seed)
    draws = sample_gmm(gmm, seed=seed, n=n)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_gmm(out_dir / "mixture.sofg", gmm)
    cam = orbit_camera(0.0, 0.0, 2.5, width=res, height=res)
    for i, zv in enumerate(draws):
        save_tensors(out_dir / f"sample_{i:03d}.sofc",
                     {"z": zv.astype(np.float32)})
        if do_render:
            seg = render_segmap(model.hyper, model.classifier, model.marcher,
                                Tensor(zv.astype(np.float32)), cam,
                                n_steps=march_steps)
            save_segmap(out_dir / f"sample_{i:03d}.sofs", seg,
                        model.config.num_classes)
            segmap_to_png(out_dir / f"sample_{i:03d}.png", seg)
    _write_run_record(out_dir, "sample", {
        "ckpt": str(ckpt), "n": n, "truncation": truncation,
        "render": do_render, "res": res, "march_steps": march_steps,
        "out": ".", "seed": seed})
    click.echo(f"wrote {n} samples (mixture has {len(gmm.weights)} components, "
               f"ELBO iters {len(gmm.elbo_trace)})")


@main.command()
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--scene", required=True)
@click.option("--axis", default=0, show_default=True, help="Principal axis index.")
@click.option("--amount", default=1.0, show_default=True)
@click.option("--res", default=64, show_default=True)
@click.option("--march-steps", default=10, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--seed", default=0, show_default=True)
@_exit_codes
def edit(ckpt, scene, axis, amount, res, march_steps, out, seed):
    """Move a scene latent along a principal axis and render before/after."""
    from .camera import orbit_camera
    from .checkpoint import save_tensors
    from .latent import edit_latent, pca_axes, save_pca
    from .marcher import render_segmap
    from .segmap import save_segmap, segmap_to_png
    from .tensor import Tensor
    from .train import load_checkpoint

    model = load_checkpoint(ckpt)
    z = _load_latent(model, scene, None)
    latents = np.stack([t.data for _, t in sorted(model.latents.items())])
    basis = pca_axes(latents)
    z_new = edit_latent(z.data.astype(np.float64), basis, axis, amount)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_pca(out_dir / "axes.sofp", basis)
    save_tensors(out_dir / "edited.sofc", {"z": z_new.astype(np.float32)})
    cam = orbit_camera(0.0, 0.0, 2.5, width=res, height=res)
    for tag, zv in (("source", z.data), ("edited", z_new.astype(np.float32))):
        seg = render_segmap(model.hyper, model.classifier, model.marcher,
                            Tensor(zv), cam, n_steps=march_steps)
        save_segmap(out_dir / f"{tag}.sofs", seg, model.config.num_classes)
        segmap_to_png(out_dir / f"{tag}.png", seg)
    _write_run_record(out_dir, "edit", {
        "ckpt": str(ckpt), "scene": scene, "axis": axis, "amount": amount,
        "res": res, "march_steps": march_steps, "out": ".", "seed": seed})
    click.echo(f"edited {scene} along axis {axis} by {amount}")


@main.command()
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--target", type=click.Path(exists=True), required=True,
              help="Target segmap (.sofs).")
@click.option("--camera", "camera_file", type=click.Path(exists=True), required=True)
@click.option("--budget", default=6000, show_default=True)
@click.option("--eval-every", default=200, show_default=True)
@click.option("--lr", default=1e-2, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--seed", default=0, show_default=True)
@_exit_codes
def project(ckpt, target, camera_file, budget, eval_every, lr, out, seed):
    """Fit a latent to a target segmap; writes the best latent and a trace."""
    from .camera import load_camera
    from .checkpoint import save_tensors
    from .latent import project_segmap
    from .segmap import load_segmap
    from .train import load_checkpoint

    model = load_checkpoint(ckpt)
    seg, _k = load_segmap(target)
    cam = load_camera(camera_file)
    best_z, trace = project_segmap(model, seg, cam, budget=budget, lr=lr,
                                   eval_every=eval_every, seed=seed)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_tensors(out_dir / "projected.sofc", {"z": best_z.astype(np.float32)})
    best_so_far = 0.0
    lines = ["step,miou,best"]
    for step, score in trace:
        best_so_far = max(best_so_far, score)
        lines.append(f"{step},{score:.6f},{best_so_far:.6f}")
    (out_dir / "trace.csv").write_text("\n".join(lines) + "\n")
    _write_run_record(out_dir, "project", {
        "ckpt": str(ckpt), "target": str(target), "camera": str(camera_file),
        "budget": budget, "eval_every": eval_every, "lr": lr,
        "out": ".", "seed": seed})
    click.echo(f"best mIoU {best_so_far:.4f} over {budget} steps")


@main.command("mc-export")
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--scene", default=None)
@click.option("--latent", "latent_file", type=click.Path(exists=True), default=None)
@click.option("--grid", default=64, show_default=True)
@click.option("--level", default=0.5, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="OBJ file path.")
@click.option("--seed", default=0, show_default=True)
@_exit_codes
def mc_export(ckpt, scene, latent_file, grid, level, out, seed):
    """Extract the foreground isosurface of a latent to a Wavefront OBJ."""
    from .mcubes import mc_extract, save_obj
    from .train import load_checkpoint

    model = load_checkpoint(ckpt)
    z = _load_latent(model, scene, latent_file)
    mesh = mc_extract(model.hyper, model.classifier, z, grid_res=grid, level=level)
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_obj(out_path, mesh)
    _write_run_record(out_path.parent, "mc-export", {
        "ckpt": str(ckpt), "scene": scene, "latent": latent_file,
        "grid": grid, "level": level, "out": out_path.name, "seed": seed})
    click.echo(f"{len(mesh.vertices)} vertices, {len(mesh.triangles)} faces -> {out_path}")


@main.command("siw-check")
@click.option("--resolution", default=32, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_exit_codes
def siw_check(resolution, seed):
    """Run the style-conv identity and gradient suite; nonzero exit on failure."""
    from .siwcheck import run_siw_checks

    results = run_siw_checks(resolution=resolution, seed=seed)
    failed = 0
    for name, ok, detail in results:
        status = "PASS" if ok else "FAIL"
        line = f"{status}  {name}"
        if detail and not ok:
            line += f"  ({detail})"
        click.echo(line)
        failed += 0 if ok else 1
    if failed:
        raise FloatingPointError(f"{failed} identity check(s) failed")
    click.echo(f"all {len(results)} checks passed")


if __name__ == "__main__":
    main()
