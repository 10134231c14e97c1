"""Command-line interface: file layouts, exit codes, determinism."""

import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

from sofield import cli
from sofield.segmap import load_segmap


def run_cli(*args, env=None):
    return CliRunner().invoke(cli.main, [str(a) for a in args], env=env)


def tree_bytes(root):
    """Relative path -> file bytes for a whole directory tree."""
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    """Tiny dataset plus a briefly trained checkpoint, shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    ds = root / "ds"
    r = run_cli("gen-data", "--out", ds, "--scenes", 2, "--views", 3,
                "--res", 16, "--seed", 0)
    assert r.exit_code == 0, r.output
    run = root / "run"
    r = run_cli("train", "--data", ds, "--out", run, "--steps", 30,
                "--width", 16, "--rays", 32, "--march-steps", 3,
                "--warmup", 10, "--miou-every", 0, "--seed", 0)
    assert r.exit_code == 0, r.output
    return {"root": root, "ds": ds, "run": run, "ckpt": run / "model.sofc"}


class TestGenData:
    def test_layout(self, toy):
        ds = toy["ds"]
        assert (ds / "manifest.txt").exists()
        assert (ds / "run.json").exists()
        segs = sorted(ds.glob("scene_*/view_*.segmap"))
        assert len(segs) == 6
        seg, k = load_segmap(segs[0])
        assert seg.shape == (16, 16) and k == 6

    def test_requires_destination(self):
        r = run_cli("gen-data", "--scenes", 1, "--views", 1, "--res", 8,
                    env={"SOFIELD_DATA_ROOT": ""})
        assert r.exit_code == 2

    def test_env_var_destination(self, tmp_path):
        dest = tmp_path / "envds"
        r = run_cli("gen-data", "--scenes", 1, "--views", 1, "--res", 8,
                    env={"SOFIELD_DATA_ROOT": str(dest)})
        assert r.exit_code == 0, r.output
        assert (dest / "manifest.txt").exists()

    def test_rejects_bad_sizes(self, tmp_path):
        r = run_cli("gen-data", "--out", tmp_path / "x", "--scenes", 0)
        assert r.exit_code == 2

    def test_run_record(self, toy):
        rec = json.loads((toy["ds"] / "run.json").read_text())
        assert rec["command"] == "gen-data"
        assert rec["config"]["scenes"] == 2
        assert rec["config"]["seed"] == 0


class TestTrain:
    def test_outputs(self, toy):
        run = toy["run"]
        assert (run / "model.sofc").exists()
        assert (run / "run.json").exists()
        header, *rows = (run / "metrics.csv").read_text().splitlines()
        assert header == "step,loss,lr,miou"
        assert len(rows) >= 1

    def test_missing_dataset(self, tmp_path):
        r = run_cli("train", "--data", tmp_path, "--out", tmp_path / "o",
                    "--steps", 1)
        assert r.exit_code == 3  # no manifest -> file error

    def test_requires_data(self, tmp_path):
        r = run_cli("train", "--out", tmp_path / "o", "--steps", 1,
                    env={"SOFIELD_DATA_ROOT": ""})
        assert r.exit_code == 2


class TestRender:
    def test_orbit_layout(self, toy, tmp_path):
        r = run_cli("render", "--ckpt", toy["ckpt"], "--scene", "scene_000",
                    "--orbit", 3, "--res", 16, "--out", tmp_path / "r")
        assert r.exit_code == 0, r.output
        for i in range(3):
            for ext in (".sofs", ".png", ".cam"):
                assert (tmp_path / "r" / f"view_{i:03d}{ext}").exists()

    def test_camera_file(self, toy, tmp_path):
        cam_src = sorted(toy["ds"].glob("scene_000/view_*.cam"))[0]
        r = run_cli("render", "--ckpt", toy["ckpt"], "--scene", "scene_000",
                    "--camera", cam_src, "--out", tmp_path / "r")
        assert r.exit_code == 0, r.output
        assert (tmp_path / "r" / "view_000.sofs").exists()
        assert not (tmp_path / "r" / "view_001.sofs").exists()

    def test_depth_flag(self, toy, tmp_path):
        r = run_cli("render", "--ckpt", toy["ckpt"], "--scene", "scene_000",
                    "--orbit", 1, "--res", 16, "--depth", "--out", tmp_path / "r")
        assert r.exit_code == 0, r.output
        assert (tmp_path / "r" / "view_000.sofd").exists()

    def test_unknown_scene(self, toy, tmp_path):
        r = run_cli("render", "--ckpt", toy["ckpt"], "--scene", "nope",
                    "--out", tmp_path / "r")
        assert r.exit_code == 2

    def test_bad_camera_file_names_line(self, toy, tmp_path):
        bad = tmp_path / "bad.cam"
        bad.write_text("16 16 x 20 8 8\n1 0 0 0\n0 1 0 0\n0 0 1 2\n")
        r = run_cli("render", "--ckpt", toy["ckpt"], "--scene", "scene_000",
                    "--camera", bad, "--out", tmp_path / "r")
        assert r.exit_code == 2
        assert "line 1" in r.output


class TestSample:
    def test_layout(self, toy, tmp_path):
        r = run_cli("sample", "--ckpt", toy["ckpt"], "--n", 2, "--res", 16,
                    "--out", tmp_path / "s")
        assert r.exit_code == 0, r.output
        assert (tmp_path / "s" / "mixture.sofg").exists()
        for i in range(2):
            assert (tmp_path / "s" / f"sample_{i:03d}.sofc").exists()
            assert (tmp_path / "s" / f"sample_{i:03d}.sofs").exists()

    def test_no_render(self, toy, tmp_path):
        r = run_cli("sample", "--ckpt", toy["ckpt"], "--n", 1, "--no-render",
                    "--out", tmp_path / "s")
        assert r.exit_code == 0, r.output
        assert (tmp_path / "s" / "sample_000.sofc").exists()
        assert not (tmp_path / "s" / "sample_000.sofs").exists()


class TestEdit:
    def test_zero_amount_is_identity(self, toy, tmp_path):
        r = run_cli("edit", "--ckpt", toy["ckpt"], "--scene", "scene_000",
                    "--axis", 0, "--amount", 0.0, "--res", 16,
                    "--out", tmp_path / "e")
        assert r.exit_code == 0, r.output
        src = (tmp_path / "e" / "source.sofs").read_bytes()
        edt = (tmp_path / "e" / "edited.sofs").read_bytes()
        assert src == edt

    def test_axis_out_of_range(self, toy, tmp_path):
        r = run_cli("edit", "--ckpt", toy["ckpt"], "--scene", "scene_000",
                    "--axis", 999, "--out", tmp_path / "e")
        assert r.exit_code == 2


class TestProject:
    def test_trace_and_artifacts(self, toy, tmp_path):
        rend = tmp_path / "t"
        r = run_cli("render", "--ckpt", toy["ckpt"], "--scene", "scene_001",
                    "--orbit", 1, "--res", 16, "--out", rend)
        assert r.exit_code == 0, r.output
        r = run_cli("project", "--ckpt", toy["ckpt"],
                    "--target", rend / "view_000.sofs",
                    "--camera", rend / "view_000.cam",
                    "--budget", 50, "--eval-every", 25, "--out", tmp_path / "p")
        assert r.exit_code == 0, r.output
        assert (tmp_path / "p" / "projected.sofc").exists()
        lines = (tmp_path / "p" / "trace.csv").read_text().splitlines()
        assert lines[0] == "step,miou,best"
        best = [float(ln.split(",")[2]) for ln in lines[1:]]
        assert best == sorted(best)


class TestMcExport:
    def test_writes_obj(self, toy, tmp_path):
        out = tmp_path / "m" / "mesh.obj"
        r = run_cli("mc-export", "--ckpt", toy["ckpt"], "--scene", "scene_000",
                    "--grid", 16, "--out", out)
        assert r.exit_code == 0, r.output
        assert out.exists()


class TestSiwCheck:
    def test_passes(self):
        r = run_cli("siw-check", "--resolution", 32)
        assert r.exit_code == 0, r.output
        assert "PASS" in r.output and "FAIL" not in r.output


class TestDeterminism:
    def test_gen_data_bytes(self, tmp_path):
        for d in ("a", "b"):
            r = run_cli("gen-data", "--out", tmp_path / d, "--scenes", 1,
                        "--views", 2, "--res", 12, "--seed", 5)
            assert r.exit_code == 0, r.output
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_train_bytes(self, toy, tmp_path):
        outs = []
        for d in ("a", "b"):
            r = run_cli("train", "--data", toy["ds"], "--out", tmp_path / d,
                        "--steps", 10, "--width", 16, "--rays", 16,
                        "--march-steps", 2, "--miou-every", 0, "--seed", 3)
            assert r.exit_code == 0, r.output
            outs.append(tree_bytes(tmp_path / d))
        assert outs[0] == outs[1]

    def test_render_bytes(self, toy, tmp_path):
        outs = []
        for d in ("a", "b"):
            r = run_cli("render", "--ckpt", toy["ckpt"], "--scene", "scene_000",
                        "--orbit", 2, "--res", 16, "--out", tmp_path / d)
            assert r.exit_code == 0, r.output
            outs.append(tree_bytes(tmp_path / d))
        assert outs[0] == outs[1]

    def test_sample_bytes(self, toy, tmp_path):
        outs = []
        for d in ("a", "b"):
            r = run_cli("sample", "--ckpt", toy["ckpt"], "--n", 2, "--res", 16,
                        "--seed", 11, "--out", tmp_path / d)
            assert r.exit_code == 0, r.output
            outs.append(tree_bytes(tmp_path / d))
        assert outs[0] == outs[1]


class TestThreadRequest:
    def test_reads_flag_forms(self, monkeypatch):
        monkeypatch.setattr("sys.argv", ["sofield", "--threads", "4", "train"])
        assert cli._thread_request() == "4"
        monkeypatch.setattr("sys.argv", ["sofield", "--threads=8", "train"])
        assert cli._thread_request() == "8"

    def test_env_fallback_then_default(self, monkeypatch):
        monkeypatch.setattr("sys.argv", ["sofield", "train"])
        monkeypatch.setenv("SOFIELD_THREADS", "2")
        assert cli._thread_request() == "2"
        monkeypatch.delenv("SOFIELD_THREADS")
        assert cli._thread_request() == "1"
