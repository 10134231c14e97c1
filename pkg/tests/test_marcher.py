"""Ray marcher: contracts, gradients, and the rendering path."""

import numpy as np
import pytest

from sofield import tensor as T
from sofield.camera import orbit_camera
from sofield.field import Classifier, HyperNet, sof_features
from sofield.marcher import (NEAR_PLANE, Marcher, depth_init, march_rays,
                             render_segmap)
from sofield.tensor import Tensor

from gradcheck import check_grads


def tiny_setup(width=8, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    hyper = HyperNet(width, rng, dtype=dtype)
    clf = Classifier(width, 6, rng, dtype=dtype)
    marcher = Marcher(width, rng, dtype=dtype)
    z = Tensor(rng.standard_normal(256).astype(dtype) * 0.1, requires_grad=True)
    return hyper, clf, marcher, z


def some_rays(n, seed=1):
    rng = np.random.default_rng(seed)
    origins = np.tile(np.array([0.0, 0.0, 2.0]), (n, 1))
    dirs = rng.normal(size=(n, 3)) * 0.1 + np.array([0, 0, -1.0])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return origins, dirs


def test_zero_steps_returns_start_point():
    hyper, _, marcher, z = tiny_setup()
    params = hyper(z)
    origins, dirs = some_rays(5)
    res = march_rays(params, marcher, origins, dirs, t0=0.7, n_steps=0)
    np.testing.assert_allclose(res.depth.data, 0.7)
    np.testing.assert_allclose(res.surface_x.data, origins + 0.7 * dirs)
    expect = sof_features(params, Tensor(res.surface_x.data))
    np.testing.assert_array_equal(res.feature.data, expect.data)


def test_zero_marcher_weights_never_move():
    hyper, _, marcher, z = tiny_setup(seed=2)
    for p in marcher.params().values():
        p.data[...] = 0.0
    params = hyper(z)
    origins, dirs = some_rays(6)
    res = march_rays(params, marcher, origins, dirs, t0=0.3, n_steps=7)
    np.testing.assert_allclose(res.depth.data, 0.3)
    for s in res.steps:
        np.testing.assert_array_equal(s.data, np.zeros(6))


def test_steps_nonnegative_depth_monotone():
    hyper, _, marcher, z = tiny_setup(seed=3)
    params = hyper(z)
    origins, dirs = some_rays(32, seed=4)
    res = march_rays(params, marcher, origins, dirs, t0=0.05, n_steps=10)
    running = np.full(32, 0.05)
    for s in res.steps:
        assert (s.data >= 0).all()
        running = running + s.data
    np.testing.assert_allclose(res.depth.data, running, rtol=1e-6)


def test_march_rejects_negative_t0_and_nan_steps():
    hyper, _, marcher, z = tiny_setup(seed=5)
    params = hyper(z)
    origins, dirs = some_rays(3)
    with pytest.raises(ValueError):
        march_rays(params, marcher, origins, dirs, t0=-0.1, n_steps=1)
    marcher.feat_out.weight.data[...] = np.nan
    with pytest.raises(FloatingPointError):
        march_rays(params, marcher, origins, dirs, t0=0.1, n_steps=1)


def test_march_gradients_through_field_and_marcher():
    # CE at the marched endpoint: analytic vs finite-difference gradients for
    # emitted field params (as leaves), marcher weights, and direction maps.
    rng = np.random.default_rng(6)
    width, n, B = 8, 3, 4
    from sofield.field import SofParams

    def leaf(shape, scale=0.4):
        return Tensor(rng.standard_normal(shape) * scale, requires_grad=True,
                      dtype=np.float64)

    params = SofParams(
        weights=[leaf((width, 3)), leaf((width, width)), leaf((width, width))],
        biases=[leaf(width) for _ in range(3)],
        gains=[Tensor(np.ones(width), requires_grad=True, dtype=np.float64) for _ in range(3)],
        shifts=[leaf(width, 0.1) for _ in range(3)],
        width=width,
    )
    marcher = Marcher(width, rng, dtype=np.float64)
    clf = Classifier(width, 6, rng, dtype=np.float64)
    origins, dirs = some_rays(B, seed=7)
    target = rng.integers(0, 6, size=B)

    def f():
        res = march_rays(params, marcher, origins, dirs, t0=0.6, n_steps=n)
        logp = T.log_softmax(clf.logits(res.feature))
        return -logp[np.arange(B), target].mean()

    probes = [("w0", params.weights[0]), ("b1", params.biases[1]),
              ("gain2", params.gains[2]), ("shift0", params.shifts[0]),
              ("marcher.feat0", marcher.feat_layers[0].weight),
              ("marcher.dir3.b", marcher.dir_layers[3].bias),
              ("marcher.out", marcher.feat_out.weight),
              ("clf.head", clf.head.weight)]
    check_grads(f, probes)


def test_render_constant_logit_stub_uniform_class():
    hyper, clf, marcher, z = tiny_setup(seed=8)
    clf.head.weight.data[...] = 0.0
    clf.head.bias.data[...] = 0.0
    clf.head.bias.data[4] = 5.0
    cam = orbit_camera(10.0, 5.0, 2.5, width=12, height=12)
    seg = render_segmap(hyper, clf, marcher, z, cam, n_steps=3)
    assert (seg == 4).all()


def test_render_deterministic():
    hyper, clf, marcher, z = tiny_setup(seed=9)
    cam = orbit_camera(-20.0, 8.0, 2.5, width=10, height=10)
    a, da = render_segmap(hyper, clf, marcher, z, cam, n_steps=4, return_depth=True)
    b, db = render_segmap(hyper, clf, marcher, z, cam, n_steps=4, return_depth=True)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(da, db)


def test_render_argmax_invariant_to_logit_shift():
    hyper, clf, marcher, z = tiny_setup(seed=10)
    cam = orbit_camera(0.0, 0.0, 2.5, width=10, height=10)
    a = render_segmap(hyper, clf, marcher, z, cam, n_steps=4)
    clf.head.bias.data += 3.7
    b = render_segmap(hyper, clf, marcher, z, cam, n_steps=4)
    np.testing.assert_array_equal(a, b)


def test_render_leaves_no_tape():
    hyper, clf, marcher, z = tiny_setup(seed=11)
    cam = orbit_camera(0.0, 0.0, 2.5, width=6, height=6)
    render_segmap(hyper, clf, marcher, z, cam, n_steps=2)
    assert z.grad is None
    loss = (z * z).sum()
    loss.backward()
    assert z.grad is not None  # tape still healthy after rendering


def test_depth_init_empty_mesh_all_near():
    from sofield.mcubes import TriMesh
    cam = orbit_camera(0.0, 0.0, 2.0, width=8, height=8)
    mesh = TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    d = depth_init(mesh, cam)
    np.testing.assert_array_equal(d, np.full((8, 8), NEAR_PLANE))


def test_depth_init_sphere_center_pixel():
    from sofield.mcubes import marching_cubes, voxel_diagonal
    res = 48
    axes = np.linspace(-1, 1, res)
    xs, ys, zs = np.meshgrid(axes, axes, axes, indexing="ij")
    field = np.sqrt(xs**2 + ys**2 + zs**2) - 0.5
    mesh = marching_cubes(field, origin=(-1, -1, -1), spacing=2 / (res - 1))
    cam = orbit_camera(0.0, 0.0, 2.0, width=33, height=33)
    d = depth_init(mesh, cam)
    assert d[16, 16] == pytest.approx(1.5, abs=voxel_diagonal(res))
    assert (d >= NEAR_PLANE).all()
