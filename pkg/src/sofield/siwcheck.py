"""Self-contained verification suite for the regional style-conv stack.

Runs the algebraic identities the layer family guarantees (exact in IEEE
arithmetic where the math is exact, 1e-6 otherwise) plus small float64
finite-difference gradient checks. Returns results instead of asserting so
the CLI can print one line per check and exit nonzero on failure.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .texture import (DEMOD_EPS, STYLE_DIM, Generator, SiwLayer, SpadeNet,
                      instance_norm, mixed_style_conv, mod_demod, siw_conv,
                      spade_fuse)

GRAD_H = 1e-5
GRAD_RTOL = 1e-4


def _numeric_grad(f: Callable[[], Tensor], param: Tensor) -> np.ndarray:
    g = np.zeros(param.data.shape, dtype=np.float64)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + GRAD_H
        hi = float(f().data)
        flat[i] = orig - GRAD_H
        lo = float(f().data)
        flat[i] = orig
        g.reshape(-1)[i] = (hi - lo) / (2.0 * GRAD_H)
    return g


def _max_grad_err(f: Callable[[], Tensor],
                  params: Sequence[tuple[str, Tensor]]) -> float:
    """Worst relative error between analytic and central-difference grads."""
    for _, p in params:
        p.grad = None
    f().backward()
    worst = 0.0
    for _, p in params:
        if p.grad is None:
            return float("inf")
        num = _numeric_grad(f, p)
        err = np.abs(p.grad - num) / np.maximum(np.abs(num), 1e-7 / GRAD_RTOL)
        worst = max(worst, float(err.max()))
    return worst


def _one_hot_quadrants(k: int, size: int) -> np.ndarray:
    seg = np.zeros((size, size), dtype=np.int64)
    half = size // 2
    seg[:half, half:] = 1 % k
    seg[half:, :half] = 2 % k
    seg[half:, half:] = 3 % k
    m = np.zeros((k, size, size), dtype=np.float32)
    for i in range(k):
        m[i] = seg == i
    return m


def _styles(rng: np.random.Generator, n: int, dtype=np.float32) -> list[Tensor]:
    return [Tensor(rng.standard_normal(STYLE_DIM).astype(dtype)) for _ in range(n)]


def run_siw_checks(resolution: int = 32, seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    results: list[tuple[str, bool, str]] = []

    def record(name: str, ok: bool, detail: str = "") -> None:
        results.append((name, bool(ok), detail))

    # Exact collapse: one class covering everything is a plain modulated conv.
    layer = SiwLayer(4, 3, 1, rng)
    f = Tensor(rng.standard_normal((1, 4, 8, 8)).astype(np.float32))
    (style,) = _styles(rng, 1)
    ones = Tensor(np.ones((1, 1, 8, 8), dtype=np.float32))
    got = siw_conv(f, ones, [style], layer)
    want = layer.modulated(f, style) + layer.bias.reshape(1, -1, 1, 1)
    record("single-region conv equals plain conv",
           np.array_equal(got.data, want.data))

    # Sharing one style across all regions must ignore the partition.
    layer3 = SiwLayer(4, 3, 3, rng)
    m3 = Tensor(_one_hot_quadrants(3, 8))
    got = siw_conv(f, m3, [style, style, style], layer3)
    want = layer3.modulated(f, style) + layer3.bias.reshape(1, -1, 1, 1)
    record("shared style ignores the partition",
           np.array_equal(got.data, want.data))

    # Relabeling classes and styles together cannot change the image.
    styles = _styles(rng, 3)
    perm = [2, 0, 1]
    base = siw_conv(f, m3, styles, layer3)
    permuted = siw_conv(f, Tensor(m3.data[perm]),
                        [styles[i] for i in perm], layer3)
    record("region relabeling leaves output unchanged",
           np.array_equal(base.data, permuted.data))

    # Blend endpoints: P=1 must reproduce style 0 alone, P=0 style 1 alone.
    w0, w1 = _styles(rng, 2)
    at_one = mixed_style_conv(f, Tensor(np.float32(1.0)), w0, w1, layer3,
                              include_spade=False)
    at_zero = mixed_style_conv(f, Tensor(np.float32(0.0)), w0, w1, layer3,
                               include_spade=False)
    only0 = siw_conv(f, ones.reshape(1, 1, 8, 8), [w0], layer)
    record("blend endpoints select a single style",
           np.array_equal(at_one.data,
                          (layer3.modulated(f, w0) + layer3.bias.reshape(1, -1, 1, 1)).data)
           and np.array_equal(at_zero.data,
                              (layer3.modulated(f, w1) + layer3.bias.reshape(1, -1, 1, 1)).data)
           and only0.data.shape == at_one.data.shape)

    # Demodulation: every output channel's kernel ends at unit energy.
    alpha = Tensor(rng.uniform(0.5, 2.0, 4).astype(np.float32))
    kernel = mod_demod(layer.weight, alpha)
    energy = (kernel.data.astype(np.float64) ** 2).sum(axis=(1, 2, 3))
    worst = float(np.abs(energy - 1.0).max())
    record("demodulated kernels carry unit energy", worst < 1e-6 + DEMOD_EPS * 10,
           f"max deviation {worst:.2e}")

    # SPADE heads start at gain one, shift zero: a pure instance norm.
    spade = SpadeNet(3, 3, rng)
    fs = Tensor(rng.standard_normal((1, 3, 8, 8)).astype(np.float32))
    fused = spade_fuse(fs, m3, spade)
    record("spade starts as a pure normalizer",
           np.array_equal(fused.data, instance_norm(fs).data))

    # Gradient checks run in float64; frozen randomness keeps them cheap.
    w64 = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
    a64 = Tensor(rng.uniform(0.5, 2.0, 2), requires_grad=True)
    err = _max_grad_err(lambda: (mod_demod(w64, a64) ** 2.0).sum(),
                        [("w", w64), ("alpha", a64)])
    record("modulation gradients match finite differences", err < GRAD_RTOL,
           f"max rel err {err:.2e}")

    layer64 = SiwLayer(2, 2, 2, rng, dtype=np.float64)
    layer64.affine.weight.data[...] = rng.standard_normal(
        layer64.affine.weight.shape) * 0.01
    f64 = Tensor(rng.standard_normal((1, 2, 6, 6)))
    m64 = Tensor(_one_hot_quadrants(2, 6).astype(np.float64))
    s64 = _styles(rng, 2, dtype=np.float64)
    const = rng.standard_normal((1, 2, 6, 6))

    def regional_loss() -> Tensor:
        return (siw_conv(f64, m64, s64, layer64) * Tensor(const)).sum()

    err = _max_grad_err(regional_loss, [("weight", layer64.weight),
                                        ("bias", layer64.bias),
                                        ("affine_bias", layer64.affine.bias)])
    record("regional conv gradients match finite differences", err < GRAD_RTOL,
           f"max rel err {err:.2e}")

    # End to end: the generator must produce a finite image at this size.
    gen = Generator(4, resolution=resolution, rng=np.random.default_rng(seed))
    mask = _one_hot_quadrants(4, resolution)
    z0 = rng.standard_normal(STYLE_DIM).astype(np.float32)
    z1 = rng.standard_normal(STYLE_DIM).astype(np.float32)
    with T.no_grad():
        img = gen(mask, Tensor(z0), Tensor(z1), np.full(4, 0.5))
    ok = img.data.shape == (1, 3, resolution, resolution) and np.isfinite(img.data).all()
    record("generator forward is finite at full size", ok,
           f"shape {img.data.shape}")

    return results
