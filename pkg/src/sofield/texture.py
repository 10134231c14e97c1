"""Region-wise style-modulated convolution stack.

A mapping network turns style vectors into modulation scales; kernels are
modulated per input channel and demodulated to unit per-output-channel
norm; regional convs are blended either per one-hot class masks or by a
two-style distance map; SPADE layers re-normalize with spatial gain/shift
predicted from the segmap. Assembled into a small conditional generator
verified by algebraic identities and a single-image overfit.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import Conv2d, Linear, conv2d, prefix_params
from .tensor import Tensor

STYLE_DIM = 512
DEMOD_EPS = 1e-8
IN_EPS = 1e-5


class MappingNet:
    """Eight FC(512) layers with leaky ReLU 0.2."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32, depth: int = 8):
        self.layers = [Linear(STYLE_DIM, STYLE_DIM, rng, dtype=dtype) for _ in range(depth)]

    def __call__(self, z: Tensor) -> Tensor:
        h = z.reshape(-1, STYLE_DIM) if z.data.ndim == 1 else z
        for layer in self.layers:
            h = T.leaky_relu(layer(h), alpha=0.2)
        return h

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(prefix_params(f"mapping/fc{i}", layer.params()))
        return out


def map_style(mapping: MappingNet, z: Tensor) -> Tensor:
    return mapping(z)


def mod_demod(weight: Tensor, alpha: Tensor) -> Tensor:
    """Scale kernel per input channel, then normalize per output channel.

    weight: (out, in, k, k); alpha: (in,) or (1, in). The demodulated
    kernel has unit L2 norm over (in, k, k) for every output channel, up
    to the epsilon in the denominator.
    """
    out_ch, in_ch = weight.shape[0], weight.shape[1]
    if alpha.data.reshape(-1).shape[0] != in_ch:
        raise T.ShapeError(f"alpha has {alpha.data.size} scales, kernel wants {in_ch}")
    wmod = weight * alpha.reshape(1, in_ch, 1, 1)
    denom = T.sqrt((wmod * wmod).sum(axis=(1, 2, 3), keepdims=True) + DEMOD_EPS)
    return wmod / denom


def check_one_hot(m: np.ndarray) -> None:
    vals = np.unique(m)
    if not np.isin(vals, (0.0, 1.0)).all():
        raise ValueError("segmap mask entries must be 0 or 1")
    if not np.array_equal(m.sum(axis=0), np.ones(m.shape[1:])):
        raise ValueError("segmap mask must have exactly one class per pixel")


def one_hot_segmap(seg: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(H, W) class indices -> (K, H, W) one-hot float mask."""
    if seg.min() < 0 or seg.max() >= num_classes:
        raise ValueError("class index out of range")
    return (np.arange(num_classes)[:, None, None] == seg[None]).astype(dtype)


class SpadeNet:
    """Two-conv net over the one-hot mask: shared conv, then gain/shift heads.

    Heads start at gain 1, shift 0 so the layer is a pure normalizer at
    initialization.
    """

    def __init__(self, num_classes: int, channels: int, rng: np.random.Generator,
                 hidden: int = 32, dtype=np.float32):
        self.shared = Conv2d(num_classes, hidden, 3, rng, padding=1, dtype=dtype)
        self.gamma_head = Conv2d(hidden, channels, 3, rng, padding=1, dtype=dtype)
        self.beta_head = Conv2d(hidden, channels, 3, rng, padding=1, dtype=dtype)
        self.gamma_head.weight.data[...] = 0.0
        self.gamma_head.bias.data[...] = 1.0
        self.beta_head.weight.data[...] = 0.0
        self.beta_head.bias.data[...] = 0.0

    def __call__(self, m: Tensor) -> tuple[Tensor, Tensor]:
        if m.data.ndim == 3:
            m = m.reshape(1, *m.shape)
        h = T.relu(self.shared(m))
        return self.gamma_head(h), self.beta_head(h)

    def params(self) -> dict[str, Tensor]:
        out = {}
        out.update(prefix_params("shared", self.shared.params()))
        out.update(prefix_params("gamma", self.gamma_head.params()))
        out.update(prefix_params("beta", self.beta_head.params()))
        return out


def instance_norm(f: Tensor, eps: float = IN_EPS) -> Tensor:
    """Per-sample, per-channel standardization over the spatial axes."""
    mu = f.mean(axis=(2, 3), keepdims=True)
    centered = f - mu
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    return centered / T.sqrt(var + eps)


def spade_fuse(f: Tensor, m: Tensor, spade: SpadeNet) -> Tensor:
    """Instance-normalize, then apply mask-conditioned gain and shift."""
    gamma, beta = spade(m)
    return gamma * instance_norm(f) + beta


class SiwLayer:
    """One regional style conv: base 3x3 kernel + style affine (+ SPADE)."""

    def __init__(self, in_ch: int, out_ch: int, num_classes: int,
                 rng: np.random.Generator, spade: bool = False, dtype=np.float32):
        fan_in = in_ch * 9
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (out_ch, in_ch, 3, 3)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        # Bias-one affine: styles start as the identity modulation.
        self.affine = Linear(STYLE_DIM, in_ch, rng, dtype=dtype)
        self.affine.weight.data[...] = 0.0
        self.affine.bias.data[...] = 1.0
        self.spade = SpadeNet(num_classes, out_ch, rng, dtype=dtype) if spade else None

    def modulated(self, f: Tensor, w_style: Tensor) -> Tensor:
        alpha = self.affine(w_style)
        kernel = mod_demod(self.weight, alpha)
        return conv2d(f, kernel, padding=1)

    def params(self) -> dict[str, Tensor]:
        out = {"weight": self.weight, "bias": self.bias}
        out.update(prefix_params("affine", self.affine.params()))
        if self.spade is not None:
            out.update(prefix_params("spade", self.spade.params()))
        return out


def siw_conv(f: Tensor, m: Tensor, styles: list[Tensor], layer: SiwLayer) -> Tensor:
    """Sum of per-region modulated convs masked by the one-hot segmap.

    ``styles`` holds one mapped style vector per class; region i of the
    output comes from the kernel modulated with style i.
    """
    k = m.shape[0] if m.data.ndim == 3 else m.shape[1]
    if len(styles) != k:
        raise ValueError(f"{len(styles)} styles for {k} classes")
    masks = m if m.data.ndim == 4 else m.reshape(1, *m.shape)
    out = None
    for i, w_style in enumerate(styles):
        regional = layer.modulated(f, w_style) * masks[:, i:i + 1]
        out = regional if out is None else out + regional
    return out + layer.bias.reshape(1, -1, 1, 1)


def mixed_style_conv(f: Tensor, p: Tensor, w0: Tensor, w1: Tensor, layer: SiwLayer,
                     m: Tensor | None = None, include_spade: bool = True) -> Tensor:
    """Two-style blend: conv with each style, mix by P and 1-P, then SPADE.

    ``p`` broadcasts against the conv output (scalar or (1,1,H,W) map).
    """
    pv = p.data if isinstance(p, Tensor) else np.asarray(p)
    if pv.min() < 0 or pv.max() > 1:
        raise ValueError("distance map P must lie in [0, 1]")
    if not isinstance(p, Tensor):
        p = Tensor(pv.astype(f.data.dtype))
    blended = layer.modulated(f, w0) * p + layer.modulated(f, w1) * (1.0 - p)
    blended = blended + layer.bias.reshape(1, -1, 1, 1)
    if include_spade and layer.spade is not None:
        if m is None:
            raise ValueError("layer has SPADE but no mask was given")
        return spade_fuse(blended, m, layer.spade)
    return blended


class SegmapEncoder:
    """Four stride-2 conv blocks (each with a stride-1 refiner), K -> 128."""

    CHANNELS = (16, 32, 64, 128)

    def __init__(self, num_classes: int, rng: np.random.Generator, dtype=np.float32):
        self.blocks = []
        prev = num_classes
        for ch in self.CHANNELS:
            down = Conv2d(prev, ch, 3, rng, stride=2, padding=1, dtype=dtype)
            keep = Conv2d(ch, ch, 3, rng, stride=1, padding=1, dtype=dtype)
            self.blocks.append((down, keep))
            prev = ch

    def __call__(self, m: Tensor) -> Tensor:
        h = m if m.data.ndim == 4 else m.reshape(1, *m.shape)
        for down, keep in self.blocks:
            h = T.leaky_relu(down(h), alpha=0.2)
            h = T.leaky_relu(keep(h), alpha=0.2)
        return h

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (down, keep) in enumerate(self.blocks):
            out.update(prefix_params(f"enc{i}/down", down.params()))
            out.update(prefix_params(f"enc{i}/keep", keep.params()))
        return out


def encode_segmap(encoder: SegmapEncoder, m: np.ndarray) -> Tensor:
    check_one_hot(m)
    return encoder(Tensor(m.astype(np.float32)))


class Generator:
    """Segmap-conditioned two-style generator.

    Encoder output enters a ladder of five mixed-style blocks (the first
    at the bottleneck resolution, then four 2x upsamplings); the middle
    three carry SPADE. A final 1x1 conv projects to RGB. No noise
    injection anywhere, so outputs are deterministic.
    """

    CHANNELS = (128, 128, 64, 32, 16)
    SPADE_BLOCKS = (1, 2, 3)

    def __init__(self, num_classes: int, resolution: int = 64,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if resolution not in (32, 64, 128):
            raise ValueError("resolution must be one of 32, 64, 128")
        if rng is None:
            rng = np.random.default_rng(0)
        self.num_classes = num_classes
        self.resolution = resolution
        self.mapping = MappingNet(rng, dtype=dtype)
        self.encoder = SegmapEncoder(num_classes, rng, dtype=dtype)
        self.blocks = []
        prev = SegmapEncoder.CHANNELS[-1]
        for i, ch in enumerate(self.CHANNELS):
            self.blocks.append(SiwLayer(prev, ch, num_classes, rng,
                                        spade=i in self.SPADE_BLOCKS, dtype=dtype))
            prev = ch
        self.to_rgb = Conv2d(prev, 3, 1, rng, dtype=dtype)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(prefix_params("siw", self.mapping.params()))
        out.update(prefix_params("siw", self.encoder.params()))
        for i, block in enumerate(self.blocks):
            out.update(prefix_params(f"siw/block{i}", block.params()))
        out.update(prefix_params("siw/to_rgb", self.to_rgb.params()))
        return out

    def _mask_at(self, m: np.ndarray, res: int) -> np.ndarray:
        s = m.shape[1] // res
        return m[:, ::s, ::s] if s > 1 else m

    def __call__(self, m: np.ndarray, z0: Tensor, z1: Tensor,
                 p_class: np.ndarray) -> Tensor:
        """m: one-hot (K, R, R); p_class: per-class scalars in [0, 1]."""
        check_one_hot(m)
        if m.shape != (self.num_classes, self.resolution, self.resolution):
            raise ValueError("mask does not match generator geometry")
        p_class = np.asarray(p_class, dtype=np.float64)
        if p_class.shape != (self.num_classes,) or p_class.min() < 0 or p_class.max() > 1:
            raise ValueError("need one P scalar in [0,1] per class")
        dtype = self.to_rgb.weight.data.dtype
        w0 = self.mapping(z0)
        w1 = self.mapping(z1)
        h = self.encoder(Tensor(m.astype(dtype)))
        res = h.shape[-1]
        for i, block in enumerate(self.blocks):
            if i > 0:
                h = T.upsample2x(h)
                res *= 2
            m_res = self._mask_at(m, res).astype(dtype)
            p_map = Tensor((p_class.astype(dtype)[:, None, None] * m_res)
                           .sum(axis=0)[None, None])
            h = mixed_style_conv(h, p_map, w0, w1, block, m=Tensor(m_res[None]))
            h = T.leaky_relu(h, alpha=0.2)
        return self.to_rgb(h)


def generate_image(gen: Generator, m: np.ndarray, z0: np.ndarray, z1: np.ndarray,
                   p_class: np.ndarray) -> np.ndarray:
    """Forward pass to a (3, R, R) float array, tape-free."""
    with T.no_grad():
        out = gen(m, Tensor(np.asarray(z0, dtype=np.float32)),
                  Tensor(np.asarray(z1, dtype=np.float32)), p_class)
    return out.data[0]


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return -10.0 * np.log10(mse)


def overfit_single(gen: Generator, target: np.ndarray, m: np.ndarray,
                   steps: int, lr: float = 2e-3, seed: int = 0,
                   eval_every: int = 50, stop_psnr: float | None = None,
                   progress=None) -> list[tuple[int, float]]:
    """L2-fit the generator to one image with both styles tied.

    Returns the PSNR trace [(step, psnr)]; stops early once a periodic
    evaluation reaches ``stop_psnr``. Non-finite loss aborts.
    """
    if target.shape != (3, gen.resolution, gen.resolution):
        raise ValueError("target must be (3, R, R)")
    check_one_hot(m)
    from .optim import Adam

    rng = np.random.default_rng(seed)
    z = Tensor(rng.standard_normal(STYLE_DIM).astype(np.float32))
    p_class = np.full(gen.num_classes, 0.5)
    tgt = Tensor(target.astype(np.float32)[None])
    opt = Adam(gen.params(), lr=lr, beta1=0.0, beta2=0.99, eps=1e-8)

    def score() -> float:
        return psnr(generate_image(gen, m, z.data, z.data, p_class), target)

    trace = [(0, score())]
    for step in range(1, steps + 1):
        out = gen(m, z, z, p_class)
        diff = out - tgt
        loss = (diff * diff).mean()
        if not np.isfinite(loss.data):
            raise RuntimeError(f"overfit diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % eval_every == 0 or step == steps:
            trace.append((step, score()))
            if progress is not None:
                progress(step, trace[-1][1])
            if stop_psnr is not None and trace[-1][1] >= stop_psnr:
                break
    return trace
