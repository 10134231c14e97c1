"""Parameterized building blocks on top of the autodiff tensor.

Modules here are thin containers: they own parameter tensors and expose a
``params()`` name->Tensor mapping so optimizers and checkpoints can walk
them uniformly. There is no implicit registration magic; composites list
their children explicitly.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


def fan_in_uniform(rng: np.random.Generator, out_dim: int, in_dim: int, dtype=np.float32) -> np.ndarray:
    """Weight init U(-1/sqrt(in), 1/sqrt(in)), shape (out, in)."""
    bound = 1.0 / np.sqrt(in_dim)
    return rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(dtype)


def fan_in_bias(rng: np.random.Generator, out_dim: int, in_dim: int, dtype=np.float32) -> np.ndarray:
    bound = 1.0 / np.sqrt(in_dim)
    return rng.uniform(-bound, bound, size=(out_dim,)).astype(dtype)


class Linear:
    """Affine layer with weight stored (out_features, in_features)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(fan_in_uniform(rng, out_features, in_features, dtype), requires_grad=True)
        self.bias = Tensor(fan_in_bias(rng, out_features, in_features, dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear_forward(x, self.weight, self.bias)

    def params(self) -> dict[str, Tensor]:
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p


class LayerNorm:
    """Last-axis normalization with learned gain and shift."""

    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.dim = dim
        self.eps = eps
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.shift, eps=self.eps)

    def params(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "shift": self.shift}


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation, NCHW layout, square kernel.

    Built from gather + matmul primitives so the backward pass comes for
    free from the tape (gather backward is a scatter-add).
    """
    B, Cin, H, W = x.shape
    Cout, Cin_w, kh, kw = weight.shape
    if Cin != Cin_w:
        raise T.ShapeError(f"conv2d channel mismatch: input {Cin} vs kernel {Cin_w}")
    xp = T.pad2d(x, padding)
    Hp, Wp = H + 2 * padding, W + 2 * padding
    Hout = (Hp - kh) // stride + 1
    Wout = (Wp - kw) // stride + 1

    oy, ox = np.meshgrid(np.arange(Hout) * stride, np.arange(Wout) * stride, indexing="ij")
    dy, dx = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    iy = oy[:, :, None, None] + dy[None, None]  # (Hout, Wout, kh, kw)
    ix = ox[:, :, None, None] + dx[None, None]

    cols = xp[:, :, iy, ix]                       # (B, Cin, Hout, Wout, kh, kw)
    cols = T.transpose(cols, (0, 2, 3, 1, 4, 5))  # (B, Hout, Wout, Cin, kh, kw)
    cols = cols.reshape(B, Hout, Wout, Cin * kh * kw)

    wmat = weight.reshape(Cout, Cin * kh * kw)
    out = T.matmul(cols, T.transpose(wmat))       # (B, Hout, Wout, Cout)
    if bias is not None:
        out = out + bias.reshape(1, 1, 1, Cout)
    return T.transpose(out, (0, 3, 1, 2))


class Conv2d:
    """Convolution layer; weight (out, in, k, k), fan-in uniform init."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True, dtype=np.float32):
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * kernel * kernel
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = Tensor(
            rng.uniform(-bound, bound, size=(out_ch, in_ch, kernel, kernel)).astype(dtype),
            requires_grad=True,
        )
        self.bias = Tensor(
            rng.uniform(-bound, bound, size=(out_ch,)).astype(dtype), requires_grad=True
        ) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def params(self) -> dict[str, Tensor]:
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p


def prefix_params(prefix: str, params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {f"{prefix}/{k}": v for k, v in params.items()}
