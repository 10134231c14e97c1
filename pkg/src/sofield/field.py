"""Latent-conditioned semantic occupancy field.

A hypernetwork maps a 256-d instance latent to the full parameter vector
of a small coordinate MLP (three Linear+LayerNorm+ReLU layers, 3 -> W ->
W -> W). A shared classifier head turns the W-d feature at a point into
K class probabilities. The instance geometry therefore lives entirely in
the latent; the hypernetwork, classifier, and marcher weights are shared.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Linear, fan_in_uniform, prefix_params
from .tensor import Tensor

LATENT_DIM = 256


def theta_param_count(width: int) -> int:
    """Parameters of the emitted coordinate MLP (weights+bias+LN per layer)."""
    first = 3 * width + width + 2 * width
    hidden = width * width + width + 2 * width
    return first + 2 * hidden


@dataclass
class SofParams:
    """Emitted coordinate-MLP parameters, shaped for evaluation.

    Tensors stay attached to the hypernetwork tape, so losses through the
    field backpropagate into the hypernetwork and the latent.
    """

    weights: list[Tensor]   # (W,3), (W,W), (W,W)
    biases: list[Tensor]    # (W,)
    gains: list[Tensor]     # LN gain per layer
    shifts: list[Tensor]    # LN shift per layer
    width: int


class HyperNet:
    """Trunk of three FC(256)+ReLU layers, then one linear head per block.

    Heads start near-silent (weights scaled down) with the bias carrying a
    fan-in draw for the emitted layer, so at z = 0 the emitted MLP behaves
    like an ordinarily initialized one.
    """

    HEAD_SCALE = 1e-2

    def __init__(self, width: int, rng: np.random.Generator, dtype=np.float32,
                 latent_dim: int = LATENT_DIM):
        self.width = width
        self.latent_dim = latent_dim
        self.trunk = [Linear(latent_dim, latent_dim, rng, dtype=dtype) for _ in range(3)]
        in_dims = [3, width, width]
        self.weight_heads: list[Linear] = []
        self.ln_heads: list[Linear] = []
        for d_in in in_dims:
            wh = Linear(latent_dim, width * d_in + width, rng, dtype=dtype)
            wh.weight.data *= dtype(self.HEAD_SCALE)
            emitted = np.concatenate([
                fan_in_uniform(rng, width, d_in, dtype).reshape(-1),
                rng.uniform(-1.0 / np.sqrt(d_in), 1.0 / np.sqrt(d_in), size=width).astype(dtype),
            ])
            wh.bias.data = emitted
            self.weight_heads.append(wh)

            lh = Linear(latent_dim, 2 * width, rng, dtype=dtype)
            lh.weight.data *= dtype(self.HEAD_SCALE)
            lh.bias.data = np.concatenate([np.ones(width, dtype), np.zeros(width, dtype)])
            self.ln_heads.append(lh)
        self.in_dims = in_dims

    def __call__(self, z: Tensor) -> SofParams:
        if not np.isfinite(z.data).all():
            raise ValueError("latent contains non-finite values")
        h = z.reshape(1, self.latent_dim)
        for lin in self.trunk:
            h = T.relu(lin(h))
        weights, biases, gains, shifts = [], [], [], []
        for d_in, wh, lh in zip(self.in_dims, self.weight_heads, self.ln_heads):
            blob = wh(h).reshape(self.width * d_in + self.width)
            weights.append(blob[: self.width * d_in].reshape(self.width, d_in))
            biases.append(blob[self.width * d_in:])
            ln = lh(h).reshape(2 * self.width)
            gains.append(ln[: self.width])
            shifts.append(ln[self.width:])
        return SofParams(weights=weights, biases=biases, gains=gains, shifts=shifts,
                         width=self.width)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, lin in enumerate(self.trunk):
            out.update(prefix_params(f"hyper/trunk{i}", lin.params()))
        for i, (wh, lh) in enumerate(zip(self.weight_heads, self.ln_heads)):
            out.update(prefix_params(f"hyper/whead{i}", wh.params()))
            out.update(prefix_params(f"hyper/lnhead{i}", lh.params()))
        return out


def sof_features(params: SofParams, x: Tensor) -> Tensor:
    """Evaluate the emitted MLP at points x (..., 3) -> features (..., W)."""
    h = x
    for w, b, g, s in zip(params.weights, params.biases, params.gains, params.shifts):
        h = T.linear_forward(h, w, b)
        h = T.layer_norm(h, g, s)
        h = T.relu(h)
    return h


class Classifier:
    """Shared semantic head: three FC+LN+ReLU blocks and a linear K-way head."""

    def __init__(self, width: int, num_classes: int, rng: np.random.Generator, dtype=np.float32):
        self.width = width
        self.num_classes = num_classes
        self.blocks = []
        for _ in range(3):
            lin = Linear(width, width, rng, dtype=dtype)
            gain = Tensor(np.ones(width, dtype), requires_grad=True)
            shift = Tensor(np.zeros(width, dtype), requires_grad=True)
            self.blocks.append((lin, gain, shift))
        self.head = Linear(width, num_classes, rng, dtype=dtype)

    def logits(self, f: Tensor) -> Tensor:
        h = f
        for lin, gain, shift in self.blocks:
            h = T.relu(T.layer_norm(lin(h), gain, shift))
        return self.head(h)

    def __call__(self, f: Tensor) -> Tensor:
        return T.softmax(self.logits(f), axis=-1)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (lin, gain, shift) in enumerate(self.blocks):
            out.update(prefix_params(f"classifier/block{i}", lin.params()))
            out[f"classifier/block{i}/gain"] = gain
            out[f"classifier/block{i}/shift"] = shift
        out.update(prefix_params("classifier/head", self.head.params()))
        return out


def field_probe(hyper: HyperNet, classifier: Classifier, z: Tensor, x: Tensor) -> Tensor:
    """Class probabilities at points x for latent z; (..., K) on the simplex."""
    return classifier(sof_features(hyper(z), x))
