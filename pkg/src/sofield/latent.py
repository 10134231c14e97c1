"""Latent-space exploration: DP mixture fitting, PCA axes, projection.

The mixture is a truncated stick-breaking variational Gaussian mixture
with diagonal covariances and Normal-Gamma priors per dimension, fit by
coordinate ascent. The ELBO is tracked exactly (conjugate updates), so
its per-iteration trace is non-decreasing up to float64 noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln

from . import tensor as T
from .camera import Camera, generate_rays
from .checkpoint import GMM_MAGIC, PCA_MAGIC, load_tensors, save_tensors
from .field import LATENT_DIM
from .marcher import NEAR_PLANE, march_rays, render_segmap
from .optim import Adam
from .tensor import Tensor
from .train import SofModel, cross_entropy_loss, miou

VARIANCE_FLOOR = 1e-6


@dataclass
class GmmModel:
    weights: np.ndarray     # (T,) mixture weights, sum to 1
    means: np.ndarray       # (T, D)
    covs: np.ndarray        # (T, D) diagonal covariances, floored
    elbo_trace: list[float]
    truncation: int
    concentration: float

    def __post_init__(self):
        s = self.weights.sum()
        if not np.isclose(s, 1.0, atol=1e-9):
            raise ValueError(f"mixture weights sum to {s}, expected 1")
        if (self.covs < VARIANCE_FLOOR * (1 - 1e-12)).any():
            raise ValueError("covariance below the variance floor")


def _kmeans_init(x: np.ndarray, t: int, rng: np.random.Generator) -> np.ndarray:
    """Responsibilities from greedy farthest-point seeding + hard assignment."""
    n = len(x)
    centers = [x[rng.integers(n)]]
    for _ in range(1, t):
        d2 = np.min([((x - c) ** 2).sum(1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(n)])
            continue
        centers.append(x[rng.choice(n, p=d2 / total)])
    centers = np.asarray(centers)
    for _ in range(5):
        assign = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
        for k in range(t):
            sel = assign == k
            if sel.any():
                centers[k] = x[sel].mean(0)
    assign = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    r = np.full((n, t), 1e-8)
    r[np.arange(n), assign] = 1.0
    return r / r.sum(1, keepdims=True)


def fit_gmm(latents: np.ndarray, truncation: int = 10, concentration: float = 1.0,
            seed: int = 0, max_iter: int = 500, tol: float = 1e-4) -> GmmModel:
    """Variational DP mixture over latent vectors (N, D)."""
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("need at least 2 latent vectors")
    n, d = x.shape
    t = truncation
    alpha = concentration
    rng = np.random.default_rng(seed)

    # Priors: mean at the data mean, unit pseudo-count, Gamma shaped so the
    # prior precision matches the per-dim data variance (floored).
    m0 = x.mean(0)
    var0 = np.maximum(x.var(0), VARIANCE_FLOOR)
    beta0 = 1.0
    a0 = 1.0
    b0 = a0 * var0

    r = _kmeans_init(x, t, rng)
    ln2pi = np.log(2.0 * np.pi)
    elbo_trace: list[float] = []

    for it in range(max_iter):
        # M-like step: update q(v), q(mu, lambda) from responsibilities.
        nk = r.sum(0) + 1e-300
        xbar = (r.T @ x) / nk[:, None]
        diff = x[:, None, :] - xbar[None]                    # (n, t, d)
        sk = np.einsum("nt,ntd->td", r, diff * diff) / nk[:, None]

        beta = beta0 + nk
        m = (beta0 * m0[None] + nk[:, None] * xbar) / beta[:, None]
        a = a0 + nk / 2.0
        b = b0[None] + 0.5 * (nk[:, None] * sk
                              + (beta0 * nk / beta)[:, None] * (xbar - m0[None]) ** 2)

        gamma1 = 1.0 + nk
        gamma2 = alpha + np.concatenate([np.cumsum(nk[::-1])[-2::-1], [0.0]])
        e_ln_v = digamma(gamma1) - digamma(gamma1 + gamma2)
        e_ln_1mv = digamma(gamma2) - digamma(gamma1 + gamma2)
        e_ln_pi = e_ln_v + np.concatenate([[0.0], np.cumsum(e_ln_1mv[:-1])])

        # E step: responsibilities.
        e_ln_lam = digamma(a)[:, None] - np.log(b)           # (t, d)
        e_lam = a[:, None] / b
        quad = np.einsum("td,ntd->nt", e_lam, (x[:, None, :] - m[None]) ** 2)
        quad += d / beta[None]
        ln_rho = e_ln_pi[None] + 0.5 * (e_ln_lam.sum(1)[None] - d * ln2pi) - 0.5 * quad
        ln_rho -= ln_rho.max(1, keepdims=True)
        r_new = np.exp(ln_rho)
        r_new /= r_new.sum(1, keepdims=True)

        # ELBO with the refreshed responsibilities.
        r = r_new
        nk2 = r.sum(0)
        term_x = float(np.sum(r * (0.5 * (e_ln_lam.sum(1)[None] - d * ln2pi) - 0.5 * quad)))
        term_z = float(np.sum(r * e_ln_pi[None]))
        term_v = float(np.sum(np.log(alpha) + (alpha - 1.0) * e_ln_1mv))
        term_mu_p = float(np.sum(0.5 * (np.log(beta0) - ln2pi) + 0.5 * e_ln_lam
                                 - 0.5 * beta0 * (e_lam * (m - m0[None]) ** 2
                                                  + 1.0 / beta[:, None])))
        term_lam_p = float(np.sum(a0 * np.log(b0)[None] - gammaln(a0)
                                  + (a0 - 1.0) * e_ln_lam - b0[None] * e_lam))
        ent_z = float(np.sum(r * np.log(np.maximum(r, 1e-300))))
        ln_beta_fn = gammaln(gamma1) + gammaln(gamma2) - gammaln(gamma1 + gamma2)
        ent_v = float(np.sum((gamma1 - 1.0) * e_ln_v + (gamma2 - 1.0) * e_ln_1mv
                             - ln_beta_fn))
        ent_mu = float(np.sum(0.5 * (np.log(beta) - ln2pi)[:, None] + 0.5 * e_ln_lam - 0.5))
        ent_lam = float(np.sum(a[:, None] * np.log(b) - gammaln(a)[:, None]
                               + (a[:, None] - 1.0) * e_ln_lam - a[:, None]))
        elbo = (term_x + term_z + term_v + term_mu_p + term_lam_p
                - ent_z - ent_v - ent_mu - ent_lam)
        elbo_trace.append(elbo)
        if it > 0 and abs(elbo_trace[-1] - elbo_trace[-2]) < tol:
            break

    # Point-estimate mixture for sampling/serialization.
    nk = r.sum(0)
    weights = nk / nk.sum()
    covs = np.maximum(b / a[:, None], VARIANCE_FLOOR)
    return GmmModel(weights=weights, means=m, covs=covs, elbo_trace=elbo_trace,
                    truncation=t, concentration=alpha)


def gmm_responsibilities(model_x: np.ndarray, gmm: GmmModel) -> np.ndarray:
    """Posterior-style responsibilities of points under the point-estimate mixture."""
    x = np.asarray(model_x, dtype=np.float64)
    lp = (np.log(np.maximum(gmm.weights, 1e-300))[None]
          - 0.5 * np.sum(np.log(2 * np.pi * gmm.covs), axis=1)[None]
          - 0.5 * np.sum((x[:, None, :] - gmm.means[None]) ** 2 / gmm.covs[None], axis=2))
    lp -= lp.max(1, keepdims=True)
    r = np.exp(lp)
    return r / r.sum(1, keepdims=True)


def sample_gmm(gmm: GmmModel, seed: int, n: int = 1) -> np.ndarray:
    """Seeded draws (n, D): component by weight, then a diagonal Gaussian."""
    rng = np.random.default_rng(seed)
    ks = rng.choice(len(gmm.weights), size=n, p=gmm.weights)
    eps = rng.standard_normal((n, gmm.means.shape[1]))
    return gmm.means[ks] + eps * np.sqrt(gmm.covs[ks])


def save_gmm(path, gmm: GmmModel) -> None:
    save_tensors(path, {
        "weights": gmm.weights, "means": gmm.means, "covs": gmm.covs,
        "elbo_trace": np.asarray(gmm.elbo_trace, dtype=np.float32),
        "meta/truncation": np.array([gmm.truncation], dtype=np.float32),
        "meta/concentration": np.array([gmm.concentration], dtype=np.float32),
    }, magic=GMM_MAGIC)


def load_gmm(path) -> GmmModel:
    t = load_tensors(path, magic=GMM_MAGIC)
    return GmmModel(weights=t["weights"].astype(np.float64),
                    means=t["means"].astype(np.float64),
                    covs=np.maximum(t["covs"].astype(np.float64), VARIANCE_FLOOR),
                    elbo_trace=[float(v) for v in t["elbo_trace"]],
                    truncation=int(t["meta/truncation"][0]),
                    concentration=float(t["meta/concentration"][0]))


@dataclass
class PcaBasis:
    mean: np.ndarray         # (D,)
    components: np.ndarray   # (C, D) orthonormal rows
    eigenvalues: np.ndarray  # (C,) descending

    def __post_init__(self):
        gram = self.components @ self.components.T
        if not np.allclose(gram, np.eye(len(self.components)), atol=1e-6):
            raise ValueError("PCA components are not orthonormal")
        if (np.diff(self.eigenvalues) > 1e-12).any() or (self.eigenvalues < -1e-12).any():
            raise ValueError("eigenvalues must be non-increasing and nonnegative")


def pca_axes(latents: np.ndarray) -> PcaBasis:
    """Centered SVD; keeps min(N-1, D) components."""
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("need at least 2 latent vectors")
    mean = x.mean(0)
    xc = x - mean
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    keep = min(len(x) - 1, x.shape[1])
    eig = (s[:keep] ** 2) / (len(x) - 1)
    return PcaBasis(mean=mean, components=vt[:keep], eigenvalues=np.maximum(eig, 0.0))


def save_pca(path, basis: PcaBasis) -> None:
    save_tensors(path, {"mean": basis.mean, "components": basis.components,
                        "eigenvalues": basis.eigenvalues}, magic=PCA_MAGIC)


def load_pca(path) -> PcaBasis:
    t = load_tensors(path, magic=PCA_MAGIC)
    return PcaBasis(mean=t["mean"].astype(np.float64),
                    components=t["components"].astype(np.float64),
                    eigenvalues=t["eigenvalues"].astype(np.float64))


def edit_latent(z: np.ndarray, basis: PcaBasis, axis: int, amount: float) -> np.ndarray:
    if not (0 <= axis < len(basis.components)):
        raise ValueError(f"axis {axis} out of range (have {len(basis.components)})")
    return np.asarray(z, dtype=np.float64) + amount * basis.components[axis]


def project_segmap(model: SofModel, target: np.ndarray, cam: Camera,
                   init_z: np.ndarray | None = None, budget: int = 6000,
                   lr: float = 1e-2, rays_per_batch: int = 96,
                   eval_every: int = 200, seed: int = 0,
                   progress=None) -> tuple[np.ndarray, list[tuple[int, float]]]:
    """Fit a latent to a target segmap with the shared nets frozen.

    Returns (best latent, [(step, mIoU), ...]); the reported best is the
    max over the trace. Deterministic for fixed inputs and seed.
    """
    if target.shape != (cam.height, cam.width):
        raise ValueError("target segmap does not match the camera size")
    rng = np.random.default_rng(seed)
    if init_z is None:
        init_z = rng.standard_normal(LATENT_DIM) * 0.01
    z = Tensor(np.asarray(init_z, dtype=np.float32).copy(), requires_grad=True)
    opt = Adam({"z": z}, lr=lr)
    origins, dirs = generate_rays(cam)
    origins = origins.reshape(-1, 3).astype(np.float32)
    dirs = dirs.reshape(-1, 3).astype(np.float32)
    flat_target = target.reshape(-1).astype(np.int64)
    cfg = model.config

    def evaluate(zv: np.ndarray) -> float:
        seg = render_segmap(model.hyper, model.classifier, model.marcher,
                            Tensor(zv), cam, n_steps=cfg.march_steps)
        return miou(seg, target)

    best_z = z.data.copy()
    best_miou = evaluate(best_z)
    trace = [(0, best_miou)]
    for step in range(1, budget + 1):
        pick = rng.integers(len(flat_target), size=rays_per_batch)
        params = model.hyper(z)
        res = march_rays(params, model.marcher, origins[pick], dirs[pick],
                         t0=NEAR_PLANE, n_steps=cfg.march_steps)
        logits = model.classifier.logits(res.feature)
        loss = cross_entropy_loss(logits, flat_target[pick])
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % eval_every == 0 or step == budget:
            score = evaluate(z.data)
            trace.append((step, score))
            if score > best_miou:
                best_miou = score
                best_z = z.data.copy()
            if progress is not None:
                progress(step, score)
    return best_z, trace
