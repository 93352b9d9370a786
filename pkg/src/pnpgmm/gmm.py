"""Zero-mean Gaussian mixture prior over image patches."""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .patches import PatchSet

log = logging.getLogger(__name__)

MAGIC = b"GMM1"
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GMMModel:
    """Mixture of zero-mean Gaussians.

    ``eigvals[j]`` are the eigenvalues of ``covariances[j]`` in non-increasing
    order and the columns of ``eigvecs[j]`` the matching orthonormal
    eigenvectors, so ``C_j = U_j diag(eigvals[j]) U_j^T``.
    """

    weights: np.ndarray
    covariances: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    log_likelihoods: tuple = field(default=(), compare=False)

    @classmethod
    def from_covariances(cls, weights, covariances, log_likelihoods=()) -> "GMMModel":
        weights = np.asarray(weights, dtype=np.float64).copy()
        covs = np.array(covariances, dtype=np.float64)
        if covs.ndim != 3 or covs.shape[1] != covs.shape[2]:
            raise ValueError(f"covariances must be (K, n, n), got {covs.shape}")
        if weights.shape != (covs.shape[0],):
            raise ValueError("one weight per component required")
        if np.any(weights <= 0) or not np.isclose(weights.sum(), 1.0, atol=1e-10):
            raise ValueError("weights must be positive and sum to 1")
        covs = 0.5 * (covs + covs.transpose(0, 2, 1))
        vals, vecs = np.linalg.eigh(covs)
        vals, vecs = vals[:, ::-1].copy(), vecs[:, :, ::-1].copy()
        if np.any(vals[:, -1] <= 0):
            raise ValueError("covariances must be positive definite")
        for a in (weights, covs, vals, vecs):
            a.setflags(write=False)
        return cls(weights, covs, vals, vecs, tuple(log_likelihoods))

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.covariances.shape[1]

    def filters(self, sigma: float) -> np.ndarray:
        """Wiener gains ``C_j (C_j + sigma^2 I)^{-1}``, shape ``(K, n, n)``.

        Built from the cached eigenbasis, so the result is exactly symmetric
        up to rounding in the products.
        """
        gains = self.eigvals / (self.eigvals + sigma ** 2)
        U = self.eigvecs
        F = np.einsum("kab,kb,kcb->kac", U, gains, U)
        return 0.5 * (F + F.transpose(0, 2, 1))

    def filter_bounds(self, sigma: float) -> np.ndarray:
        """Per-component ``[min, max]`` eigenvalue of the Wiener gain."""
        lo = self.eigvals[:, -1] / (self.eigvals[:, -1] + sigma ** 2)
        hi = self.eigvals[:, 0] / (self.eigvals[:, 0] + sigma ** 2)
        return np.stack([lo, hi], axis=1)


@dataclass
class EMOptions:
    max_iter: int = 200
    tol: float = 1e-6
    sigma: float = 0.0
    reg: Optional[float] = None
    seed: int = 0


def _as_patch_array(patches) -> np.ndarray:
    Y = patches.patches if isinstance(patches, PatchSet) else patches
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2:
        raise ValueError(f"patches must be an (N, n_p) array, got shape {Y.shape}")
    return Y


def component_log_densities(model: GMMModel, patches, sigma: float = 0.0) -> np.ndarray:
    """``log N(y_i; 0, C_j + sigma^2 I)`` for every patch and component, ``(N, K)``."""
    Y = _as_patch_array(patches)
    if Y.shape[1] != model.dim:
        raise ValueError(f"patch dimension {Y.shape[1]} != model dimension {model.dim}")
    var = model.eigvals + sigma ** 2
    out = np.empty((Y.shape[0], model.n_components))
    for j in range(model.n_components):
        z = Y @ model.eigvecs[j]
        maha = (z * z / var[j]).sum(axis=1)
        out[:, j] = -0.5 * (model.dim * LOG_2PI + np.log(var[j]).sum() + maha)
    return out


def responsibilities(model: GMMModel, patches, sigma: float = 0.0) -> np.ndarray:
    """Posterior component probabilities for each patch, shape ``(N, K)``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    lp = component_log_densities(model, patches, sigma) + np.log(model.weights)
    return np.exp(lp - logsumexp(lp, axis=1, keepdims=True))


def log_likelihood(model: GMMModel, patches, sigma: float = 0.0) -> float:
    """Total log-likelihood ``sum_i log sum_j alpha_j N(y_i; 0, C_j + sigma^2 I)``."""
    lp = component_log_densities(model, patches, sigma) + np.log(model.weights)
    return float(logsumexp(lp, axis=1).sum())


def _m_step(Y, beta, sigma, covs_prev, reg):
    nk = beta.sum(axis=0)
    K, n = beta.shape[1], Y.shape[1]
    covs = np.empty((K, n, n))
    for j in range(K):
        S = (Y * beta[:, j:j + 1]).T @ Y / max(nk[j], 1e-300)
        if sigma > 0 and covs_prev is not None:
            # posterior moments of the clean patch given the noisy one
            F = np.linalg.solve(covs_prev[j] + sigma ** 2 * np.eye(n), covs_prev[j]).T
            S = F @ S @ F.T + sigma ** 2 * F
        covs[j] = 0.5 * (S + S.T) + reg * np.eye(n)
    return nk, covs


def train_em(patches, n_components: int, opts: Optional[EMOptions] = None) -> GMMModel:
    """Fit a zero-mean GMM to (mean-removed) patches with EM.

    With ``opts.sigma > 0`` the patches are treated as noisy observations
    and EM targets the clean-patch model; ``sigma = 0`` is plain EM.  After
    every M-step ``reg * I`` is added to each covariance, so the returned
    model is strictly positive definite.
    """
    opts = opts or EMOptions()
    if n_components < 1:
        raise ValueError("need at least one component")
    Y = _as_patch_array(patches)
    N, n = Y.shape
    if N == 0:
        raise ValueError("empty patch set")
    if not np.all(np.isfinite(Y)):
        raise ValueError("patches contain non-finite values")
    if N < n_components * n:
        warnings.warn(f"only {N} patches for {n_components} components of dimension {n}")

    reg = opts.reg
    if reg is None:
        scale = float(np.mean(Y * Y))
        reg = 1e-6 * (scale if scale > 0 else 1.0)

    rng = np.random.default_rng(opts.seed)
    beta = rng.dirichlet(np.ones(n_components), size=N)
    _, covs = _m_step(Y, beta, 0.0, None, reg)
    weights = np.full(n_components, 1.0 / n_components)
    model = GMMModel.from_covariances(weights, covs)

    history = [log_likelihood(model, Y, opts.sigma)]
    for it in range(opts.max_iter):
        beta = responsibilities(model, Y, opts.sigma)
        nk, covs = _m_step(Y, beta, opts.sigma, model.covariances, reg)
        weights = np.maximum(nk / N, 1e-300)
        model = GMMModel.from_covariances(weights / weights.sum(), covs)
        history.append(log_likelihood(model, Y, opts.sigma))
        change = abs(history[-1] - history[-2]) / max(abs(history[-2]), 1e-300)
        log.debug("EM iteration %d: log-likelihood %.10g", it + 1, history[-1])
        if change < opts.tol:
            break
    return GMMModel.from_covariances(model.weights, model.covariances, history)


def save_gmm(model: GMMModel, path) -> None:
    """Write the little-endian binary container plus a ``.txt`` manifest."""
    path = Path(path)
    K, n = model.n_components, model.dim
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", K, n))
        f.write(model.weights.astype("<f8").tobytes())
        f.write(model.covariances.astype("<f8").tobytes())
    manifest = path.with_name(path.name + ".txt")
    manifest.write_text(f"format: GMM1\ncomponents: {K}\npatch_size: {n}\n"
                        f"dtype: f64\nendian: little\n")


def load_gmm(path) -> GMMModel:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a GMM1 file")
    if len(data) < 12:
        raise ValueError(f"{path}: truncated header")
    K, n = struct.unpack("<II", data[4:12])
    expected = 12 + 8 * (K + K * n * n)
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    w = np.frombuffer(data, "<f8", K, 12)
    covs = np.frombuffer(data, "<f8", K * n * n, 12 + 8 * K).reshape(K, n, n)
    return GMMModel.from_covariances(w, covs)
