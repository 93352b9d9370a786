"""GMM-based MMSE patch denoisers.

Two flavours share the same patch machinery:

* :func:`denoise_mmse` recomputes the component posteriors from the noisy
  patches, which makes it a nonlinear map;
* :func:`apply_fixed` reuses posteriors frozen on a training image of the
  same scene (:func:`freeze_weights`), which makes it a linear map ``y -> W y``
  with ``W = (1/n_p) sum_i P_i^T F_i P_i``.

The remaining functions are dense diagnostics of that linear map and are
only meant for small images.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from . import gmm
from .patches import (PatchGeometry, PatchSet, aggregate_patches, build_partition,
                      extract_patches)

DENSE_CAP = 4096


class DiagnosticError(AssertionError):
    """A dense check of the fixed-weight operator did not hold."""


def _filter_patches(Y: np.ndarray, beta: np.ndarray, F: np.ndarray) -> np.ndarray:
    # out_i = sum_k beta_ik F_k y_i, all components in one product
    K, n, _ = F.shape
    stacked = Y @ F.transpose(1, 0, 2).reshape(n, K * n)
    return np.einsum("ik,ikn->in", beta, stacked.reshape(-1, K, n))


def _check_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


def denoise_mmse(model: gmm.GMMModel, img, sigma: float, patch_side: int,
                 remove_means: bool = True) -> np.ndarray:
    """Patch-wise posterior-mean denoising with posteriors from the noisy patches."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    img = _check_image(img)
    geom = PatchGeometry.for_image(img, patch_side)
    ps = extract_patches(img, geom, remove_means)
    beta = gmm.responsibilities(model, ps, sigma)
    est = _filter_patches(ps.patches, beta, model.filters(sigma))
    return aggregate_patches(PatchSet(geom, est, ps.means))


@dataclass
class FixedWeightPlan:
    """Posteriors frozen on a training image, defining a linear denoiser.

    The noise level is not part of the plan; it is passed to every
    application.  Gains are cached per noise level.
    """

    model: gmm.GMMModel
    beta: np.ndarray
    geometry: PatchGeometry
    remove_means: bool = True
    _gains: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        g = self.geometry
        if self.beta.shape != (g.n_patches, self.model.n_components):
            raise ValueError("beta must have one row per patch and one column per component")
        if self.model.dim != g.patch_size:
            raise ValueError(
                f"model dimension {self.model.dim} != patch size {g.patch_size}")

    def gains(self, sigma: float) -> np.ndarray:
        if sigma not in self._gains:
            self._gains[sigma] = self.model.filters(sigma)
        return self._gains[sigma]

    def patch_filters(self, sigma: float, effective: bool = True) -> np.ndarray:
        """Dense per-patch filters ``(N, n_p, n_p)``.

        With ``effective`` and mean handling on, the returned matrices also
        fold in the mean removal and re-addition: ``F_i (I - J) + J``.
        """
        F = np.einsum("ik,kab->iab", self.beta, self.gains(sigma))
        if effective and self.remove_means:
            n = self.geometry.patch_size
            J = np.full((n, n), 1.0 / n)
            F = F @ (np.eye(n) - J) + J
        return F


def freeze_weights(model: gmm.GMMModel, training_img, sigma_train: float,
                   patch_side: int, remove_means: bool = True) -> FixedWeightPlan:
    """Compute posteriors once on ``training_img`` and freeze them."""
    if sigma_train < 0:
        raise ValueError("sigma_train must be non-negative")
    img = _check_image(training_img)
    geom = PatchGeometry.for_image(img, patch_side)
    ps = extract_patches(img, geom, remove_means)
    beta = gmm.responsibilities(model, ps, sigma_train)
    beta.setflags(write=False)
    return FixedWeightPlan(model, beta, geom, remove_means)


def apply_fixed(plan: FixedWeightPlan, img, sigma: float, jobs: int = 1) -> np.ndarray:
    """Apply the frozen-weight denoiser ``W`` at noise level ``sigma``.

    ``img`` may also be a stack ``(L, h, w)``; the same plan is applied to
    every slice, optionally on ``jobs`` threads (results do not depend on it).
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        plan.gains(sigma)
        if jobs > 1:
            with ThreadPoolExecutor(jobs) as pool:
                return np.stack(list(pool.map(lambda b: apply_fixed(plan, b, sigma), img)))
        return np.stack([apply_fixed(plan, band, sigma) for band in img])
    plan.geometry.check(img)
    ps = extract_patches(img, plan.geometry, plan.remove_means)
    est = _filter_patches(ps.patches, plan.beta, plan.gains(sigma))
    return aggregate_patches(PatchSet(plan.geometry, est, ps.means))


def _scatter_blocks(idx: np.ndarray, blocks: np.ndarray, n: int) -> np.ndarray:
    flat = (idx[:, :, None] * n + idx[:, None, :]).ravel()
    return np.bincount(flat, weights=blocks.ravel(), minlength=n * n).reshape(n, n)


def dense_operator(plan: FixedWeightPlan, sigma: float, cap: int = DENSE_CAP) -> np.ndarray:
    """Assemble ``W`` explicitly as an ``n x n`` matrix (diagnostics only)."""
    g = plan.geometry
    if g.n_pixels > cap:
        raise ValueError(f"{g.n_pixels} pixels exceeds the dense cap of {cap}")
    F = plan.patch_filters(sigma)
    return _scatter_blocks(g.patch_indices(), F, g.n_pixels) / g.patch_size


def subset_operators(plan: FixedWeightPlan, sigma: float, cap: int = DENSE_CAP) -> list:
    """The per-tiling sums ``A_j = sum_{k in subset j} P_k^T F_k P_k``.

    ``W`` equals their average.  Requires the patch side to divide the image.
    """
    g = plan.geometry
    if g.n_pixels > cap:
        raise ValueError(f"{g.n_pixels} pixels exceeds the dense cap of {cap}")
    part = build_partition(g)
    F = plan.patch_filters(sigma)
    idx = g.patch_indices()
    return [_scatter_blocks(idx[s], F[s], g.n_pixels) for s in part.subsets]


@dataclass
class DenoiserReport:
    n_pixels: int
    patch_side: int
    sigma: float
    symmetry_defect: float
    relative_symmetry_defect: float
    eig_min: float
    eig_max: float
    spectral_norm: float
    eig_residual: float
    filter_min: float
    filter_max: float
    component_bounds: np.ndarray
    subset_ranges: Optional[np.ndarray] = None

    @property
    def hull(self) -> tuple[float, float]:
        """Range spanned by the per-component gain bounds."""
        return float(self.component_bounds[:, 0].min()), float(self.component_bounds[:, 1].max())

    def failures(self, sym_tol: float = 1e-12) -> list:
        out = []
        if self.relative_symmetry_defect > sym_tol:
            out.append(f"W not symmetric (relative defect {self.relative_symmetry_defect:.3g})")
        if not self.eig_min > 0:
            out.append(f"smallest eigenvalue {self.eig_min:.6g} not positive")
        if not self.eig_max < 1:
            out.append(f"largest eigenvalue {self.eig_max:.6g} not below 1")
        lo, hi = self.hull
        slack = 1e-12
        if self.eig_min < lo - slack or self.eig_max > hi + slack:
            out.append(f"spectrum [{self.eig_min:.6g}, {self.eig_max:.6g}] "
                       f"outside gain hull [{lo:.6g}, {hi:.6g}]")
        return out

    def to_text(self) -> str:
        lo, hi = self.hull
        lines = [
            f"pixels: {self.n_pixels}",
            f"patch_side: {self.patch_side}",
            f"sigma: {self.sigma:.17g}",
            f"symmetry_defect: {self.symmetry_defect:.6e}",
            f"relative_symmetry_defect: {self.relative_symmetry_defect:.6e}",
            f"eig_min: {self.eig_min:.17g}",
            f"eig_max: {self.eig_max:.17g}",
            f"spectral_norm: {self.spectral_norm:.17g}",
            f"eig_residual: {self.eig_residual:.6e}",
            f"patch_filter_min: {self.filter_min:.17g}",
            f"patch_filter_max: {self.filter_max:.17g}",
            f"gain_hull_min: {lo:.17g}",
            f"gain_hull_max: {hi:.17g}",
        ]
        for j, (a, b) in enumerate(self.component_bounds):
            lines.append(f"component_{j}_gain_range: {a:.17g} {b:.17g}")
        if self.subset_ranges is not None:
            for j, (a, b) in enumerate(self.subset_ranges):
                lines.append(f"subset_{j}_eig_range: {a:.17g} {b:.17g}")
        failures = self.failures()
        lines.append(f"status: {'ok' if not failures else 'FAILED'}")
        lines.extend(f"failure: {f}" for f in failures)
        return "\n".join(lines) + "\n"


def spectrum_report(plan: FixedWeightPlan, sigma: float, check: bool = True,
                    cap: int = DENSE_CAP) -> DenoiserReport:
    """Dense spectral analysis of ``W``.

    Checks symmetry, that the spectrum lies strictly inside ``(0, 1)`` and
    inside the range spanned by the per-component Wiener gains.  With
    ``check`` a :class:`DiagnosticError` is raised when any of these fails.
    """
    W = dense_operator(plan, sigma, cap)
    g = plan.geometry
    asym = float(np.abs(W - W.T).max())
    rel = asym / float(np.abs(W).max())
    if rel <= 1e-12:
        vals, vecs = np.linalg.eigh(0.5 * (W + W.T))
        resid = float(np.abs(W @ vecs - vecs * vals).max() / np.linalg.norm(W, 2))
        eig_min, eig_max = float(vals[0]), float(vals[-1])
    else:
        vals = np.linalg.eigvals(W)
        resid = float("nan")
        eig_min, eig_max = float(vals.real.min()), float(vals.real.max())
    norm = float(np.linalg.norm(W, 2))

    Fi = plan.patch_filters(sigma)
    sym = np.allclose(Fi, Fi.transpose(0, 2, 1), rtol=0, atol=0)
    fvals = np.linalg.eigvalsh(Fi) if sym else np.linalg.eigvals(Fi).real
    subset_ranges = None
    h, w = g.shape
    if h % g.patch_side == 0 and w % g.patch_side == 0:
        part = build_partition(g)
        # eigenvalues of a tiling sum are the union of its blocks' eigenvalues
        subset_ranges = np.array([[fvals[s].min(), fvals[s].max()] for s in part.subsets])

    report = DenoiserReport(
        n_pixels=g.n_pixels, patch_side=g.patch_side, sigma=float(sigma),
        symmetry_defect=asym, relative_symmetry_defect=rel,
        eig_min=eig_min, eig_max=eig_max, spectral_norm=norm, eig_residual=resid,
        filter_min=float(fvals.min()), filter_max=float(fvals.max()),
        component_bounds=plan.model.filter_bounds(sigma), subset_ranges=subset_ranges)
    if check:
        failures = report.failures()
        if failures:
            raise DiagnosticError("; ".join(failures))
    return report


def prox_defect(plan: FixedWeightPlan, sigma: float, y, cap: int = DENSE_CAP) -> float:
    """Max deviation between ``apply_fixed(y)`` and the prox of the implied quadratic.

    The quadratic is ``g(x) = x^T (W^{-1} - I) x / 2``; its prox at ``y`` is
    found here by a dense solve of ``(I + W^{-1} - I) x = y``.
    """
    y = _check_image(y)
    plan.geometry.check(y)
    W = dense_operator(plan, sigma, cap)
    n = W.shape[0]
    G = scipy.linalg.inv(W) - np.eye(n)
    G = 0.5 * (G + G.T)
    x = scipy.linalg.solve(np.eye(n) + G, y.ravel(), assume_a="sym")
    return float(np.abs(x - apply_fixed(plan, y, sigma).ravel()).max())


def implied_quadratic(plan: FixedWeightPlan, sigma: float, cap: int = DENSE_CAP) -> np.ndarray:
    """``W^{-1} - I``, the Hessian of the function whose prox is the denoiser."""
    W = dense_operator(plan, sigma, cap)
    G = scipy.linalg.inv(W) - np.eye(W.shape[0])
    return 0.5 * (G + G.T)


def scalar_mmse_map(weights, variances, sigma: float, y, fixed_beta=None) -> np.ndarray:
    """Scalar two-or-more component posterior-mean estimator evaluated on ``y``.

    With ``fixed_beta`` the posteriors are held at the given values instead of
    being recomputed per sample, which turns the map into a line.
    """
    weights = np.asarray(weights, dtype=np.float64)
    v = np.asarray(variances, dtype=np.float64)
    if np.any(v <= 0):
        raise ValueError("variances must be positive")
    y = np.asarray(y, dtype=np.float64)
    shrink = v / (v + sigma ** 2)
    if fixed_beta is not None:
        return y * float(np.dot(fixed_beta, shrink))
    s = v + sigma ** 2
    lp = np.log(weights) - 0.5 * (np.log(2 * np.pi * s) + y[:, None] ** 2 / s)
    beta = np.exp(lp - lp.max(axis=1, keepdims=True))
    beta /= beta.sum(axis=1, keepdims=True)
    return y * (beta @ shrink)


def format_scalar_map(y, xhat, fixed=None) -> str:
    """Whitespace-separated columns ``y xhat [xhat_fixed]`` for plotting."""
    cols = [np.asarray(y), np.asarray(xhat)] + ([np.asarray(fixed)] if fixed is not None else [])
    header = "# y xhat" + (" xhat_fixed" if fixed is not None else "")
    rows = [" ".join(f"{v:.10g}" for v in r) for r in zip(*cols)]
    return header + "\n" + "\n".join(rows) + "\n"
