"""Hyperspectral sharpening by plug-and-play ADMM.

Cubes are ``(bands, height, width)`` arrays.  The observation model is

    Y_h = E X B M + N_h,    Y_m = R E X + N_m

with ``B`` a cyclic blur acting on each band, ``M`` a regular ``d x d``
subsampling lattice anchored at the top-left pixel, ``R`` the spectral
response of the MS sensor and ``E`` an orthonormal spectral basis.  The
solver splits the problem into three terms (HS data, MS data, prior) and
uses the frozen-weight GMM denoiser as the prior's prox.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from . import denoiser
from .denoiser import FixedWeightPlan

log = logging.getLogger(__name__)


def gaussian_kernel(factor: int) -> np.ndarray:
    """Normalized Gaussian PSF with std ``factor/2`` on a ``4*factor+1`` support."""
    r = 2 * factor
    t = np.arange(-r, r + 1)
    g = np.exp(-0.5 * (t / (factor / 2.0)) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def kernel_otf(kernel, shape) -> np.ndarray:
    """Transfer function of the periodized kernel, centred on pixel (0, 0)."""
    kernel = np.asarray(kernel, dtype=np.float64)
    kh, kw = kernel.shape
    h, w = shape
    if kh > h or kw > w:
        raise ValueError(f"kernel {kernel.shape} larger than image {shape}")
    pad = np.zeros((h, w))
    pad[:kh, :kw] = kernel
    pad = np.roll(pad, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    return np.fft.fft2(pad)


def spectral_response(n_ms: int, n_hs: int, width: Optional[float] = None) -> np.ndarray:
    """Synthetic MS response: one Gaussian bump per MS band, rows summing to 1."""
    centers = (np.arange(n_ms) + 0.5) * n_hs / n_ms - 0.5
    width = width if width is not None else max(n_hs / (2.0 * n_ms), 0.5)
    t = np.arange(n_hs)
    R = np.exp(-0.5 * ((t[None, :] - centers[:, None]) / width) ** 2)
    return R / R.sum(axis=1, keepdims=True)


@dataclass
class DegradationModel:
    """Known spatial blur, subsampling factor and spectral response."""

    kernel: np.ndarray
    factor: int
    response: np.ndarray
    _otf: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.response = np.asarray(self.response, dtype=np.float64)
        if self.factor < 1:
            raise ValueError("subsampling factor must be >= 1")
        if not np.isclose(self.kernel.sum(), 1.0, atol=1e-10):
            raise ValueError("blur kernel must sum to 1")
        if np.any(self.response < 0):
            raise ValueError("spectral response must be non-negative")

    @classmethod
    def default(cls, factor: int, n_ms: int, n_hs: int) -> "DegradationModel":
        return cls(gaussian_kernel(factor), factor, spectral_response(n_ms, n_hs))

    def otf(self, shape) -> np.ndarray:
        shape = tuple(shape)
        if shape not in self._otf:
            self._otf[shape] = kernel_otf(self.kernel, shape)
        return self._otf[shape]

    def check_shape(self, shape) -> None:
        h, w = shape
        d = self.factor
        if h % d or w % d:
            raise ValueError(f"factor {d} must divide the image size {h}x{w}")

    def blur(self, X) -> np.ndarray:
        """``X B``: cyclic convolution of every band."""
        X = np.asarray(X, dtype=np.float64)
        return np.real(np.fft.ifft2(np.fft.fft2(X) * self.otf(X.shape[-2:])))

    def blur_adjoint(self, X) -> np.ndarray:
        """``X B^T``."""
        X = np.asarray(X, dtype=np.float64)
        return np.real(np.fft.ifft2(np.fft.fft2(X) * np.conj(self.otf(X.shape[-2:]))))

    def subsample(self, X) -> np.ndarray:
        d = self.factor
        return np.asarray(X)[..., ::d, ::d]

    def mask(self, shape) -> np.ndarray:
        self.check_shape(shape)
        m = np.zeros(shape, dtype=bool)
        m[::self.factor, ::self.factor] = True
        return m

    def zero_fill(self, Y, shape) -> np.ndarray:
        """Embed low-resolution bands on the full grid at the lattice positions."""
        Y = np.asarray(Y, dtype=np.float64)
        h, w = shape
        d = self.factor
        if Y.shape[-2:] != (h // d, w // d):
            raise ValueError(f"low-res shape {Y.shape[-2:]} inconsistent with {shape} / {d}")
        out = np.zeros(Y.shape[:-2] + (h, w))
        out[..., ::d, ::d] = Y
        return out


def upsample_nearest(Y, factor: int) -> np.ndarray:
    """Zero-order hold upsampling of the last two axes."""
    return np.repeat(np.repeat(np.asarray(Y), factor, axis=-2), factor, axis=-1)


def spectral_apply(A, X) -> np.ndarray:
    """Apply a band-mixing matrix to a cube: ``(A X)`` on the band axis."""
    return np.tensordot(A, X, axes=(1, 0))


@dataclass(frozen=True)
class SubspaceBasis:
    E: np.ndarray
    eigenvalues: np.ndarray

    @property
    def rank(self) -> int:
        return self.E.shape[1]


def learn_subspace(Yh, n_latent: int) -> SubspaceBasis:
    """Leading eigenvectors of the band correlation matrix ``Y_h Y_h^T / n_h``.

    Each basis vector is signed so that its largest-magnitude entry is
    positive.  ``eigenvalues`` holds the full spectrum, non-increasing.
    """
    Yh = np.asarray(Yh, dtype=np.float64)
    L = Yh.shape[0]
    if not 1 <= n_latent <= L:
        raise ValueError(f"subspace dimension must be in [1, {L}], got {n_latent}")
    Y = Yh.reshape(L, -1)
    vals, vecs = np.linalg.eigh(Y @ Y.T / Y.shape[1])
    vals, vecs = vals[::-1], vecs[:, ::-1]
    E = vecs[:, :n_latent].copy()
    lead = E[np.argmax(np.abs(E), axis=0), np.arange(n_latent)]
    E *= np.where(lead < 0, -1.0, 1.0)
    return SubspaceBasis(E, vals.copy())


def forward_hs(X, E, degradation: DegradationModel) -> np.ndarray:
    """``E X B M`` as a low-resolution cube."""
    return degradation.subsample(degradation.blur(spectral_apply(E, X)))


def forward_ms(X, E, R) -> np.ndarray:
    """``R E X``."""
    return spectral_apply(np.asarray(R) @ np.asarray(E), X)


def update_X(V1, D1, V2, D2, V3, D3, otf) -> np.ndarray:
    """Closed-form X step, solved per band in the Fourier domain.

    ``[(V1+D1) B^T + V2+D2 + V3+D3] [B B^T + 2 I]^{-1}``
    """
    num = np.fft.fft2(V1 + D1) * np.conj(otf) + np.fft.fft2(V2 + D2 + V3 + D3)
    return np.real(np.fft.ifft2(num / (np.abs(otf) ** 2 + 2.0)))


def update_V1(XB, D1, E, Yh_filled, mask, rho, inv=None) -> np.ndarray:
    """HS data step: exact on lattice pixels, pass-through elsewhere."""
    E = np.asarray(E)
    if inv is None:
        inv = np.linalg.inv(E.T @ E + rho * np.eye(E.shape[1]))
    target = XB - D1
    fitted = spectral_apply(inv, spectral_apply(E.T, Yh_filled) + rho * target)
    return np.where(mask, fitted, target)


def update_V2(X, D2, RE, Ym, lam, rho, inv=None) -> np.ndarray:
    """MS data step ``[lam (RE)^T RE + rho I]^{-1} [lam (RE)^T Y_m + rho (X - D2)]``."""
    RE = np.asarray(RE)
    if inv is None:
        inv = np.linalg.inv(lam * RE.T @ RE + rho * np.eye(RE.shape[1]))
    return spectral_apply(inv, lam * spectral_apply(RE.T, Ym) + rho * (X - D2))


def denoiser_sigma(tau: float, rho: float) -> float:
    """Noise level matching the prior step's quadratic weight ``rho / (2 tau)``."""
    return float(np.sqrt(tau / rho))


def update_V3(X, D3, plan: FixedWeightPlan, tau, rho, jobs: int = 1) -> np.ndarray:
    """Prior step: the frozen-weight denoiser applied band by band to ``X - D3``."""
    return denoiser.apply_fixed(plan, X - D3, denoiser_sigma(tau, rho), jobs)


@dataclass
class SolverParams:
    rho: float = 1.0
    lam: float = 1.0
    tau: float = 1e-3
    max_iters: int = 200
    tol: float = 1e-6
    objective_cap: int = 1024
    jobs: int = 1

    def __post_init__(self):
        if self.rho <= 0 or self.tau <= 0:
            raise ValueError("rho and tau must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")


@dataclass
class SolverState:
    X: np.ndarray
    V1: np.ndarray
    V2: np.ndarray
    V3: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    D3: np.ndarray
    iteration: int = 0


@dataclass
class TraceRecord:
    iteration: int
    objective: float
    objective_exact: bool
    primal_residual: float
    dual_residual: float
    step: float


@dataclass
class SolveResult:
    Z: np.ndarray
    X: np.ndarray
    basis: SubspaceBasis
    state: SolverState
    trace: list
    converged: bool = False


class PriorQuadratic:
    """``tau * phi`` for the frozen-weight denoiser, when it can be formed densely.

    The denoiser at ``sigma^2 = tau/rho`` is the prox of
    ``(tau/rho) phi``, so ``tau * phi(X) = (rho/2) sum_b x_b^T (W^{-1} - I) x_b``.
    Only defined when ``W`` is symmetric (mean handling off).
    """

    def __init__(self, plan: FixedWeightPlan, tau: float, rho: float,
                 cap: int = denoiser.DENSE_CAP):
        if plan.remove_means:
            raise ValueError("the implied quadratic needs a symmetric W (mean handling off)")
        self.rho = rho
        self.W = denoiser.dense_operator(plan, denoiser_sigma(tau, rho), cap)
        self._chol = scipy.linalg.cho_factor(self.W)

    def hessian(self) -> np.ndarray:
        n = self.W.shape[0]
        G = scipy.linalg.cho_solve(self._chol, np.eye(n)) - np.eye(n)
        return self.rho * 0.5 * (G + G.T)

    def __call__(self, X) -> float:
        x = np.asarray(X, dtype=np.float64).reshape(X.shape[0], -1).T
        winv_x = scipy.linalg.cho_solve(self._chol, x)
        return 0.5 * self.rho * float(np.sum(x * winv_x) - np.sum(x * x))


def objective(X, Yh, Ym, degradation: DegradationModel, E, lam, prior=None):
    """MAP cost of ``X``.

    Returns ``(value, exact)``.  When ``prior`` (a :class:`PriorQuadratic`)
    is not available the prior term is left out, so ``value`` is a lower
    bound and ``exact`` is False.
    """
    hs = forward_hs(X, E, degradation) - Yh
    ms = forward_ms(X, E, degradation.response) - Ym
    value = 0.5 * float(np.sum(hs * hs)) + 0.5 * lam * float(np.sum(ms * ms))
    if prior is None:
        return value, False
    return value + prior(X), True


def initial_latent(Yh, E, factor: int) -> np.ndarray:
    return spectral_apply(np.asarray(E).T, upsample_nearest(Yh, factor))


def solve(Yh, Ym, degradation: DegradationModel, plan: FixedWeightPlan,
          params: Optional[SolverParams] = None, basis: Optional[SubspaceBasis] = None,
          n_latent: Optional[int] = None, X0=None,
          callback: Optional[Callable[[SolverState], None]] = None) -> SolveResult:
    """Run the ADMM loop and return ``Z = E X`` with its trace.

    Either ``basis`` or ``n_latent`` must be given; in the latter case the
    basis is learned from ``Yh``.  Stops after ``max_iters`` iterations or
    once both residuals drop below ``tol * sqrt(X.size)``.
    """
    params = params or SolverParams()
    Yh = np.asarray(Yh, dtype=np.float64)
    Ym = np.asarray(Ym, dtype=np.float64)
    shape = Ym.shape[-2:]
    degradation.check_shape(shape)
    if plan.geometry.shape != shape:
        raise ValueError(f"plan geometry {plan.geometry.shape} != image size {shape}")
    if Ym.shape[0] != degradation.response.shape[0] or Yh.shape[0] != degradation.response.shape[1]:
        raise ValueError("band counts inconsistent with the spectral response")
    if basis is None:
        if n_latent is None:
            raise ValueError("need a subspace basis or its dimension")
        basis = learn_subspace(Yh, n_latent)
    E = basis.E
    rho, lam, tau = params.rho, params.lam, params.tau

    otf = degradation.otf(shape)
    mask = degradation.mask(shape)
    Yh_filled = degradation.zero_fill(Yh, shape)
    RE = degradation.response @ E
    Ls = E.shape[1]
    inv1 = np.linalg.inv(E.T @ E + rho * np.eye(Ls))
    inv2 = np.linalg.inv(lam * RE.T @ RE + rho * np.eye(Ls))

    prior = None
    if not plan.remove_means and plan.geometry.n_pixels <= params.objective_cap:
        prior = PriorQuadratic(plan, tau, rho)

    X = initial_latent(Yh, E, degradation.factor) if X0 is None else np.array(X0, dtype=np.float64)
    zeros = np.zeros_like(X)
    state = SolverState(X, degradation.blur(X), X.copy(), X.copy(),
                        zeros.copy(), zeros.copy(), zeros.copy())
    threshold = params.tol * np.sqrt(X.size)
    trace = []
    converged = False
    for k in range(params.max_iters):
        s = state
        X_new = update_X(s.V1, s.D1, s.V2, s.D2, s.V3, s.D3, otf)
        XB = degradation.blur(X_new)
        V1 = update_V1(XB, s.D1, E, Yh_filled, mask, rho, inv1)
        V2 = update_V2(X_new, s.D2, RE, Ym, lam, rho, inv2)
        V3 = update_V3(X_new, s.D3, plan, tau, rho, params.jobs)
        r1, r2, r3 = V1 - XB, V2 - X_new, V3 - X_new
        primal = float(np.sqrt(np.sum(r1 ** 2) + np.sum(r2 ** 2) + np.sum(r3 ** 2)))
        dual = rho * float(np.sqrt(np.sum(degradation.blur_adjoint(V1 - s.V1) ** 2)
                                   + np.sum((V2 - s.V2) ** 2) + np.sum((V3 - s.V3) ** 2)))
        step = float(np.linalg.norm(X_new - s.X))
        state = SolverState(X_new, V1, V2, V3, s.D1 + r1, s.D2 + r2, s.D3 + r3, k + 1)
        if not np.all(np.isfinite(X_new)):
            raise FloatingPointError(f"non-finite iterate at iteration {k + 1}")
        value, exact = objective(X_new, Yh, Ym, degradation, E, lam, prior)
        trace.append(TraceRecord(k + 1, value, exact, primal, dual, step))
        log.debug("iter %d obj %.10g primal %.3e dual %.3e", k + 1, value, primal, dual)
        if callback is not None:
            callback(state)
        if primal < threshold and dual < threshold:
            converged = True
            break
    return SolveResult(spectral_apply(E, state.X), state.X, basis, state, trace, converged)


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iteration", "objective", "primal_residual", "dual_residual"])
        for r in trace:
            w.writerow([r.iteration, repr(r.objective), repr(r.primal_residual),
                        repr(r.dual_residual)])
