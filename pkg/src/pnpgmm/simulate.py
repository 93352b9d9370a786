"""Synthetic scenes and their degraded observations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .sharpening import DegradationModel


@dataclass(frozen=True)
class SceneSpec:
    width: int = 64
    height: int = 64
    bands: int = 32
    endmembers: int = 4
    smoothness: float = 3.0
    sharpness: float = 4.0

    def __post_init__(self):
        if min(self.width, self.height, self.bands, self.endmembers) < 1:
            raise ValueError(f"invalid scene dimensions: {self}")
        if self.smoothness <= 0:
            raise ValueError("smoothness must be positive")


def abundance_maps(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Piecewise-smooth abundances on the simplex, shape ``(endmembers, h, w)``.

    Smooth periodic random fields are pushed through a sharp softmax, which
    gives regions dominated by one material with smooth transitions.
    """
    fields = rng.standard_normal((spec.endmembers, spec.height, spec.width))
    fields = np.stack([gaussian_filter(f, spec.smoothness, mode="wrap") for f in fields])
    fields /= fields.std() + 1e-300
    logits = spec.sharpness * fields
    logits -= logits.max(axis=0, keepdims=True)
    A = np.exp(logits)
    return A / A.sum(axis=0, keepdims=True)


def endmember_spectra(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Smooth positive spectra, shape ``(bands, endmembers)``, values in ``(0, 1)``."""
    t = np.linspace(0.0, 1.0, spec.bands)
    out = np.empty((spec.bands, spec.endmembers))
    for j in range(spec.endmembers):
        s = np.full(spec.bands, rng.uniform(0.05, 0.3))
        for _ in range(3):
            c, w, a = rng.uniform(0, 1), rng.uniform(0.08, 0.3), rng.uniform(-0.2, 0.5)
            s += a * np.exp(-0.5 * ((t - c) / w) ** 2)
        out[:, j] = s
    lo, hi = out.min(), out.max()
    return 0.05 + 0.9 * (out - lo) / (hi - lo)


def generate_scene(spec: SceneSpec, seed: int = 0, return_parts: bool = False):
    """Linear-mixture ground-truth cube ``(bands, height, width)``."""
    rng = np.random.default_rng(seed)
    A = abundance_maps(spec, rng)
    M = endmember_spectra(spec, rng)
    Z = np.tensordot(M, A, axes=(1, 0))
    if return_parts:
        return Z, A, M
    return Z


def _noise_std(signal: np.ndarray, snr_db) -> np.ndarray:
    """Per-band noise std for a scalar (whole cube) or per-band SNR in dB."""
    L = signal.shape[0]
    snr = np.asarray(snr_db, dtype=np.float64)
    if snr.ndim == 0:
        if np.isnan(snr):
            raise ValueError("invalid SNR")
        if np.isinf(snr):
            return np.zeros(L)
        power = np.mean(signal ** 2)
        return np.full(L, np.sqrt(power / 10 ** (snr / 10)))
    if snr.shape != (L,) or np.any(np.isnan(snr)):
        raise ValueError(f"need one SNR per band ({L}), got {snr.shape}")
    power = np.mean(signal.reshape(L, -1) ** 2, axis=1)
    std = np.zeros(L)
    finite = np.isfinite(snr)
    std[finite] = np.sqrt(power[finite] / 10 ** (snr[finite] / 10))
    return std


def band_group_snr(n_bands: int, groups) -> np.ndarray:
    """Per-band SNR from ``[(count, snr_db), ...]``; the last group fills up."""
    out = np.empty(n_bands)
    start = 0
    for i, (count, snr) in enumerate(groups):
        stop = n_bands if i == len(groups) - 1 else start + count
        out[start:stop] = snr
        start = stop
    return out


def degrade(Z, model: DegradationModel, snr_hs_db=np.inf, snr_ms_db=np.inf, seed: int = 0):
    """Simulate the HS and MS observations of ``Z`` with Gaussian noise.

    SNRs may be scalars (noise power set from the whole cube) or per-band
    arrays; ``inf`` gives noiseless data.
    """
    Z = np.asarray(Z, dtype=np.float64)
    model.check_shape(Z.shape[-2:])
    if Z.shape[0] != model.response.shape[1]:
        raise ValueError("cube band count does not match the spectral response")
    hs_rng, ms_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    Yh = model.subsample(model.blur(Z))
    Ym = np.tensordot(model.response, Z, axes=(1, 0))
    Yh = Yh + _noise_std(Yh, snr_hs_db)[:, None, None] * hs_rng.standard_normal(Yh.shape)
    Ym = Ym + _noise_std(Ym, snr_ms_db)[:, None, None] * ms_rng.standard_normal(Ym.shape)
    return Yh, Ym


def measured_snr(clean, noisy) -> float:
    clean = np.asarray(clean)
    return float(10 * np.log10(np.mean(clean ** 2) / np.mean((np.asarray(noisy) - clean) ** 2)))
