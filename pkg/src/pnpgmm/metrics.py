"""Fusion quality metrics: ERGAS, SAM and SRE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# reported SRE for an exact reconstruction
SRE_MAX = float(np.finfo(np.float64).max)


@dataclass
class MetricReport:
    ergas: float
    sam_degrees: float
    sre_db: float
    band_rmse: np.ndarray
    sam_skipped: int = 0

    def to_text(self) -> str:
        return (f"ergas: {self.ergas:.10g}\nsam_degrees: {self.sam_degrees:.10g}\n"
                f"sre_db: {self.sre_db:.10g}\nsam_skipped_pixels: {self.sam_skipped}\n")

    def csv_header(self) -> str:
        return "ergas,sam_degrees,sre_db,sam_skipped_pixels"

    def csv_row(self) -> str:
        return f"{self.ergas!r},{self.sam_degrees!r},{self.sre_db!r},{self.sam_skipped}"


def sre(Z_hat, Z_ref) -> float:
    """Signal to reconstruction error in dB."""
    ref = float(np.sum(np.square(Z_ref)))
    err = float(np.sum(np.square(np.asarray(Z_hat) - Z_ref)))
    if err == 0.0:
        return SRE_MAX
    return float(10.0 * np.log10(ref / err))


def sam(Z_hat, Z_ref) -> tuple[float, int]:
    """Mean spectral angle in degrees and the number of skipped pixels.

    Pixels where either spectrum has zero norm are excluded from the mean.
    """
    a = np.asarray(Z_hat, dtype=np.float64).reshape(Z_hat.shape[0], -1)
    b = np.asarray(Z_ref, dtype=np.float64).reshape(Z_ref.shape[0], -1)
    na, nb = np.linalg.norm(a, axis=0), np.linalg.norm(b, axis=0)
    keep = (na > 0) & (nb > 0)
    # chord form stays accurate for nearly parallel spectra, unlike arccos
    chord = np.linalg.norm(a[:, keep] / na[keep] - b[:, keep] / nb[keep], axis=0)
    angles = np.degrees(2.0 * np.arcsin(np.minimum(chord / 2.0, 1.0)))
    skipped = int(np.count_nonzero(~keep))
    return (float(angles.mean()) if angles.size else 0.0), skipped


def ergas(Z_hat, Z_ref, ratio: float) -> float:
    L = Z_ref.shape[0]
    diff = (np.asarray(Z_hat) - Z_ref).reshape(L, -1)
    rmse = np.sqrt(np.mean(diff ** 2, axis=1))
    means = np.asarray(Z_ref).reshape(L, -1).mean(axis=1)
    return float(100.0 / ratio * np.sqrt(np.mean((rmse / means) ** 2)))


def evaluate(Z_hat, Z_ref, ratio: float) -> MetricReport:
    """Compare an estimated cube ``(L, h, w)`` against the reference."""
    Z_hat = np.asarray(Z_hat, dtype=np.float64)
    Z_ref = np.asarray(Z_ref, dtype=np.float64)
    if Z_hat.shape != Z_ref.shape:
        raise ValueError(f"shape mismatch: {Z_hat.shape} vs {Z_ref.shape}")
    if not np.any(Z_ref):
        raise ValueError("reference cube is identically zero")
    L = Z_ref.shape[0]
    rmse = np.sqrt(np.mean((Z_hat - Z_ref).reshape(L, -1) ** 2, axis=1))
    angle, skipped = sam(Z_hat, Z_ref)
    return MetricReport(ergas(Z_hat, Z_ref, ratio), angle, sre(Z_hat, Z_ref), rmse, skipped)
