"""Patch algebra on single-band images.

Patches are square, extracted with unit stride and periodic boundaries, so
an ``h x w`` image yields exactly ``h * w`` patches.  Patch ``i`` is anchored
at pixel ``i`` (raster order, top-left corner of the patch) and its entries
are stored in raster order as well.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class PatchGeometry:
    """Image dimensions plus patch side length."""

    height: int
    width: int
    patch_side: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"invalid image size {self.height}x{self.width}")
        if self.patch_side < 1:
            raise ValueError(f"patch_side must be >= 1, got {self.patch_side}")

    @classmethod
    def for_image(cls, img: np.ndarray, patch_side: int) -> "PatchGeometry":
        img = np.asarray(img)
        if img.ndim != 2:
            raise ValueError(f"expected a 2-D image, got shape {img.shape}")
        return cls(img.shape[0], img.shape[1], patch_side)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    @property
    def patch_size(self) -> int:
        """Pixels per patch (``n_p``)."""
        return self.patch_side * self.patch_side

    @property
    def n_patches(self) -> int:
        return self.n_pixels

    def offsets(self):
        """In-patch offsets ``(dr, dc)`` in raster order."""
        s = self.patch_side
        return [(dr, dc) for dr in range(s) for dc in range(s)]

    def patch_indices(self) -> np.ndarray:
        """Flat pixel index of every patch entry, shape ``(N, n_p)``.

        Row ``i`` lists the pixels covered by patch ``i``; this is the dense
        description of the extraction matrices used by the diagnostics.
        """
        h, w = self.shape
        rows, cols = np.divmod(np.arange(self.n_pixels), w)
        idx = np.empty((self.n_patches, self.patch_size), dtype=np.intp)
        for k, (dr, dc) in enumerate(self.offsets()):
            idx[:, k] = ((rows + dr) % h) * w + (cols + dc) % w
        return idx

    def check(self, img: np.ndarray) -> None:
        if np.shape(img) != self.shape:
            raise ValueError(
                f"image shape {np.shape(img)} does not match geometry {self.shape}")


@dataclass
class PatchSet:
    """Stacked patches, one row per patch.

    ``means`` holds the per-patch averages that were subtracted at extraction
    time, or ``None`` if the patches are raw.
    """

    geometry: PatchGeometry
    patches: np.ndarray
    means: Optional[np.ndarray] = None

    def __post_init__(self):
        g = self.geometry
        if self.patches.shape != (g.n_patches, g.patch_size):
            raise ValueError(
                f"patch array shape {self.patches.shape} inconsistent with "
                f"{g.n_patches} patches of size {g.patch_size}")
        if self.means is not None and self.means.shape != (g.n_patches,):
            raise ValueError("means must have one entry per patch")

    def __len__(self):
        return self.patches.shape[0]


@dataclass(frozen=True)
class PatchPartition:
    """Groups of mutually non-overlapping patches that each tile the image."""

    geometry: PatchGeometry
    subsets: tuple

    def __len__(self):
        return len(self.subsets)


def extract_patches(img, geom: PatchGeometry, remove_means: bool = False) -> PatchSet:
    """Extract all ``N = h*w`` periodic patches from ``img``.

    Parameters
    ----------
    img : array_like, shape (h, w)
    geom : PatchGeometry
        Must match the image dimensions.
    remove_means : bool
        Subtract each patch's average and keep it in ``PatchSet.means``.
    """
    img = np.asarray(img, dtype=np.float64)
    geom.check(img)
    out = np.empty((geom.n_patches, geom.patch_size))
    for k, (dr, dc) in enumerate(geom.offsets()):
        out[:, k] = np.roll(img, (-dr, -dc), axis=(0, 1)).ravel()
    means = None
    if remove_means:
        means = out.mean(axis=1)
        out -= means[:, None]
    return PatchSet(geom, out, means)


def scatter_patches(patches: np.ndarray, geom: PatchGeometry) -> np.ndarray:
    """Unnormalized adjoint of extraction: ``sum_i P_i^T q_i``."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape != (geom.n_patches, geom.patch_size):
        raise ValueError(f"patch array shape {patches.shape} does not match geometry")
    h, w = geom.shape
    out = np.zeros((h, w))
    for k, (dr, dc) in enumerate(geom.offsets()):
        out += np.roll(patches[:, k].reshape(h, w), (dr, dc), axis=(0, 1))
    return out


def aggregate_patches(ps: PatchSet) -> np.ndarray:
    """Put patches back in place and average the ``n_p`` overlapping estimates.

    Stored means are added back first, so this is an exact left inverse of
    :func:`extract_patches` in both modes.
    """
    q = ps.patches
    if ps.means is not None:
        q = q + ps.means[:, None]
    return scatter_patches(q, ps.geometry) / ps.geometry.patch_size


def coverage_count(geom: PatchGeometry, subset=None) -> np.ndarray:
    """How many patches (of ``subset``, default all) cover each pixel."""
    idx = geom.patch_indices()
    if subset is not None:
        idx = idx[np.asarray(subset, dtype=np.intp)]
    counts = np.bincount(idx.ravel(), minlength=geom.n_pixels)
    return counts.reshape(geom.shape)


def build_partition(geom: PatchGeometry) -> PatchPartition:
    """Split the patches into ``n_p`` subsets of pairwise disjoint patches.

    Subset ``j = a*s + b`` holds the patches anchored at ``(r, c)`` with
    ``r % s == a`` and ``c % s == b``; each subset tiles the image exactly
    once.  Requires the patch side to divide both image dimensions.
    """
    s = geom.patch_side
    h, w = geom.shape
    if h % s or w % s:
        raise ValueError(
            f"patch side {s} must divide the image dimensions {h}x{w} "
            "for an exact non-overlapping tiling")
    rows, cols = np.divmod(np.arange(geom.n_patches), w)
    key = (rows % s) * s + cols % s
    subsets = tuple(np.flatnonzero(key == j) for j in range(s * s))
    return PatchPartition(geom, subsets)
