"""Synthetic aligned multi-modality volumes with segmentation masks.

Each volume holds a hidden tissue-class field built from randomized
geometric structures: a large body ellipsoid, an organ ellipsoid on one
side, and an elongated lesion bar on the other, all placed at anatomically
consistent relative positions with per-volume jitter. Modality k renders
the class field through its own monotone intensity transfer table plus a
smooth directional bias ramp and Gaussian noise.

The transfer tables are built so the organ and body classes are nearly
iso-intense in modality 0 but clearly separated in modality 1: telling them
apart requires combining modalities, which is exactly the property the
multimodal pretraining task is supposed to exploit.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .puzzle import MultimodalVolume
from .rng import Rng

__all__ = [
    "CLASS_COUNT",
    "NOISE_STD",
    "modality_transfer_tables",
    "synth_dataset",
    "synth_volume",
]

CLASS_COUNT = 4  # background, body, organ, lesion
NOISE_STD = 0.05


def modality_transfer_tables(m: int) -> np.ndarray:
    """Per-modality class-to-intensity tables, shape (m, CLASS_COUNT).

    Every table is strictly increasing in class id. Modality 0 renders body
    and organ within 0.6 * NOISE_STD of each other; modality 1 separates
    them by more than 5 * NOISE_STD.
    """
    if m < 1:
        raise DataError("need at least one modality")
    base = [
        [0.06, 0.45, 0.48, 0.92],  # organ ~ body: gap 0.03 < NOISE_STD
        [0.10, 0.30, 0.72, 0.94],  # organ vs body: gap 0.42 > 5 * NOISE_STD
        [0.08, 0.38, 0.60, 0.88],
        [0.12, 0.50, 0.68, 0.90],
    ]
    tables = [base[k % len(base)] for k in range(m)]
    return np.asarray(tables, dtype=np.float32)


def _ellipsoid_mask(shape, center, radii) -> np.ndarray:
    zz, yy, xx = np.meshgrid(
        np.arange(shape[0]), np.arange(shape[1]), np.arange(shape[2]), indexing="ij"
    )
    q = (
        ((zz - center[0]) / radii[0]) ** 2
        + ((yy - center[1]) / radii[1]) ** 2
        + ((xx - center[2]) / radii[2]) ** 2
    )
    return q <= 1.0


def _bar_mask(shape, center, half_sizes) -> np.ndarray:
    zz, yy, xx = np.meshgrid(
        np.arange(shape[0]), np.arange(shape[1]), np.arange(shape[2]), indexing="ij"
    )
    return (
        (np.abs(zz - center[0]) <= half_sizes[0])
        & (np.abs(yy - center[1]) <= half_sizes[1])
        & (np.abs(xx - center[2]) <= half_sizes[2])
    )


def synth_volume(
    dims: tuple[int, int, int], m: int, rng: Rng, name: str = ""
) -> tuple[MultimodalVolume, np.ndarray]:
    """One volume plus its (D, H, W) uint8 class mask."""
    d, h, w = dims
    shape = (d, h, w)
    ext = np.array(shape, dtype=np.float64)

    def jitter(scale):
        return rng.uniform(-scale, scale, size=3, dtype=np.float64) * ext

    body_c = ext / 2 + jitter(0.05)
    body_r = ext * (0.36 + rng.uniform(-0.03, 0.03, size=3, dtype=np.float64))
    organ_c = body_c + ext * np.array([0.0, -0.14, -0.13]) + jitter(0.03)
    organ_r = ext * (0.11 + rng.uniform(-0.02, 0.02, size=3, dtype=np.float64))
    lesion_c = body_c + ext * np.array([0.0, 0.12, 0.14]) + jitter(0.03)
    lesion_h = ext * (0.05 + rng.uniform(-0.01, 0.01, size=3, dtype=np.float64))
    axis = rng.choice(2) + 1  # elongate along a random in-plane axis
    lesion_h[axis] *= 2.2

    classes = np.zeros(shape, dtype=np.uint8)
    classes[_ellipsoid_mask(shape, body_c, body_r)] = 1
    classes[_ellipsoid_mask(shape, organ_c, organ_r)] = 2
    classes[_bar_mask(shape, lesion_c, lesion_h)] = 3

    tables = modality_transfer_tables(m)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    data = np.empty((m,) + shape, dtype=np.float32)
    for k in range(m):
        ramp = (0.06 + 0.02 * k) * (xx / max(w - 1, 1)) + 0.04 * (yy / max(h - 1, 1))
        vol = tables[k][classes] + ramp[None, :, :].astype(np.float32)
        vol = vol + rng.normal(0.0, NOISE_STD, size=shape)
        data[k] = np.clip(vol, 0.0, 1.0)
    return MultimodalVolume(data, name=name), classes


def synth_dataset(
    n_volumes: int, dims: tuple[int, int, int], m: int, rng: Rng
) -> tuple[list[MultimodalVolume], list[np.ndarray]]:
    """Generate aligned volumes and masks; deterministic in the rng seed."""
    if any(x < 32 for x in dims):
        raise DataError("synthetic volumes need at least 32 voxels per axis")
    if n_volumes < 1:
        raise DataError("need at least one volume")
    volumes, masks = [], []
    for v in range(n_volumes):
        vol, mask = synth_volume(dims, m, rng.substream("volume", v), name=f"synth{v:03d}")
        volumes.append(vol)
        masks.append(mask)
    return volumes, masks
