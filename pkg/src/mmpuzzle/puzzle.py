"""Multimodal puzzle construction from aligned multi-modality volumes.

A volume's axial slices are cut into a g-by-g grid of square patches at
jittered anchor positions; each patch copies its pixels from one randomly
chosen modality, and several shuffled copies of the mixed patch set are
emitted per slice together with the permutation that restores them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError
from .permute import Permutation
from .rng import Rng

__all__ = [
    "MultimodalVolume",
    "PuzzleSpec",
    "Puzzle",
    "preprocess",
    "trilinear_resize",
    "create_puzzles",
    "auto_patch_len",
    "solution_space",
    "ordered_patch_stack",
]


@dataclass
class MultimodalVolume:
    """Aligned scalar grids, one per modality, shape (M, D, H, W)."""

    data: np.ndarray
    synthetic: np.ndarray | None = None  # per-modality provenance flags
    name: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise DimensionError(
                f"volume data must be (modalities, depth, height, width), "
                f"got shape {self.data.shape}"
            )
        if self.synthetic is None:
            self.synthetic = np.zeros(self.data.shape[0], dtype=bool)
        else:
            self.synthetic = np.asarray(self.synthetic, dtype=bool)
            if self.synthetic.shape != (self.data.shape[0],):
                raise DimensionError("synthetic flags must have one entry per modality")

    @property
    def modality_count(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    def restrict(self, modality_indices) -> "MultimodalVolume":
        """View of a subset of modalities (e.g. the single-modal baseline)."""
        idx = list(modality_indices)
        return MultimodalVolume(
            self.data[idx], self.synthetic[idx], name=self.name
        )


@dataclass(frozen=True)
class PuzzleSpec:
    """Geometry and sampling parameters for puzzle creation."""

    grid: int
    patch_len: int
    jitter: int = 5
    puzzles_per_slice: int = 1
    perm_pool: tuple | None = None
    foreground_intensity: float = 0.2
    foreground_min_fraction: float = 0.05

    def __post_init__(self):
        if self.grid < 2:
            raise DataError("puzzle grid must be at least 2x2")
        if self.patch_len < 1:
            raise DataError("patch_len must be positive")
        if self.jitter < 0:
            raise DataError("jitter must be non-negative")
        if self.puzzles_per_slice < 1:
            raise DataError("puzzles_per_slice must be at least 1")
        n = self.grid * self.grid
        if self.perm_pool is not None:
            for p in self.perm_pool:
                if not isinstance(p, Permutation) or p.n != n:
                    raise DataError(
                        f"perm_pool entries must be permutations of {n} elements"
                    )

    @property
    def patch_count(self) -> int:
        return self.grid * self.grid


@dataclass
class Puzzle:
    """Shuffled patch stack plus the permutation that unshuffles it.

    ``truth.mapping[i]`` is the grid position (row-major) where shuffled
    patch i belongs; ``source_modalities[i]`` is the modality patch i was
    copied from. Rearranging ``patches`` so that patch i lands at position
    ``truth.mapping[i]`` restores the original grid order.
    """

    patches: np.ndarray  # (N, l, l) float32
    truth: Permutation
    source_modalities: np.ndarray  # (N,) int16
    grid: int
    volume_name: str = ""
    slice_index: int = -1

    def __post_init__(self):
        n = self.grid * self.grid
        if self.patches.shape[0] != n or self.truth.n != n:
            raise DimensionError("patch count does not match grid")

    @property
    def patch_count(self) -> int:
        return self.patches.shape[0]


def ordered_patch_stack(puzzle: Puzzle) -> np.ndarray:
    """The ground-truth ordered stack: position j holds the right patch."""
    out = np.empty_like(puzzle.patches)
    out[puzzle.truth.mapping] = puzzle.patches
    return out


def trilinear_resize(grid: np.ndarray, target: tuple[int, int, int]) -> np.ndarray:
    """Resize a 3-D grid by trilinear interpolation (corner-aligned)."""
    grid = np.asarray(grid, dtype=np.float32)
    if grid.ndim != 3:
        raise DimensionError("trilinear_resize expects a 3-D grid")
    out = grid
    for axis, t in enumerate(target):
        n = out.shape[axis]
        if t < 1:
            raise DataError("target dims must be positive")
        if t == n:
            continue
        if t == 1:
            coords = np.array([(n - 1) / 2.0])
        else:
            coords = np.arange(t) * ((n - 1) / (t - 1))
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, n - 1)
        w = (coords - lo).astype(np.float32)
        sl_lo = np.take(out, lo, axis=axis)
        sl_hi = np.take(out, hi, axis=axis)
        shape = [1, 1, 1]
        shape[axis] = t
        w = w.reshape(shape)
        out = sl_lo * (1.0 - w) + sl_hi * w
    return out.astype(np.float32)


def preprocess(volume: MultimodalVolume, target_dims: tuple[int, int, int]) -> MultimodalVolume:
    """Trilinear-resize each modality to target_dims, then min-max to [0,1]."""
    if volume.data.size == 0:
        raise DataError("empty volume")
    resized = np.stack(
        [trilinear_resize(m, tuple(target_dims)) for m in volume.data]
    )
    out = np.empty_like(resized)
    for k, m in enumerate(resized):
        lo, hi = float(m.min()), float(m.max())
        if not hi > lo:
            raise DataError(
                f"modality {k} has constant intensity; min-max scaling undefined"
            )
        out[k] = (m - lo) / (hi - lo)
    return MultimodalVolume(out, volume.synthetic.copy(), name=volume.name)


def auto_patch_len(extent: int, grid: int, jitter: int) -> int:
    """Largest patch side such that jittered patches fit without overlap."""
    l = extent // grid - 2 * jitter
    if l < 2:
        raise DataError(
            f"grid {grid} with jitter {jitter} leaves no room for patches "
            f"on extent {extent}"
        )
    return l


def _check_spec(volume: MultimodalVolume, spec: PuzzleSpec) -> None:
    _, h, w = volume.dims
    g, l, j = spec.grid, spec.patch_len, spec.jitter
    for ext in (h, w):
        if l * g + 2 * j > ext:
            raise DataError(
                f"puzzle spec does not fit: {g}x{g} grid of {l}px patches with "
                f"jitter {j} exceeds slice extent {ext}"
            )
        # anchors sit on a pitch of l + 2*jitter so jittered patches never overlap
        if j + (g - 1) * (l + 2 * j) + l + j > ext:
            raise DataError(
                f"puzzle spec does not fit: non-overlap layout needs "
                f"{j + (g - 1) * (l + 2 * j) + l + j}px, slice extent is {ext}"
            )


def _slice_is_blank(slices: np.ndarray, spec: PuzzleSpec) -> bool:
    frac = float(np.mean(slices.max(axis=0) > spec.foreground_intensity))
    return frac < spec.foreground_min_fraction


def create_puzzles(
    volume: MultimodalVolume, spec: PuzzleSpec, rng: Rng
) -> list[Puzzle]:
    """Cut every retained axial slice into one mixed patch grid and emit
    ``puzzles_per_slice`` independently shuffled copies of it.

    Slices whose foreground fraction is below the spec threshold are skipped.
    Each slice draws from its own RNG substream keyed by slice index, so the
    output is independent of slice evaluation order.
    """
    _check_spec(volume, spec)
    g, l, j = spec.grid, spec.patch_len, spec.jitter
    n = spec.patch_count
    depth = volume.dims[0]
    m_count = volume.modality_count
    pitch = l + 2 * j
    puzzles: list[Puzzle] = []
    for z in range(depth):
        slices = volume.data[:, z]  # (M, H, W)
        if _slice_is_blank(slices, spec):
            continue
        srng = rng.substream("slice", z)
        offsets = srng.integers(-j, j + 1, size=(n, 2)) if j > 0 else np.zeros((n, 2), dtype=np.int64)
        modalities = srng.integers(0, m_count, size=n)
        ordered = np.empty((n, l, l), dtype=np.float32)
        for p in range(n):
            r, c = divmod(p, g)
            y = j + r * pitch + int(offsets[p, 0])
            x = j + c * pitch + int(offsets[p, 1])
            ordered[p] = slices[int(modalities[p]), y : y + l, x : x + l]
        for _ in range(spec.puzzles_per_slice):
            if spec.perm_pool is not None:
                perm = spec.perm_pool[srng.choice(len(spec.perm_pool))]
            else:
                perm = Permutation.random(n, srng)
            # shuffled patch i is the ordered patch at position perm(i)
            puzzles.append(
                Puzzle(
                    patches=ordered[perm.mapping].copy(),
                    truth=perm,
                    source_modalities=modalities[perm.mapping].astype(np.int16),
                    grid=g,
                    volume_name=volume.name,
                    slice_index=z,
                )
            )
    return puzzles


def solution_space(c: int, m: int) -> int:
    """Number of distinct puzzle states: (c!)**m for c patches, m modalities."""
    if c < 1 or m < 1:
        raise DataError("solution_space requires c >= 1 and m >= 1")
    return math.factorial(c) ** m
