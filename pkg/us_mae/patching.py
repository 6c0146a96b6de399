"""
Non-overlapping 1-D patches and random mask plans.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Sequence, Tuple

import numpy as np

from .errors import ShapeError, UsageError
from .signal_synth import SUPPORTED_PATCH_SIZES

MASK_RATIOS = (0.625, 0.75, 0.875)


@dataclass
class PatchGrid:
    """N rows of P samples covering a signal of length L = N * P."""
    patches: np.ndarray
    signal_length: int
    patch_size: int

    @property
    def patch_count(self) -> int:
        return self.patches.shape[0]


@dataclass
class MaskPlan:
    """Sorted masked patch indices and their sorted visible complement."""
    masked: np.ndarray
    visible: np.ndarray
    ratio: float

    @property
    def patch_count(self) -> int:
        return self.masked.size + self.visible.size


@dataclass
class MaskBatch:
    """Stacked plans with equal counts: masked (B, m), visible (B, N - m)."""
    masked: np.ndarray
    visible: np.ndarray
    ratio: float

    @classmethod
    def from_plans(cls, plans: Sequence[MaskPlan]) -> "MaskBatch":
        if not plans:
            raise UsageError("Cannot stack an empty list of mask plans")
        counts = {(p.masked.size, p.visible.size) for p in plans}
        if len(counts) != 1:
            raise ShapeError(f"Mask plans disagree on masked/visible counts: {sorted(counts)}")
        return cls(
            masked=np.stack([p.masked for p in plans]),
            visible=np.stack([p.visible for p in plans]),
            ratio=plans[0].ratio,
        )

    def __len__(self) -> int:
        return self.masked.shape[0]

    @property
    def patch_count(self) -> int:
        return self.masked.shape[1] + self.visible.shape[1]


class Split(NamedTuple):
    visible_patches: np.ndarray
    visible_indices: np.ndarray
    masked_patches: np.ndarray
    masked_indices: np.ndarray


def check_patch_size(signal_length: int, patch_size: int) -> int:
    """Validate P against L and return N = L / P."""
    if patch_size not in SUPPORTED_PATCH_SIZES:
        raise UsageError(f"Patch size {patch_size} not in {SUPPORTED_PATCH_SIZES}")
    if signal_length % patch_size:
        raise UsageError(f"Patch size {patch_size} does not divide signal length {signal_length}")
    return signal_length // patch_size


def to_patches(signals: np.ndarray, patch_size: int) -> np.ndarray:
    """Reshape (..., L) to (..., N, P)."""
    signals = np.asarray(signals)
    count = check_patch_size(signals.shape[-1], patch_size)
    return signals.reshape(signals.shape[:-1] + (count, patch_size))


def from_patches(patches: np.ndarray) -> np.ndarray:
    """Reshape (..., N, P) back to (..., N * P)."""
    patches = np.asarray(patches)
    return patches.reshape(patches.shape[:-2] + (patches.shape[-2] * patches.shape[-1],))


def patchify(signal: np.ndarray, patch_size: int) -> PatchGrid:
    signal = np.asarray(signal)
    if signal.ndim != 1:
        raise ShapeError(f"patchify expects a 1-D signal, got shape {signal.shape}")
    return PatchGrid(
        patches=to_patches(signal, patch_size).copy(),
        signal_length=signal.size,
        patch_size=patch_size,
    )


def unpatchify(grid: PatchGrid) -> np.ndarray:
    return from_patches(grid.patches).copy()


def mask_count(patch_count: int, ratio: float) -> int:
    """|M| = round-half-up(ratio * N)."""
    return int(math.floor(ratio * patch_count + 0.5))


def mask_counts(patch_count: int, ratio: float) -> Tuple[int, int]:
    """(masked, visible) for a valid ratio; raises on degenerate plans."""
    if not 0.0 < ratio < 1.0:
        raise UsageError(f"Mask ratio must be in (0, 1), got {ratio}")
    masked = mask_count(patch_count, ratio)
    if masked < 1 or masked > patch_count - 1:
        raise UsageError(
            f"Mask ratio {ratio} on {patch_count} patches leaves {patch_count - masked} visible "
            f"and {masked} masked; both must be >= 1"
        )
    return masked, patch_count - masked


def sample_mask(patch_count: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Uniform draw without replacement of round(ratio * N) masked indices."""
    masked_count, _ = mask_counts(patch_count, ratio)
    order = rng.permutation(patch_count)
    masked = np.sort(order[:masked_count])
    visible = np.sort(order[masked_count:])
    return MaskPlan(masked=masked, visible=visible, ratio=ratio)


def full_plan(patch_count: int) -> MaskPlan:
    """All patches visible, nothing masked (fine-tuning and inference)."""
    return MaskPlan(
        masked=np.empty(0, dtype=np.int64), visible=np.arange(patch_count), ratio=0.0
    )


def split_visible(grid: PatchGrid, plan: MaskPlan) -> Split:
    """Order-preserving partition of grid rows into visible and masked."""
    count = grid.patch_count
    indices = np.concatenate([plan.visible, plan.masked])
    if indices.size != count or indices.min(initial=0) < 0 or indices.max(initial=0) >= count:
        raise ShapeError(f"Mask plan over {plan.patch_count} patches does not fit {count} patches")
    if np.unique(indices).size != count:
        raise ShapeError("Mask plan indices overlap")
    return Split(
        visible_patches=grid.patches[plan.visible],
        visible_indices=plan.visible,
        masked_patches=grid.patches[plan.masked],
        masked_indices=plan.masked,
    )


def merge_split(split: Split, patch_size: int) -> PatchGrid:
    """Reassemble both partitions by index."""
    count = split.visible_indices.size + split.masked_indices.size
    patches = np.empty((count, patch_size), dtype=split.visible_patches.dtype)
    patches[split.visible_indices] = split.visible_patches
    patches[split.masked_indices] = split.masked_patches
    return PatchGrid(patches=patches, signal_length=count * patch_size, patch_size=patch_size)


def mask_grid(
    signal_length: int,
    patch_sizes: Sequence[int] = (8, 16, 32, 64),
    ratios: Sequence[float] = MASK_RATIOS,
) -> Dict[int, List[Tuple[float, int, int]]]:
    """Masked/visible counts for every (patch size, ratio) pair."""
    grid = {}
    for patch_size in patch_sizes:
        count = check_patch_size(signal_length, patch_size)
        grid[patch_size] = [(ratio,) + mask_counts(count, ratio) for ratio in ratios]
    return grid
