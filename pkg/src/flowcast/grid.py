"""Uniform-time-grid preprocessing for the discrete variant.

Irregularly timed frames are binned onto a K-slot grid by a half-up
quantizer (out-of-range times clip to the boundary slots). When several
frames land in one slot the latest one wins; empty slots start as zero
volumes and are then filled by last-observed carry-forward, with slots
before the first observation back-filled from it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .series import Volume


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid: slot k (1-based) sits at ``g1 + (k - 1) * delta``."""

    g1: float
    delta: float
    K: int

    def __post_init__(self):
        if self.delta <= 0:
            raise ConfigError(f"grid spacing must be positive, got {self.delta}")
        if self.K < 1:
            raise ConfigError(f"grid needs at least one slot, got K={self.K}")
        object.__setattr__(self, "g1", float(self.g1))
        object.__setattr__(self, "delta", float(self.delta))
        object.__setattr__(self, "K", int(self.K))

    def slot_times(self) -> np.ndarray:
        return self.g1 + self.delta * np.arange(self.K, dtype=np.float64)

    def to_dict(self) -> dict:
        return {"g1": self.g1, "delta": self.delta, "K": self.K}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(g1=float(d["g1"]), delta=float(d["delta"]), K=int(d["K"]))


@dataclass(frozen=True)
class GriddedSequence:
    """K slots of volumes with their occupancy flags.

    ``slots[k]`` is the zero volume exactly where ``occupancy[k]`` is false;
    ``source_index[k]`` records which input frame filled an occupied slot.
    """

    slots: tuple[Volume, ...]
    occupancy: tuple[bool, ...]
    source_index: tuple[int | None, ...]

    def __post_init__(self):
        if not any(self.occupancy):
            raise DataError("gridded sequence must have at least one occupied slot")
        if not (len(self.slots) == len(self.occupancy) == len(self.source_index)):
            raise ShapeError("slots/occupancy/source_index lengths differ")

    def stack(self) -> np.ndarray:
        return np.stack([v.voxels for v in self.slots])


def quantize(t: float, grid: GridSpec) -> int:
    """Half-up nearest-slot index in 1..K; clipping absorbs out-of-range t."""
    if not math.isfinite(t):
        raise DataError(f"cannot quantize non-finite time {t}")
    raw = 1 + math.floor((t - grid.g1) / grid.delta + 0.5)
    return int(min(max(raw, 1), grid.K))


def embed_grid(frames: Sequence[tuple[Volume, float]], grid: GridSpec) -> GriddedSequence:
    """Bin (volume, time) pairs onto the grid.

    Slot k receives the frame with the largest timestamp among those
    quantizing to k (equal timestamps: the later list position wins);
    unoccupied slots hold the zero volume.
    """
    if not frames:
        raise DataError("embed_grid needs at least one frame")
    shape = frames[0][0].shape
    for vol, _ in frames:
        if vol.shape != shape:
            raise ShapeError("frames must share one volume shape")

    best_time: list[float | None] = [None] * grid.K
    best_idx: list[int | None] = [None] * grid.K
    for i, (_, t) in enumerate(frames):
        k = quantize(t, grid) - 1
        if best_time[k] is None or t >= best_time[k]:
            best_time[k] = t
            best_idx[k] = i

    zero = Volume(np.zeros(shape, dtype=np.float32))
    slots = tuple(
        frames[best_idx[k]][0] if best_idx[k] is not None else zero for k in range(grid.K)
    )
    occupancy = tuple(best_idx[k] is not None for k in range(grid.K))
    return GriddedSequence(slots=slots, occupancy=occupancy, source_index=tuple(best_idx))


def locf_fill(gridded: GriddedSequence) -> list[Volume]:
    """Last-observed carry-forward over the K slots.

    Slots before the first observation are back-filled with it; every later
    empty slot repeats the most recent occupied one.
    """
    occupancy = gridded.occupancy
    first = occupancy.index(True)
    filled: list[Volume] = []
    current = gridded.slots[first]
    for k in range(len(occupancy)):
        if occupancy[k]:
            current = gridded.slots[k]
        filled.append(current)
    return filled


def grid_stack(frames: Sequence[tuple[Volume, float]], grid: GridSpec) -> np.ndarray:
    """embed_grid followed by locf_fill, stacked to a (K, H, D, W) array."""
    filled = locf_fill(embed_grid(frames, grid))
    return np.stack([v.voxels for v in filled])
