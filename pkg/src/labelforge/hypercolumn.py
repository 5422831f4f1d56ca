"""Per-pixel hypercolumns: channel-wise resize of every feature block to a
common resolution, concatenated in block order.

Upsampling is corner-aligned bilinear, so a source grid value is reproduced
exactly when the interpolant is evaluated at that grid point. Blocks above
the target resolution are average-pool downsampled. Optional per-block
channel caps keep only the first min(ch, cap) channels of each block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import FeatureStack


@dataclass
class HypercolumnField:
    resolution: int
    channels: int
    data: np.ndarray  # (R, R, C) float32
    block_offsets: list[int]  # start channel of each block


def total_channels(block_channels: list[int], caps: list[int] | None = None) -> int:
    """Hypercolumn dimension for given per-block channel counts and caps."""
    if caps is None:
        return int(sum(block_channels))
    if len(caps) != len(block_channels):
        raise ValueError(f"expected {len(block_channels)} caps, got {len(caps)}")
    return int(sum(min(ch, cap) for ch, cap in zip(block_channels, caps)))


def _axis_weights(src: int, dst: int, dtype=np.float32):
    if dst == 1 or src == 1:
        i0 = np.zeros(dst, dtype=np.intp)
        return i0, i0.copy(), np.zeros(dst, dtype=dtype)
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    i0 = np.floor(pos).astype(np.intp)
    i0 = np.minimum(i0, src - 2)
    frac = (pos - i0).astype(dtype)
    return i0, i0 + 1, frac


def bilinear_upsample(block: np.ndarray, target: int) -> np.ndarray:
    """Corner-aligned separable bilinear resize of (..., n, n, ch) grids."""
    src = block.shape[-3]
    if src == target:
        return block.astype(np.float32, copy=True)
    i0, i1, f = _axis_weights(src, target, np.float32)
    arr = block.astype(np.float32, copy=False)
    rows = arr.take(i0, axis=-3) * (1.0 - f)[:, None, None] + arr.take(i1, axis=-3) * f[:, None, None]
    out = rows.take(i0, axis=-2) * (1.0 - f)[:, None] + rows.take(i1, axis=-2) * f[:, None]
    return out


def average_pool(block: np.ndarray, target: int) -> np.ndarray:
    src = block.shape[-3]
    if src % target != 0:
        raise ValueError(f"cannot pool {src} down to {target}: not an integer factor")
    k = src // target
    shape = block.shape[:-3] + (target, k, target, k, block.shape[-1])
    return block.reshape(shape).mean(axis=(-4, -2), dtype=np.float32)


def _resize(block: np.ndarray, target: int) -> np.ndarray:
    src = block.shape[-3]
    if src <= target:
        return bilinear_upsample(block, target)
    return average_pool(block, target)


def build(
    features: FeatureStack, target_res: int, caps: list[int] | None = None
) -> HypercolumnField:
    """Assemble a dense (R, R, C) hypercolumn field from a feature stack."""
    stacked = build_batch([b[None] for b in features.blocks], target_res, caps)
    offsets = _offsets(features.blocks, caps)
    return HypercolumnField(target_res, stacked.shape[-1], stacked[0], offsets)


def _offsets(blocks: list[np.ndarray], caps: list[int] | None) -> list[int]:
    offsets = []
    start = 0
    for i, b in enumerate(blocks):
        offsets.append(start)
        ch = b.shape[-1]
        start += ch if caps is None else min(ch, caps[i])
    return offsets


def build_batch(
    blocks: list[np.ndarray], target_res: int, caps: list[int] | None = None
) -> np.ndarray:
    """Batched variant over per-block arrays (B, n, n, ch) -> (B, R, R, C)."""
    if caps is not None and len(caps) != len(blocks):
        raise ValueError(f"expected {len(blocks)} channel caps, got {len(caps)}")
    parts = []
    for i, blk in enumerate(blocks):
        keep = blk.shape[-1] if caps is None else min(blk.shape[-1], caps[i])
        if keep == 0:
            continue
        parts.append(_resize(blk[..., :keep], target_res))
    if not parts:
        raise ValueError("all blocks capped to zero channels")
    return np.concatenate(parts, axis=-1)


def pixel(field: HypercolumnField, x: int, y: int) -> np.ndarray:
    """Contiguous copy of one pixel's hypercolumn. Coordinates are
    (column x, row y), matching the keypoint convention."""
    r = field.resolution
    if not (0 <= x < r and 0 <= y < r):
        raise IndexError(f"pixel ({x}, {y}) outside field of resolution {r}")
    return field.data[y, x].copy()
