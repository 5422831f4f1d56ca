"""Label transformations: many-to-one class collapse, Gaussian keypoint
heatmap encode/decode, and depth validity masks.

Keypoints use pixel-index coordinates: an integer coordinate sits exactly
on a pixel sample point, so encode followed by decode recovers integer
keypoints exactly. Heatmaps are peak-normalized Gaussians scaled to 10.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

HEATMAP_PEAK = 10.0


@dataclass(frozen=True)
class CollapseMap:
    """Total mapping source class -> target class."""

    table: tuple[int, ...]

    @property
    def n_source(self) -> int:
        return len(self.table)

    @property
    def n_target(self) -> int:
        return max(self.table) + 1

    def __post_init__(self):
        if not self.table:
            raise ValueError("collapse map is empty")
        targets = set(self.table)
        if min(targets) < 0:
            raise ValueError("negative target class")
        missing = set(range(max(targets) + 1)) - targets
        if missing:
            raise ValueError(f"target classes not covered: {sorted(missing)}")

    @staticmethod
    def identity(n: int) -> "CollapseMap":
        return CollapseMap(tuple(range(n)))

    @staticmethod
    def from_pairs(pairs: dict[int, int]) -> "CollapseMap":
        n = max(pairs) + 1
        missing = [s for s in range(n) if s not in pairs]
        if missing:
            raise ValueError(f"source classes without mapping: {missing}")
        return CollapseMap(tuple(pairs[s] for s in range(n)))

    @staticmethod
    def from_text(text: str) -> "CollapseMap":
        """Parse 'src=tgt' lines ('#' comments and blanks ignored)."""
        pairs: dict[int, int] = {}
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                src, tgt = line.split("=")
                pairs[int(src)] = int(tgt)
            except ValueError as exc:
                raise ValueError(f"line {ln}: expected 'src=tgt', got {line!r}") from exc
        return CollapseMap.from_pairs(pairs)

    @staticmethod
    def load(path: str | Path) -> "CollapseMap":
        return CollapseMap.from_text(Path(path).read_text())

    def to_text(self) -> str:
        return "".join(f"{s}={t}\n" for s, t in enumerate(self.table))


def collapse(mask: np.ndarray, cmap: CollapseMap) -> np.ndarray:
    """Pointwise class remap; the grid shape is preserved."""
    arr = np.asarray(mask)
    if arr.size and (arr.min() < 0 or arr.max() >= cmap.n_source):
        bad = int(arr.max() if arr.max() >= cmap.n_source else arr.min())
        raise ValueError(f"unmapped class {bad} (map covers [0, {cmap.n_source}))")
    table = np.asarray(cmap.table, dtype=arr.dtype)
    return table[arr]


@dataclass
class HeatmapSet:
    grids: np.ndarray  # (K, R, R)
    sigma: float


def encode_keypoints(
    keypoints_xy: np.ndarray, visible: np.ndarray, resolution: int, sigma: float
) -> HeatmapSet:
    """One peak-10 Gaussian heatmap per keypoint; invisible keypoints get
    all-zero grids. Off-canvas visible keypoints contribute their tails."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    xy = np.asarray(keypoints_xy, dtype=np.float64).reshape(-1, 2)
    vis = np.asarray(visible, dtype=bool).reshape(-1)
    if len(vis) != len(xy):
        raise ValueError("keypoints and visibility length mismatch")
    coords = np.arange(resolution, dtype=np.float64)
    gy, gx = np.meshgrid(coords, coords, indexing="ij")
    grids = np.zeros((len(xy), resolution, resolution))
    for k, ((x, y), v) in enumerate(zip(xy, vis)):
        if not v:
            continue
        d2 = (gx - x) ** 2 + (gy - y) ** 2
        grids[k] = HEATMAP_PEAK * np.exp(-d2 / (2.0 * sigma * sigma))
    return HeatmapSet(grids, sigma)


@dataclass
class DecodedKeypoints:
    xy: np.ndarray  # (K, 2) int, (x, y)
    degenerate: np.ndarray  # (K,) bool: flat grid, argmax fell back to (0, 0)


def decode_heatmaps(heatmaps: HeatmapSet | np.ndarray) -> DecodedKeypoints:
    """Argmax location per grid; ties resolve to the lowest row-major index."""
    grids = heatmaps.grids if isinstance(heatmaps, HeatmapSet) else np.asarray(heatmaps)
    k, r, _ = grids.shape
    flat = grids.reshape(k, -1)
    idx = flat.argmax(axis=1)
    ys, xs = np.divmod(idx, r)
    degenerate = flat.max(axis=1) == flat.min(axis=1)
    xs = np.where(degenerate, 0, xs)
    ys = np.where(degenerate, 0, ys)
    return DecodedKeypoints(np.stack([xs, ys], axis=1).astype(np.int64), degenerate)


def validity_mask(depth: np.ndarray, corrupt_value: float) -> np.ndarray:
    """True where the depth value is usable."""
    return np.asarray(depth) != corrupt_value
