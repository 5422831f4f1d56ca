"""Dataset synthesis: sample latents, render, predict labels with the
ensemble, rank by summed per-pixel uncertainty, and reject the most
uncertain fraction. Also builds the labeled-pool compositions used by the
long-tail substitution / addition studies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dfield

import numpy as np

from . import hypercolumn, scene
from .ensemble import EnsembleModel, image_uncertainty, predict_batch


@dataclass
class DatasetRecord:
    sample_id: int
    latent: np.ndarray
    uncertainty: float
    label: np.ndarray  # ensemble-predicted label plane
    presence: np.ndarray  # oracle per-class presence flags
    image_path: str = ""
    label_path: str = ""


@dataclass(frozen=True)
class PoolSpec:
    """Labeled-pool composition. substitute: fixed base_size with a target
    rare-class proportion. add: a rare-free base plus extra images with and
    without the rare class."""

    mode: str
    base_size: int
    rare_proportion: float = 0.0
    added_rare: int = 0
    added_plain: int = 0

    def __post_init__(self):
        if self.mode not in ("substitute", "add"):
            raise ValueError(f"unknown pool mode {self.mode!r}")
        if self.base_size < 1:
            raise ValueError("base_size must be >= 1")
        if self.mode == "substitute" and not 0.0 <= self.rare_proportion <= 1.0:
            raise ValueError("rare_proportion must be in [0, 1]")
        if self.added_rare < 0 or self.added_plain < 0:
            raise ValueError("added counts must be >= 0")


def rejected_count(n: int, filter_fraction: float) -> int:
    """Ceiling rule: reject ceil(fraction * n) samples."""
    if n < 1:
        raise ValueError("cannot synthesize an empty dataset")
    if not 0.0 <= filter_fraction < 1.0:
        raise ValueError(f"filter_fraction must be in [0, 1), got {filter_fraction}")
    return math.ceil(filter_fraction * n)


def split_by_uncertainty(
    records: list[DatasetRecord], filter_fraction: float
) -> tuple[list[DatasetRecord], list[DatasetRecord]]:
    """Reject the ceil(fraction*n) most-uncertain records. Ties resolve by
    sample id: among equal uncertainties the lower id is rejected first.
    Both outputs come back in ascending sample-id order."""
    n_reject = rejected_count(len(records), filter_fraction)
    order = sorted(records, key=lambda r: (-r.uncertainty, r.sample_id))
    rejected = sorted(order[:n_reject], key=lambda r: r.sample_id)
    retained = sorted(order[n_reject:], key=lambda r: r.sample_id)
    return retained, rejected


def synthesize(
    rng: np.random.Generator,
    config: scene.SceneConfig,
    model: EnsembleModel,
    n: int,
    filter_fraction: float,
    channel_caps: list[int] | None = None,
    chunk: int = 32,
) -> tuple[list[DatasetRecord], list[DatasetRecord]]:
    """Generate n image-label pairs and filter the most-uncertain fraction.
    Returns (retained, rejected); every retained uncertainty is <= every
    rejected uncertainty."""
    rejected_count(n, filter_fraction)  # validate up front
    latents = np.stack([scene.sample_latent(rng, config) for _ in range(n)])
    records: list[DatasetRecord] = []
    for start in range(0, n, chunk):
        sub = latents[start : start + chunk]
        _, blocks = scene.render_batch(sub, config)
        fields = hypercolumn.build_batch(blocks, config.resolution, channel_caps)
        labels, unc = predict_batch(model, fields)
        for i in range(sub.shape[0]):
            sid = start + i
            records.append(
                DatasetRecord(
                    sample_id=sid,
                    latent=sub[i],
                    uncertainty=image_uncertainty(unc[i]),
                    label=labels[i],
                    presence=scene.oracle_labels(sub[i], config).presence,
                )
            )
    return split_by_uncertainty(records, filter_fraction)


def build_pool(
    rng: np.random.Generator, config: scene.SceneConfig, spec: PoolSpec
) -> list[tuple[np.ndarray, scene.OracleLabels]]:
    """Sample a labeled pool to a prescribed rare-class composition. In add
    mode the base items are drawn before the additions, so two specs with
    the same base_size and rng seed share a bit-identical base."""
    items: list[tuple[np.ndarray, scene.OracleLabels]] = []

    def draw(count: int, bias: float) -> None:
        for _ in range(count):
            lat = scene.sample_latent(rng, config, rare_bias=bias)
            items.append((lat, scene.oracle_labels(lat, config)))

    if spec.mode == "substitute":
        n_rare = int(math.floor(spec.rare_proportion * spec.base_size + 0.5))
        draw(n_rare, 1.0)
        draw(spec.base_size - n_rare, 0.0)
    else:
        draw(spec.base_size, 0.0)
        draw(spec.added_rare, 1.0)
        draw(spec.added_plain, 0.0)
    return items
