"""Ensemble label generator: M independently-seeded per-pixel MLPs mapping
hypercolumns to labels.

Discrete tasks aggregate by majority vote (ties to the lower class index)
and measure uncertainty as the generalized Jensen-Shannon divergence of the
member softmax distributions (natural log, uniform weights). Continuous
tasks aggregate by the arithmetic mean and use the across-member population
variance, averaged over output dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dfield
from pathlib import Path

import numpy as np

from . import nets
from .hypercolumn import HypercolumnField

DISCRETE = "discrete"
CONTINUOUS = "continuous"


@dataclass
class EnsembleTrainParams:
    epochs: int = 10
    batch_size: int = 256
    lr: float = 2e-3
    optimizer: str = "adam"
    pixels_per_image: int = 800
    balanced: bool = False
    member_seeds: list[int] | None = None


@dataclass
class EnsembleModel:
    members: list[nets.DenseNet]
    task: str
    n_outputs: int
    member_seeds: list[int]
    train_losses: list[float] = dfield(default_factory=list)

    @property
    def n_members(self) -> int:
        return len(self.members)

    @property
    def input_width(self) -> int:
        return self.members[0].layer_widths[0]

    def save(self, ckpt_dir: str | Path) -> None:
        d = Path(ckpt_dir)
        d.mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(self.members):
            m.save(d / f"member{i}")
        lines = [
            f"task = {self.task}",
            f"n_outputs = {self.n_outputs}",
            f"members = {self.n_members}",
            f"widths = {','.join(str(w) for w in self.members[0].layer_widths)}",
            f"seeds = {','.join(str(s) for s in self.member_seeds)}",
            f"losses = {','.join(repr(v) for v in self.train_losses)}",
        ]
        (d / "manifest.txt").write_text("\n".join(lines) + "\n")

    @staticmethod
    def load(ckpt_dir: str | Path) -> "EnsembleModel":
        d = Path(ckpt_dir)
        kv = {}
        for line in (d / "manifest.txt").read_text().splitlines():
            key, _, value = line.partition(" = ")
            kv[key.strip()] = value.strip()
        n = int(kv["members"])
        members = [nets.DenseNet.load(d / f"member{i}") for i in range(n)]
        seeds = [int(s) for s in kv["seeds"].split(",")]
        losses = [float(v) for v in kv["losses"].split(",")] if kv.get("losses") else []
        return EnsembleModel(members, kv["task"], int(kv["n_outputs"]), seeds, losses)


def _subsample_pixels(
    member_rng: np.random.Generator,
    labels_flat: np.ndarray,
    valid_flat: np.ndarray | None,
    count: int,
    balanced: bool,
    task: str,
) -> np.ndarray:
    pool = (
        np.flatnonzero(valid_flat)
        if valid_flat is not None
        else np.arange(labels_flat.shape[0])
    )
    if pool.size == 0:
        raise ValueError("image has an empty valid-pixel set")
    take = min(count, pool.size)
    if not balanced or task != DISCRETE:
        return member_rng.choice(pool, size=take, replace=False)
    classes = np.unique(labels_flat[pool])
    quota = max(1, take // len(classes))
    picks = []
    for c in classes:
        members_c = pool[labels_flat[pool] == c]
        picks.append(member_rng.choice(members_c, size=min(quota, members_c.size), replace=False))
    return np.concatenate(picks)


def train_ensemble(
    rng: np.random.Generator,
    training_set: list[tuple[HypercolumnField, np.ndarray]],
    widths: tuple[int, int],
    task: str,
    n_outputs: int,
    params: EnsembleTrainParams | None = None,
    n_members: int = 10,
    valid_masks: list[np.ndarray] | None = None,
) -> EnsembleModel:
    """Train M members, each on its own per-image pixel subsample drawn with
    its own seed. Labels: (R, R) int grids for discrete, (R, R, D) for
    continuous; optional boolean masks exclude corrupted pixels."""
    if not training_set:
        raise ValueError("empty training set")
    if task not in (DISCRETE, CONTINUOUS):
        raise ValueError(f"unknown task kind {task!r}")
    params = params or EnsembleTrainParams()
    c = training_set[0][0].channels
    if params.member_seeds is not None:
        if len(params.member_seeds) != n_members:
            raise ValueError("member_seeds length must equal the member count")
        seeds = list(params.member_seeds)
    else:
        seeds = [int(s) for s in rng.integers(0, 2**63 - 1, size=n_members)]

    flat_feats, flat_labels, flat_valid = [], [], []
    for i, (fld, labels) in enumerate(training_set):
        r = fld.resolution
        if task == DISCRETE:
            lab = np.asarray(labels).reshape(-1)
            if lab.min() < 0 or lab.max() >= n_outputs:
                raise ValueError(
                    f"class index out of range [0, {n_outputs}) in image {i}"
                )
        else:
            lab = np.asarray(labels, dtype=np.float32).reshape(r * r, -1)
            if lab.shape[1] != n_outputs:
                raise ValueError(
                    f"continuous labels must have {n_outputs} channels, got {lab.shape[1]}"
                )
        flat_feats.append(fld.data.reshape(r * r, c))
        flat_labels.append(lab)
        flat_valid.append(
            np.asarray(valid_masks[i], dtype=bool).reshape(-1) if valid_masks else None
        )

    loss_kind = "cross_entropy" if task == DISCRETE else "mse"
    members, losses = [], []
    for m in range(n_members):
        member_rng = np.random.default_rng(seeds[m])
        xs, ys = [], []
        for feats, labels, valid in zip(flat_feats, flat_labels, flat_valid):
            cls_key = labels if task == DISCRETE else np.zeros(labels.shape[0], dtype=int)
            idx = _subsample_pixels(
                member_rng, cls_key, valid, params.pixels_per_image, params.balanced, task
            )
            xs.append(feats[idx])
            ys.append(labels[idx])
        x = np.concatenate(xs).astype(np.float32)
        y = np.concatenate(ys)
        net = nets.init_net(member_rng, [c, widths[0], widths[1], n_outputs])
        history = nets.fit(
            member_rng, net, x, y, loss_kind,
            nets.TrainParams(params.epochs, params.batch_size, params.lr, params.optimizer),
        )
        members.append(net)
        losses.append(history[-1] if history else float("nan"))
    return EnsembleModel(members, task, n_outputs, seeds, losses)


@dataclass
class UncertaintyMap:
    values: np.ndarray  # (R, R) float64, >= 0
    kind: str  # "js_divergence" | "variance"


def _softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _entropy(p: np.ndarray) -> np.ndarray:
    return -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=-1)


def js_divergence(probs: np.ndarray) -> np.ndarray:
    """Generalized JSD of M distributions: H(mean) - mean(H). probs has
    shape (M, ..., P); returns (...)."""
    mean = probs.mean(axis=0)
    js = _entropy(mean) - _entropy(probs).mean(axis=0)
    return np.maximum(js, 0.0)


def _member_outputs(model: EnsembleModel, flat: np.ndarray) -> np.ndarray:
    return np.stack([nets.forward(m, flat) for m in model.members])


def predict(model: EnsembleModel, field: HypercolumnField) -> tuple[np.ndarray, UncertaintyMap]:
    """Aggregate member predictions for one field. Discrete: majority-vote
    class grid plus JS-divergence map. Continuous: mean output grid plus
    across-member variance map."""
    if field.channels != model.input_width:
        raise ValueError(
            f"field channels {field.channels} != model input width {model.input_width}"
        )
    labels, unc = predict_batch(model, field.data[None])
    return labels[0], UncertaintyMap(unc[0], _kind(model))


def _kind(model: EnsembleModel) -> str:
    return "js_divergence" if model.task == DISCRETE else "variance"


def predict_batch(model: EnsembleModel, fields: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized predict over stacked fields (B, R, R, C); returns labels
    plus raw uncertainty grids (B, R, R)."""
    b, r, _, c = fields.shape
    flat = fields.reshape(-1, c).astype(np.float32)
    outs = _member_outputs(model, flat)  # (M, B*R*R, out)
    if model.task == DISCRETE:
        probs = _softmax64(outs)
        votes = outs.argmax(axis=2)
        counts = np.zeros((flat.shape[0], model.n_outputs), dtype=np.int32)
        rows = np.arange(flat.shape[0])
        for m in range(model.n_members):
            counts[rows, votes[m]] += 1
        labels = counts.argmax(axis=1).astype(np.int16)
        unc = js_divergence(probs)
        return labels.reshape(b, r, r), unc.reshape(b, r, r)
    outs64 = outs.astype(np.float64)
    mean = outs64.mean(axis=0)
    var = ((outs64 - mean) ** 2).mean(axis=0).mean(axis=-1)
    preds = mean.reshape(b, r, r, model.n_outputs)
    if model.n_outputs == 1:
        preds = preds[..., 0]
    return preds, var.reshape(b, r, r)


def image_uncertainty(umap: UncertaintyMap | np.ndarray) -> float:
    """Sum of the per-pixel uncertainties, accumulated in pixel-index order
    (cumsum is sequential, so this equals a naive left-to-right loop)."""
    values = umap.values if isinstance(umap, UncertaintyMap) else np.asarray(umap)
    flat = values.reshape(-1).astype(np.float64)
    if flat.size == 0:
        return 0.0
    return float(np.cumsum(flat)[-1])
