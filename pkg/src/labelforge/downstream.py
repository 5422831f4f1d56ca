"""Desk-scale downstream task model: a per-pixel MLP over square RGB
patches (clamp-to-edge padding), trained on synthesized datasets and
evaluated against oracle labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dfield
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import codec, metrics, nets, scene

DISCRETE = "discrete"
CONTINUOUS = "continuous"


@dataclass
class DownstreamParams:
    patch_radius: int = 3
    widths: tuple[int, int] = (128, 64)
    epochs: int = 20
    batch_size: int = 512
    lr: float = 1e-3
    optimizer: str = "adam"
    pixels_per_image: int = 128


@dataclass
class PatchModel:
    radius: int
    net: nets.DenseNet
    task: str
    n_outputs: int
    loss_history: list[float] = dfield(default_factory=list)

    @property
    def input_width(self) -> int:
        return 3 * (2 * self.radius + 1) ** 2

    def predict_image(self, image: np.ndarray) -> np.ndarray:
        """Per-pixel prediction for a full (R, R, 3) image."""
        r = image.shape[0]
        patches = extract_patches(image, self.radius)
        out = nets.forward(self.net, patches)
        if self.task == DISCRETE:
            return out.argmax(axis=1).astype(np.int16).reshape(r, r)
        out = out.astype(np.float64).reshape(r, r, self.n_outputs)
        return out[..., 0] if self.n_outputs == 1 else out

    def save(self, ckpt_dir: str | Path) -> None:
        d = Path(ckpt_dir)
        d.mkdir(parents=True, exist_ok=True)
        self.net.save(d / "net")
        (d / "manifest.txt").write_text(
            f"radius = {self.radius}\ntask = {self.task}\nn_outputs = {self.n_outputs}\n"
        )

    @staticmethod
    def load(ckpt_dir: str | Path) -> "PatchModel":
        d = Path(ckpt_dir)
        kv = {}
        for line in (d / "manifest.txt").read_text().splitlines():
            key, _, value = line.partition(" = ")
            kv[key.strip()] = value.strip()
        return PatchModel(
            int(kv["radius"]), nets.DenseNet.load(d / "net"), kv["task"], int(kv["n_outputs"])
        )


def extract_patches(image: np.ndarray, radius: int, pixels: np.ndarray | None = None) -> np.ndarray:
    """Flattened (2r+1)^2 RGB patches with clamp-to-edge padding, one per
    pixel (or per entry of `pixels`, flat row-major indices)."""
    r = image.shape[0]
    k = 2 * radius + 1
    padded = np.pad(image, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    win = sliding_window_view(padded, (k, k), axis=(0, 1))  # (R, R, 3, k, k)
    flat = win.reshape(r * r, 3 * k * k)
    if pixels is not None:
        flat = flat[pixels]
    return np.ascontiguousarray(flat, dtype=np.float32)


def _label_rows(label: np.ndarray, task: str, n_outputs: int, pixels: np.ndarray):
    if task == DISCRETE:
        return np.asarray(label).reshape(-1)[pixels]
    flat = np.asarray(label, dtype=np.float32).reshape(-1, n_outputs)
    return flat[pixels]


def _gather_training_matrix(
    rng: np.random.Generator,
    samples: list[tuple[np.ndarray, np.ndarray]],
    task: str,
    n_outputs: int,
    params: DownstreamParams,
) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for image, label in samples:
        r = image.shape[0]
        take = min(params.pixels_per_image, r * r)
        pixels = rng.choice(r * r, size=take, replace=False)
        xs.append(extract_patches(image, params.patch_radius, pixels))
        ys.append(_label_rows(label, task, n_outputs, pixels))
    return np.concatenate(xs), np.concatenate(ys)


def train_downstream(
    rng: np.random.Generator,
    samples: list[tuple[np.ndarray, np.ndarray]],
    task: str,
    n_outputs: int,
    params: DownstreamParams | None = None,
) -> PatchModel:
    """Train a patch model on (image, label-plane) pairs; labels are class
    grids for discrete tasks, (R, R, D) stacks for continuous ones."""
    if not samples:
        raise ValueError("empty training dataset")
    params = params or DownstreamParams()
    for i, (img, lab) in enumerate(samples):
        if img is None or lab is None or np.asarray(img).ndim != 3:
            raise ValueError(f"unreadable record {i}")
    d_in = 3 * (2 * params.patch_radius + 1) ** 2
    net = nets.init_net(rng, [d_in, params.widths[0], params.widths[1], n_outputs])
    model = PatchModel(params.patch_radius, net, task, n_outputs)
    if params.epochs == 0:
        return model
    x, y = _gather_training_matrix(rng, samples, task, n_outputs, params)
    loss_kind = "cross_entropy" if task == DISCRETE else "mse"
    model.loss_history = nets.fit(
        rng, net, x, y, loss_kind,
        nets.TrainParams(params.epochs, params.batch_size, params.lr, params.optimizer),
    )
    return model


def finetune(
    model: PatchModel,
    rng: np.random.Generator,
    originals: list[tuple[np.ndarray, np.ndarray]],
    task: str,
    params: DownstreamParams | None = None,
    epochs: int | None = None,
) -> tuple[PatchModel, list[float]]:
    """Continue training on the original labeled pool only. Returns the
    model plus the full-pool loss recorded before each epoch and after the
    last one (length epochs + 1)."""
    if not originals:
        raise ValueError("empty finetune pool")
    if task != model.task:
        raise ValueError(f"task mismatch: model is {model.task!r}, pool is {task!r}")
    params = params or DownstreamParams()
    n_epochs = params.epochs if epochs is None else epochs
    if n_epochs == 0:
        return model, []
    full_px = np.arange(originals[0][0].shape[0] ** 2)
    xs = np.concatenate(
        [extract_patches(img, model.radius, full_px) for img, _ in originals]
    )
    ys = np.concatenate(
        [_label_rows(lab, model.task, model.n_outputs, full_px) for _, lab in originals]
    )
    loss_kind = "cross_entropy" if model.task == DISCRETE else "mse"
    state = nets.OptimState(lr=params.lr * 0.1, kind=params.optimizer)
    trajectory = []
    bs = params.batch_size
    for _ in range(n_epochs):
        loss, _ = nets.backward(model.net, xs, loss_kind, ys)
        trajectory.append(loss)
        order = rng.permutation(xs.shape[0])
        for start in range(0, xs.shape[0], bs):
            idx = order[start : start + bs]
            _, grads = nets.backward(model.net, xs[idx], loss_kind, ys[idx])
            nets.step(model.net, grads, state)
    loss, _ = nets.backward(model.net, xs, loss_kind, ys)
    trajectory.append(loss)
    return model, trajectory


@dataclass(frozen=True)
class EvalSettings:
    task: str  # segmentation | keypoints | depth
    heatmap_sigma: float = 5.0
    corrupt_fraction: float = 0.25
    corrupt_value: float = 0.0
    corrupt_seed: int = 0

    def __post_init__(self):
        if self.task not in ("segmentation", "keypoints", "depth"):
            raise ValueError(f"unknown task {self.task!r}")


PCK_ALPHAS = (0.10, 0.05, 0.02)


def corruption_mask(rng: np.random.Generator, shape, fraction: float) -> np.ndarray:
    """Boolean grid marking pixels to corrupt."""
    return rng.random(shape) < fraction


def evaluate_downstream(
    model,
    test_latents: np.ndarray,
    config: scene.SceneConfig,
    settings: EvalSettings,
) -> tuple[list[dict], dict]:
    """Render the test latents, run the model on each image, and score
    against the oracle. Returns (per-image rows, aggregate means).

    Keypoint rows need at least two visible keypoints with a non-degenerate
    bounding box; others carry NaN and drop out of the aggregate. Depth
    mNMSE is masked by a seeded corruption pattern over the oracle truth,
    mirroring corrupted-sensor evaluation; RMSE uses the clean truth."""
    lats = np.atleast_2d(np.asarray(test_latents, dtype=np.float64))
    images, _ = scene.render_batch(lats, config, with_features=False)
    rows = []
    for i in range(lats.shape[0]):
        truth = scene.oracle_labels(lats[i], config)
        pred = model.predict_image(images[i])
        row: dict = {"id": i}
        if settings.task == "segmentation":
            score = metrics.iou(pred, truth.segmentation, config.classes)
            row["miou"] = score.miou
            for c in range(config.classes):
                row[f"iou_class_{c}"] = score.per_class[c]
        elif settings.task == "keypoints":
            decoded = codec.decode_heatmaps(np.moveaxis(pred, -1, 0))
            vis = truth.keypoints_visible
            txy = truth.keypoints_xy
            degenerate = vis.sum() < 2 or (
                max(txy[vis][:, 0].ptp(), txy[vis][:, 1].ptp()) == 0.0
            )
            for alpha in PCK_ALPHAS:
                key = f"pck_{alpha:.2f}"
                row[key] = (
                    float("nan")
                    if degenerate
                    else metrics.pck(decoded.xy, txy, vis, alpha)
                )
        else:
            rng = np.random.default_rng((settings.corrupt_seed, i))
            corrupt = corruption_mask(rng, truth.depth.shape, settings.corrupt_fraction)
            noisy_truth = np.where(corrupt, settings.corrupt_value, truth.depth)
            valid = codec.validity_mask(noisy_truth, settings.corrupt_value)
            row["mnmse"] = metrics.mnmse(pred, truth.depth, valid)
            rmse, rmse_log = metrics.rmse_pair(pred, truth.depth)
            row["rmse"] = rmse
            row["rmse_log"] = rmse_log
        rows.append(row)
    keys = [k for k in rows[0] if k != "id"]
    aggregate = {"id": "aggregate"}
    for key in keys:
        vals = np.array([r[key] for r in rows], dtype=np.float64)
        aggregate[key] = float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")
    return rows, aggregate
