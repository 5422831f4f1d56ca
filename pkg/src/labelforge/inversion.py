"""Latent inversion: an encoder maps images to initial latents, then a
constrained refinement polishes each latent with projected gradient descent
while the generator stays frozen.

The refinement objective is perceptual_loss(X, G(w)) + lambda * mse(X, G(w)),
minimized over the ball ||w - w_e||^2 <= c_reg around the encoder output.
Each step is projected back onto the ball, and a step-halving backtrack
(up to 8 halvings, else the step is rejected) keeps the loss trajectory
non-increasing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets, scene

ENCODER_POOL_RES = 16


@dataclass(frozen=True)
class InversionParams:
    c_reg: float = 0.5
    lambda_l2: float = 0.1
    iterations: int = 300
    step_size: float = 0.1
    perceptual: str = "multiscale_l2"  # or "none"
    max_halvings: int = 8
    engine_dtype: str = "float32"  # render precision inside refine

    def __post_init__(self):
        if self.c_reg <= 0 or self.step_size <= 0 or self.iterations < 1:
            raise ValueError("c_reg, step_size must be positive; iterations >= 1")
        if self.lambda_l2 < 0:
            raise ValueError("lambda_l2 must be non-negative")
        if self.perceptual not in ("multiscale_l2", "none"):
            raise ValueError(f"unknown perceptual loss {self.perceptual!r}")


@dataclass
class InversionResult:
    latent: np.ndarray
    initial_latent: np.ndarray
    trajectory: np.ndarray  # loss per iteration, length iterations + 1
    final_error: float  # mean-squared image reconstruction error at `latent`
    initial_error: float
    constraint_max: float  # max ||w - w_e||^2 seen over all iterates


@dataclass
class EncoderResult:
    net: nets.DenseNet
    train_mse: float
    val_mse: float


@dataclass
class EncoderTrainParams:
    widths: tuple[int, int] = (256, 64)
    n_pairs: int = 400
    val_pairs: int = 100
    epochs: int = 80
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"


def pool_image(images: np.ndarray, out_res: int = ENCODER_POOL_RES) -> np.ndarray:
    """Average-pool (B, R, R, 3) images down to (B, out, out, 3)."""
    b, r = images.shape[0], images.shape[1]
    if r % out_res != 0:
        raise ValueError(f"resolution {r} not divisible by pool size {out_res}")
    k = r // out_res
    return images.reshape(b, out_res, k, out_res, k, 3).mean(axis=(2, 4))


def encoder_inputs(images: np.ndarray) -> np.ndarray:
    pooled = pool_image(np.asarray(images))
    return pooled.reshape(pooled.shape[0], -1).astype(np.float32)


def train_encoder(
    rng: np.random.Generator,
    config: scene.SceneConfig,
    params: EncoderTrainParams | None = None,
) -> EncoderResult:
    """Fit a DenseNet regressor from pooled rendered images to the latents
    that produced them, on freshly sampled (render(w), w) pairs."""
    params = params or EncoderTrainParams()
    if params.n_pairs < 1:
        raise ValueError("need at least one training pair")
    total = params.n_pairs + params.val_pairs
    lats = np.stack([scene.sample_latent(rng, config) for _ in range(total)])
    images, _ = scene.render_batch(lats, config, with_features=False)
    x = encoder_inputs(images)
    y = lats.astype(np.float32)
    d_in = x.shape[1]
    net = nets.init_net(rng, [d_in, params.widths[0], params.widths[1], config.latent_dim])
    history = nets.fit(
        rng, net, x[: params.n_pairs], y[: params.n_pairs], "mse",
        nets.TrainParams(params.epochs, params.batch_size, params.lr, params.optimizer),
    )
    if params.val_pairs > 0:
        val_pred = nets.forward(net, x[params.n_pairs :])
        val_mse = float(np.mean((val_pred.astype(np.float64) - y[params.n_pairs :]) ** 2))
    else:
        val_mse = float("nan")
    return EncoderResult(net, history[-1] if history else float("nan"), val_mse)


def encode(encoder: nets.DenseNet, images: np.ndarray) -> np.ndarray:
    """Predict latents for a batch of images."""
    return nets.forward(encoder, encoder_inputs(images)).astype(np.float64)


def perceptual_loss(a: np.ndarray, b: np.ndarray) -> float:
    """Multi-scale image distance: sum over downsample factors {1, 2, 4} of
    the mean-squared difference of average-pooled images."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return float(_perceptual_batch(x[None], y[None])[0])


def _pool(images: np.ndarray, s: int) -> np.ndarray:
    if s == 1:
        return images
    b, r = images.shape[0], images.shape[1]
    return images.reshape(b, r // s, s, r // s, s, 3).mean(axis=(2, 4))


def _perceptual_batch(gen: np.ndarray, target: np.ndarray) -> np.ndarray:
    total = np.zeros(gen.shape[0])
    for s in (1, 2, 4):
        diff = _pool(gen, s) - _pool(target, s)
        sq = diff.astype(np.float64) ** 2
        total += sq.reshape(sq.shape[0], -1).sum(axis=1) / diff[0].size
    return total


def project_to_ball(w: np.ndarray, w_e: np.ndarray, c_reg: float) -> np.ndarray:
    """Rescale w about w_e onto the ball surface when ||w - w_e||^2 > c_reg."""
    delta = w - w_e
    sq = np.sum(delta**2, axis=-1, keepdims=True)
    scale = np.where(sq > c_reg, np.sqrt(c_reg / np.maximum(sq, 1e-300)), 1.0)
    return w_e + delta * scale


class _Objective:
    """Batched refinement loss and its image-space cotangent."""

    def __init__(self, targets: np.ndarray, params: InversionParams, config: scene.SceneConfig):
        self.targets = np.asarray(targets, dtype=np.float64)
        self.params = params
        self.config = config
        self.dtype = np.float32 if params.engine_dtype == "float32" else np.float64

    def render(self, w: np.ndarray) -> np.ndarray:
        imgs, _ = scene.render_batch(w, self.config, with_features=False, dtype=self.dtype)
        return imgs.astype(np.float64)

    def loss_of(self, imgs: np.ndarray, idx=None) -> np.ndarray:
        target = self.targets if idx is None else self.targets[idx]
        diff = imgs - target
        per = diff[0].size
        mse = (diff**2).reshape(diff.shape[0], -1).sum(axis=1) / per
        out = self.params.lambda_l2 * mse
        if self.params.perceptual == "multiscale_l2":
            out = out + _perceptual_batch(imgs, target)
        if not np.isfinite(out).all():
            raise FloatingPointError("non-finite refinement loss")
        return out

    def cotangent(self, imgs: np.ndarray) -> np.ndarray:
        diff = imgs - self.targets
        per = diff[0].size
        cot = self.params.lambda_l2 * 2.0 * diff / per
        if self.params.perceptual == "multiscale_l2":
            b, r = imgs.shape[0], imgs.shape[1]
            for s in (1, 2, 4):
                pd = _pool(diff, s) if s > 1 else diff
                n_s = pd[0].size
                g = 2.0 * pd / n_s
                if s > 1:
                    g = np.repeat(np.repeat(g, s, axis=1), s, axis=2) / (s * s)
                cot = cot + g
        return cot


def refine_batch(
    images: np.ndarray,
    w_e: np.ndarray,
    params: InversionParams,
    config: scene.SceneConfig,
) -> list[InversionResult]:
    """Refine a batch of encoder latents against their target images. Each
    image follows its own backtracking schedule; results match running the
    images independently."""
    targets = np.asarray(images, dtype=np.float64)
    if targets.ndim == 3:
        targets = targets[None]
    w0 = np.asarray(w_e, dtype=np.float64)
    if w0.ndim == 1:
        w0 = w0[None]
    b = w0.shape[0]
    if targets.shape[0] != b:
        raise ValueError(f"{targets.shape[0]} images for {b} latents")
    obj = _Objective(targets, params, config)

    w = w0.copy()
    imgs = obj.render(w)
    loss = obj.loss_of(imgs)
    traj = np.empty((b, params.iterations + 1))
    traj[:, 0] = loss
    initial_error = _recon_mse(imgs, targets)
    constraint_max = np.zeros(b)

    for it in range(1, params.iterations + 1):
        cot = obj.cotangent(imgs)
        grad = scene.render_gradient_batch(w, config, cot, dtype=obj.dtype).astype(np.float64)
        eta = np.full(b, params.step_size)
        pending = np.arange(b)
        for _ in range(params.max_halvings + 1):
            cand = project_to_ball(w[pending] - eta[pending, None] * grad[pending], w0[pending], params.c_reg)
            cand_imgs = obj.render(cand)
            cand_loss = obj.loss_of(cand_imgs, pending)
            ok = cand_loss <= loss[pending]
            acc = pending[ok]
            w[acc] = cand[ok]
            imgs[acc] = cand_imgs[ok]
            loss[acc] = cand_loss[ok]
            pending = pending[~ok]
            if pending.size == 0:
                break
            eta[pending] *= 0.5
        # steps that never improved are rejected; w/loss stay as they were
        constraint_max = np.maximum(constraint_max, np.sum((w - w0) ** 2, axis=1))
        traj[:, it] = loss

    final_error = _recon_mse(imgs, targets)
    return [
        InversionResult(
            latent=w[i].copy(),
            initial_latent=w0[i].copy(),
            trajectory=traj[i].copy(),
            final_error=float(final_error[i]),
            initial_error=float(initial_error[i]),
            constraint_max=float(constraint_max[i]),
        )
        for i in range(b)
    ]


def _recon_mse(imgs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    diff = imgs - targets
    return (diff**2).reshape(diff.shape[0], -1).sum(axis=1) / diff[0].size


def refine(
    image: np.ndarray,
    w_e: np.ndarray,
    params: InversionParams,
    config: scene.SceneConfig,
) -> InversionResult:
    """Single-image refinement; see `refine_batch`."""
    return refine_batch(np.asarray(image)[None], np.asarray(w_e)[None], params, config)[0]
