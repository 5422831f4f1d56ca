"""Differentiable procedural scene generator plus its analytic label oracle.

A latent of 6 coordinates per object slot (presence logit, class offset,
center x, center y, log-radius, depth) drives a soft-edged disk compositor.
The soft forward pass (`render`, `render_gradient`) is smooth in every
latent coordinate so it can sit inside gradient-based inversion; the hard
oracle (`oracle_labels`) discretizes the same geometry into segmentation,
keypoints, depth, and per-class presence.

Feature grids are emitted at every block resolution (4, 8, ..., R) by
evaluating the same continuous fields at coarser pixel centers, standing in
for a generator's intermediate activations.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# Logistic temperature for the presence gate. Sharp enough that a logit of
# -3 contributes < 1e-4 of gradient signal to its slot's geometry.
PRESENCE_TEMP = 0.15
# Width of the Gaussian kernel that snaps a class offset onto palette
# anchors; small enough that sampled offsets render near-pure colors.
CLASS_TEMP = 0.15
# Soft-min temperature for depth composition, in depth units.
DEPTH_TEMP = 0.1
FAR_DEPTH = 80.0
RADIUS_BASE = 0.15
RADIUS_LOG_SCALE = 0.3

_EPS_DIST = 1e-12
_EPS_NORM = 1e-12

# Foreground class colors, spread over saturated RGB corners/edges.
PALETTE = np.array(
    [
        [0.92, 0.12, 0.14],
        [0.10, 0.85, 0.20],
        [0.15, 0.25, 0.95],
        [0.95, 0.85, 0.10],
        [0.90, 0.15, 0.90],
        [0.10, 0.85, 0.90],
        [0.95, 0.55, 0.10],
        [0.60, 0.30, 0.85],
    ]
)


@dataclass(frozen=True)
class SceneConfig:
    resolution: int = 64
    slots: int = 4
    classes: int = 5
    tau: float = 1.5
    rare_class: int = -1  # -1 means classes - 1
    rare_base_freq: float = 0.05
    presence_prob: float = 0.75
    radius_log_lo: float = -1.2
    radius_log_hi: float = 1.5

    def __post_init__(self):
        r = self.resolution
        if r < 8 or (r & (r - 1)) != 0:
            raise ValueError(f"resolution must be a power of two >= 8, got {r}")
        if self.classes < 2 or self.classes - 1 > len(PALETTE):
            raise ValueError(f"classes must be in [2, {len(PALETTE) + 1}], got {self.classes}")
        if self.slots < 1:
            raise ValueError("need at least one object slot")
        if not 0.0 < self.rare_base_freq < 1.0:
            raise ValueError("rare_base_freq must be in (0, 1)")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @property
    def n_blocks(self) -> int:
        return int(np.log2(self.resolution)) - 1

    @property
    def block_resolutions(self) -> list[int]:
        return [4 * 2**i for i in range(self.n_blocks)]

    @property
    def channels_per_block(self) -> int:
        # per-class occupancy + per-slot signed distance + depth + coverage
        return self.classes + self.slots + 2

    @property
    def total_feature_channels(self) -> int:
        return self.n_blocks * self.channels_per_block

    @property
    def latent_dim(self) -> int:
        return self.slots * 6

    @property
    def rare(self) -> int:
        return self.classes - 1 if self.rare_class < 0 else self.rare_class

    def class_anchors(self) -> np.ndarray:
        f = self.classes - 1
        return -3.0 + 6.0 * (np.arange(f) + 0.5) / f


@dataclass
class FeatureStack:
    """Per-block feature grids; block l has shape (res_l, res_l, ch)."""

    resolutions: list[int]
    blocks: list[np.ndarray]

    @property
    def total_channels(self) -> int:
        return sum(b.shape[2] for b in self.blocks)


@dataclass
class OracleLabels:
    segmentation: np.ndarray  # (R, R) int16 class indices
    keypoints_xy: np.ndarray  # (slots, 2) float, pixel-index coords (x, y)
    keypoints_visible: np.ndarray  # (slots,) bool
    depth: np.ndarray  # (R, R) float64
    presence: np.ndarray  # (classes,) bool


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@lru_cache(maxsize=32)
def _pixel_centers(res: int, canvas: int, dtype_str: str) -> tuple[np.ndarray, np.ndarray]:
    step = canvas / res
    coords = ((np.arange(res) + 0.5) * step).astype(dtype_str)
    py, px = np.meshgrid(coords, coords, indexing="ij")
    return px.reshape(-1), py.reshape(-1)


def _slot_params(lat: np.ndarray, config: SceneConfig) -> dict:
    """Map raw latent coordinates (B, K, 6) to geometric/appearance terms.

    The background shade is keyed to the presence logits alone so that an
    absent slot's geometry coordinates carry no gradient at all."""
    dtype = lat.dtype
    r_canvas = config.resolution
    logit = lat[..., 0]
    offset = lat[..., 1]
    gate = _sigmoid(logit / PRESENCE_TEMP)
    cx = r_canvas * (0.5 + lat[..., 2] / 8.0)
    cy = r_canvas * (0.5 + lat[..., 3] / 8.0)
    radius = r_canvas * RADIUS_BASE * np.exp(RADIUS_LOG_SCALE * lat[..., 4])
    z = 10.0 + 2.0 * lat[..., 5]
    anchors = config.class_anchors().astype(dtype)
    q = -((offset[..., None] - anchors) ** 2) / CLASS_TEMP
    q -= q.max(axis=-1, keepdims=True)
    eq = np.exp(q)
    v = eq / eq.sum(axis=-1, keepdims=True)
    palette = PALETTE[: config.classes - 1].astype(dtype)
    rgb = v @ palette
    bg_mean = logit.mean(axis=1) / 2.0
    bg_tanh = np.tanh(bg_mean)
    bg = 0.22 + 0.05 * bg_tanh
    return {
        "gate": gate, "cx": cx, "cy": cy, "radius": radius, "z": z,
        "offset": offset, "v": v, "rgb": rgb, "bg": bg, "bg_tanh": bg_tanh,
        "anchors": anchors, "palette": palette,
    }


def _composite(sp: dict, config: SceneConfig, res: int) -> dict:
    """Soft coverage and depth-ordering terms at one grid resolution.

    Visibility weight of slot i is alpha_i times the product over other
    slots j of (1 - alpha_j * sigmoid((z_i - z_j)/T)): each potential
    occluder dims a slot by at most its own coverage, so the depth
    advantage is bounded and gated-off slots can never win the pixel."""
    px, py = _pixel_centers(res, config.resolution, sp["gate"].dtype.str)
    tau_s = config.tau / 2.0
    dx = sp["cx"][..., None] - px
    dy = sp["cy"][..., None] - py
    dist = np.sqrt(dx * dx + dy * dy + _EPS_DIST)
    u = (sp["radius"][..., None] - dist) / tau_s
    occ = _sigmoid(u)
    alpha = sp["gate"][..., None] * occ
    one_minus = 1.0 - alpha
    coverage = 1.0 - one_minus.prod(axis=1)
    z = sp["z"]
    # behind[b, m, i] = sigmoid((z_m - z_i)/T): how much slot i occludes m
    behind = _sigmoid((z[:, :, None] - z[:, None, :]) / DEPTH_TEMP)
    k = config.slots
    f = 1.0 - alpha[:, None, :, :] * behind[..., None]
    f[:, np.arange(k), np.arange(k), :] = 1.0
    vis_prod = f.prod(axis=2)
    w = alpha * vis_prod
    w_sum = w.sum(axis=1)
    w_hat = w / (w_sum[:, None, :] + _EPS_NORM)
    return {
        "dx": dx, "dy": dy, "dist": dist, "u": u, "occ": occ, "alpha": alpha,
        "one_minus": one_minus, "coverage": coverage, "behind": behind,
        "f": f, "vis_prod": vis_prod, "w": w, "w_sum": w_sum, "w_hat": w_hat,
        "tau_s": tau_s,
    }


def _image_flat(sp: dict, comp: dict) -> np.ndarray:
    mix = np.einsum("bkp,bkc->bpc", comp["w_hat"], sp["rgb"])
    a = comp["coverage"][..., None]
    return a * mix + (1.0 - a) * sp["bg"][:, None, None]


def _features_flat(sp: dict, comp: dict, config: SceneConfig) -> np.ndarray:
    b = comp["coverage"].shape[0]
    n_pix = comp["coverage"].shape[1]
    out = np.empty((b, n_pix, config.channels_per_block), dtype=comp["coverage"].dtype)
    a = comp["coverage"]
    weighted = comp["w_hat"] * a[:, None, :]
    out[:, :, 0] = 1.0 - a
    out[:, :, 1 : config.classes] = np.einsum("bkp,bkf->bpf", weighted, sp["v"])
    k = config.slots
    out[:, :, config.classes : config.classes + k] = np.tanh(comp["u"] / 4.0).transpose(0, 2, 1)
    soft_z = np.einsum("bkp,bk->bp", weighted, sp["z"]) + (1.0 - a) * FAR_DEPTH
    out[:, :, config.classes + k] = soft_z / FAR_DEPTH
    out[:, :, config.classes + k + 1] = a
    return out


def _check_latents(latents: np.ndarray, config: SceneConfig, dtype=np.float64) -> np.ndarray:
    arr = np.asarray(latents, dtype=dtype)
    if arr.shape[-1] != config.latent_dim:
        raise ValueError(
            f"latent dim mismatch: expected {config.latent_dim}, got {arr.shape[-1]}"
        )
    if not np.isfinite(arr).all():
        raise ValueError("latent contains non-finite entries")
    return arr


def render_batch(
    latents: np.ndarray, config: SceneConfig, with_features: bool = True,
    chunk: int = 32, dtype=np.float64,
) -> tuple[np.ndarray, list[np.ndarray] | None]:
    """Render a batch of latents. Returns images (B, R, R, 3) and, unless
    disabled, one array (B, res, res, ch) per feature block."""
    lat = _check_latents(latents, config, dtype)
    if lat.ndim == 1:
        lat = lat[None]
    b_total = lat.shape[0]
    r = config.resolution
    images = np.empty((b_total, r, r, 3), dtype=dtype)
    feats = (
        [
            np.empty((b_total, n, n, config.channels_per_block), dtype=dtype)
            for n in config.block_resolutions
        ]
        if with_features
        else None
    )
    for start in range(0, b_total, chunk):
        sub = lat[start : start + chunk].reshape(-1, config.slots, 6)
        sp = _slot_params(sub, config)
        comp = _composite(sp, config, r)
        img = _image_flat(sp, comp)
        images[start : start + chunk] = img.reshape(-1, r, r, 3)
        if with_features:
            for i, n in enumerate(config.block_resolutions):
                c = comp if n == r else _composite(sp, config, n)
                feats[i][start : start + chunk] = _features_flat(sp, c, config).reshape(
                    -1, n, n, config.channels_per_block
                )
    return images, feats


def render(latent: np.ndarray, config: SceneConfig) -> tuple[np.ndarray, FeatureStack]:
    """Render one latent to an image in [0, 1] plus its feature stack."""
    images, feats = render_batch(np.asarray(latent)[None], config)
    stack = FeatureStack(config.block_resolutions, [f[0] for f in feats])
    return images[0], stack


def render_gradient_batch(
    latents: np.ndarray, config: SceneConfig, cotangents: np.ndarray,
    chunk: int = 32, dtype=np.float64,
) -> np.ndarray:
    """Vector-Jacobian product of `render_batch` images with `cotangents`
    (B, R, R, 3); returns per-latent gradients (B, latent_dim)."""
    lat = _check_latents(latents, config, dtype)
    squeeze = lat.ndim == 1
    if squeeze:
        lat = lat[None]
    cot = np.asarray(cotangents, dtype=dtype)
    if squeeze and cot.ndim == 3:
        cot = cot[None]
    r = config.resolution
    if cot.shape != (lat.shape[0], r, r, 3):
        raise ValueError(f"cotangent shape {cot.shape} != {(lat.shape[0], r, r, 3)}")
    if not np.isfinite(cot).all():
        raise ValueError("cotangent contains non-finite entries")
    out = np.empty_like(lat)
    for start in range(0, lat.shape[0], chunk):
        sub = lat[start : start + chunk].reshape(-1, config.slots, 6)
        csub = cot[start : start + chunk].reshape(sub.shape[0], -1, 3)
        out[start : start + chunk] = _vjp_chunk(sub, csub, config).reshape(-1, config.latent_dim)
    return out[0] if squeeze else out


def render_gradient(
    latent: np.ndarray, config: SceneConfig, pixel_cotangent: np.ndarray
) -> np.ndarray:
    return render_gradient_batch(np.asarray(latent)[None], config, np.asarray(pixel_cotangent)[None])[0]


def _vjp_chunk(sub: np.ndarray, cot: np.ndarray, config: SceneConfig) -> np.ndarray:
    sp = _slot_params(sub, config)
    comp = _composite(sp, config, config.resolution)
    mix = np.einsum("bkp,bkc->bpc", comp["w_hat"], sp["rgb"])
    bg = sp["bg"][:, None, None]
    k = config.slots

    d_cov = np.einsum("bpc,bpc->bp", cot, mix - bg)
    d_mix = cot * comp["coverage"][..., None]
    d_bg = np.einsum("bpc,bp->b", cot, 1.0 - comp["coverage"])

    d_w_hat = np.einsum("bpc,bkc->bkp", d_mix, sp["rgb"])
    d_rgb = np.einsum("bpc,bkp->bkc", d_mix, comp["w_hat"])

    # w_hat = w / (W + eps)
    inner = np.einsum("bkp,bkp->bp", d_w_hat, comp["w_hat"])
    d_w = (d_w_hat - inner[:, None, :]) / (comp["w_sum"][:, None, :] + _EPS_NORM)

    # w_m = alpha_m * prod_{j != m} f[m, j]
    d_vis = d_w * comp["alpha"]
    f = comp["f"]
    left = np.ones_like(f)
    right = np.ones_like(f)
    for j in range(1, k):
        left[:, :, j] = left[:, :, j - 1] * f[:, :, j - 1]
        right[:, :, k - 1 - j] = right[:, :, k - j] * f[:, :, k - j]
    d_f = d_vis[:, :, None, :] * left * right
    d_f[:, np.arange(k), np.arange(k), :] = 0.0

    # f[m, i] = 1 - alpha_i * behind[m, i]
    d_alpha = d_w * comp["vis_prod"]
    d_alpha += -np.einsum("bmip,bmi->bip", d_f, comp["behind"])
    d_behind = -np.einsum("bmip,bip->bmi", d_f, comp["alpha"])
    sig_grad = d_behind * comp["behind"] * (1.0 - comp["behind"]) / DEPTH_TEMP
    d_z = sig_grad.sum(axis=2) - sig_grad.sum(axis=1)

    # coverage = 1 - prod_k(1 - alpha_k)
    one_minus = comp["one_minus"]
    cleft = np.ones_like(one_minus)
    cright = np.ones_like(one_minus)
    for i in range(1, k):
        cleft[:, i] = cleft[:, i - 1] * one_minus[:, i - 1]
        cright[:, k - 1 - i] = cright[:, k - i] * one_minus[:, k - i]
    d_alpha += d_cov[:, None, :] * cleft * cright

    d_occ = d_alpha * sp["gate"][..., None]
    d_gate = np.einsum("bkp,bkp->bk", d_alpha, comp["occ"])
    d_u = d_occ * comp["occ"] * (1.0 - comp["occ"])
    d_radius = d_u.sum(axis=2) / comp["tau_s"]
    d_dist = -d_u / comp["tau_s"]
    d_cx = np.einsum("bkp,bkp->bk", d_dist, comp["dx"] / comp["dist"])
    d_cy = np.einsum("bkp,bkp->bk", d_dist, comp["dy"] / comp["dist"])

    d_v = np.einsum("bkc,fc->bkf", d_rgb, sp["palette"])
    inner_v = np.einsum("bkf,bkf->bk", d_v, sp["v"])
    d_q = sp["v"] * (d_v - inner_v[..., None])
    d_offset = np.einsum(
        "bkf,bkf->bk", d_q, -2.0 * (sp["offset"][..., None] - sp["anchors"]) / CLASS_TEMP
    )

    grad = np.empty_like(sub)
    gate = sp["gate"]
    grad[..., 0] = d_gate * gate * (1.0 - gate) / PRESENCE_TEMP
    # background shade depends on the mean presence logit
    grad[..., 0] += (d_bg * 0.05 * (1.0 - sp["bg_tanh"] ** 2) / (2.0 * config.slots))[:, None]
    grad[..., 1] = d_offset
    grad[..., 2] = d_cx * (config.resolution / 8.0)
    grad[..., 3] = d_cy * (config.resolution / 8.0)
    grad[..., 4] = d_radius * sp["radius"] * RADIUS_LOG_SCALE
    grad[..., 5] = 2.0 * d_z
    return grad


def oracle_labels(latent: np.ndarray, config: SceneConfig) -> OracleLabels:
    """Hard ground-truth labels for one latent: nearest-in-depth z-order
    over hard disk occupancy, keypoints at object centers (visible when at
    least 25% of a slot's covered pixels are unoccluded)."""
    lat = _check_latents(latent, config).reshape(config.slots, 6)
    r = config.resolution
    sp = _slot_params(lat[None], config)
    present = lat[:, 0] > 0.0
    anchors = config.class_anchors()
    slot_class = 1 + np.argmin(np.abs(lat[:, 1][:, None] - anchors), axis=1)
    cx, cy = sp["cx"][0], sp["cy"][0]
    radius, z = sp["radius"][0], sp["z"][0]

    px, py = _pixel_centers(r, r, np.dtype(np.float64).str)
    dist2 = (cx[:, None] - px) ** 2 + (cy[:, None] - py) ** 2
    covered = (dist2 < radius[:, None] ** 2) & present[:, None]

    z_eff = np.where(covered, z[:, None], np.inf)
    winner = np.argmin(z_eff, axis=0)
    any_cover = covered.any(axis=0)
    seg_flat = np.where(any_cover, slot_class[winner], 0)
    depth_flat = np.where(any_cover, z[winner], FAR_DEPTH)

    kp_xy = np.stack([cx - 0.5, cy - 0.5], axis=1)
    visible = np.zeros(config.slots, dtype=bool)
    for i in range(config.slots):
        if not present[i]:
            continue
        n_cov = int(covered[i].sum())
        if n_cov == 0:
            continue
        n_vis = int((covered[i] & any_cover & (winner == i)).sum())
        visible[i] = n_vis >= 0.25 * n_cov

    presence = np.zeros(config.classes, dtype=bool)
    found = np.unique(seg_flat)
    presence[found] = True
    return OracleLabels(
        segmentation=seg_flat.reshape(r, r).astype(np.int16),
        keypoints_xy=kp_xy,
        keypoints_visible=visible,
        depth=depth_flat.reshape(r, r),
        presence=presence,
    )


def sample_latent(
    rng: np.random.Generator,
    config: SceneConfig,
    rare_bias: float | None = None,
    max_attempts: int = 10_000,
) -> np.ndarray:
    """Draw a scene latent. The rare class appears in an image with
    probability `rare_bias` (or the configured base frequency): presence is
    decided by one Bernoulli draw, then scenes are rejection-resampled until
    the oracle's rare-class presence matches that draw."""
    k = config.slots
    p_rare = config.rare_base_freq if rare_bias is None else float(rare_bias)
    if not 0.0 <= p_rare <= 1.0:
        raise ValueError(f"rare_bias must be in [0, 1], got {p_rare}")
    want_rare = rng.random() < p_rare
    anchors = config.class_anchors()
    fg = np.arange(1, config.classes)
    non_rare = fg[fg != config.rare]
    band = 6.0 / k
    matched = 0
    for attempt in range(1, max_attempts + 1):
        present = rng.random(k) < config.presence_prob
        if want_rare and not present.any():
            continue
        classes = rng.choice(non_rare, size=k)
        if want_rare:
            rare_slot = rng.choice(np.flatnonzero(present))
            classes[rare_slot] = config.rare
        lat = np.empty((k, 6))
        lat[:, 0] = np.where(present, rng.uniform(1.5, 2.5, k), rng.uniform(-2.5, -1.5, k))
        lat[:, 1] = anchors[classes - 1] + rng.uniform(-0.4, 0.4, k)
        # each slot's center lives in its own canvas cell so that slots are
        # identifiable from the image (encoder regression needs a canonical
        # object-to-slot assignment); big radii still overlap across cells
        grid = int(np.ceil(np.sqrt(k)))
        half = 2.5 / grid
        qx = -2.5 + half * (2 * (np.arange(k) % grid) + 1)
        qy = -2.5 + half * (2 * (np.arange(k) // grid) + 1)
        lat[:, 2] = qx + rng.uniform(-0.92 * half, 0.92 * half, k)
        lat[:, 3] = qy + rng.uniform(-0.92 * half, 0.92 * half, k)
        lat[:, 4] = rng.uniform(config.radius_log_lo, config.radius_log_hi, k)
        # depth bands keep present objects separated in z so the occlusion
        # order is unambiguous for the oracle
        lo = -3.0 + band * np.arange(k) + 0.25 * band
        lat[:, 5] = lo + rng.uniform(0.0, 0.5 * band, k)
        flat = lat.reshape(-1)
        if not want_rare:
            return flat  # construction cannot produce rare-class pixels
        if oracle_labels(flat, config).presence[config.rare]:
            matched += 1
            return flat
    achieved = matched / max_attempts
    raise RuntimeError(
        f"rare-class rejection budget exhausted after {max_attempts} draws "
        f"(achievable frequency ~{achieved:.4f}, requested {p_rare})"
    )
