"""Minimal dense-network machinery: 2-hidden-layer MLPs with manual
backpropagation, cross-entropy / mean-squared losses, and a first-order
optimizer (plain SGD by default, Adam behind a flag).

Parameters and activations are float32; loss reductions accumulate in
float64. Shared by the image encoder, the label-generator ensemble
members, and the downstream patch model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import hoff


@dataclass
class DenseNet:
    """Fully-connected net: input -> hidden1 -> hidden2 -> output, with a
    rectifier on the hidden layers and identity output."""

    layer_widths: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def copy(self) -> "DenseNet":
        return DenseNet(
            list(self.layer_widths),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def save(self, ckpt_dir: str | Path) -> None:
        d = Path(ckpt_dir)
        d.mkdir(parents=True, exist_ok=True)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            hoff.write(d / f"layer{i}.w.hoff", w)
            hoff.write(d / f"layer{i}.b.hoff", b)
        (d / "widths.txt").write_text(",".join(str(n) for n in self.layer_widths) + "\n")

    @staticmethod
    def load(ckpt_dir: str | Path) -> "DenseNet":
        d = Path(ckpt_dir)
        widths = [int(s) for s in (d / "widths.txt").read_text().strip().split(",")]
        weights, biases = [], []
        for i in range(len(widths) - 1):
            weights.append(hoff.read(d / f"layer{i}.w.hoff"))
            biases.append(hoff.read(d / f"layer{i}.b.hoff"))
        return DenseNet(widths, weights, biases)


def init_net(rng: np.random.Generator, layer_widths: list[int]) -> DenseNet:
    """Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)). Hidden biases
    start at 0.01 so that a fully-dead input row does not park the next
    layer's pre-activations exactly on the rectifier kink."""
    if len(layer_widths) != 4:
        raise ValueError(f"expected 4 layer widths (in, h1, h2, out), got {layer_widths}")
    if any(w <= 0 for w in layer_widths):
        raise ValueError(f"layer widths must be positive, got {layer_widths}")
    weights, biases = [], []
    n_layers = len(layer_widths) - 1
    for i, (fan_in, fan_out) in enumerate(zip(layer_widths[:-1], layer_widths[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32))
        fill = 0.01 if i < n_layers - 1 else 0.0
        biases.append(np.full(fan_out, fill, dtype=np.float32))
    return DenseNet(list(layer_widths), weights, biases)


def forward(net: DenseNet, inputs: np.ndarray) -> np.ndarray:
    """Batch forward pass. inputs: (B, d_in) -> (B, d_out)."""
    x = np.asarray(inputs, dtype=net.weights[0].dtype)
    if x.ndim != 2 or x.shape[1] != net.layer_widths[0]:
        raise ValueError(
            f"input width mismatch: expected (B, {net.layer_widths[0]}), got {x.shape}"
        )
    a = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = a @ w + b
        if i < last:
            np.maximum(a, 0.0, out=a)
    return a


def _forward_cached(net: DenseNet, x: np.ndarray):
    acts = [x]
    a = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = a @ w + b
        if i < last:
            a = np.maximum(a, 0.0)
        acts.append(a)
    return acts


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_output_grad(
    outputs: np.ndarray, loss_kind: str, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Loss value plus d(loss)/d(outputs) for 'cross_entropy' (integer class
    targets) or 'mse' (real targets of the output shape)."""
    b = outputs.shape[0]
    if loss_kind == "cross_entropy":
        t = np.asarray(targets)
        if t.shape != (b,):
            raise ValueError(f"cross_entropy targets must be shape ({b},), got {t.shape}")
        if not np.issubdtype(t.dtype, np.integer):
            raise ValueError("cross_entropy targets must be integer class indices")
        n_classes = outputs.shape[1]
        if t.min() < 0 or t.max() >= n_classes:
            raise ValueError(
                f"class index out of range: valid [0, {n_classes}), got "
                f"[{t.min()}, {t.max()}]"
            )
        zmax = outputs.max(axis=1)
        lse = zmax + np.log(np.exp(outputs - zmax[:, None]).sum(axis=1))
        loss = float(np.sum((lse - outputs[np.arange(b), t]).astype(np.float64)) / b)
        grad = _softmax(outputs)
        grad[np.arange(b), t] -= 1.0
        grad /= b
        return loss, grad.astype(outputs.dtype)
    if loss_kind == "mse":
        t = np.asarray(targets, dtype=outputs.dtype)
        if t.shape != outputs.shape:
            raise ValueError(f"mse targets must match outputs {outputs.shape}, got {t.shape}")
        diff = outputs - t
        loss = float(np.sum((diff.astype(np.float64)) ** 2) / diff.size)
        grad = (2.0 / diff.size) * diff
        return loss, grad
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def backward(
    net: DenseNet, inputs: np.ndarray, loss_kind: str, targets: np.ndarray
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Loss plus analytic gradients, one (dW, db) pair per layer."""
    x = np.asarray(inputs, dtype=net.weights[0].dtype)
    if x.ndim != 2 or x.shape[1] != net.layer_widths[0]:
        raise ValueError(
            f"input width mismatch: expected (B, {net.layer_widths[0]}), got {x.shape}"
        )
    acts = _forward_cached(net, x)
    loss, delta = loss_and_output_grad(acts[-1], loss_kind, targets)
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.weights)  # type: ignore
    for i in range(len(net.weights) - 1, -1, -1):
        a_prev = acts[i]
        grads[i] = (a_prev.T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ net.weights[i].T) * (acts[i] > 0)
    return loss, grads


@dataclass
class OptimState:
    """First-order optimizer state. kind 'sgd' keeps no buffers; 'adam'
    keeps per-parameter first/second moment buffers mirroring shapes."""

    lr: float
    kind: str = "sgd"
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    v: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def _ensure_buffers(state: OptimState, net: DenseNet) -> None:
    if state.m:
        return
    for w, b in zip(net.weights, net.biases):
        state.m.append((np.zeros_like(w), np.zeros_like(b)))
        state.v.append((np.zeros_like(w), np.zeros_like(b)))


def step(
    net: DenseNet, grads: list[tuple[np.ndarray, np.ndarray]], state: OptimState
) -> tuple[DenseNet, OptimState]:
    """One in-place optimizer step; returns (net, state) for chaining."""
    for i, (gw, gb) in enumerate(grads):
        if gw.shape != net.weights[i].shape or gb.shape != net.biases[i].shape:
            raise ValueError(f"gradient shape mismatch at layer {i}")
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise ValueError(f"non-finite gradient at layer {i}")
    state.step_count += 1
    if state.kind == "sgd":
        for i, (gw, gb) in enumerate(grads):
            net.weights[i] -= state.lr * gw
            net.biases[i] -= state.lr * gb
    else:
        _ensure_buffers(state, net)
        t = state.step_count
        bc1 = 1.0 - state.beta1**t
        bc2 = 1.0 - state.beta2**t
        for i, (gw, gb) in enumerate(grads):
            for param, g, m, v in (
                (net.weights[i], gw, state.m[i][0], state.v[i][0]),
                (net.biases[i], gb, state.m[i][1], state.v[i][1]),
            ):
                m *= state.beta1
                m += (1.0 - state.beta1) * g
                v *= state.beta2
                v += (1.0 - state.beta2) * g * g
                param -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    for i in range(len(net.weights)):
        if not (np.isfinite(net.weights[i]).all() and np.isfinite(net.biases[i]).all()):
            raise ValueError(f"non-finite parameters after step at layer {i}")
    return net, state


@dataclass
class TrainParams:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "sgd"


def fit(
    rng: np.random.Generator,
    net: DenseNet,
    inputs: np.ndarray,
    targets: np.ndarray,
    loss_kind: str,
    params: TrainParams,
) -> list[float]:
    """Mini-batch training loop; returns the mean loss per epoch."""
    n = inputs.shape[0]
    state = OptimState(lr=params.lr, kind=params.optimizer)
    history: list[float] = []
    bs = max(1, min(params.batch_size, n))
    for _ in range(params.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            loss, grads = backward(net, inputs[idx], loss_kind, targets[idx])
            step(net, grads, state)
            total += loss * len(idx)
        history.append(total / n)
    return history


def _loss_and_preacts(net: DenseNet, x: np.ndarray, loss_kind: str, targets) -> tuple[float, list]:
    a = x
    pre = []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = a @ w + b
        if i < last:
            pre.append(a)
            a = np.maximum(a, 0.0)
    loss, _ = loss_and_output_grad(a, loss_kind, targets)
    return loss, pre


def gradient_check(
    net: DenseNet,
    inputs: np.ndarray,
    loss_kind: str,
    targets: np.ndarray,
    epsilon: float = 1e-4,
) -> float:
    """Max relative error between analytic gradients and central finite
    differences over every parameter. Denominators are floored at
    max(|analytic|, |numeric|, 1e-6) so near-zero entries compare on
    absolute terms. Perturbations that move a hidden pre-activation across
    the rectifier kink are excluded: the symmetric difference is not a
    valid derivative oracle there. Cast the net to float64 first."""
    x = np.asarray(inputs, dtype=net.weights[0].dtype)
    _, grads = backward(net, x, loss_kind, targets)
    worst = 0.0
    params = [p for pair in zip(net.weights, net.biases) for p in pair]
    analytic = [g for pair in grads for g in pair]
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            up, pre_up = _loss_and_preacts(net, x, loss_kind, targets)
            flat[j] = orig - epsilon
            down, pre_dn = _loss_and_preacts(net, x, loss_kind, targets)
            flat[j] = orig
            crossing = any(
                np.any((zu * zd <= 0) & ((zu != 0) | (zd != 0)))
                for zu, zd in zip(pre_up, pre_dn)
            )
            if crossing:
                continue
            fd = (up - down) / (2.0 * epsilon)
            denom = max(abs(fd), abs(float(gflat[j])), 1e-6)
            worst = max(worst, abs(fd - float(gflat[j])) / denom)
    return worst


def to_float64(net: DenseNet) -> DenseNet:
    return DenseNet(
        list(net.layer_widths),
        [w.astype(np.float64) for w in net.weights],
        [b.astype(np.float64) for b in net.biases],
    )
