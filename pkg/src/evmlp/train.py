"""Desk-scale training: hand-written backward passes, SGD with momentum, and
finite-difference gradient checks.

Training runs on a 64-bit copy of the network. Inside a training forward
each dropout mask is drawn once from the supplied generator and kept on the
tape for the backward pass; re-seeding the generator reproduces the masks,
which is how the gradient checker holds them fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from evmlp.model import (
    InvertedResidualBottleneck,
    Mode,
    Network,
    NetworkConfig,
    StageConfig,
    build_network,
    network_forward,
    prepare_input,
)
from evmlp.numerics import DenseLayer, LayerNormParams, dense_forward, gelu, layer_norm, patchify, unpatchify

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"loss became non-finite in epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    lr: float = 0.05
    warmup_epochs: int = 1
    epochs: int = 50
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("batch_size must be positive; epochs and warmup_epochs nonnegative")


# --------------------------------------------------------------------------
# layer backward passes
# --------------------------------------------------------------------------


def dense_backward(layer: DenseLayer, x: np.ndarray, dy: np.ndarray):
    """Returns ``(dx, dweight, dbias)`` for rows ``x`` and upstream ``dy``."""
    x2 = np.atleast_2d(x)
    dy2 = np.atleast_2d(dy)
    dx = dy2 @ layer.weight
    return dx.reshape(np.shape(x)), dy2.T @ x2, dy2.sum(axis=0)


def gelu_grad(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(z * _INV_SQRT2)) + z * _INV_SQRT2PI * np.exp(-0.5 * z * z)


def layer_norm_backward(params: LayerNormParams, x: np.ndarray, dy: np.ndarray):
    """Returns ``(dx, dgamma, dbeta)``."""
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + params.eps)
    xhat = centered * inv_std
    dxhat = dy * params.gamma
    dx = inv_std * (
        dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    dgamma = (np.atleast_2d(dy) * np.atleast_2d(xhat)).sum(axis=0)
    dbeta = np.atleast_2d(dy).sum(axis=0)
    return dx, dgamma, dbeta


@dataclass
class BottleneckTape:
    x: np.ndarray
    pre: np.ndarray
    mask: np.ndarray | None
    hidden: np.ndarray
    summed: np.ndarray


def bottleneck_forward_tape(
    b: InvertedResidualBottleneck,
    x: np.ndarray,
    mode: Mode = "training",
    rng: np.random.Generator | None = None,
    mask: np.ndarray | None = None,
) -> tuple[np.ndarray, BottleneckTape]:
    pre = dense_forward(b.expand, x)
    h = gelu(pre)
    if mode == "training" and b.dropout_p > 0:
        if mask is None:
            if rng is None:
                raise ValueError("training-mode dropout needs an rng or a fixed mask")
            mask = rng.random(h.shape) >= b.dropout_p
        h = h * mask / (1.0 - b.dropout_p)
    else:
        mask = None
    summed = x + dense_forward(b.project, h)
    return layer_norm(b.norm, summed), BottleneckTape(x, pre, mask, h, summed)


def bottleneck_backward(b: InvertedResidualBottleneck, tape: BottleneckTape, dy: np.ndarray):
    """Returns ``(dx, grads)`` with grads keyed ``expand.weight`` … ``norm.beta``."""
    dsum, dgamma, dbeta = layer_norm_backward(b.norm, tape.summed, dy)
    dh, dwp, dbp = dense_backward(b.project, tape.hidden, dsum)
    if tape.mask is not None:
        dh = dh * tape.mask / (1.0 - b.dropout_p)
    dpre = dh * gelu_grad(tape.pre)
    dx_exp, dwe, dbe = dense_backward(b.expand, tape.x, dpre)
    grads = {
        "expand.weight": dwe,
        "expand.bias": dbe,
        "project.weight": dwp,
        "project.bias": dbp,
        "norm.gamma": dgamma,
        "norm.beta": dbeta,
    }
    return dsum + dx_exp, grads


# --------------------------------------------------------------------------
# network forward/backward
# --------------------------------------------------------------------------


@dataclass
class StageTape:
    patches: np.ndarray
    bottlenecks: list[BottleneckTape] = field(default_factory=list)


def _forward_tape(net: Network, image: np.ndarray, mode: Mode, rng):
    x = prepare_input(net, image)
    tapes = []
    for blk, st in zip(net.blocks, net.config.stages):
        n = x.shape[0] // st.patch_side
        rows = patchify(x, st.patch_side)
        tape = StageTape(rows)
        h = dense_forward(blk.mixer, rows)
        for b in blk.bottlenecks:
            h, bt = bottleneck_forward_tape(b, h, mode, rng)
            tape.bottlenecks.append(bt)
        tapes.append(tape)
        x = unpatchify(h, 1, st.out_dim, (n, n))
    flat = x.reshape(-1)
    return dense_forward(net.head, flat), flat, tapes


def softmax_cross_entropy(logits: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to ``logits``."""
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    total = exp.sum()
    loss = float(np.log(total) - shifted[target])
    grad = exp / total
    grad[target] -= 1.0
    return loss, grad


def network_loss(net: Network, image: np.ndarray, target: int, mode: Mode = "training", rng=None) -> float:
    logits, _, _ = _forward_tape(net, image, mode, rng)
    return softmax_cross_entropy(logits, target)[0]


def network_backward(
    net: Network,
    image: np.ndarray,
    target: int,
    mode: Mode = "training",
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Cross-entropy loss of one image and the gradient of every parameter."""
    k = net.config.num_classes
    if not 0 <= target < k:
        raise ValueError(f"target {target} outside [0, {k})")
    logits, flat, tapes = _forward_tape(net, image, mode, rng)
    loss, dlogits = softmax_cross_entropy(logits, target)

    grads: dict[str, np.ndarray] = {}
    dflat, grads["head.weight"], grads["head.bias"] = dense_backward(net.head, flat, dlogits)
    dmap = dflat.reshape(1, 1, -1)
    for l in range(len(net.blocks) - 1, -1, -1):
        blk, st, tape = net.blocks[l], net.config.stages[l], tapes[l]
        dh = dmap.reshape(-1, st.out_dim)
        for i in range(len(blk.bottlenecks) - 1, -1, -1):
            dh, bgrads = bottleneck_backward(blk.bottlenecks[i], tape.bottlenecks[i], dh)
            for key, g in bgrads.items():
                grads[f"stage{l + 1}.bn{i}.{key}"] = g
        drows, grads[f"stage{l + 1}.mixer.weight"], grads[f"stage{l + 1}.mixer.bias"] = dense_backward(
            blk.mixer, tape.patches, dh
        )
        side = dmap.shape[0] * st.patch_side
        channels = drows.shape[1] // (st.patch_side * st.patch_side)
        dmap = unpatchify(drows, st.patch_side, channels, (side // st.patch_side,) * 2)

    names = list(net.named_parameters())
    return loss, {name: grads[name] for name in names}


# --------------------------------------------------------------------------
# optimizer and schedule
# --------------------------------------------------------------------------


def _decays(name: str) -> bool:
    return name.endswith(".weight")


def sgd_step(
    net: Network,
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray] | None,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> dict[str, np.ndarray]:
    """``v = momentum * v + g + wd * p``; ``p -= lr * v``. Updates ``net`` in place.

    Weight decay applies to dense weights only, not to biases or norm affines.
    """
    params = net.named_parameters()
    if velocity is None:
        velocity = {name: np.zeros_like(p) for name, p in params.items()}
    new_velocity = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        v = momentum * velocity[name] + g
        if weight_decay and _decays(name):
            v = v + weight_decay * p
        p -= (lr * v).astype(p.dtype, copy=False)
        new_velocity[name] = v
    return new_velocity


def lr_at(config: TrainConfig, epoch: int, step: int = 0, steps_per_epoch: int = 1) -> float:
    """Linear warm-up to ``config.lr``, then half-cosine decay towards zero."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    if not 0 <= step < steps_per_epoch:
        raise ValueError(f"step {step} outside [0, {steps_per_epoch})")
    g = epoch * steps_per_epoch + step
    warm = config.warmup_epochs * steps_per_epoch
    total = config.epochs * steps_per_epoch
    if g < warm:
        return config.lr * (g + 1) / warm
    if total == warm:
        return config.lr
    progress = (g - warm) / (total - warm)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------
# toy training
# --------------------------------------------------------------------------


def tiny_config(side: int = 8, channels: int = 3, classes: int = 2) -> NetworkConfig:
    """Two-stage network small enough for exhaustive gradient checks."""
    return NetworkConfig(
        input_side=side,
        input_channels=channels,
        stages=(StageConfig(4, 2.0, 16, 1, 0.0), StageConfig(side // 4, 2.0, 16, 1, 0.1)),
        num_classes=classes,
        name="tiny",
    )


def make_toy_dataset(
    n_per_class: int = 64,
    side: int = 8,
    channels: int = 3,
    seed: int = 0,
    margin: float = 0.5,
) -> list[tuple[np.ndarray, int]]:
    """Two linearly separable classes of uniform-noise images.

    The label is the side of a fixed random hyperplane through the mid-gray
    image; samples closer than ``margin`` to the plane are redrawn.
    """
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((side, side, channels))
    w /= np.linalg.norm(w)
    buckets: list[list[np.ndarray]] = [[], []]
    while min(len(b) for b in buckets) < n_per_class:
        x = rng.random((side, side, channels))
        s = float((w * (x - 0.5)).sum())
        if abs(s) < margin:
            continue
        label = int(s > 0)
        if len(buckets[label]) < n_per_class:
            buckets[label].append(x)
    data = [(x, 0) for x in buckets[0]] + [(x, 1) for x in buckets[1]]
    order = rng.permutation(len(data))
    return [data[i] for i in order]


def evaluate(net: Network, dataset: Sequence[tuple[np.ndarray, int]]) -> tuple[float, float]:
    """Mean inference-mode cross-entropy and accuracy."""
    total, correct = 0.0, 0
    for image, label in dataset:
        logits = network_forward(net, image, "inference")
        total += softmax_cross_entropy(logits, label)[0]
        correct += int(np.argmax(logits) == label)
    return total / len(dataset), correct / len(dataset)


def train_toy(
    net: Network,
    dataset: Sequence[tuple[np.ndarray, int]],
    config: TrainConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Mini-batch SGD over ``dataset``; updates ``net`` in place.

    Each log record is ``{epoch, lr, loss, accuracy}`` with loss and accuracy
    measured in inference mode over the whole dataset after the epoch.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    k = net.config.num_classes
    for _, label in dataset:
        if not 0 <= label < k:
            raise ValueError(f"label {label} outside [0, {k})")
    rng = np.random.default_rng(config.seed)
    steps = math.ceil(len(dataset) / config.batch_size)
    # overflow is reported through the finite-loss check below
    with np.errstate(over="ignore", invalid="ignore"):
        return _train_epochs(net, dataset, config, rng, steps, on_epoch)


def _train_epochs(net, dataset, config, rng, steps, on_epoch):
    velocity = None
    log = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        lr0 = lr_at(config, epoch, 0, steps)
        for step in range(steps):
            idx = order[step * config.batch_size : (step + 1) * config.batch_size]
            acc = None
            for i in idx:
                image, label = dataset[i]
                _, g = network_backward(net, image, label, "training", rng)
                if acc is None:
                    acc = g
                else:
                    for name in acc:
                        acc[name] += g[name]
            grads = {name: g / len(idx) for name, g in acc.items()}
            velocity = sgd_step(
                net, grads, velocity, lr_at(config, epoch, step, steps), config.momentum, config.weight_decay
            )
        loss, accuracy = evaluate(net, dataset)
        if not math.isfinite(loss):
            raise TrainingDiverged(epoch)
        record = {"epoch": epoch, "lr": lr0, "loss": loss, "accuracy": accuracy}
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return log


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

FD_STEP = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise relative error; tiny elements are compared absolutely."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = np.maximum(np.abs(a), np.abs(n))
    diff = np.abs(a - n)
    err = np.where(scale < ABS_FLOOR, diff, diff / np.where(scale < ABS_FLOOR, 1.0, scale))
    return float(err.max(initial=0.0))


def numeric_grad(f: Callable[[], float], arr: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central differences of ``f`` with respect to every element of ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * step)
    return grad


def _random_dense(rng, d_in, d_out):
    return DenseLayer(rng.standard_normal((d_out, d_in)) / math.sqrt(d_in), rng.standard_normal(d_out) * 0.1)


def _random_bottleneck(rng, d, alpha, p):
    norm = LayerNormParams(1.0 + 0.1 * rng.standard_normal(d), 0.1 * rng.standard_normal(d))
    return InvertedResidualBottleneck(_random_dense(rng, d, d * alpha), _random_dense(rng, d * alpha, d), norm, p)


def gradcheck(config: NetworkConfig | None = None, seed: int = 0) -> dict[str, float]:
    """Max relative error of analytic vs central-difference gradients per layer type."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    rows = rng.standard_normal((3, 5))
    r_out = rng.standard_normal((3, 4))
    layer = _random_dense(rng, 5, 4)
    dx, dw, db = dense_backward(layer, rows, r_out)
    loss = lambda: float((dense_forward(layer, rows) * r_out).sum())
    results["dense"] = max(
        relative_error(dx, numeric_grad(loss, rows)),
        relative_error(dw, numeric_grad(loss, layer.weight)),
        relative_error(db, numeric_grad(loss, layer.bias)),
    )

    z = rng.standard_normal((4, 6)) * 2.0
    r = rng.standard_normal(z.shape)
    results["gelu"] = relative_error(gelu_grad(z) * r, numeric_grad(lambda: float((gelu(z) * r).sum()), z))

    norm = LayerNormParams(1.0 + 0.1 * rng.standard_normal(6), 0.1 * rng.standard_normal(6))
    x = rng.standard_normal((3, 6))
    r = rng.standard_normal(x.shape)
    dx, dg, dbeta = layer_norm_backward(norm, x, r)
    loss = lambda: float((layer_norm(norm, x) * r).sum())
    results["layer_norm"] = max(
        relative_error(dx, numeric_grad(loss, x)),
        relative_error(dg, numeric_grad(loss, norm.gamma)),
        relative_error(dbeta, numeric_grad(loss, norm.beta)),
    )

    for key, p in (("bottleneck", 0.0), ("bottleneck_dropout", 0.3)):
        b = _random_bottleneck(rng, 6, 2, p)
        x = rng.standard_normal((3, 6))
        r = rng.standard_normal(x.shape)
        mask_seed = int(rng.integers(1 << 31))

        def loss():
            out, _ = bottleneck_forward_tape(b, x, "training", np.random.default_rng(mask_seed))
            return float((out * r).sum())

        _, tape = bottleneck_forward_tape(b, x, "training", np.random.default_rng(mask_seed))
        dx, g = bottleneck_backward(b, tape, r)
        errs = [relative_error(dx, numeric_grad(loss, x))]
        arrays = {
            "expand.weight": b.expand.weight,
            "expand.bias": b.expand.bias,
            "project.weight": b.project.weight,
            "project.bias": b.project.bias,
            "norm.gamma": b.norm.gamma,
            "norm.beta": b.norm.beta,
        }
        for name, arr in arrays.items():
            errs.append(relative_error(g[name], numeric_grad(loss, arr)))
        results[key] = max(errs)

    config = config or tiny_config()
    net = build_network(config, seed, dtype=np.float64)
    image = rng.random((config.input_side, config.input_side, config.input_channels))
    target = int(rng.integers(config.num_classes))
    mask_seed = int(rng.integers(1 << 31))
    _, grads = network_backward(net, image, target, "training", np.random.default_rng(mask_seed))
    loss = lambda: network_loss(net, image, target, "training", np.random.default_rng(mask_seed))
    results["network"] = max(
        relative_error(grads[name], numeric_grad(loss, arr)) for name, arr in net.named_parameters().items()
    )
    return results
