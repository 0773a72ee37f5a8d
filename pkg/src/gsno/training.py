"""Losses, analytic reverse-mode gradients, Adam, and the training loop.

Gradients are derived per layer rather than recorded on a tape. For complex
spectral tables the gradient is dL/dRe + i dL/dIm, stored in the same
float64 view that the optimizer updates.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import ConfigError, DegenerateTargetError, InvalidArgument, TrainingDiverged
from .model import GsnoModel, pool
from .operators import ACTIVATIONS, BlockCache, GsnoBlock, block_forward
from .sht import get_plan, triangle_mask
from .sphere import SphericalGrid

log = logging.getLogger(__name__)

LOSS_KINDS = ("weighted-mean-relative", "weighted-mse", "cross-entropy")


# -- losses ----------------------------------------------------------------------


def _weighted_sq_norms(x: np.ndarray, grid: SphericalGrid) -> np.ndarray:
    return np.einsum("...ijc,i->...c", x * x, grid.quad_weights)


def loss_weighted_mean_relative(pred: np.ndarray, target: np.ndarray, grid: SphericalGrid) -> float:
    """Mean over samples and channels of ||pred - target||_w / ||target||_w."""
    return relative_loss_and_grad(pred, target, grid)[0]


def relative_loss_and_grad(pred, target, grid):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise InvalidArgument(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    den = np.sqrt(_weighted_sq_norms(target, grid))
    if np.any(den == 0.0):
        raise DegenerateTargetError("target has zero weighted norm")
    num = np.sqrt(_weighted_sq_norms(diff, grid))
    ratio = num / den
    count = ratio.size
    scale = np.divide(1.0, num * den * count, out=np.zeros_like(num), where=num > 0)
    grad = diff * grid.quad_weights[:, None, None] * scale[..., None, None, :]
    return float(ratio.mean()), grad


def per_sample_relative_error(pred, target, grid) -> np.ndarray:
    """||pred - target||_w / ||target||_w averaged over channels, one value per sample."""
    num = np.sqrt(_weighted_sq_norms(pred - target, grid))
    den = np.sqrt(_weighted_sq_norms(target, grid))
    if np.any(den == 0.0):
        raise DegenerateTargetError("target has zero weighted norm")
    return (num / den).mean(axis=-1)


def mse_loss_and_grad(pred, target, grid):
    diff = np.asarray(pred, float) - np.asarray(target, float)
    sq = _weighted_sq_norms(diff, grid) / (4 * math.pi)
    grad = 2.0 * diff * grid.quad_weights[:, None, None] / (4 * math.pi * sq.size)
    return float(sq.mean()), grad


def cross_entropy_and_grad(logits, labels):
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n = logits.shape[0]
    logp = log_softmax(logits, axis=-1)
    loss = -logp[np.arange(n), labels].mean()
    grad = softmax(logits, axis=-1)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


@dataclasses.dataclass(frozen=True)
class LossSpec:
    kind: str = "weighted-mean-relative"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise InvalidArgument(f"unknown loss {self.kind!r}; expected one of {LOSS_KINDS}")

    def __call__(self, output, target, grid):
        if self.kind == "weighted-mean-relative":
            return relative_loss_and_grad(output, target, grid)
        if self.kind == "weighted-mse":
            return mse_loss_and_grad(output, target, grid)
        return cross_entropy_and_grad(output, target)


# -- backward --------------------------------------------------------------------


def _batch(a: np.ndarray, core: int) -> np.ndarray:
    """Collapse all leading batch axes into one, keeping ``core`` trailing axes."""
    return a.reshape((-1,) + a.shape[a.ndim - core :])


def block_backward(block: GsnoBlock, cache: BlockCache, grad_out: np.ndarray, grid: SphericalGrid):
    """Returns (grad wrt block input, list of grads aligned with block.parameters())."""
    plan = get_plan(grid, block.lmax)
    L, ci = block.lmax, block.c_in

    grad_x = grad_out.copy() if block.uses_residual else np.zeros_like(cache.x)
    _, dact = ACTIVATIONS[block.activation]
    gz = grad_out * dact(cache.pre_activation)
    flat_gz = gz.reshape(-1, block.c_out)
    grad_mix_w = flat_gz.T @ cache.concat.reshape(-1, block.concat_width)
    grad_mix_b = flat_gz.sum(axis=0)
    gh = gz @ block.mix_weight

    grads: dict[str, np.ndarray] = {}
    grad_coeffs = np.zeros_like(cache.coeffs)
    for k, b in enumerate(block.branches):
        g_branch = plan.inverse_vjp(gh[..., k * ci : (k + 1) * ci])
        if b == "E":
            w = block.equivariant.weights
            grads["eq.weights"] = np.einsum("blmo,blmi->loi", _batch(np.conj(g_branch), 3), _batch(cache.coeffs, 3)).real
            grad_coeffs += np.einsum("loi,...lmo->...lmi", w, g_branch)
        elif b == "I":
            kern = block.invariant
            mixed = cache.integrals @ kern.input_mix.T
            mask = triangle_mask(L)[:, :, None]
            g_shape = np.einsum("bo,blmo->lmo", _batch(mixed, 1), _batch(g_branch, 3)) * mask
            grads["inv.shape_table"] = np.ascontiguousarray(g_shape).view(np.float64)
            g_mixed = np.einsum("...lmo,lmo->...o", np.conj(g_branch), kern.shape_table * mask).real
            grads["inv.input_mix"] = _batch(g_mixed, 1).T @ _batch(cache.integrals, 1)
            g_int = g_mixed @ kern.input_mix
            grad_x += g_int[..., None, None, :] * grid.quad_weights[:, None, None]
        else:
            kern = block.anisotropic
            p, dp = kern.multiplier_and_derivative(L)
            mult = p if kern.gain is None else p * kern.gain
            grad_coeffs += g_branch * mult[:, None, :]
            g_mult = np.einsum("blmc,blmc->lc", _batch(np.conj(g_branch), 3), _batch(cache.coeffs, 3)).real
            if kern.gain is not None:
                grads["aniso.gain"] = g_mult * p
                g_mult = g_mult * kern.gain
            g_z = g_mult * dp  # (L+1, C)
            g_z = g_z.T if kern.per_degree else g_z.sum(axis=0)  # (C, L+1) or (C,)
            raw = kern.raw_dirs
            norm = np.linalg.norm(raw, axis=-1, keepdims=True)
            d = raw / norm
            ez = np.zeros(3)
            ez[2] = 1.0
            jac = (ez - d[..., 2:3] * d) / norm
            grads["aniso.raw_dirs"] = g_z[..., None] * jac
    grad_x += plan.forward_vjp(grad_coeffs)
    grads["mix.weight"] = grad_mix_w
    grads["mix.bias"] = grad_mix_b
    ordered = [grads[name] for name, _ in block.parameters()]
    return grad_x, ordered


def forward_backward(model: GsnoModel, x: np.ndarray, target, loss: LossSpec | str):
    """Loss value and gradients aligned with ``model.parameters()``."""
    loss = LossSpec(loss) if isinstance(loss, str) else loss
    if (loss.kind == "cross-entropy") != (model.head is not None):
        raise InvalidArgument("cross-entropy needs a classifier head, field losses need none")
    caches = []
    h = x
    for block in model.blocks:
        h, cache = block_forward(block, h, model.grid, keep=True)
        caches.append(cache)
    head_grads = []
    if model.head is not None:
        pooled = pool(h, model.grid)
        logits = pooled @ model.head.weight.T + model.head.bias
        value, g_logits = loss(logits, target, model.grid)
        head_grads = [g_logits.T @ pooled, g_logits.sum(axis=0)]
        g_pooled = g_logits @ model.head.weight
        grad = g_pooled[..., None, None, :] * (model.grid.quad_weights / (4 * math.pi))[:, None, None]
        grad = np.broadcast_to(grad, h.shape).copy()
    else:
        value, grad = loss(h, target, model.grid)
    block_grads = []
    for block, cache in zip(reversed(model.blocks), reversed(caches)):
        grad, g = block_backward(block, cache, grad, model.grid)
        block_grads.append(g)
    flat = [g for gs in reversed(block_grads) for g in gs] + head_grads
    return value, flat


def backward(model: GsnoModel, x: np.ndarray, target, loss: LossSpec | str = "weighted-mean-relative"):
    """Gradients for every parameter, as a list aligned with ``model.parameters()``."""
    return forward_backward(model, x, target, loss)[1]


# -- optimizer ------------------------------------------------------------------


@dataclasses.dataclass
class OptimState:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = dataclasses.field(default_factory=list)
    v: list[np.ndarray] = dataclasses.field(default_factory=list)


def adam_step(state: OptimState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise InvalidArgument("parameter and gradient lists differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient at step {state.step + 1}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- training loop -----------------------------------------------------------------


@dataclasses.dataclass
class TrainConfig:
    lmax: int = 8
    channels: list[int] = dataclasses.field(default_factory=lambda: [1, 4, 1])
    branches: str = "EIA"
    activation: str = "gelu"
    # last block; None picks identity for field outputs and the shared activation under a classifier head
    output_activation: str | None = None
    residual: bool = True
    per_degree_dirs: bool = False
    aniso_gain: bool = False
    n_classes: int | None = None
    loss: str = "weighted-mean-relative"
    epochs: int = 50
    batch_size: int = 4
    max_steps: int | None = None
    lr: float = 2e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.betas = tuple(cfg.betas)
        cfg.validate()
        return cfg

    def validate(self):
        if len(self.channels) < 1 or min(self.channels) < 1:
            raise ConfigError("channels must be a list of positive integers")
        if self.batch_size < 1 or self.epochs < 0 or self.lr < 0:
            raise ConfigError("batch_size >= 1, epochs >= 0, lr >= 0 required")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss!r}")

    @property
    def resolved_output_activation(self) -> str:
        if self.output_activation is not None:
            return self.output_activation
        return self.activation if self.n_classes else "identity"

    def build_model(self, grid: SphericalGrid) -> GsnoModel:
        rng = np.random.default_rng(self.seed)
        return GsnoModel.init(
            grid,
            self.lmax,
            list(self.channels),
            rng,
            n_classes=self.n_classes,
            output_activation=self.resolved_output_activation,
            branches=self.branches,
            activation=self.activation,
            residual=self.residual,
            per_degree_dirs=self.per_degree_dirs,
            aniso_gain=self.aniso_gain,
        )


@dataclasses.dataclass
class TrainResult:
    model: GsnoModel
    metrics: list[dict]
    steps: int
    step_losses: list[float]


def train_loop(config: TrainConfig, dataset, model: GsnoModel | None = None, callback=None) -> TrainResult:
    """Minibatch Adam on ``dataset`` (a datasets.Dataset); deterministic given the seed.

    Logs one metrics row per epoch: epoch, step, loss (mean over the epoch),
    wall_ms (elapsed since start).
    """
    n = len(dataset)
    if n == 0:
        raise InvalidArgument("empty dataset")
    model = config.build_model(dataset.grid) if model is None else model
    if model.grid.key != dataset.grid.key:
        raise InvalidArgument("model and dataset grids differ")
    loss = LossSpec(config.loss)
    targets = dataset.labels if loss.kind == "cross-entropy" else dataset.targets
    if targets is None:
        raise InvalidArgument(f"dataset has no targets for loss {loss.kind!r}")
    state = OptimState(config.lr, config.betas[0], config.betas[1], config.eps)
    names_params = model.parameters()
    params = [p for _, p in names_params]
    order_rng = np.random.default_rng([config.seed, 1])
    reseed_rng = np.random.default_rng([config.seed, 2])

    metrics: list[dict] = []
    step_losses: list[float] = []
    start = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        perm = order_rng.permutation(n)
        epoch_losses = []
        for lo in range(0, n, config.batch_size):
            if config.max_steps is not None and step >= config.max_steps:
                break
            idx = perm[lo : lo + config.batch_size]
            value, grads = forward_backward(model, dataset.inputs[idx], targets[idx], loss)
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at step {step + 1}")
            adam_step(state, params, grads)
            for block in model.blocks:
                if block.anisotropic is not None:
                    block.anisotropic.reseed_degenerate(reseed_rng)
            step += 1
            epoch_losses.append(value)
            step_losses.append(value)
            if callback is not None:
                callback(step, value, model)
        if not epoch_losses:
            break
        row = {
            "epoch": epoch + 1,
            "step": step,
            "loss": float(np.mean(epoch_losses)),
            "wall_ms": int(1000 * (time.perf_counter() - start)),
        }
        metrics.append(row)
        log.info("epoch %d step %d loss %.6g", row["epoch"], step, row["loss"])
    return TrainResult(model, metrics, step, step_losses)


METRIC_COLUMNS = ("epoch", "step", "loss", "wall_ms")


def write_metrics_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "loss": repr(float(row["loss"]))})
    return path
