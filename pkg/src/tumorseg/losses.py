"""Region loss (BCE + soft dice), deep supervision, SGD with Nesterov momentum, poly LR."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, bce_with_logits, sigmoid

__all__ = [
    "LossConfig", "OptimizerState", "default_ds_weights", "soft_dice", "bce_dice_loss",
    "downsample_targets", "deep_supervision_loss", "poly_lr", "sgd_nesterov_step",
]


def default_ds_weights(n_levels: int) -> list[float]:
    """Weights proportional to 1/2**level, full resolution first, normalized to sum 1."""
    w = np.array([0.5**i for i in range(n_levels)])
    return list(w / w.sum())


@dataclass
class LossConfig:
    dice_mode: str = "batch"
    smooth_epsilon: float = 1e-5
    deep_supervision_weights: list[float] | None = None

    def __post_init__(self):
        if self.dice_mode not in ("batch", "sample"):
            raise ValueError(f"dice_mode must be 'batch' or 'sample', got {self.dice_mode!r}")
        if self.smooth_epsilon <= 0:
            raise ValueError("smooth_epsilon must be positive")
        if self.deep_supervision_weights is not None:
            w = np.asarray(self.deep_supervision_weights, dtype=float)
            if (w < 0).any() or not np.isclose(w.sum(), 1.0):
                raise ValueError("deep supervision weights must be nonnegative and sum to 1")

    def weights_for(self, n_levels: int) -> list[float]:
        if self.deep_supervision_weights is None:
            return default_ds_weights(n_levels)
        if len(self.deep_supervision_weights) != n_levels:
            raise ValueError(
                f"{len(self.deep_supervision_weights)} deep supervision weights for {n_levels} outputs")
        return list(self.deep_supervision_weights)


def _check_targets(logits: Tensor, targets: Tensor) -> None:
    if logits.shape != targets.shape:
        raise ValueError(f"logits {logits.shape} and targets {targets.shape} differ in shape")
    t = targets.data
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("targets must be binary")


def soft_dice(probs: Tensor, targets: Tensor, mode: str = "batch", eps: float = 1e-5) -> Tensor:
    """Mean soft dice over region channels of ``[b, regions, x, y, z]`` probabilities.

    ``batch`` pools the batch axis into the sums; ``sample`` computes one dice per
    (sample, region) and averages.
    """
    axes = (0, 2, 3, 4) if mode == "batch" else (2, 3, 4)
    inter = (probs * targets).sum(axes)
    denom = probs.sum(axes) + targets.sum(axes)
    dice = (inter * 2.0 + eps) / (denom + eps)
    return dice.mean()


def bce_dice_loss(logits: Tensor, targets, cfg: LossConfig | None = None) -> Tensor:
    """Mean elementwise BCE of ``sigmoid(logits)`` plus ``1 - soft dice``."""
    cfg = cfg or LossConfig()
    if not isinstance(targets, Tensor):
        targets = Tensor(np.asarray(targets, dtype=logits.dtype))
    _check_targets(logits, targets)
    bce = bce_with_logits(logits, targets).mean()
    dice = soft_dice(sigmoid(logits), targets, cfg.dice_mode, cfg.smooth_epsilon)
    return bce + (1.0 - dice)


def downsample_targets(targets: np.ndarray, shape) -> np.ndarray:
    """Nearest-neighbour reduction of ``[b, r, x, y, z]`` targets to spatial ``shape``."""
    steps = [n // m for n, m in zip(targets.shape[2:], shape)]
    if any(n != m * s for n, m, s in zip(targets.shape[2:], shape, steps)):
        raise ValueError(f"cannot reduce {targets.shape[2:]} to {tuple(shape)} by an integer factor")
    return np.ascontiguousarray(targets[:, :, ::steps[0], ::steps[1], ::steps[2]])


def deep_supervision_loss(outputs: list[Tensor], targets, cfg: LossConfig | None = None) -> Tensor:
    """Weighted sum of :func:`bce_dice_loss` over outputs ordered highest to lowest resolution."""
    cfg = cfg or LossConfig()
    weights = cfg.weights_for(len(outputs))
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    total = None
    for out, w in zip(outputs, weights):
        if w == 0:
            continue
        level_t = downsample_targets(t, out.shape[2:]).astype(out.dtype)
        term = bce_dice_loss(out, Tensor(level_t), cfg) * float(w)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("all deep supervision weights are zero")
    return total


def poly_lr(epoch: int, initial: float = 0.01, total: int = 1000, power: float = 0.9) -> float:
    """``initial * (1 - epoch / total) ** power`` for ``0 <= epoch < total``."""
    if not 0 <= epoch < total:
        raise ValueError(f"epoch {epoch} outside [0, {total})")
    return initial * (1 - epoch / total) ** power


@dataclass
class OptimizerState:
    momentum: float = 0.99
    nesterov: bool = True
    epoch: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_nesterov_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                      state: OptimizerState, lr: float) -> None:
    """In-place SGD step: ``v = mu*v + g``; ``p -= lr * (g + mu*v)`` (or ``lr*v`` without Nesterov)."""
    mu = state.momentum
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        buf = state.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p.data)
            state.buffers[name] = buf
        buf *= mu
        buf += g
        step = g + mu * buf if state.nesterov else buf
        p.data -= p.data.dtype.type(lr) * step.astype(p.dtype, copy=False)
