"""Epoch loop, validation monitoring and cross-validation driver."""

from __future__ import annotations

import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from .autodiff import Tensor
from .data import AugmentConfig, VolumeCase, augment, sample_patch
from .inference import REGIONS, labels_to_regions
from .losses import LossConfig, OptimizerState, deep_supervision_loss, poly_lr, sgd_nesterov_step
from .metrics import dice
from .unet import NetworkSpec, forward, save_checkpoint

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 1000
    minibatches_per_epoch: int = 250
    batch_size: int = 2
    seed: int = 0
    initial_lr: float = 0.01
    momentum: float = 0.99
    patch_size: tuple[int, int, int] | None = None
    foreground_prob: float = 1 / 3
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    grad_clip: float | None = 12.0
    val_patches: int = 2
    loss: LossConfig = field(default_factory=LossConfig)

    @classmethod
    def full(cls, batch_size: int = 2, seed: int = 0) -> "TrainConfig":
        return cls(epochs=1000, minibatches_per_epoch=250, batch_size=batch_size, seed=seed)

    @classmethod
    def desk(cls, batch_size: int = 2, seed: int = 0) -> "TrainConfig":
        return cls(epochs=20, minibatches_per_epoch=10, batch_size=batch_size, seed=seed)

    @classmethod
    def drill(cls, batch_size: int = 2, seed: int = 0) -> "TrainConfig":
        """Overfit drill: 60 short epochs without augmentation."""
        return cls(epochs=60, minibatches_per_epoch=5, batch_size=batch_size, seed=seed, augment=None)


@dataclass
class EpochRecord:
    fold: int
    epoch: int
    lr: float
    train_loss: float
    val_dice: dict[str, float]

    def line(self) -> str:
        parts = [f"fold={self.fold}", f"epoch={self.epoch}", f"lr={self.lr!r}",
                 f"train_loss={self.train_loss!r}"]
        parts += [f"val_dice_{r.lower()}={self.val_dice.get(r, float('nan'))!r}" for r in REGIONS]
        return " ".join(parts)

    @classmethod
    def parse(cls, line: str) -> "EpochRecord":
        kv = dict(tok.split("=", 1) for tok in line.split())
        return cls(int(kv["fold"]), int(kv["epoch"]), float(kv["lr"]), float(kv["train_loss"]),
                   {r: float(kv[f"val_dice_{r.lower()}"]) for r in REGIONS})


@dataclass
class TrainResult:
    spec: NetworkSpec
    records: list[EpochRecord]
    step_losses: list[float]


def minibatch(cases: list[VolumeCase], rng: np.random.Generator, cfg: TrainConfig,
              patch) -> tuple[np.ndarray, np.ndarray]:
    """One minibatch as (images [b, 4, ...], region targets [b, 3, ...])."""
    imgs, tgts = [], []
    for _ in range(cfg.batch_size):
        case = cases[int(rng.integers(len(cases)))]
        img, lbl = sample_patch(case, rng, patch, cfg.foreground_prob)
        if cfg.augment is not None:
            img, lbl = augment(img, lbl, rng, cfg.augment)
        imgs.append(img)
        tgts.append(labels_to_regions(lbl))
    return np.stack(imgs), np.stack(tgts)


def _validation_patches(cases, patch, n, seed):
    rng = np.random.default_rng([seed, 0x7A1])
    out = []
    for case in cases:
        for _ in range(n):
            out.append(sample_patch(case, rng, patch, foreground_prob=1.0))
    return out


def validation_dice(spec: NetworkSpec, patches) -> dict[str, float]:
    """Hard dice per region pooled over the validation patches."""
    if not patches:
        return {r: float("nan") for r in REGIONS}
    dt = np.dtype(spec.dtype)
    preds, gts = [], []
    for img, lbl in patches:
        logits = forward(spec, Tensor(img[None].astype(dt)), mode="infer")[0].data[0]
        preds.append(logits >= 0)
        gts.append(labels_to_regions(lbl).astype(bool))
    p, g = np.stack(preds), np.stack(gts)
    return {r: dice(p[:, i], g[:, i]) for i, r in enumerate(REGIONS)}


def _clip(grads: dict[str, np.ndarray], max_norm: float | None) -> None:
    if max_norm is None:
        return
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= g.dtype.type(scale)


def train(spec: NetworkSpec, train_cases: list[VolumeCase], val_cases: list[VolumeCase],
          cfg: TrainConfig, fold: int = 0, log_file: TextIO | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Optimise ``spec`` in place on preprocessed cases; deterministic given ``cfg.seed``."""
    if not train_cases:
        raise TrainingError("no training cases")
    patch = tuple(cfg.patch_size or spec.patch_size)
    dt = np.dtype(spec.dtype)
    params = spec.parameters()
    state = OptimizerState(momentum=cfg.momentum)
    val = _validation_patches(val_cases, patch, cfg.val_patches, cfg.seed)
    records, step_losses = [], []
    for epoch in range(cfg.epochs):
        lr = poly_lr(epoch, cfg.initial_lr, cfg.epochs)
        state.epoch = epoch
        losses = []
        for step in range(cfg.minibatches_per_epoch):
            # fold -1 (all cases) maps to stream 0, fold i to stream i + 1
            rng = np.random.default_rng([cfg.seed, fold + 1, epoch, step])
            img, tgt = minibatch(train_cases, rng, cfg, patch)
            outs = forward(spec, Tensor(img.astype(dt)), mode="train")
            loss = deep_supervision_loss(outs, tgt.astype(dt), cfg.loss)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at fold {fold} epoch {epoch} step {step}")
            spec.zero_grad()
            loss.backward()
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            _clip(grads, cfg.grad_clip)
            sgd_nesterov_step(params, grads, state, lr)
            losses.append(value)
            step_losses.append(value)
        rec = EpochRecord(fold, epoch, lr, float(np.mean(losses)), validation_dice(spec, val))
        records.append(rec)
        log.info(rec.line())
        if log_file is not None:
            log_file.write(rec.line() + "\n")
            log_file.flush()
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(spec, records, step_losses)


def _fold_job(build, train_cases, val_cases, cfg, fold, path) -> str:
    spec = build()
    buf = io.StringIO()
    train(spec, train_cases, val_cases, cfg, fold=fold, log_file=buf)
    save_checkpoint(spec, path)
    return buf.getvalue()


def train_folds(build: Callable[[], NetworkSpec], cases: list[VolumeCase], folds, cfg: TrainConfig,
                out_dir, fold_indices=None, workers: int = 1) -> list[Path]:
    """Train one network per fold (or one on all cases when ``folds`` is None).

    Writes ``fold_<i>.ckpt`` (``all.ckpt`` without folds) and appends every epoch
    record to ``train.log`` in ``out_dir``. With ``workers > 1`` folds train in
    separate processes; results do not depend on the worker count and the log
    keeps fold order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_id = {c.case_id: c for c in cases}
    if folds is None:
        jobs = [(cases, [], -1, out / "all.ckpt")]
    else:
        indices = range(folds.k) if fold_indices is None else fold_indices
        jobs = [([by_id[c] for c in folds.training(i)], [by_id[c] for c in folds.validation(i)], i,
                 out / f"fold_{i}.ckpt") for i in indices]
    with open(out / "train.log", "a") as fh:
        if workers <= 1 or len(jobs) == 1:
            for tr, va, fold, path in jobs:
                spec = build()
                train(spec, tr, va, cfg, fold=fold, log_file=fh)
                save_checkpoint(spec, path)
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_fold_job, build, tr, va, cfg, fold, path)
                           for tr, va, fold, path in jobs]
                for fut in futures:
                    fh.write(fut.result())
                    fh.flush()
    return [job[3] for job in jobs]
