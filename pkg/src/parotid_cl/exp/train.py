"""Supervised segmentation training with a per-epoch half-cycle cosine schedule."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from ..augment import AugmentConfig, sample_rng, segmentation_augment
from ..errors import ConfigError, DataError, TrainingError
from ..runtime import deterministic, log
from .schedule import cosine_lr, set_lr


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    lr_max: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    threads: int = 1
    loss: str = "ce"
    dice_weight: float = 1.0
    eval_every: int = 1
    augment: AugmentConfig = field(default_factory=AugmentConfig.segmentation)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig.from_dict(self.augment)
        if self.lr_max <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("lr_max must be > 0, epochs and batch_size >= 1")
        if self.loss not in ("ce", "ce+dice"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.augment.crop_p > 0:
            raise ConfigError("segmentation training never crops; set augment.crop_p = 0")

    @classmethod
    def full_scale(cls, **kw) -> "TrainConfig":
        """Published full-scale settings: batch 16, peak learning rate 2e-4."""
        return cls(batch_size=16, lr_max=2e-4, **kw)

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Small-data settings for the 64x64 phantom study.

        Batch 8 doubles the number of steps per epoch on ~100 labeled slices,
        and the dice term pulls the model off the all-background solution
        that plain cross-entropy sits on for the first few hundred steps.
        """
        return cls(**{"epochs": 30, "batch_size": 8, "lr_max": 1e-3, "loss": "ce+dice", **kw})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def soft_dice_loss(logits, target, eps=1.0):
    probs = logits.softmax(1)
    onehot = F.one_hot(target, logits.shape[1]).permute(0, 3, 1, 2).to(probs.dtype)
    inter = (probs * onehot).sum((0, 2, 3))
    den = probs.sum((0, 2, 3)) + onehot.sum((0, 2, 3))
    return 1 - ((2 * inter + eps) / (den + eps))[1:].mean()


def segmentation_loss(logits, target, cfg: TrainConfig):
    loss = F.cross_entropy(logits, target)
    if cfg.loss == "ce+dice":
        loss = loss + cfg.dice_weight * soft_dice_loss(logits, target)
    return loss


@torch.no_grad()
def dataset_loss(model, x, y, cfg: TrainConfig, batch_size=32) -> float:
    was = model.training
    model.eval()
    total = 0.0
    for i in range(0, len(x), batch_size):
        xb = torch.from_numpy(x[i:i + batch_size])
        yb = torch.from_numpy(y[i:i + batch_size])
        total += segmentation_loss(model(xb), yb, cfg).item() * len(xb)
    model.train(was)
    return total / len(x)


def _arrays(data):
    if hasattr(data, "load_arrays"):
        return data.load_arrays()
    x, y = data
    return np.asarray(x, np.float32), np.asarray(y, np.int64)


def train_segmentation(train_data, test_data, cfg: TrainConfig, model):
    """Train ``model`` in place.

    Args:
        train_data, test_data: labeled manifests or ``(images, masks)`` arrays.
        cfg: training configuration.
        model: network initialised by :func:`parotid_cl.transfer.apply_policy`.

    Returns:
        (model, curves) where curves holds per-epoch ``train_loss``, ``test_loss``
        and ``lr`` lists plus ``initial_test_loss``.
    """
    deterministic(cfg.seed, cfg.threads)
    x, y = _arrays(train_data)
    xt, yt = _arrays(test_data) if test_data is not None else (None, None)
    if len(x) == 0:
        raise DataError("empty training set")
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr_max, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    curves = {"train_loss": [], "test_loss": [], "lr": [], "epoch_time": []}
    if xt is not None:
        curves["initial_test_loss"] = dataset_loss(model, xt, yt, cfg)
    model.train()
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max)
        set_lr(opt, lr)
        perm = rng.permutation(len(x))
        running, seen = 0.0, 0
        for b in range(0, len(x), cfg.batch_size):
            idx = perm[b:b + cfg.batch_size]
            xb, yb = [], []
            for i in idx:
                xi, yi = segmentation_augment(x[i], y[i], sample_rng(cfg.seed, epoch, int(i)), cfg.augment)
                xb.append(xi)
                yb.append(yi)
            xb = torch.from_numpy(np.stack(xb))
            yb = torch.from_numpy(np.stack(yb).astype(np.int64))
            loss = segmentation_loss(model(xb), yb, cfg)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch} step {step}", step=step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            running += loss.item() * len(idx)
            seen += len(idx)
            step += 1
        curves["train_loss"].append(running / seen)
        curves["lr"].append(lr)
        if xt is not None and (epoch + 1) % cfg.eval_every == 0:
            curves["test_loss"].append(dataset_loss(model, xt, yt, cfg))
        curves["epoch_time"].append(time.perf_counter() - t0)
        log.debug("epoch %d lr %.3g train %.4f", epoch, lr, curves["train_loss"][-1])
    return model, curves
