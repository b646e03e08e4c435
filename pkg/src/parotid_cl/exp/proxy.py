"""Small supervised pretraining that stands in for an externally trained classifier.

The encoder learns to tell phantom slices with a tumor from slices without
one, on a phantom set generated independently of the segmentation data.
The resulting backbone is saved with lineage ``supervised``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..augment import AugmentConfig, augment_view, sample_rng
from ..nets import BACKBONE_TAGS, NetConfig, build_backbone
from ..runtime import deterministic
from ..synthdata import PhantomConfig, generate_phantom
from ..transfer import Checkpoint
from .schedule import cosine_lr, set_lr


@dataclass
class ProxyConfig:
    n_images: int = 512
    epochs: int = 8
    batch_size: int = 16
    lr_max: float = 3e-4
    weight_decay: float = 0.05
    data_seed: int = 7_000_000
    seed: int = 0
    threads: int = 1

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def proxy_dataset(cfg: ProxyConfig, img_size: int):
    xs, ys = [], []
    for i in range(cfg.n_images):
        present = bool(i % 2)
        sl, _ = generate_phantom(cfg.data_seed + i, PhantomConfig(H=img_size, W=img_size, tumor_present=present))
        xs.append(sl.pixels)
        ys.append(int(present))
    return np.stack(xs), np.array(ys)


def pretrain_supervised(cfg: ProxyConfig | None = None, net_cfg: NetConfig | None = None):
    """Train backbone + linear classifier; returns (Checkpoint, per-epoch accuracy log)."""
    cfg = cfg or ProxyConfig()
    net_cfg = net_cfg or NetConfig()
    deterministic(cfg.seed, cfg.threads)
    x, y = proxy_dataset(cfg, net_cfg.img_size)
    backbone = build_backbone(net_cfg, cfg.seed)
    clf = nn.Linear(backbone.out_dim, 2)
    params = list(backbone.parameters()) + list(clf.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr_max, weight_decay=cfg.weight_decay)
    aug = AugmentConfig.segmentation()
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        set_lr(opt, cosine_lr(epoch, cfg.epochs, cfg.lr_max))
        perm = rng.permutation(len(x))
        correct = 0
        for b in range(0, len(x), cfg.batch_size):
            idx = perm[b:b + cfg.batch_size]
            xb = torch.from_numpy(np.stack([augment_view(x[i], sample_rng(cfg.seed, epoch, int(i)), aug)
                                            for i in idx]))
            yb = torch.from_numpy(y[idx])
            logits = clf(backbone.pooled(xb))
            loss = F.cross_entropy(logits, yb)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            correct += int((logits.argmax(1) == yb).sum())
        history.append({"epoch": epoch, "train_acc": correct / len(x), "loss": loss.item()})
    ckpt = Checkpoint.from_module(backbone, "supervised", net_cfg, tags=BACKBONE_TAGS, prefix="backbone.",
                                  extra={"proxy_config": cfg.to_dict(), "history": history})
    return ckpt, history
