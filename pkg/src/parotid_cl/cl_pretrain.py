"""Momentum-contrastive pretraining of the encoder.

The query path is backbone -> projector -> predictor and is trained by
gradient descent; the key path is backbone -> projector, never receives
gradients and tracks the query weights by an exponential moving average.
Views are compared with a temperature-scaled InfoNCE loss, symmetrised over
the two views, using the other samples' keys in the batch as negatives.
"""

from __future__ import annotations

import copy
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .augment import AugmentConfig, augment_view, sample_rng
from .errors import ConfigError, DataError, TrainingError, TransferError
from .exp.schedule import cosine_lr, set_lr
from .nets import BACKBONE_TAGS, EmbeddingNet, HeadConfig, NetConfig, attach_heads, build_backbone
from .runtime import deterministic, log
from .transfer import Checkpoint


# ---------------------------------------------------------------------------
# losses

def infonce(q: Tensor, k_pos: Tensor, k_negs: Tensor | None = None, tau: float = 0.2) -> Tensor:
    """InfoNCE for one query vector against one positive key and any number of negatives.

    All vectors are L2-normalised first. ``k_negs`` is ``[K, D]`` and may be
    empty or None, in which case the loss is exactly 0.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    q = F.normalize(q, dim=-1)
    pos = (q * F.normalize(k_pos, dim=-1)).sum(-1, keepdim=True)
    if k_negs is None or len(k_negs) == 0:
        logits = pos
    else:
        logits = torch.cat([pos, F.normalize(k_negs, dim=-1) @ q])
    return -torch.log_softmax(logits / tau, dim=-1)[0]


def infonce_batch(q: Tensor, k: Tensor, tau: float = 0.2, negatives: bool = True) -> Tensor:
    """Mean InfoNCE over a batch: row i of ``k`` is the positive for row i of ``q``.

    With ``negatives`` the other rows of ``k`` are the negatives. Without, the
    loss reduces to the pure prediction objective ``2 - 2 cos(q, k)``.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    q = F.normalize(q, dim=1)
    k = F.normalize(k, dim=1)
    if not negatives:
        return (2 - 2 * (q * k).sum(dim=1)).mean()
    logits = q @ k.T / tau
    return F.cross_entropy(logits, torch.arange(len(q), device=q.device))


def symmetric_loss(q1: Tensor, q2: Tensor, k1: Tensor, k2: Tensor, tau: float = 0.2,
                   negatives: bool = True) -> Tensor:
    """InfoNCE(q1, k2) + InfoNCE(q2, k1)."""
    if negatives and len(q1) == 1:
        log.warning("batch of one: InfoNCE has no in-batch negatives and evaluates to 0")
    return infonce_batch(q1, k2, tau, negatives) + infonce_batch(q2, k1, tau, negatives)


# ---------------------------------------------------------------------------
# momentum update

def _named(x) -> dict:
    if isinstance(x, nn.Module):
        return dict(x.named_parameters())
    return dict(x)


@torch.no_grad()
def momentum_step(key, query, m: float):
    """In place ``k <- m*k + (1-m)*q`` for every key parameter; predictor weights are ignored.

    ``key`` and ``query`` are modules or name -> tensor mappings.
    """
    if not 0.0 <= m <= 1.0:
        raise ConfigError(f"momentum must lie in [0, 1], got {m}")
    kp = _named(key)
    qp = {n: p for n, p in _named(query).items() if not n.startswith("predictor.")}
    if set(kp) != set(qp):
        diff = sorted(set(kp) ^ set(qp))
        raise TransferError(f"key/query parameter names differ: {diff[:5]}")
    if m == 1.0:
        return key
    for n, k in kp.items():
        if m == 0.0:
            k.copy_(qp[n])
        else:
            k.mul_(m).add_(qp[n].detach(), alpha=1.0 - m)
    return key


def target_copy(online: EmbeddingNet) -> EmbeddingNet:
    """Gradient-free copy of ``online`` without its predictor."""
    target = copy.deepcopy(online)
    target.predictor = None
    for p in target.parameters():
        p.requires_grad_(False)
    return target


# ---------------------------------------------------------------------------
# training

@dataclass
class CLConfig:
    epochs: int = 30
    batch_size: int = 64
    lr_max: float = 1e-3
    weight_decay: float = 0.05
    momentum: float = 0.99
    tau: float = 0.2
    negatives: bool = True
    seed: int = 0
    threads: int = 1
    augment: AugmentConfig = field(default_factory=AugmentConfig.contrastive)
    head: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig.from_dict(self.augment)
        if isinstance(self.head, dict):
            self.head = HeadConfig(**self.head)
        if self.epochs < 1 or self.batch_size < 1 or self.lr_max <= 0:
            raise ConfigError("epochs and batch_size must be >= 1 and lr_max > 0")
        if not 0 <= self.momentum <= 1 or self.tau <= 0:
            raise ConfigError("momentum must lie in [0, 1] and tau > 0")

    @classmethod
    def full_scale(cls, **kw) -> "CLConfig":
        """Published full-scale settings: batch 96, peak learning rate 1e-3."""
        return cls(batch_size=96, lr_max=1e-3, **kw)

    @classmethod
    def desk(cls, **kw) -> "CLConfig":
        """Settings for a few hundred phantom slices on one core.

        Smaller batches give more steps, the lower momentum lets the key
        network follow the query within a short run, and the milder
        augmentation keeps near-identical phantoms distinguishable. A
        randomly initialised encoder needs the long schedule before its
        features beat a fresh start.
        """
        return cls(**{"epochs": 150, "batch_size": 32, "lr_max": 1e-3, "momentum": 0.9,
                      "augment": AugmentConfig.contrastive_desk(), **kw})

    @classmethod
    def from_dict(cls, d: dict) -> "CLConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class MomentumTrainer:
    """Shared loop: online net by AdamW on the symmetric loss, target net by EMA.

    Subclasses provide ``online_embed``/``target_embed`` (views -> embeddings)
    and the set of online parameters the optimiser owns.
    """

    def __init__(self, images: np.ndarray, cfg, aug: AugmentConfig):
        if images is None or len(images) == 0:
            raise DataError("no images to pretrain on")
        self.images = np.asarray(images, dtype=np.float32)
        self.cfg = cfg
        self.aug = aug
        self.step_count = 0
        self.log = []
        self.callbacks = []

    # -- hooks for subclasses
    def online_embed(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def target_embed(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def _setup_optimizer(self, params):
        self.opt = torch.optim.AdamW(params, lr=self.cfg.lr_max, weight_decay=self.cfg.weight_decay)

    @property
    def steps_per_epoch(self) -> int:
        return max(1, len(self.images) // self.cfg.batch_size)

    def views(self, idx, epoch):
        v1, v2 = [], []
        for i in idx:
            rng = sample_rng(self.cfg.seed, epoch, int(i))
            v1.append(augment_view(self.images[i], rng, self.aug))
            v2.append(augment_view(self.images[i], rng, self.aug))
        return torch.from_numpy(np.stack(v1)), torch.from_numpy(np.stack(v2))

    def train_step(self, v1: Tensor, v2: Tensor) -> float:
        t0 = time.perf_counter()
        B = len(v1)
        q = self.online_embed(torch.cat([v1, v2]))
        with torch.no_grad():
            k = self.target_embed(torch.cat([v1, v2]))
        loss = symmetric_loss(q[:B], q[B:], k[:B], k[B:], self.cfg.tau, self.cfg.negatives)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {self.step_count}", step=self.step_count)
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        leaked = [n for n, p in self.target.named_parameters() if p.grad is not None]
        if leaked:
            raise TrainingError(f"gradient reached target parameters {leaked[:3]}", step=self.step_count)
        self.opt.step()
        momentum_step(self.target, self.online, self.cfg.momentum)
        self.step_count += 1
        rec = {"step": self.step_count, "loss": loss.item(), "lr": self.opt.param_groups[0]["lr"],
               "step_time": time.perf_counter() - t0}
        self.log.append(rec)
        for cb in self.callbacks:
            cb(self)
        return rec["loss"]

    def run(self):
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        n = len(self.images)
        for epoch in range(cfg.epochs):
            set_lr(self.opt, cosine_lr(epoch, cfg.epochs, cfg.lr_max))
            perm = rng.permutation(n)
            bs = min(cfg.batch_size, n)
            for b in range(self.steps_per_epoch):
                idx = perm[b * bs:(b + 1) * bs]
                v1, v2 = self.views(idx, epoch)
                self.train_step(v1, v2)
                self.log[-1]["epoch"] = epoch
        return self


class ContrastivePretrainer(MomentumTrainer):
    """Encoder pretrainer; ``init`` (any checkpoint with encoder+bottleneck) seeds both paths."""

    def __init__(self, images, cfg: CLConfig | None = None, net_cfg: NetConfig | None = None,
                 init: Checkpoint | None = None):
        cfg = cfg or CLConfig()
        super().__init__(images, cfg, cfg.augment)
        deterministic(cfg.seed, cfg.threads)
        self.net_cfg = net_cfg or (init.config if init is not None else NetConfig())
        self.init = init
        self.online = attach_heads(build_backbone(self.net_cfg, cfg.seed), cfg.head)
        if init is not None:
            names = init.names_with(*BACKBONE_TAGS)
            if not names:
                raise TransferError("init checkpoint has no encoder/bottleneck parameters")
            missing = self.online.load_state_dict({n: init.state_dict()[n] for n in names}, strict=False)
            unexpected = [n for n in missing.missing_keys if n.startswith("backbone.")]
            if unexpected or missing.unexpected_keys:
                raise TransferError(f"init checkpoint does not cover the backbone: {unexpected[:3]}")
        self.target = target_copy(self.online)
        self._setup_optimizer(self.online.parameters())

    def online_embed(self, x):
        o = self.online
        return o.predictor(o.projector(o.backbone.pooled(x)))

    def target_embed(self, x):
        t = self.target
        return t.projector(t.backbone.pooled(x))

    @property
    def lineage(self) -> str:
        if self.init is not None and self.init.lineage != "none":
            return "contrastive+transfer"
        return "contrastive"

    def checkpoint(self) -> Checkpoint:
        prov = self.init.chain() if self.init is not None and self.init.lineage != "none" else []
        return Checkpoint.from_module(self.online, self.lineage, self.net_cfg, provenance=prov,
                                      tags=BACKBONE_TAGS, extra={"cl_config": self.cfg.to_dict()})


def pretrain_contrastive(manifest, cfg: CLConfig | None = None, init: Checkpoint | None = None,
                         net_cfg: NetConfig | None = None, exclude_patients=()):
    """Run encoder pretraining over every slice (labeled or not) of ``manifest``.

    Returns:
        (Checkpoint with the query backbone, per-step log)
    """
    if exclude_patients:
        manifest = manifest.select_patients(exclude_patients, include=False)
    if not manifest.entries:
        raise DataError("manifest has no slices for contrastive pretraining")
    trainer = ContrastivePretrainer(manifest.load_arrays(labels=False), cfg, net_cfg, init).run()
    return trainer.checkpoint(), trainer.log
