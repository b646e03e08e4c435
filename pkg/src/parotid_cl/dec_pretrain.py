"""Contrastive pretraining aimed at the decoder.

The encoder is frozen. Two augmented views go through it; the resulting
feature pyramids (bottleneck plus skip features) feed a base decoder trained
by gradient and a momentum decoder updated by EMA. Each decoder output is
average-pooled and projected; the base path adds a predictor. The loss is the
same symmetric InfoNCE used for the encoder.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentConfig, contrastive_augment, sample_rng
from .cl_pretrain import CLConfig, MomentumTrainer, target_copy
from .errors import ConfigError, DataError, TransferError
from .exp.proxy import ProxyConfig
from .exp.runner import AblationReport, Arm, DataConfig, build_encoder_sources, run_arms
from .exp.train import TrainConfig
from .nets import BACKBONE_TAGS, DECODER_TAGS, EmbeddingNet, HeadConfig, NetConfig, build_segnet
from .runtime import deterministic, log
from .transfer import Checkpoint, LoadPolicy, random_checkpoint

AUG_MODES = ("full", "photometric")


@dataclass
class DecCLConfig:
    epochs: int = 20
    batch_size: int = 64
    lr_max: float = 1e-3
    weight_decay: float = 0.05
    momentum: float = 0.99
    tau: float = 0.2
    negatives: bool = True
    seed: int = 0
    threads: int = 1
    aug_mode: str = "full"
    desk_augment: bool = False
    head: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self):
        if isinstance(self.head, dict):
            self.head = HeadConfig(**self.head)
        if self.aug_mode not in AUG_MODES:
            raise ConfigError(f"aug_mode must be one of {AUG_MODES}")

    def augment(self) -> AugmentConfig:
        if self.aug_mode == "photometric":
            return AugmentConfig.photometric()
        return AugmentConfig.contrastive_desk() if self.desk_augment else AugmentConfig.contrastive()

    @classmethod
    def desk(cls, **kw) -> "DecCLConfig":
        """Same small-data adjustments as :meth:`CLConfig.desk`."""
        return cls(**{"epochs": 20, "batch_size": 32, "momentum": 0.9, "desk_augment": True, **kw})

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)


class DecoderPretrainer(MomentumTrainer):
    def __init__(self, images, encoder_init: Checkpoint, cfg: DecCLConfig | None = None,
                 net_cfg: NetConfig | None = None):
        cfg = cfg or DecCLConfig()
        super().__init__(images, cfg, cfg.augment())
        deterministic(cfg.seed, cfg.threads)
        if not set(BACKBONE_TAGS) <= encoder_init.tag_set():
            raise TransferError("encoder_init lacks encoder/bottleneck parameters")
        self.net_cfg = net_cfg or encoder_init.config
        self.encoder_init = encoder_init
        seg = build_segnet(self.net_cfg, cfg.seed)
        names = encoder_init.names_with(*BACKBONE_TAGS)
        state = encoder_init.state_dict()
        seg.load_state_dict({n: state[n] for n in names}, strict=False)
        self.encoder = seg.backbone.eval()
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        self.online = EmbeddingNet({"decoder": seg.decoder}, self.net_cfg.embed_dim, cfg.head)
        self.target = target_copy(self.online)
        self._setup_optimizer(self.online.parameters())

    def _encode(self, x):
        with torch.no_grad():
            return self.encoder(x)

    def online_embed(self, x):
        o = self.online
        return o.predictor(o.projector(o.decoder(self._encode(x)).mean(dim=(1, 2))))

    def target_embed(self, x):
        t = self.target
        return t.projector(t.decoder(self._encode(x)).mean(dim=(1, 2)))

    def checkpoint(self) -> Checkpoint:
        return Checkpoint.from_module(self.online, "decoder-contrastive", self.net_cfg,
                                      provenance=self.encoder_init.chain(), tags=DECODER_TAGS,
                                      extra={"dec_config": self.cfg.to_dict()})


def pretrain_decoder(manifest, cfg: DecCLConfig | None, encoder_init: Checkpoint, aug_mode: str | None = None,
                     net_cfg: NetConfig | None = None, exclude_patients=()):
    """Returns (decoder-contrastive Checkpoint, per-step log)."""
    cfg = copy.deepcopy(cfg or DecCLConfig())
    if aug_mode is not None:
        cfg.aug_mode = "photometric" if aug_mode.startswith("photometric") else aug_mode
        cfg.__post_init__()
    if exclude_patients:
        manifest = manifest.select_patients(exclude_patients, include=False)
    if not manifest.entries:
        raise DataError("manifest has no slices for decoder pretraining")
    trainer = DecoderPretrainer(manifest.load_arrays(labels=False), encoder_init, cfg, net_cfg).run()
    return trainer.checkpoint(), trainer.log


@torch.no_grad()
def view_invariance(encoder_ckpt: Checkpoint, images, aug: AugmentConfig | None = None, seed: int = 0) -> float:
    """Mean cosine distance between the pooled encoder outputs of two views of the same image,
    divided by the mean cosine distance between different images.

    Low values mean the encoder barely reacts to augmentation, which starves a
    decoder trained behind it of input variation.
    """
    aug = aug or AugmentConfig.contrastive()
    seg = build_segnet(encoder_ckpt.config, seed)
    state = encoder_ckpt.state_dict()
    seg.load_state_dict({n: state[n] for n in encoder_ckpt.names_with(*BACKBONE_TAGS)}, strict=False)
    enc = seg.backbone.eval()
    v1, v2 = zip(*[contrastive_augment(x, sample_rng(seed, 0, i), aug)[:2] for i, x in enumerate(images)])
    z1 = F.normalize(enc.pooled(torch.from_numpy(np.stack(v1))), dim=1)
    z2 = F.normalize(enc.pooled(torch.from_numpy(np.stack(v2))), dim=1)
    intra = (1 - (z1 * z2).sum(1)).mean()
    sim = z1 @ z2.T
    off = ~torch.eye(len(z1), dtype=torch.bool)
    inter = (1 - sim[off]).mean()
    return float(intra / inter)


# Published test-set values for the decoder-pretraining study (percent, HD in pixels).
TABLE3_REFERENCE = {
    "Reference": {"dsc": 89.60, "mpa": 99.36, "miou": 85.11, "hd": 2.98},
    "1 Random initialization": {"dsc": 88.73, "mpa": 99.30, "miou": 83.94, "hd": 3.07},
    "2 Contrastive learning": {"dsc": 88.51, "mpa": 99.30, "miou": 83.79, "hd": 3.05},
    "3 Supervised learning": {"dsc": 89.38, "mpa": 99.34, "miou": 84.77, "hd": 3.01},
    "4 Change data enhancement": {"dsc": 88.55, "mpa": 99.31, "miou": 83.85, "hd": 3.06},
    "5 Remove other parameters": {"dsc": 88.90, "mpa": 99.30, "miou": 84.14, "hd": 3.04},
}

# (row name, encoder behind the decoder pretrainer, augmentation, keep expand/skip weights downstream)
TABLE3_VARIANTS = (
    ("1 Random initialization", "none", "full", True),
    ("2 Contrastive learning", "contrastive+transfer", "full", True),
    ("3 Supervised learning", "supervised", "full", True),
    ("4 Change data enhancement", "supervised", "photometric", True),
    ("5 Remove other parameters", "supervised", "full", False),
)


@dataclass
class Table3Config:
    dec: DecCLConfig = field(default_factory=lambda: DecCLConfig.desk())
    train: TrainConfig = field(default_factory=lambda: TrainConfig.desk())
    seeds: list = field(default_factory=lambda: [0])
    net: NetConfig = field(default_factory=NetConfig)
    data: DataConfig = field(default_factory=DataConfig)
    proxy: ProxyConfig = field(default_factory=ProxyConfig)
    cl: CLConfig = field(default_factory=lambda: CLConfig.desk())
    exclude_test_patients: bool = True


def table3_matrix(manifest, cfg: Table3Config | None = None, sources: dict | None = None) -> AblationReport:
    """Pretrain the decoder five ways and fine-tune each result.

    Downstream every row uses the contrastive+transfer encoder and the
    decoder-contrastive decoder of its variant; variant 5 reuses the variant 3
    checkpoint but keeps expand/skip freshly initialised. A ``Reference`` row
    fine-tunes the plain mirrored contrastive+transfer initialisation.

    Args:
        manifest: dataset with labeled and unlabeled slices.
        cfg: study configuration.
        sources: optional prebuilt ``supervised`` / ``contrastive+transfer`` checkpoints.

    Returns:
        AblationReport with the reference row and five variant rows. Its
        ``diagnostics`` hold the augmentation-sensitivity ratio of the
        contrastive encoder relative to a random one.
    """
    cfg = cfg or Table3Config()
    train, test = cfg.data.split(manifest)
    exclude = test.patients() if cfg.exclude_test_patients else ()
    sources = dict(sources or {})
    missing = {"supervised", "contrastive+transfer"} - set(sources)
    if missing:
        built, _ = build_encoder_sources(manifest, missing, cfg.proxy, cfg.cl, cfg.net, exclude)
        sources.update({k: v for k, v in built.items() if k not in sources})
    encoders = {"none": random_checkpoint(cfg.net, cfg.dec.seed), **sources}

    dec_ckpts = {}
    for _, enc, aug, _ in TABLE3_VARIANTS:
        if (enc, aug) not in dec_ckpts:
            dec_ckpts[enc, aug], _ = pretrain_decoder(manifest, cfg.dec, encoders[enc], aug, cfg.net, exclude)

    ref_arm = Arm("Reference", LoadPolicy("contrastive+transfer", "contrastive+transfer"), "Cont", "Cont")
    report = run_arms([ref_arm], sources, train, test, cfg.train, cfg.seeds, cfg.net, "table3",
                      TABLE3_REFERENCE, baseline="Reference")
    for name, enc, aug, keep in TABLE3_VARIANTS:
        arm = Arm(name, LoadPolicy("contrastive+transfer", "decoder-contrastive", load_expand_skip_heads=keep),
                  "Cont", f"DecCL[{enc},{aug}]" + ("" if keep else " decoder blocks only"))
        src = {"contrastive+transfer": sources["contrastive+transfer"], "decoder-contrastive": dec_ckpts[enc, aug]}
        report.results += run_arms([arm], src, train, test, cfg.train, cfg.seeds, cfg.net).results

    images = manifest.load_arrays(labels=False)[:64]
    ratio = view_invariance(sources["contrastive+transfer"], images) / view_invariance(encoders["none"], images)
    report.diagnostics["view_invariance_ratio_contrastive_vs_random"] = ratio
    log.info("augmentation sensitivity of the contrastive encoder vs a random one: %.3f", ratio)
    return report
