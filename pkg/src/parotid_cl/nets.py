"""Windowed-attention encoder and the U-shaped segmentation network built on it.

Every trainable parameter carries exactly one component tag. Parameter names
are the module paths and follow a ``component.stage.block.param`` layout::

    backbone.embed.*                      encoder
    backbone.stages.{s}.blocks.{b}.*      encoder      (s < S-1)
    backbone.stages.{s}.merge.*           encoder
    backbone.bottleneck.blocks.{b}.*      bottleneck
    backbone.norm.*                       bottleneck
    decoder.stages.{d}.skip.*             skip         (1 <= d <= S-1)
    decoder.stages.{d}.blocks.{b}.*       decoder
    decoder.stages.{d}.expand.*           expand       (d <= S-2)
    decoder.final_expand.*                expand
    head.*                                head
    projector.* / predictor.*             projector / predictor

Decoder stage ``d`` works at the resolution of encoder stage ``S-1-d`` and its
blocks have exactly the shapes of that encoder stage's blocks, which is what
makes encoder-to-decoder weight mirroring well defined (see
:func:`mirror_name`).
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, DimensionError

TAGS = ("encoder", "bottleneck", "decoder", "skip", "expand", "head", "projector", "predictor")
BACKBONE_TAGS = ("encoder", "bottleneck")
DECODER_TAGS = ("decoder", "skip", "expand")


@dataclass
class NetConfig:
    img_size: int = 64
    patch_size: int = 4
    in_chans: int = 3
    embed_dim: int = 24
    depths: list = field(default_factory=lambda: [2, 2, 2, 2])
    num_heads: list = field(default_factory=lambda: [1, 2, 4, 8])
    window_size: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 3
    scale_preset: str = "desk"

    def __post_init__(self):
        self.depths = list(self.depths)
        self.num_heads = list(self.num_heads)
        self.validate()

    @classmethod
    def preset(cls, name: str) -> "NetConfig":
        if name == "desk":
            return cls()
        if name == "swin-tiny":
            return cls(img_size=224, patch_size=4, embed_dim=96, depths=[2, 2, 6, 2],
                       num_heads=[3, 6, 12, 24], window_size=7, scale_preset="swin-tiny")
        raise ConfigError(f"unknown scale preset {name!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    @property
    def downsample_factor(self) -> int:
        return self.patch_size * 2 ** (self.num_stages - 1)

    def stage_resolution(self, s: int) -> int:
        return self.img_size // self.patch_size // 2 ** s

    def stage_dim(self, s: int) -> int:
        return self.embed_dim * 2 ** s

    def validate(self):
        if len(self.depths) != len(self.num_heads) or len(self.depths) < 2:
            raise ConfigError("depths and num_heads must have the same length >= 2")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.img_size % self.downsample_factor:
            raise ConfigError(
                f"img_size {self.img_size} not divisible by patch_size*2^(stages-1)"
                f" = {self.downsample_factor}")
        for s, h in enumerate(self.num_heads):
            if self.stage_dim(s) % h:
                raise ConfigError(f"stage {s} dim {self.stage_dim(s)} not divisible by {h} heads")


class FeaturePyramid(NamedTuple):
    """Channels-last stage features ``[B, H_s, W_s, C_s]`` for s < S-1 plus the bottleneck."""
    stages: list
    bottleneck: Tensor


def tag_for(name: str) -> str:
    """Component tag for a parameter name under the documented naming scheme."""
    head, _, rest = name.partition(".")
    if head == "backbone":
        if rest.startswith(("bottleneck.", "norm.")):
            return "bottleneck"
        return "encoder"
    if head == "decoder":
        if rest.startswith("final_expand."):
            return "expand"
        m = re.match(r"stages\.\d+\.(skip|blocks|expand)\.", rest)
        if m:
            return {"skip": "skip", "blocks": "decoder", "expand": "expand"}[m.group(1)]
    if head in ("head", "projector", "predictor"):
        return head
    raise KeyError(f"parameter {name!r} does not follow the naming scheme")


def tagged_parameters(model: nn.Module) -> dict:
    """Map name -> (parameter, tag) for every parameter of ``model``."""
    return {n: (p, tag_for(n)) for n, p in model.named_parameters()}


_DEC_BLOCK = re.compile(r"^decoder\.stages\.(\d+)\.blocks\.(.+)$")
_ENC_BLOCK = re.compile(r"^backbone\.stages\.(\d+)\.blocks\.(.+)$")


def mirror_name(decoder_name: str, num_stages: int):
    """Encoder counterpart of a decoder Swin-block parameter, or None.

    Decoder stage d mirrors encoder stage ``num_stages - 1 - d``.
    """
    m = _DEC_BLOCK.match(decoder_name)
    if not m:
        return None
    d = int(m.group(1))
    return f"backbone.stages.{num_stages - 1 - d}.blocks.{m.group(2)}"


def unmirror_name(encoder_name: str, num_stages: int):
    m = _ENC_BLOCK.match(encoder_name)
    if not m:
        return None
    s = int(m.group(1))
    return f"decoder.stages.{num_stages - 1 - s}.blocks.{m.group(2)}"


# ---------------------------------------------------------------------------
# building blocks

def window_partition(x: Tensor, ws: int) -> Tensor:
    B, H, W, C = x.shape
    x = x.view(B, H // ws, ws, W // ws, ws, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, C)


def window_reverse(windows: Tensor, ws: int, H: int, W: int) -> Tensor:
    C = windows.shape[-1]
    B = windows.shape[0] // ((H // ws) * (W // ws))
    x = windows.view(B, H // ws, W // ws, ws, ws, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(B, H, W, C)


class WindowAttention(nn.Module):
    """Multi-head self attention inside square windows with a relative position bias."""

    def __init__(self, dim: int, window_size: int, num_heads: int):
        super().__init__()
        self.dim = dim
        self.window_size = window_size
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        ws = window_size
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * ws - 1) ** 2, num_heads))
        coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (ws - 1)
        index = rel[..., 0] * (2 * ws - 1) + rel[..., 1]
        self.register_buffer("relative_position_index", index, persistent=False)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)

    def forward(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        Bw, N, C = x.shape
        qkv = self.qkv(x).reshape(Bw, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        attn = attn + bias.view(N, N, -1).permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(Bw // nw, nw, self.num_heads, N, N) + mask[None, :, None]
            attn = attn.view(-1, self.num_heads, N, N)
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(Bw, N, C)
        return self.proj(x)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SwinBlock(nn.Module):
    def __init__(self, dim: int, resolution: int, num_heads: int, window_size: int,
                 shift: bool, mlp_ratio: float = 4.0):
        super().__init__()
        self.resolution = resolution
        # windows never exceed the feature map; tiny maps get a single unshifted window
        if resolution <= window_size:
            window_size, shift = resolution, False
        self.window_size = window_size
        self.shift_size = window_size // 2 if shift else 0
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        if self.shift_size:
            self.register_buffer("attn_mask", self._shift_mask(), persistent=False)
        else:
            self.attn_mask = None

    def _shift_mask(self) -> Tensor:
        R, ws, sh = self.resolution, self.window_size, self.shift_size
        img = torch.zeros(1, R, R, 1)
        cnt = 0
        for hs in (slice(0, -ws), slice(-ws, -sh), slice(-sh, None)):
            for wsl in (slice(0, -ws), slice(-ws, -sh), slice(-sh, None)):
                img[:, hs, wsl, :] = cnt
                cnt += 1
        win = window_partition(img, ws).squeeze(-1)
        mask = win[:, None, :] - win[:, :, None]
        return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)

    def forward(self, x: Tensor) -> Tensor:
        B, H, W, C = x.shape
        h = self.norm1(x)
        if self.shift_size:
            h = torch.roll(h, shifts=(-self.shift_size, -self.shift_size), dims=(1, 2))
        win = self.attn(window_partition(h, self.window_size), self.attn_mask)
        h = window_reverse(win, self.window_size, H, W)
        if self.shift_size:
            h = torch.roll(h, shifts=(self.shift_size, self.shift_size), dims=(1, 2))
        x = x + h
        return x + self.mlp(self.norm2(x))


def _blocks(cfg: NetConfig, s: int) -> nn.ModuleList:
    return nn.ModuleList(
        SwinBlock(cfg.stage_dim(s), cfg.stage_resolution(s), cfg.num_heads[s], cfg.window_size,
                  shift=bool(b % 2), mlp_ratio=cfg.mlp_ratio)
        for b in range(cfg.depths[s]))


class PatchEmbed(nn.Module):
    def __init__(self, patch_size: int, in_chans: int, dim: int):
        super().__init__()
        self.proj = nn.Conv2d(in_chans, dim, kernel_size=patch_size, stride=patch_size)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        return self.norm(self.proj(x).permute(0, 2, 3, 1))


class PatchMerging(nn.Module):
    """2x2 neighbourhood concat + linear: [B,H,W,C] -> [B,H/2,W/2,2C]."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x):
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], -1)
        return self.reduction(self.norm(x))


class PatchExpand(nn.Module):
    """Learned upsampling: [B,H,W,C] -> [B,fH,fW,C_out] via linear + pixel shuffle."""

    def __init__(self, dim: int, factor: int = 2, out_dim: int | None = None):
        super().__init__()
        self.factor = factor
        self.out_dim = out_dim if out_dim is not None else dim // 2
        self.expand = nn.Linear(dim, factor * factor * self.out_dim, bias=False)
        self.norm = nn.LayerNorm(self.out_dim)

    def forward(self, x):
        B, H, W, _ = x.shape
        f, c = self.factor, self.out_dim
        x = self.expand(x).view(B, H, W, f, f, c).permute(0, 1, 3, 2, 4, 5).reshape(B, H * f, W * f, c)
        return self.norm(x)


class FinalExpand(nn.Module):
    """Norm + x``patch_size`` expansion back to input resolution."""

    def __init__(self, dim: int, factor: int):
        super().__init__()
        self.pre_norm = nn.LayerNorm(dim)
        self.up = PatchExpand(dim, factor=factor, out_dim=dim)

    def forward(self, x):
        return self.up(self.pre_norm(x))


class EncoderStage(nn.Module):
    def __init__(self, cfg: NetConfig, s: int):
        super().__init__()
        self.blocks = _blocks(cfg, s)
        self.merge = PatchMerging(cfg.stage_dim(s))


class Bottleneck(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.blocks = _blocks(cfg, cfg.num_stages - 1)


class SwinBackbone(nn.Module):
    """Hierarchical windowed-attention encoder plus bottleneck (tags encoder, bottleneck)."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        S = cfg.num_stages
        self.embed = PatchEmbed(cfg.patch_size, cfg.in_chans, cfg.embed_dim)
        self.stages = nn.ModuleList(EncoderStage(cfg, s) for s in range(S - 1))
        self.bottleneck = Bottleneck(cfg)
        self.norm = nn.LayerNorm(cfg.stage_dim(S - 1))

    @property
    def out_dim(self) -> int:
        return self.cfg.stage_dim(self.cfg.num_stages - 1)

    def forward(self, x: Tensor) -> FeaturePyramid:
        check_input(x, self.cfg)
        x = self.embed(x)
        feats = []
        for stage in self.stages:
            for blk in stage.blocks:
                x = blk(x)
            feats.append(x)
            x = stage.merge(x)
        for blk in self.bottleneck.blocks:
            x = blk(x)
        return FeaturePyramid(feats, self.norm(x))

    def pooled(self, x: Tensor) -> Tensor:
        return self(x).bottleneck.mean(dim=(1, 2))


class DecoderStage(nn.Module):
    def __init__(self, cfg: NetConfig, d: int):
        super().__init__()
        s = cfg.num_stages - 1 - d
        dim = cfg.stage_dim(s)
        if d > 0:
            self.skip = nn.Linear(2 * dim, dim)
            self.blocks = _blocks(cfg, s)
        if d < cfg.num_stages - 1:
            self.expand = PatchExpand(dim)


class SwinDecoder(nn.Module):
    """Patch-expanding decoder with parameterized skip fusion (tags decoder, skip, expand)."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        S = cfg.num_stages
        self.stages = nn.ModuleList(DecoderStage(cfg, d) for d in range(S))
        self.final_expand = FinalExpand(cfg.embed_dim, cfg.patch_size)

    def forward(self, pyr: FeaturePyramid) -> Tensor:
        """Full-resolution channels-last features ``[B, H, W, embed_dim]``."""
        S = self.cfg.num_stages
        x = pyr.bottleneck
        for d, stage in enumerate(self.stages):
            if d > 0:
                x = stage.skip(torch.cat([x, pyr.stages[S - 1 - d]], dim=-1))
                for blk in stage.blocks:
                    x = blk(x)
            if d < S - 1:
                x = stage.expand(x)
        return self.final_expand(x)


class SwinUnet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = SwinBackbone(cfg)
        self.decoder = SwinDecoder(cfg)
        self.head = nn.Linear(cfg.embed_dim, cfg.num_classes)
        init_weights(self)

    def forward(self, x: Tensor) -> Tensor:
        feats = self.decoder(self.backbone(x))
        return self.head(feats).permute(0, 3, 1, 2)


def mlp_head(in_dim: int, hidden: int, out_dim: int, batch_norm: bool = True) -> nn.Sequential:
    """Linear -> (BatchNorm) -> ReLU -> Linear.

    Batch statistics in the hidden layer spread apart embeddings that start out
    nearly parallel, which a freshly initialised encoder produces.
    """
    mid = [nn.BatchNorm1d(hidden)] if batch_norm else []
    return nn.Sequential(nn.Linear(in_dim, hidden), *mid, nn.ReLU(inplace=True), nn.Linear(hidden, out_dim))


@dataclass
class HeadConfig:
    hidden_dim: int = 256
    out_dim: int = 128
    predictor: bool = True
    predictor_hidden_dim: int = 256
    batch_norm: bool = True


class EmbeddingNet(nn.Module):
    """Feature trunk + pooled projector (+ optional predictor) for contrastive training.

    ``trunk`` maps a batch of images to a pooled vector. The trunk attribute name
    is chosen by the caller so that parameter names stay aligned with
    :class:`SwinUnet` (``backbone`` for the encoder pretrainer).
    """

    def __init__(self, trunks: dict, in_dim: int, head_cfg: HeadConfig):
        super().__init__()
        for name, module in trunks.items():
            self.add_module(name, module)
        bn = head_cfg.batch_norm
        self.projector = mlp_head(in_dim, head_cfg.hidden_dim, head_cfg.out_dim, bn)
        self.predictor = (mlp_head(head_cfg.out_dim, head_cfg.predictor_hidden_dim, head_cfg.out_dim, bn)
                          if head_cfg.predictor else None)
        init_weights(self.projector)
        if self.predictor is not None:
            init_weights(self.predictor)


def attach_heads(backbone: SwinBackbone, head_cfg: HeadConfig | None = None) -> EmbeddingNet:
    """Wrap an encoder with a projector on the pooled bottleneck (and a predictor)."""
    head_cfg = head_cfg or HeadConfig()
    return EmbeddingNet({"backbone": backbone}, backbone.out_dim, head_cfg)


def init_weights(module: nn.Module):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def check_input(x: Tensor, cfg: NetConfig):
    if x.ndim != 4 or x.shape[1] != cfg.in_chans or x.shape[2] != cfg.img_size or x.shape[3] != cfg.img_size:
        raise DimensionError(
            f"expected batch [B,{cfg.in_chans},{cfg.img_size},{cfg.img_size}], got {list(x.shape)}")


def build_segnet(cfg: NetConfig, seed: int | None = None) -> SwinUnet:
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return SwinUnet(cfg)
    return SwinUnet(cfg)


def build_backbone(cfg: NetConfig, seed: int | None = None) -> SwinBackbone:
    # built through the full network so a seeded backbone equals the seeded segnet's backbone
    return build_segnet(cfg, seed).backbone
