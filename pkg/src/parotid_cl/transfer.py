"""Checkpoint container and tag-aware weight surgery.

A checkpoint file is a zip archive holding ``meta.json`` and one ``.npy``
blob per parameter under ``params/<name>.npy``. ``meta.json`` records the
schema version, lineage, the network config, the provenance chain and a
SHA-256 per blob; every load verifies the checksums.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointLoadError, ConfigError, DimensionError, IntegrityError, PolicyError, TransferError
from .nets import (BACKBONE_TAGS, HeadConfig, NetConfig, attach_heads, build_backbone, build_segnet, mirror_name,
                   tag_for)

SCHEMA_VERSION = 1
LINEAGES = ("none", "supervised", "contrastive", "contrastive+transfer", "decoder-contrastive")
ENCODER_SOURCES = ("none", "supervised", "contrastive", "contrastive+transfer")


@dataclass
class Checkpoint:
    lineage: str
    net_config: dict
    params: dict
    tags: dict
    provenance: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.lineage not in LINEAGES:
            raise ConfigError(f"unknown lineage {self.lineage!r}")
        if set(self.params) != set(self.tags):
            raise TransferError("params and tags must cover the same names")
        if self.lineage in self.provenance:
            raise ConfigError("lineage chain must be acyclic")

    @classmethod
    def from_module(cls, module: nn.Module, lineage: str, net_config, provenance=(),
                    tags=None, prefix: str = "", extra=None) -> "Checkpoint":
        """Snapshot the parameters of ``module`` whose tag is in ``tags`` (all when None).

        ``prefix`` is prepended to the module's own parameter names so that a
        sub-module can be saved under its full network name.
        """
        params, tagmap = {}, {}
        for n, p in module.named_parameters():
            name = prefix + n
            t = tag_for(name)
            if tags is None or t in tags:
                params[name] = p.detach().cpu().numpy().copy()
                tagmap[name] = t
        cfg = net_config.to_dict() if isinstance(net_config, NetConfig) else dict(net_config)
        return cls(lineage, cfg, params, tagmap, list(provenance), dict(extra or {}))

    @property
    def config(self) -> NetConfig:
        return NetConfig.from_dict(self.net_config)

    def tag_set(self) -> set:
        return set(self.tags.values())

    def names_with(self, *tags) -> list:
        return [n for n, t in self.tags.items() if t in tags]

    def state_dict(self) -> dict:
        return {n: torch.from_numpy(a.copy()) for n, a in self.params.items()}

    def chain(self) -> list:
        return list(self.provenance) + [self.lineage]

    def check_shapes(self, cfg: NetConfig | None = None):
        """Raise DimensionError naming the first parameter whose shape disagrees with ``cfg``."""
        cfg = cfg or self.config
        ref = {n: tuple(p.shape) for n, p in build_segnet(cfg).named_parameters()}
        if self.tag_set() & {"projector", "predictor"}:
            heads = attach_heads(build_backbone(cfg), HeadConfig(**self.extra.get("head_cfg", {})))
            ref.update({n: tuple(p.shape) for n, p in heads.named_parameters()})
        for n, a in self.params.items():
            if n not in ref:
                raise DimensionError(f"parameter {n} does not exist in the configured network")
            if tuple(a.shape) != ref[n]:
                raise DimensionError(f"parameter {n}: checkpoint shape {tuple(a.shape)} != network {ref[n]}")


def _sha(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blobs, entries = {}, {}
    for name, arr in ckpt.params.items():
        buf = io.BytesIO()
        np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
        b = buf.getvalue()
        fname = f"params/{name}.npy"
        blobs[fname] = b
        entries[name] = {"tag": ckpt.tags[name], "shape": list(arr.shape), "dtype": str(arr.dtype),
                         "file": fname, "sha256": _sha(b)}
    meta = {"schema_version": ckpt.schema_version, "lineage": ckpt.lineage,
            "net_config": ckpt.net_config, "provenance": ckpt.provenance,
            "extra": ckpt.extra, "params": entries}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=1, sort_keys=True))
        for fname, b in blobs.items():
            zf.writestr(fname, b)
    return path


def load_checkpoint(path, expect: NetConfig | None = None) -> Checkpoint:
    """Load and verify a checkpoint; with ``expect`` also check every shape against it."""
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            version = meta.get("schema_version")
            if version != SCHEMA_VERSION:
                raise CheckpointLoadError(
                    f"{path}: schema_version {version!r} unsupported (expected {SCHEMA_VERSION})")
            params, tags = {}, {}
            for name, e in meta["params"].items():
                b = zf.read(e["file"])
                if _sha(b) != e["sha256"]:
                    raise IntegrityError(f"{path}: checksum mismatch for {name}")
                params[name] = np.load(io.BytesIO(b), allow_pickle=False)
                tags[name] = e["tag"]
    except CheckpointLoadError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, OSError, EOFError) as exc:
        raise IntegrityError(f"{path}: corrupt checkpoint ({exc})") from exc
    ckpt = Checkpoint(meta["lineage"], meta["net_config"], params, tags, meta.get("provenance", []),
                      meta.get("extra", {}), version)
    ckpt.check_shapes(expect)
    return ckpt


def random_checkpoint(cfg: NetConfig, seed: int) -> Checkpoint:
    """Freshly initialised encoder+bottleneck with lineage ``none``."""
    return Checkpoint.from_module(build_segnet(cfg, seed), "none", cfg, tags=BACKBONE_TAGS)


# ---------------------------------------------------------------------------
# policies

@dataclass
class LoadPolicy:
    encoder_source: str = "none"
    decoder_source: str = "none"
    mirror_decoder_from_encoder: bool | None = None
    load_expand_skip_heads: bool = False

    def __post_init__(self):
        if self.encoder_source not in ENCODER_SOURCES:
            raise ConfigError(f"encoder_source {self.encoder_source!r} not in {ENCODER_SOURCES}")
        if self.decoder_source not in LINEAGES:
            raise ConfigError(f"decoder_source {self.decoder_source!r} not in {LINEAGES}")
        dec_cl = self.decoder_source == "decoder-contrastive"
        if self.mirror_decoder_from_encoder is None:
            self.mirror_decoder_from_encoder = not dec_cl and self.decoder_source != "none"
        if dec_cl and self.mirror_decoder_from_encoder:
            raise ConfigError("a decoder-contrastive source cannot be mirrored")
        if self.decoder_source not in ("none", "decoder-contrastive") and not self.mirror_decoder_from_encoder:
            raise ConfigError(f"decoder_source {self.decoder_source!r} only loads by mirroring")

    def sources(self) -> set:
        return {s for s in (self.encoder_source, self.decoder_source) if s != "none"}

    @classmethod
    def from_dict(cls, d: dict) -> "LoadPolicy":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AuditReport:
    """Per-source, per-tag fraction of parameter tensors bit-equal to that source.

    ``assigned`` maps each tag to the source the policy loaded it from (None when
    the tag was left at its fresh initialisation).
    """
    by_source: dict
    assigned: dict

    def violations(self) -> list:
        bad = []
        for src, fr in self.by_source.items():
            for tag, f in fr.items():
                want = 1.0 if self.assigned.get(tag) == src else 0.0
                if f != want:
                    bad.append((src, tag, f, want))
        return bad

    def ok(self) -> bool:
        return not self.violations()


def audit_equality(model_or_params, ckpt: Checkpoint, num_stages: int | None = None) -> dict:
    """Fraction of parameter tensors per tag that are bit-equal to their counterpart in ``ckpt``.

    The counterpart of a parameter is the same name in ``ckpt`` or, for a
    decoder Swin-block parameter when the checkpoint holds no decoder, the
    mirrored encoder parameter. Parameters without a counterpart count as unequal.
    """
    if isinstance(model_or_params, nn.Module):
        params = {n: p.detach().cpu().numpy() for n, p in model_or_params.named_parameters()}
    else:
        params = {n: np.asarray(v[0] if isinstance(v, tuple) else v) for n, v in model_or_params.items()}
    S = num_stages or ckpt.config.num_stages
    has_decoder = "decoder" in ckpt.tag_set()
    hits, totals = {}, {}
    for n, a in params.items():
        t = tag_for(n)
        totals[t] = totals.get(t, 0) + 1
        other = n if n in ckpt.params else None
        if other is None and not has_decoder:
            m = mirror_name(n, S)
            other = m if m in ckpt.params else None
        eq = other is not None and ckpt.params[other].shape == a.shape and np.array_equal(
            ckpt.params[other], a)
        hits[t] = hits.get(t, 0) + int(eq)
    return {t: hits[t] / totals[t] for t in sorted(totals)}


def _copy(dst: torch.Tensor, src: np.ndarray, name: str, src_name: str):
    if tuple(src.shape) != tuple(dst.shape):
        raise DimensionError(f"parameter {name}: source {src_name} has shape {tuple(src.shape)},"
                             f" network expects {tuple(dst.shape)}")
    with torch.no_grad():
        dst.copy_(torch.from_numpy(np.ascontiguousarray(src)))


def apply_policy(cfg: NetConfig, policy: LoadPolicy, sources: dict, seed: int):
    """Build a segmentation network initialised per ``policy``.

    Args:
        cfg: network configuration.
        policy: which sources feed the encoder and decoder.
        sources: map source name (a lineage) -> Checkpoint.
        seed: seed for the fresh initialisation of every parameter not loaded.

    Returns:
        (SwinUnet, AuditReport)
    """
    missing = policy.sources() - set(sources)
    if missing:
        raise PolicyError(f"policy needs missing sources {sorted(missing)}")
    model = build_segnet(cfg, seed)
    named = dict(model.named_parameters())
    S = cfg.num_stages
    assigned = {t: None for t in {tag_for(n) for n in named}}

    if policy.encoder_source != "none":
        ck = sources[policy.encoder_source]
        if not set(BACKBONE_TAGS) <= ck.tag_set():
            raise TransferError(f"{policy.encoder_source} checkpoint lacks encoder/bottleneck parameters")
        for n, p in named.items():
            if tag_for(n) in BACKBONE_TAGS:
                if n not in ck.params:
                    raise TransferError(f"{policy.encoder_source} checkpoint has no parameter {n}")
                _copy(p, ck.params[n], n, n)
        assigned.update(encoder=policy.encoder_source, bottleneck=policy.encoder_source)

    if policy.decoder_source != "none":
        ck = sources[policy.decoder_source]
        if policy.mirror_decoder_from_encoder:
            for n, p in named.items():
                if tag_for(n) == "decoder":
                    src = mirror_name(n, S)
                    if src not in ck.params:
                        raise TransferError(f"no encoder counterpart {src} for {n}")
                    _copy(p, ck.params[src], n, src)
            assigned["decoder"] = policy.decoder_source
        else:
            tags = ("decoder", "skip", "expand", "head") if policy.load_expand_skip_heads else ("decoder",)
            supplied = set(tags) & ck.tag_set()
            if "decoder" not in supplied:
                raise TransferError(f"{policy.decoder_source} checkpoint lacks decoder parameters")
            for n, p in named.items():
                if tag_for(n) in supplied:
                    if n not in ck.params:
                        raise TransferError(f"{policy.decoder_source} checkpoint has no parameter {n}")
                    _copy(p, ck.params[n], n, n)
            for t in supplied:
                assigned[t] = policy.decoder_source

    by_source = {k: audit_equality(model, ck, S) for k, ck in sources.items()}
    return model, AuditReport(by_source, assigned)
