import json
import zipfile

import numpy as np
import pytest
import torch

from parotid_cl.errors import (CheckpointLoadError, ConfigError, DimensionError, IntegrityError, PolicyError,
                               TransferError)
from parotid_cl.nets import BACKBONE_TAGS, DECODER_TAGS, NetConfig, build_segnet, mirror_name, tag_for
from parotid_cl.transfer import (Checkpoint, LoadPolicy, apply_policy, audit_equality, load_checkpoint,
                                 random_checkpoint, save_checkpoint)

CFG = NetConfig()
SOURCES = ("none", "supervised", "contrastive+transfer")


def fake_source(lineage, seed, tags=BACKBONE_TAGS, provenance=()):
    # jitter every tensor so fresh LayerNorm gains and zero biases look trained
    net = build_segnet(CFG, seed)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(1e-3 * torch.randn(p.shape, generator=g))
    return Checkpoint.from_module(net, lineage, CFG, provenance=provenance, tags=tags)


@pytest.fixture(scope="module")
def sources():
    return {
        "supervised": fake_source("supervised", 11),
        "contrastive": fake_source("contrastive", 12),
        "contrastive+transfer": fake_source("contrastive+transfer", 13, provenance=["supervised"]),
        "decoder-contrastive": fake_source("decoder-contrastive", 14, DECODER_TAGS,
                                           ["supervised", "contrastive+transfer"]),
    }


def test_roundtrip_bit_exact(tmp_path, sources):
    ck = sources["contrastive+transfer"]
    path = save_checkpoint(ck, tmp_path / "a.ckpt")
    back = load_checkpoint(path, expect=CFG)
    assert back.lineage == ck.lineage and back.provenance == ["supervised"]
    assert back.tags == ck.tags
    for n, a in ck.params.items():
        assert back.params[n].dtype == a.dtype and np.array_equal(back.params[n], a)


def test_tampered_blob_raises_integrity_error(tmp_path, sources):
    path = save_checkpoint(sources["supervised"], tmp_path / "a.ckpt")
    with zipfile.ZipFile(path) as zf:
        items = {n: zf.read(n) for n in zf.namelist()}
    victim = next(n for n in items if n.endswith(".npy"))
    items[victim] = items[victim][:-4] + b"\x00\x00\x80\x3f"
    with zipfile.ZipFile(path, "w") as zf:
        for n, b in items.items():
            zf.writestr(n, b)
    with pytest.raises(IntegrityError):
        load_checkpoint(path)


def test_truncated_file_raises_integrity_error(tmp_path, sources):
    path = save_checkpoint(sources["supervised"], tmp_path / "a.ckpt")
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(IntegrityError):
        load_checkpoint(path)


def test_schema_mismatch(tmp_path, sources):
    path = save_checkpoint(sources["supervised"], tmp_path / "a.ckpt")
    with zipfile.ZipFile(path) as zf:
        items = {n: zf.read(n) for n in zf.namelist()}
    meta = json.loads(items["meta.json"])
    meta["schema_version"] = 99
    items["meta.json"] = json.dumps(meta).encode()
    with zipfile.ZipFile(path, "w") as zf:
        for n, b in items.items():
            zf.writestr(n, b)
    with pytest.raises(CheckpointLoadError) as e:
        load_checkpoint(path)
    assert not isinstance(e.value, IntegrityError)


def test_mismatched_config_names_parameter(tmp_path, sources):
    path = save_checkpoint(sources["supervised"], tmp_path / "a.ckpt")
    other = NetConfig(embed_dim=32, num_heads=[1, 2, 4, 8])
    with pytest.raises(DimensionError, match=r"backbone\."):
        load_checkpoint(path, expect=other)


def test_checkpoint_invariants():
    ck = random_checkpoint(CFG, 0)
    assert ck.lineage == "none" and ck.tag_set() == set(BACKBONE_TAGS)
    with pytest.raises(ConfigError):
        Checkpoint("bogus", CFG.to_dict(), {}, {})
    with pytest.raises(TransferError):
        Checkpoint("none", CFG.to_dict(), {"a": np.zeros(1)}, {})
    with pytest.raises(ConfigError):
        Checkpoint("supervised", CFG.to_dict(), {}, {}, provenance=["supervised"])


def test_policy_validation():
    with pytest.raises(ConfigError):
        LoadPolicy("decoder-contrastive", "none")
    with pytest.raises(ConfigError):
        LoadPolicy("none", "decoder-contrastive", mirror_decoder_from_encoder=True)
    with pytest.raises(ConfigError):
        LoadPolicy("none", "supervised", mirror_decoder_from_encoder=False)
    p = LoadPolicy("supervised", "contrastive+transfer")
    assert p.mirror_decoder_from_encoder is True
    assert LoadPolicy.from_dict(p.to_dict()) == p


def test_missing_source_fails_before_building():
    with pytest.raises(PolicyError):
        apply_policy(CFG, LoadPolicy("supervised", "none"), {}, 0)


@pytest.mark.parametrize("enc", SOURCES)
@pytest.mark.parametrize("dec", SOURCES)
def test_table2_policy_audit(enc, dec, sources):
    model, audit = apply_policy(CFG, LoadPolicy(enc, dec), sources, seed=0)
    assert audit.ok(), audit.violations()
    for src, fr in audit.by_source.items():
        for tag in ("encoder", "bottleneck"):
            assert fr[tag] == (1.0 if src == enc else 0.0)
        assert fr["decoder"] == (1.0 if src == dec else 0.0)
        for tag in ("skip", "expand", "head"):
            assert fr[tag] == 0.0


def test_supervised_supervised_contract(sources):
    model, _ = apply_policy(CFG, LoadPolicy("supervised", "supervised"), sources, seed=0)
    sup = sources["supervised"]
    S = CFG.num_stages
    for n, p in model.named_parameters():
        a = p.detach().numpy()
        t = tag_for(n)
        if t in BACKBONE_TAGS:
            assert np.array_equal(a, sup.params[n])
        elif t == "decoder":
            assert np.array_equal(a, sup.params[mirror_name(n, S)])


def test_none_none_shares_nothing(sources):
    model, _ = apply_policy(CFG, LoadPolicy(), sources, seed=0)
    for ck in sources.values():
        fr = audit_equality(model, ck)
        assert all(v == 0.0 for v in fr.values())


@pytest.mark.parametrize("keep", [True, False])
def test_decoder_contrastive_and_head_removal(keep, sources):
    pol = LoadPolicy("contrastive+transfer", "decoder-contrastive", load_expand_skip_heads=keep)
    model, audit = apply_policy(CFG, pol, sources, seed=0)
    assert audit.ok(), audit.violations()
    fr = audit.by_source["decoder-contrastive"]
    assert fr["decoder"] == 1.0
    assert fr["skip"] == fr["expand"] == (1.0 if keep else 0.0)
    assert fr["head"] == 0.0  # decoder pretraining never produces a segmentation head
    assert audit.by_source["contrastive+transfer"]["encoder"] == 1.0


def test_decoder_load_requires_decoder_tags(sources):
    srcs = dict(sources, **{"decoder-contrastive": fake_source("decoder-contrastive", 3, ("skip",))})
    with pytest.raises(TransferError):
        apply_policy(CFG, LoadPolicy("none", "decoder-contrastive"), srcs, 0)


def test_encoder_load_requires_backbone(sources):
    srcs = {"supervised": fake_source("supervised", 3, ("encoder",))}
    with pytest.raises(TransferError):
        apply_policy(CFG, LoadPolicy("supervised", "none"), srcs, 0)


def test_fresh_init_depends_on_seed(sources):
    a, _ = apply_policy(CFG, LoadPolicy("supervised", "none"), sources, seed=0)
    b, _ = apply_policy(CFG, LoadPolicy("supervised", "none"), sources, seed=1)
    sa, sb = a.state_dict(), b.state_dict()
    assert not np.array_equal(sa["decoder.stages.1.skip.weight"].numpy(), sb["decoder.stages.1.skip.weight"].numpy())
    assert np.array_equal(sa["backbone.embed.proj.weight"].numpy(), sb["backbone.embed.proj.weight"].numpy())
