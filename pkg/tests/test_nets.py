import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from parotid_cl.errors import ConfigError, DimensionError
from parotid_cl.nets import (BACKBONE_TAGS, TAGS, HeadConfig, NetConfig, SwinBlock, attach_heads, build_backbone,
                             build_segnet, mirror_name, tag_for, tagged_parameters, unmirror_name,
                             window_partition, window_reverse)


@pytest.fixture(scope="module")
def desk():
    return build_segnet(NetConfig(), seed=0)


def test_desk_shapes(desk):
    x = torch.rand(2, 3, 64, 64)
    pyr = desk.backbone(x)
    assert pyr.bottleneck.shape == (2, 2, 2, 192)
    assert [tuple(f.shape) for f in pyr.stages] == [(2, 16, 16, 24), (2, 8, 8, 48), (2, 4, 4, 96)]
    assert desk(x).shape == (2, 3, 64, 64)
    assert desk.backbone.pooled(x).shape == (2, 192)


def test_presets():
    t = NetConfig.preset("swin-tiny")
    assert (t.img_size, t.embed_dim, list(t.depths), t.window_size) == (224, 96, [2, 2, 6, 2], 7)
    assert t.stage_resolution(t.num_stages - 1) == 7
    d = NetConfig.preset("desk")
    assert NetConfig.from_dict(d.to_dict()) == d
    with pytest.raises((ConfigError, KeyError)):
        NetConfig.preset("huge")


def test_invalid_configs():
    with pytest.raises(ConfigError):
        NetConfig(img_size=60)
    with pytest.raises(ConfigError):
        NetConfig(num_classes=1)
    with pytest.raises(ConfigError):
        NetConfig(depths=[2, 2], num_heads=[1, 2, 4])


def test_wrong_input_shape_raises(desk):
    with pytest.raises(DimensionError):
        desk(torch.rand(1, 3, 32, 32))
    with pytest.raises(DimensionError):
        desk(torch.rand(1, 1, 64, 64))


@settings(max_examples=8, deadline=None)
@given(st.sampled_from([2, 4]), st.integers(2, 4), st.sampled_from([8, 16]), st.sampled_from([1, 2]),
       st.sampled_from([2, 4]), st.integers(1, 3))
def test_shape_law(patch, stages, embed, heads0, window, batch):
    depths = [2] * stages
    heads = [heads0 * 2 ** s for s in range(stages)]
    img = patch * 2 ** (stages - 1) * 2
    cfg = NetConfig(img_size=img, patch_size=patch, embed_dim=embed, depths=depths, num_heads=heads,
                    window_size=window)
    net = build_segnet(cfg, seed=0)
    x = torch.rand(batch, 3, img, img)
    pyr = net.backbone(x)
    r = img // patch // 2 ** (stages - 1)
    assert pyr.bottleneck.shape == (batch, r, r, embed * 2 ** (stages - 1))
    assert net(x).shape == (batch, 3, img, img)


def test_tag_partition_total(desk):
    tagged = tagged_parameters(desk)
    tags = {t for _, t in tagged.values()}
    assert tags == {"encoder", "bottleneck", "decoder", "skip", "expand", "head"}
    assert len(tagged) == len(list(desk.parameters()))
    assert all(t in TAGS for t in tags)
    emb = attach_heads(build_backbone(NetConfig(), 0))
    assert {tag_for(n) for n, _ in emb.named_parameters()} == set(BACKBONE_TAGS) | {"projector", "predictor"}
    with pytest.raises(KeyError):
        tag_for("something.else")


def test_every_tag_receives_gradient(desk):
    desk.zero_grad()
    y = torch.randint(0, 3, (2, 64, 64))
    torch.nn.functional.cross_entropy(desk(torch.rand(2, 3, 64, 64)), y).backward()
    by_tag = {}
    for n, (p, t) in tagged_parameters(desk).items():
        by_tag.setdefault(t, []).append(p.grad is not None and bool(p.grad.abs().sum() > 0))
    for t, flags in by_tag.items():
        assert any(flags), t
        assert np.mean(flags) > 0.9, t


def test_softmax_sums_to_one_and_batch_independence(desk):
    desk.eval()
    x = torch.rand(3, 3, 64, 64)
    with torch.no_grad():
        full = desk(x)
        single = desk(x[1:2])
    assert torch.allclose(full.softmax(1).sum(1), torch.ones(3, 64, 64), atol=1e-5)
    assert torch.allclose(full[1:2], single, atol=1e-5)


def test_mirror_totality_and_injectivity(desk):
    S = NetConfig().num_stages
    names = dict(desk.named_parameters())
    dec = [n for n in names if tag_for(n) == "decoder"]
    mirrored = [mirror_name(n, S) for n in dec]
    assert None not in mirrored
    assert len(set(mirrored)) == len(mirrored)
    for d, e in zip(dec, mirrored):
        assert tag_for(e) == "encoder"
        assert names[d].shape == names[e].shape
        assert unmirror_name(e, S) == d
    assert mirror_name("decoder.stages.1.skip.weight", S) is None


def test_seeded_build_is_deterministic():
    a = build_segnet(NetConfig(), seed=5).state_dict()
    b = build_segnet(NetConfig(), seed=5).state_dict()
    c = build_segnet(NetConfig(), seed=6).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a if a[k].is_floating_point())


def test_window_roundtrip():
    x = torch.rand(2, 8, 8, 5)
    assert torch.equal(window_reverse(window_partition(x, 4), 4, 8, 8), x)


def test_block_at_window_resolution_does_not_shift():
    b = SwinBlock(8, 4, 2, 4, shift=True)
    assert b.shift_size == 0 and b.window_size == 4 and b.attn_mask is None


def test_head_config_without_predictor():
    emb = attach_heads(build_backbone(NetConfig(), 0), HeadConfig(predictor=False))
    assert emb.predictor is None
