import json
import logging
import math

import numpy as np
import pytest

from parotid_cl.augment import AugmentConfig
from parotid_cl.cl_pretrain import CLConfig
from parotid_cl.errors import ConfigError, PolicyError, ScheduleError
from parotid_cl.exp.ablation import AblationSpec, run_ablation, table1_spec, table2_spec
from parotid_cl.exp.plotting import emit_plots
from parotid_cl.exp.proxy import ProxyConfig, pretrain_supervised
from parotid_cl.exp.runner import Arm, DataConfig, run_arms
from parotid_cl.exp.schedule import cosine_lr
from parotid_cl.exp.train import TrainConfig, train_segmentation
from parotid_cl.nets import NetConfig, build_segnet
from parotid_cl.synthdata import generate_phantom
from parotid_cl.transfer import LoadPolicy

CFG = NetConfig()


def phantoms(n, offset=0):
    pairs = [generate_phantom(offset + i) for i in range(n)]
    return (np.stack([s.pixels for s, _ in pairs]), np.stack([m.labels for _, m in pairs]).astype(np.int64))


@pytest.mark.parametrize("m", [1, 2, 7, 40, 100])
def test_schedule_endpoints(m):
    assert abs(cosine_lr(0, m, 3e-4) - 3e-4) <= 1e-12 * 3e-4
    assert abs(cosine_lr(m, m, 3e-4)) <= 1e-12 * 3e-4
    if m % 2 == 0:
        assert cosine_lr(m // 2, m, 3e-4) == 1.5e-4
    vals = [cosine_lr(i, m, 1.0) for i in range(m + 1)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_schedule_errors():
    with pytest.raises(ScheduleError):
        cosine_lr(0, 0, 1e-3)
    with pytest.raises(ScheduleError):
        cosine_lr(5, 4, 1e-3)
    with pytest.raises(ScheduleError):
        cosine_lr(-1, 4, 1e-3)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(loss="focal")
    with pytest.raises(ConfigError):
        TrainConfig(augment=AugmentConfig(crop_p=0.5))
    p = TrainConfig.full_scale()
    assert (p.batch_size, p.lr_max, p.loss) == (16, 2e-4, "ce")
    d = TrainConfig.desk()
    assert TrainConfig.from_dict(json.loads(json.dumps(d.to_dict()))) == d


def test_single_batch_overfit():
    data = phantoms(16)
    cfg = TrainConfig(epochs=200, batch_size=16, lr_max=1e-3, augment=AugmentConfig.identity())
    _, curves = train_segmentation(data, None, cfg, build_segnet(CFG, 0))
    assert len(curves["train_loss"]) == 200
    assert curves["train_loss"][-1] < 0.2 * curves["train_loss"][0]


def test_training_is_deterministic_and_curves_have_epoch_length():
    train, test = phantoms(8), phantoms(4, 100)
    cfg = TrainConfig(epochs=3, batch_size=4, seed=2)
    runs = [train_segmentation(train, test, cfg, build_segnet(CFG, 0))[1] for _ in range(2)]
    for key in ("train_loss", "test_loss", "lr"):
        assert len(runs[0][key]) == 3
        assert runs[0][key] == runs[1][key]
    assert runs[0]["lr"][0] == cfg.lr_max
    assert math.isfinite(runs[0]["initial_test_loss"])


def test_supervised_proxy_checkpoint():
    ck, hist = pretrain_supervised(ProxyConfig(n_images=8, epochs=2, batch_size=4))
    assert ck.lineage == "supervised" and ck.tag_set() == {"encoder", "bottleneck"}
    assert len(hist) == 2 and 0.0 <= hist[-1]["train_acc"] <= 1.0


def _tiny_overrides():
    return dict(train=TrainConfig(epochs=1, batch_size=4), cl=CLConfig(epochs=1, batch_size=4),
                proxy=ProxyConfig(n_images=8, epochs=1, batch_size=4),
                data=DataConfig(n_patients=3, slices_per_patient=4, labeled_fraction=1.0))


def test_spec_shapes_and_roundtrip(tmp_path):
    t1, t2 = table1_spec(), table2_spec()
    assert [a.name for a in t1.arms] == ["None", "Supervised", "Contrastive w/o TL", "Contrastive w/ TL"]
    assert len(t2.arms) == 9 and t2.required_sources() == {"supervised", "contrastive+transfer"}
    assert set(t1.reference) == {a.name for a in t1.arms}
    assert all(e["holds_in_reference"] for e in t1.expectations)
    back = AblationSpec.load(t2.save(tmp_path / "s.json"))
    assert back.to_dict() == t2.to_dict()


def test_missing_sources_fail_before_training(tmp_path):
    spec = table1_spec(seeds=[0], **_tiny_overrides())
    manifest = spec.data.build(tmp_path)
    with pytest.raises(PolicyError):
        run_ablation(spec, sources={}, manifest=manifest, build_missing=False)
    train, test = spec.data.split(manifest)
    with pytest.raises(PolicyError):
        run_arms(spec.arms, {}, train, test, spec.train, [0], CFG)
    with pytest.raises(ConfigError):
        run_arms([spec.arms[0], spec.arms[0]], {}, train, test, spec.train, [0], CFG)


def test_tiny_table1_end_to_end(tmp_path, caplog):
    spec = table1_spec(seeds=[0, 1], **_tiny_overrides())
    report = run_ablation(spec, out_dir=tmp_path)
    rows = report.rows()
    assert [r["arm"] for r in rows] == [a.name for a in spec.arms]
    for r in rows:
        assert r["n_seeds"] == 2 and len(r["dsc_seeds"].split(";")) == 2
        assert 0 <= r["dsc"] <= 100 and 0 <= r["miou"] <= 100
    assert set(report.directional("None")) == {"Supervised", "Contrastive w/o TL", "Contrastive w/ TL"}
    for name in ("report.csv", "report.json", "curves.json", "spec.json"):
        assert (tmp_path / name).exists()
    pngs = sorted(p.name for p in (tmp_path / "plots").glob("*.png"))
    assert len(pngs) == 5 and "overlay.png" in pngs
    d = json.loads((tmp_path / "report.json").read_text())
    assert d["units"]["dsc"] == "%" and {"segmentation", "total"} <= set(d["timings"])
    for seed_curves in report.curves().values():
        assert all(len(c["test_loss"]) == 1 for c in seed_curves)


def test_emit_plots_skips_empty_arm(tmp_path, caplog):
    curves = {"a": {"test_loss": [1.0, 0.5, 0.4]}, "b": [{"test_loss": [1.0, 0.8]}, {"test_loss": [0.9, 0.7]}],
              "empty": {"test_loss": []}}
    with caplog.at_level(logging.WARNING):
        paths = emit_plots(curves, tmp_path)
    assert sorted(p.name for p in paths) == ["a.png", "b.png", "overlay.png"]
    assert "empty" in caplog.text


def test_arm_validation():
    with pytest.raises(ConfigError):
        LoadPolicy("decoder-contrastive", "none")
    a = Arm("x", {"encoder_source": "supervised", "decoder_source": "none"})
    assert a.policy.encoder_source == "supervised"
