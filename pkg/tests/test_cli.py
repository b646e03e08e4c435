import json

import pytest
import torch

from parotid_cl.cli import main
from parotid_cl.nets import NetConfig, build_segnet
from parotid_cl.transfer import load_checkpoint


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "sup.json").write_text(json.dumps({"n_images": 8, "epochs": 1, "batch_size": 4}))
    (d / "cl.json").write_text(json.dumps({"epochs": 1, "batch_size": 4}))
    (d / "seg.json").write_text(json.dumps({"epochs": 2, "batch_size": 4}))
    assert main(["synth-data", "--patients", "3", "--slices-per-patient", "4", "--labeled-frac", "1.0",
                 "--out", str(d / "data")]) == 0
    return d


def test_full_chain(work, capsys):
    d = work
    m = str(d / "data" / "manifest.json")
    assert main(["pretrain-sup", "--config", str(d / "sup.json"), "--out", str(d / "sup.ckpt")]) == 0
    assert main(["pretrain-cl", "--manifest", m, "--config", str(d / "cl.json"), "--init", str(d / "sup.ckpt"),
                 "--out", str(d / "cl.ckpt")]) == 0
    assert load_checkpoint(d / "cl.ckpt").lineage == "contrastive+transfer"
    assert (d / "cl.log.jsonl").read_text().count("\n") == 3
    assert main(["pretrain-dec", "--manifest", m, "--config", str(d / "cl.json"), "--encoder-init",
                 str(d / "cl.ckpt"), "--aug-mode", "photometric", "--out", str(d / "dec.ckpt")]) == 0
    assert main(["train-seg", "--manifest", m, "--config", str(d / "seg.json"), "--encoder", str(d / "cl.ckpt"),
                 "--decoder", str(d / "dec.ckpt"), "--plots", str(d / "plots"), "--out", str(d / "seg.ckpt")]) == 0
    seg = load_checkpoint(d / "seg.ckpt")
    assert seg.extra["role"] == "segmentation"
    assert len(json.loads((d / "seg.curves.json").read_text())["test_loss"]) == 2
    capsys.readouterr()
    assert main(["evaluate", "--ckpt", str(d / "seg.ckpt"), "--manifest", m, "--subset", "test",
                 "--out", str(d / "eval.json")]) == 0
    first = json.loads(capsys.readouterr().out.splitlines()[0])
    assert set(first) == {"dsc", "mpa", "miou", "hd"}
    assert main(["ckpt", "inspect", str(d / "dec.ckpt")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["lineage"] == "decoder-contrastive" and "encoder" not in info["tensors_by_tag"]
    assert main(["ckpt", "diff", str(d / "sup.ckpt"), str(d / "cl.ckpt")]) == 0
    diff = json.loads(capsys.readouterr().out)
    assert diff["lineages"] == ["supervised", "contrastive+transfer"] and diff["changed_max_abs"]


def test_convert_and_write_spec(work, capsys):
    d = work
    torch.save(build_segnet(NetConfig(), 0).backbone.state_dict(), d / "raw.pt")
    assert main(["ckpt", "convert", str(d / "raw.pt"), "--prefix", "backbone.", "--out", str(d / "conv.ckpt")]) == 0
    assert load_checkpoint(d / "conv.ckpt").tag_set() == {"encoder", "bottleneck"}
    assert main(["write-spec", "table2", "--out", str(d / "t2.json")]) == 0
    assert len(json.loads((d / "t2.json").read_text())["arms"]) == 9


def test_errors_return_nonzero(work, capsys):
    d = work
    (d / "bad.ckpt").write_bytes(b"not a checkpoint")
    assert main(["ckpt", "inspect", str(d / "bad.ckpt")]) != 0
    assert "error" in capsys.readouterr().err.lower()
    assert main(["evaluate", "--ckpt", str(d / "sup.ckpt"), "--manifest", str(d / "data" / "manifest.json"),
                 "--out", str(d / "x.json")]) != 0
