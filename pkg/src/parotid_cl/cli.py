"""Command-line front end: ``parotid-cl <command> ...``.

Configs and specs are JSON files whose keys are the fields of the matching
config dataclass; omitted keys keep their defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .cl_pretrain import CLConfig, pretrain_contrastive
from .dec_pretrain import DecCLConfig, Table3Config, pretrain_decoder, table3_matrix
from .errors import ParotidCLError
from .exp.ablation import AblationSpec, run_ablation, table1_spec, table2_spec
from .exp.plotting import emit_plots
from .exp.proxy import ProxyConfig, pretrain_supervised
from .exp.runner import DataConfig
from .exp.train import TrainConfig, train_segmentation
from .metrics import evaluate
from .nets import NetConfig, build_segnet, tag_for
from .runtime import log
from .synthdata import DatasetManifest, build_dataset, split_dataset
from .transfer import (LINEAGES, Checkpoint, LoadPolicy, apply_policy, load_checkpoint,
                       save_checkpoint)


def _json(path) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def _write_jsonl(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


def _net_cfg(args, fallback: NetConfig | None = None) -> NetConfig:
    if getattr(args, "net_config", None):
        return NetConfig.from_dict(_json(args.net_config))
    return fallback or NetConfig()


def _subset(manifest: DatasetManifest, which: str, ratio: float, seed: int) -> DatasetManifest:
    if which == "all":
        return manifest.labeled()
    train, test = split_dataset(manifest, ratio, seed)
    return train if which == "train" else test


# ---------------------------------------------------------------------------
# commands

def cmd_synth_data(args):
    m = build_dataset(args.patients, args.slices_per_patient, args.labeled_frac, args.seed, args.out,
                      H=args.size, W=args.size)
    print(f"wrote {len(m.entries)} slices ({m.labeled_total} labeled) to {args.out}")


def cmd_pretrain_sup(args):
    ckpt, hist = pretrain_supervised(ProxyConfig.from_dict(_json(args.config)), _net_cfg(args))
    save_checkpoint(ckpt, args.out)
    if args.log:
        _write_jsonl(args.log, hist)
    print(f"supervised proxy: final train accuracy {hist[-1]['train_acc']:.3f} -> {args.out}")


def cmd_pretrain_cl(args):
    manifest = DatasetManifest.load(args.manifest)
    init = load_checkpoint(args.init) if args.init else None
    ckpt, steps = pretrain_contrastive(manifest, CLConfig.from_dict(_json(args.config)), init,
                                       _net_cfg(args, init.config if init else None), args.exclude_patients)
    save_checkpoint(ckpt, args.out)
    _write_jsonl(args.log or Path(args.out).with_suffix(".log.jsonl"), steps)
    print(f"{ckpt.lineage}: {len(steps)} steps, last loss {steps[-1]['loss']:.4f} -> {args.out}")


def cmd_pretrain_dec(args):
    manifest = DatasetManifest.load(args.manifest)
    enc = load_checkpoint(args.encoder_init)
    ckpt, steps = pretrain_decoder(manifest, DecCLConfig.from_dict(_json(args.config)), enc, args.aug_mode,
                                   enc.config, args.exclude_patients)
    save_checkpoint(ckpt, args.out)
    _write_jsonl(args.log or Path(args.out).with_suffix(".log.jsonl"), steps)
    print(f"decoder-contrastive: {len(steps)} steps, last loss {steps[-1]['loss']:.4f} -> {args.out}")


def cmd_train_seg(args):
    manifest = DatasetManifest.load(args.manifest)
    train, test = split_dataset(manifest, args.split_ratio, args.split_seed)
    sources, enc_src, dec_src = {}, "none", "none"
    if args.encoder:
        ck = load_checkpoint(args.encoder)
        sources[ck.lineage], enc_src = ck, ck.lineage
    if args.decoder:
        ck = load_checkpoint(args.decoder)
        sources[ck.lineage], dec_src = ck, ck.lineage
    cfg = TrainConfig.from_dict(_json(args.config))
    net = _net_cfg(args, next(iter(sources.values())).config if sources else None)
    policy = LoadPolicy(enc_src, dec_src, load_expand_skip_heads=args.load_expand_skip_heads)
    model, _ = apply_policy(net, policy, sources, cfg.seed)
    model, curves = train_segmentation(train, test, cfg, model)
    out = Path(args.out)
    provenance = sorted(policy.sources() - {"supervised"})
    ckpt = Checkpoint.from_module(model, "supervised", net, provenance=provenance,
                                  extra={"role": "segmentation", "policy": policy.to_dict(),
                                         "train_config": cfg.to_dict()})
    save_checkpoint(ckpt, out)
    curves_path = Path(args.curves) if args.curves else out.with_suffix(".curves.json")
    curves_path.write_text(json.dumps(curves))
    if args.plots:
        emit_plots({"segmentation": curves}, args.plots)
    report = evaluate(model, test)
    print(json.dumps({k: round(v, 4) for k, v in report.macro.items()}))


def _load_segnet(path) -> torch.nn.Module:
    ck = load_checkpoint(path)
    model = build_segnet(ck.config)
    missing = [n for n, _ in model.named_parameters() if n not in ck.params]
    if missing:
        raise ParotidCLError(f"{path} is not a full segmentation checkpoint; missing e.g. {missing[:3]}")
    model.load_state_dict(ck.state_dict(), strict=False)
    return model


def cmd_evaluate(args):
    model = _load_segnet(args.ckpt)
    manifest = _subset(DatasetManifest.load(args.manifest), args.subset, args.split_ratio, args.split_seed)
    report = evaluate(model, manifest)
    report.write(args.out)
    print(json.dumps({k: round(v, 4) for k, v in report.macro.items()}))
    print(report.footer())


def cmd_ablate(args):
    out = Path(args.out)
    if args.preset == "table3":
        cfg = Table3Config(seeds=args.seeds or [0])
        manifest = DataConfig().build(out / "data")
        report = table3_matrix(manifest, cfg)
        report.write(out)
        emit_plots(report.curves(), out / "plots")
    else:
        if args.spec:
            spec = AblationSpec.load(args.spec)
        else:
            spec = (table1_spec if args.preset == "table1" else table2_spec)()
        if args.seeds:
            spec.seeds = list(args.seeds)
        report = run_ablation(spec, out_dir=out)
    for row in report.rows():
        print("{arm:28s} DSC {dsc:6.2f}  MPA {mpa:6.2f}  MIoU {miou:6.2f}  HD {hd:5.2f}".format(**row))
    print(f"report written to {out}")


def cmd_write_spec(args):
    spec = (table1_spec if args.preset == "table1" else table2_spec)()
    spec.save(args.out)
    print(f"wrote {args.preset} spec to {args.out}")


def cmd_ckpt(args):
    if args.action == "inspect":
        ck = load_checkpoint(args.paths[0])
        counts = {}
        for t in ck.tags.values():
            counts[t] = counts.get(t, 0) + 1
        n = sum(a.size for a in ck.params.values())
        print(json.dumps({"lineage": ck.lineage, "provenance": ck.provenance, "schema_version": ck.schema_version,
                          "net_config": ck.net_config, "tensors_by_tag": counts, "n_params": int(n),
                          "extra_keys": sorted(ck.extra)}, indent=1))
    elif args.action == "diff":
        a, b = (load_checkpoint(p) for p in args.paths[:2])
        only_a, only_b = sorted(set(a.params) - set(b.params)), sorted(set(b.params) - set(a.params))
        changed = {}
        for n in sorted(set(a.params) & set(b.params)):
            x, y = a.params[n], b.params[n]
            if x.shape != y.shape:
                changed[n] = f"shape {x.shape} vs {y.shape}"
            elif not np.array_equal(x, y):
                changed[n] = float(np.abs(x - y).max())
        print(json.dumps({"lineages": [a.lineage, b.lineage], "only_in_first": only_a, "only_in_second": only_b,
                          "n_equal": len(set(a.params) & set(b.params)) - len(changed),
                          "changed_max_abs": changed}, indent=1))
    elif args.action == "convert":
        state = torch.load(args.paths[0], map_location="cpu", weights_only=True)
        net = _net_cfg(args)
        prefix = args.prefix or ""
        params = {prefix + k: v.detach().cpu().numpy() for k, v in state.items() if v.dtype.is_floating_point}
        ck = Checkpoint(args.lineage, net.to_dict(), params, {n: tag_for(n) for n in params},
                        extra={"converted_from": str(args.paths[0])})
        ck.check_shapes(net)
        save_checkpoint(ck, args.out)
        print(f"converted {len(params)} tensors to {args.out}")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="parotid-cl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="generate a phantom dataset with a manifest")
    s.add_argument("--patients", type=int, default=16)
    s.add_argument("--slices-per-patient", type=int, default=16)
    s.add_argument("--labeled-frac", type=float, default=0.4)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("pretrain-sup", help="train the supervised proxy encoder")
    s.add_argument("--config")
    s.add_argument("--net-config")
    s.add_argument("--log")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain_sup)

    s = sub.add_parser("pretrain-cl", help="contrastive encoder pretraining")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--init", help="checkpoint to start from (transfer learning)")
    s.add_argument("--net-config")
    s.add_argument("--exclude-patients", nargs="*", default=())
    s.add_argument("--log", help="line-delimited JSON step log (default: next to --out)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain_cl)

    s = sub.add_parser("pretrain-dec", help="contrastive decoder pretraining behind a frozen encoder")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--encoder-init", required=True)
    s.add_argument("--aug-mode", choices=("full", "photometric"), default="full")
    s.add_argument("--exclude-patients", nargs="*", default=())
    s.add_argument("--log")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain_dec)

    s = sub.add_parser("train-seg", help="fine-tune a segmentation network from chosen checkpoints")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--net-config")
    s.add_argument("--encoder", help="checkpoint for encoder+bottleneck")
    s.add_argument("--decoder", help="checkpoint for the decoder (mirrored unless decoder-contrastive)")
    s.add_argument("--load-expand-skip-heads", action="store_true")
    s.add_argument("--split-ratio", type=float, default=0.8)
    s.add_argument("--split-seed", type=int, default=0)
    s.add_argument("--curves")
    s.add_argument("--plots", help="directory for loss-curve figures")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_seg)

    s = sub.add_parser("evaluate", help="score a segmentation checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--subset", choices=("all", "train", "test"), default="all")
    s.add_argument("--split-ratio", type=float, default=0.8)
    s.add_argument("--split-seed", type=int, default=0)
    s.add_argument("--out", required=True, help="report.json or report.csv")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="run an ablation end to end")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec")
    g.add_argument("--preset", choices=("table1", "table2", "table3"))
    s.add_argument("--seeds", type=int, nargs="*")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("write-spec", help="write a preset ablation spec as JSON for editing")
    s.add_argument("preset", choices=("table1", "table2"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_write_spec)

    s = sub.add_parser("ckpt", help="inspect, compare or convert checkpoints")
    s.add_argument("action", choices=("inspect", "diff", "convert"))
    s.add_argument("paths", nargs="+")
    s.add_argument("--lineage", choices=LINEAGES, default="supervised")
    s.add_argument("--prefix", help="prepended to converted parameter names, e.g. 'backbone.'")
    s.add_argument("--net-config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_ckpt)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    if args.command == "ckpt" and args.action == "convert" and not args.out:
        print("ckpt convert needs --out", file=sys.stderr)
        return 2
    if args.command == "ckpt" and args.action == "diff" and len(args.paths) < 2:
        print("ckpt diff needs two paths", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except ParotidCLError as e:
        log.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
