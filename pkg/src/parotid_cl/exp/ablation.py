"""Ablation harness: which pretrained weights initialise which half of the network.

Two standard layouts are provided. ``table1_spec`` compares four ways to
initialise the whole network (nothing, supervised proxy, contrastive without
and with the supervised start). ``table2_spec`` crosses three encoder sources
with three decoder sources. Sources are built on demand along the chain
supervised proxy -> contrastive (+transfer) -> decoder-contrastive.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..cl_pretrain import CLConfig
from ..dec_pretrain import DecCLConfig, pretrain_decoder
from ..errors import ConfigError, PolicyError
from ..nets import NetConfig
from ..runtime import log
from ..synthdata import DatasetManifest
from ..transfer import LoadPolicy, save_checkpoint
from .plotting import emit_plots
from .proxy import ProxyConfig
from .runner import AblationReport, Arm, DataConfig, build_encoder_sources, run_arms
from .train import TrainConfig

# Published test-set values: DSC, MPA, MIoU in percent, HD in pixels.
TABLE1_REFERENCE = {
    "None": {"dsc": 75.22, "mpa": 98.82, "miou": 69.23, "hd": 3.82},
    "Supervised": {"dsc": 88.52, "mpa": 99.31, "miou": 83.89, "hd": 3.06},
    "Contrastive w/o TL": {"dsc": 83.95, "mpa": 99.08, "miou": 78.51, "hd": 3.37},
    "Contrastive w/ TL": {"dsc": 89.60, "mpa": 99.36, "miou": 85.11, "hd": 2.98},
}

_T2 = [("None", "None", 75.22, 98.82, 69.23, 3.82), ("None", "Supe", 85.04, 99.13, 79.75, 3.28),
       ("None", "Cont", 85.25, 99.17, 80.08, 3.26), ("Supe", "None", 87.32, 99.28, 82.45, 3.11),
       ("Supe", "Supe", 88.52, 99.31, 83.89, 3.06), ("Supe", "Cont", 88.22, 99.31, 83.53, 3.05),
       ("Cont", "None", 88.19, 99.33, 83.51, 3.04), ("Cont", "Supe", 89.95, 99.36, 85.47, 3.00),
       ("Cont", "Cont", 89.60, 99.36, 85.11, 2.98)]
TABLE2_REFERENCE = {f"{i}_{e}_{d}": {"dsc": a, "mpa": b, "miou": c, "hd": h}
                    for i, (e, d, a, b, c, h) in enumerate(_T2, 1)}

_SOURCE_LABEL = {"none": "None", "supervised": "Supe", "contrastive+transfer": "Cont"}


def _dominates(better: str, worse: str, ref: dict) -> dict:
    b, w = ref[better], ref[worse]
    holds = b["dsc"] > w["dsc"] and b["mpa"] >= w["mpa"] and b["miou"] > w["miou"] and b["hd"] < w["hd"]
    return {"claim": f"{better} dominates {worse} on DSC, MPA, MIoU and HD", "holds_in_reference": holds}


def _beats(arm: str, baseline: str, ref: dict, metric: str = "dsc") -> dict:
    return {"claim": f"{arm} has higher {metric} than {baseline}",
            "holds_in_reference": ref[arm][metric] > ref[baseline][metric]}


@dataclass
class AblationSpec:
    """Everything needed to rerun an ablation from scratch.

    Stored as JSON with keys ``name``, ``arms`` (each ``name``, ``policy``,
    ``encoder_label``, ``decoder_label``), ``train``, ``seeds``, ``net``,
    ``data``, ``proxy``, ``cl``, ``dec``, ``baseline``, ``reference``,
    ``expectations`` and ``exclude_test_patients``.
    """

    name: str
    arms: list
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: list = field(default_factory=lambda: [0])
    net: NetConfig = field(default_factory=NetConfig)
    data: DataConfig = field(default_factory=DataConfig)
    proxy: ProxyConfig = field(default_factory=ProxyConfig)
    cl: CLConfig = field(default_factory=CLConfig)
    dec: DecCLConfig = field(default_factory=DecCLConfig)
    baseline: str | None = None
    reference: dict = field(default_factory=dict)
    expectations: list = field(default_factory=list)
    exclude_test_patients: bool = True

    def __post_init__(self):
        self.arms = [a if isinstance(a, Arm) else Arm(**a) for a in self.arms]
        for attr, cls in (("train", TrainConfig), ("net", NetConfig), ("data", DataConfig),
                          ("proxy", ProxyConfig), ("cl", CLConfig), ("dec", DecCLConfig)):
            v = getattr(self, attr)
            if isinstance(v, dict):
                setattr(self, attr, cls.from_dict(v))
        self.seeds = list(self.seeds)
        self.validate()

    def validate(self):
        names = [a.name for a in self.arms]
        if not names:
            raise ConfigError("an ablation needs at least one arm")
        if len(set(names)) != len(names):
            raise ConfigError(f"arm names must be unique: {names}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.baseline is not None and self.baseline not in names:
            raise ConfigError(f"baseline {self.baseline!r} is not an arm")
        self.net.validate()

    def required_sources(self) -> set:
        return set().union(*(a.policy.sources() for a in self.arms))

    def to_dict(self) -> dict:
        return {"name": self.name, "arms": [a.to_dict() for a in self.arms], "train": self.train.to_dict(),
                "seeds": self.seeds, "net": self.net.to_dict(), "data": self.data.to_dict(),
                "proxy": self.proxy.to_dict(), "cl": self.cl.to_dict(), "dec": self.dec.to_dict(),
                "baseline": self.baseline, "reference": self.reference, "expectations": self.expectations,
                "exclude_test_patients": self.exclude_test_patients}

    @classmethod
    def from_dict(cls, d: dict) -> "AblationSpec":
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path) -> "AblationSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def desk_defaults() -> dict:
    """Pretraining and fine-tuning settings that fit the small phantom study on one CPU core."""
    return {"train": TrainConfig.desk(), "cl": CLConfig.desk(), "dec": DecCLConfig.desk(),
            "proxy": ProxyConfig()}


def table1_spec(seeds=(0, 1, 2), **overrides) -> AblationSpec:
    """Four whole-network initialisations; pretrained decoders are mirrored from their encoder."""
    arms = [
        Arm("None", LoadPolicy("none", "none"), "None", "None"),
        Arm("Supervised", LoadPolicy("supervised", "supervised"), "Supe", "Supe"),
        Arm("Contrastive w/o TL", LoadPolicy("contrastive", "contrastive"), "Cont-noTL", "Cont-noTL"),
        Arm("Contrastive w/ TL", LoadPolicy("contrastive+transfer", "contrastive+transfer"), "Cont", "Cont"),
    ]
    ref = TABLE1_REFERENCE
    expect = [_dominates("Contrastive w/ TL", "Supervised", ref)]
    expect += [_beats(a, "None", ref) for a in ref if a != "None"]
    kw = {**desk_defaults(), **overrides}
    return AblationSpec("table1", arms, seeds=list(seeds), baseline="None", reference=ref,
                        expectations=expect, **kw)


def table2_spec(seeds=(0, 1, 2), **overrides) -> AblationSpec:
    """Encoder source x decoder source over {none, supervised, contrastive+transfer}."""
    arms = []
    for i, (e, d) in enumerate([(e, d) for e in _SOURCE_LABEL for d in _SOURCE_LABEL], 1):
        name = f"{i}_{_SOURCE_LABEL[e]}_{_SOURCE_LABEL[d]}"
        arms.append(Arm(name, LoadPolicy(e, d), _SOURCE_LABEL[e], _SOURCE_LABEL[d]))
    ref = TABLE2_REFERENCE
    expect = [_beats(a, "1_None_None", ref) for a in ref if a != "1_None_None"]
    kw = {**desk_defaults(), **overrides}
    return AblationSpec("table2", arms, seeds=list(seeds), baseline="1_None_None", reference=ref,
                        expectations=expect, **kw)


def build_sources(spec: AblationSpec, manifest: DatasetManifest, needed=None, exclude_patients=(),
                  cache_dir=None):
    """Build the checkpoints in ``needed`` (default: all the spec's arms use).

    Returns:
        (sources dict, per-source build time in seconds)
    """
    needed = spec.required_sources() if needed is None else set(needed)
    enc_needed = set(needed)
    if "decoder-contrastive" in needed:
        enc_needed.add("contrastive+transfer")
    sources, timings = build_encoder_sources(manifest, enc_needed, spec.proxy, spec.cl, spec.net,
                                             exclude_patients, cache_dir)
    if "decoder-contrastive" in needed:
        t0 = time.perf_counter()
        sources["decoder-contrastive"], _ = pretrain_decoder(manifest, spec.dec, sources["contrastive+transfer"],
                                                             net_cfg=spec.net, exclude_patients=exclude_patients)
        timings["decoder-contrastive"] = time.perf_counter() - t0
        if cache_dir is not None:
            save_checkpoint(sources["decoder-contrastive"], Path(cache_dir) / "decoder-contrastive.ckpt")
    return sources, timings


def run_ablation(spec: AblationSpec, sources: dict | None = None, out_dir=None,
                 manifest: DatasetManifest | None = None, build_missing: bool = True) -> AblationReport:
    """Run every arm of ``spec`` for every seed and write the report.

    Args:
        spec: the ablation.
        sources: prebuilt checkpoints keyed by lineage. Missing ones are built
            when ``build_missing`` is set, otherwise a PolicyError is raised
            before any training.
        out_dir: where data, checkpoints, report and curves go. Required when
            ``manifest`` is not given.
        manifest: an existing dataset; generated from ``spec.data`` otherwise.

    Returns:
        AblationReport (also written to ``out_dir`` when given).
    """
    spec.validate()
    sources = dict(sources or {})
    missing = spec.required_sources() - set(sources)
    if missing and not build_missing:
        raise PolicyError(f"ablation {spec.name!r} needs missing sources {sorted(missing)}")
    out = Path(out_dir) if out_dir is not None else None
    t_start = time.perf_counter()
    if manifest is None:
        if out is None:
            raise ConfigError("either a manifest or an out_dir for generated data is required")
        manifest = spec.data.build(out / "data")
    train, test = spec.data.split(manifest)
    exclude = test.patients() if spec.exclude_test_patients else ()
    timings = {}
    if missing:
        built, timings = build_sources(spec, manifest, missing, exclude, out / "sources" if out else None)
        sources.update({k: v for k, v in built.items() if k not in sources})
    t_train = time.perf_counter()
    report = run_arms(spec.arms, sources, train, test, spec.train, spec.seeds, spec.net, spec.name,
                      spec.reference, spec.expectations, spec.baseline)
    timings.update(segmentation=time.perf_counter() - t_train, total=time.perf_counter() - t_start)
    report.timings = timings
    if out is not None:
        spec.save(out / "spec.json")
        report.write(out)
        emit_plots(report.curves(), out / "plots")
    log.info("ablation %s finished in %.0fs", spec.name, timings["total"])
    return report


def lr_grid(spec: AblationSpec, arm: str, lrs, sources: dict, manifest: DatasetManifest) -> dict:
    """Median test DSC of one arm for each peak learning rate in ``lrs``."""
    train, test = spec.data.split(manifest)
    chosen = [a for a in spec.arms if a.name == arm]
    if not chosen:
        raise ConfigError(f"unknown arm {arm!r}")
    out = {}
    for lr in lrs:
        cfg = TrainConfig.from_dict({**spec.train.to_dict(), "lr_max": lr})
        rep = run_arms(chosen, sources, train, test, cfg, spec.seeds, spec.net, f"{spec.name}-lr{lr}")
        out[lr] = rep.results[0].median("dsc")
    return out
