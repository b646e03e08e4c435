"""Running groups of segmentation arms over seeds and tabulating the outcome.

An arm is a named weight-loading policy together with the checkpoints it
draws from. Every arm is trained and evaluated on the same split for every
seed; the report keeps per-seed values and their medians.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..cl_pretrain import CLConfig, pretrain_contrastive
from ..errors import ConfigError, PolicyError
from ..metrics import aggregate, predict
from ..nets import NetConfig
from ..runtime import log
from ..synthdata import DatasetManifest, build_dataset, split_dataset
from ..transfer import LoadPolicy, apply_policy, save_checkpoint
from .proxy import ProxyConfig, pretrain_supervised
from .train import TrainConfig, train_segmentation

METRICS = ("dsc", "mpa", "miou", "hd")
PERCENT = ("dsc", "mpa", "miou")


@dataclass
class DataConfig:
    n_patients: int = 16
    slices_per_patient: int = 16
    labeled_fraction: float = 0.4
    seed: int = 0
    img_size: int = 64
    split_ratio: float = 0.8
    split_seed: int = 0

    def build(self, out_dir) -> DatasetManifest:
        return build_dataset(self.n_patients, self.slices_per_patient, self.labeled_fraction, self.seed,
                             out_dir, H=self.img_size, W=self.img_size)

    def split(self, manifest: DatasetManifest):
        return split_dataset(manifest, self.split_ratio, self.split_seed)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class Arm:
    name: str
    policy: LoadPolicy
    encoder_label: str = ""
    decoder_label: str = ""

    def __post_init__(self):
        if isinstance(self.policy, dict):
            self.policy = LoadPolicy.from_dict(self.policy)

    def to_dict(self):
        return {"name": self.name, "policy": self.policy.to_dict(), "encoder_label": self.encoder_label,
                "decoder_label": self.decoder_label}


def check_arms(arms, sources: dict, net_cfg: NetConfig):
    """Fail fast: every arm's sources exist and its policy applies cleanly.

    Raises:
        ConfigError: duplicate arm names.
        PolicyError: an arm needs a source that is not available.
    """
    names = [a.name for a in arms]
    if len(set(names)) != len(names):
        raise ConfigError(f"arm names must be unique: {names}")
    for a in arms:
        missing = a.policy.sources() - set(sources)
        if missing:
            raise PolicyError(f"arm {a.name!r} needs missing sources {sorted(missing)}")
    for a in arms:
        _, audit = apply_policy(net_cfg, a.policy, sources, seed=0)
        if not audit.ok():
            raise PolicyError(f"arm {a.name!r} fails the load audit: {audit.violations()[:3]}")


def build_encoder_sources(manifest: DatasetManifest, needed, proxy: ProxyConfig, cl: CLConfig,
                          net_cfg: NetConfig, exclude_patients=(), cache_dir=None) -> dict:
    """Build the requested encoder checkpoints along the supervised -> contrastive chain.

    ``needed`` may contain ``supervised``, ``contrastive`` and
    ``contrastive+transfer``; the supervised proxy is built whenever the
    transfer-initialised run needs it. Checkpoints are also written to
    ``cache_dir`` when given.
    """
    needed = set(needed)
    out, timings = {}, {}

    def keep(name, ckpt, t0):
        out[name] = ckpt
        timings[name] = time.perf_counter() - t0
        if cache_dir is not None:
            save_checkpoint(ckpt, Path(cache_dir) / f"{name.replace('+', '_')}.ckpt")
        log.info("built %s source in %.1fs", name, timings[name])

    if needed & {"supervised", "contrastive+transfer"}:
        t0 = time.perf_counter()
        keep("supervised", pretrain_supervised(proxy, net_cfg)[0], t0)
    if "contrastive" in needed:
        t0 = time.perf_counter()
        keep("contrastive", pretrain_contrastive(manifest, cl, None, net_cfg, exclude_patients)[0], t0)
    if "contrastive+transfer" in needed:
        t0 = time.perf_counter()
        keep("contrastive+transfer",
             pretrain_contrastive(manifest, cl, out["supervised"], net_cfg, exclude_patients)[0], t0)
    return out, timings


def _scaled(macro: dict) -> dict:
    return {k: (100 * macro[k] if k in PERCENT else macro[k]) for k in METRICS}


@dataclass
class ArmResult:
    arm: Arm
    seeds: list = field(default_factory=list)
    per_seed: list = field(default_factory=list)
    curves: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def median(self, metric: str) -> float:
        vals = [r[metric] for r in self.per_seed if not math.isnan(r[metric])]
        return float(np.median(vals)) if vals else float("nan")

    def medians(self) -> dict:
        return {m: self.median(m) for m in METRICS}


@dataclass
class AblationReport:
    """Arms x {DSC, MPA, MIoU (percent), HD (pixels)} with per-seed values and medians."""

    title: str
    results: list
    reference: dict = field(default_factory=dict)
    expectations: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    baseline: str | None = None
    diagnostics: dict = field(default_factory=dict)

    def result(self, name: str) -> ArmResult:
        for r in self.results:
            if r.arm.name == name:
                return r
        raise KeyError(name)

    def rows(self) -> list:
        rows = []
        for r in self.results:
            row = {"arm": r.arm.name, "encoder": r.arm.encoder_label, "decoder": r.arm.decoder_label,
                   "n_seeds": len(r.seeds), **r.medians()}
            for m in METRICS:
                row[f"{m}_seeds"] = ";".join(f"{s[m]:.4f}" for s in r.per_seed)
            rows.append(row)
        return rows

    def directional(self, baseline: str, metric: str = "dsc") -> dict:
        """Median ``metric`` of each other arm minus that of ``baseline`` (larger is better for DSC)."""
        base = self.result(baseline).median(metric)
        return {r.arm.name: r.median(metric) - base for r in self.results if r.arm.name != baseline}

    def to_dict(self) -> dict:
        return {
            "title": self.title,
            "baseline": self.baseline,
            "units": {"dsc": "%", "mpa": "%", "miou": "%", "hd": "px"},
            "rows": self.rows(),
            "arms": [{**r.arm.to_dict(), "seeds": r.seeds, "per_seed": r.per_seed, "seconds": r.seconds}
                     for r in self.results],
            "reference": self.reference,
            "expectations": self.expectations,
            "timings": self.timings,
            "diagnostics": self.diagnostics,
        }

    def curves(self) -> dict:
        return {r.arm.name: r.curves for r in self.results}

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out / "report.csv", "json": out / "report.json", "curves": out / "curves.json"}
        rows = self.rows()
        with paths["csv"].open("w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
            for name, ref in self.reference.items():
                f.write(f"# reference {name}: " + " ".join(f"{k}={v}" for k, v in ref.items()) + "\n")
        paths["json"].write_text(json.dumps(self.to_dict(), indent=1))
        paths["curves"].write_text(json.dumps(self.curves()))
        return paths


def run_arms(arms, sources: dict, train_data, test_data, train_cfg: TrainConfig, seeds,
             net_cfg: NetConfig, title: str = "ablation", reference=None, expectations=(),
             baseline: str | None = None) -> AblationReport:
    """Train and evaluate every arm for every seed.

    Args:
        arms: list of :class:`Arm`.
        sources: source name -> Checkpoint, shared by all arms.
        train_data, test_data: labeled manifests or ``(images, masks)`` arrays.
        train_cfg: segmentation config; its seed is replaced per run.
        seeds: seeds to run each arm with.
        net_cfg: network configuration.

    Returns:
        AblationReport with one result per arm, in order.
    """
    if not seeds:
        raise ConfigError("at least one seed is required")
    check_arms(arms, sources, net_cfg)
    train = train_data.load_arrays() if hasattr(train_data, "load_arrays") else train_data
    test = test_data.load_arrays() if hasattr(test_data, "load_arrays") else test_data
    results = []
    for arm in arms:
        res = ArmResult(arm)
        for seed in seeds:
            t0 = time.perf_counter()
            model, _ = apply_policy(net_cfg, arm.policy, sources, seed)
            cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "seed": seed})
            model, curves = train_segmentation(train, test, cfg, model)
            report = aggregate(predict(model, test[0]), test[1])
            res.seeds.append(seed)
            res.per_seed.append(_scaled(report.macro))
            res.curves.append(curves)
            res.seconds.append(time.perf_counter() - t0)
            log.info("arm %s seed %d: %s (%.0fs)", arm.name, seed,
                     {k: round(v, 3) for k, v in res.per_seed[-1].items()}, res.seconds[-1])
        results.append(res)
    return AblationReport(title, results, dict(reference or {}), list(expectations), baseline=baseline)
