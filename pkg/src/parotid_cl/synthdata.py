"""Synthetic three-channel phantom slices with gland/tumor masks, and dataset manifests.

A phantom is a head-like body ellipse containing a gland ellipse (label 1) and,
optionally, a tumor blob (label 2) strictly inside the gland. The three
channels play the STIR, T1 and T2 roles: they render the same anatomy with
different per-tissue intensities and different monotone texture responses,
then get independent noise. Pixel values are scaled to [0, 1] per channel.

Datasets are written as one ``.npy`` per slice/mask plus a JSON manifest.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, SplitError

CHANNELS = ("STIR", "T1", "T2")
LABEL_PARAM_BASE = 1_000_003

# per-tissue intensity: background, body, gland, tumor
_TISSUE_INTENSITY = np.array([
    [0.00, 0.35, 0.55, 0.95],   # STIR: fat suppressed, lesion bright
    [0.00, 0.70, 0.55, 0.30],   # T1: lesion dark
    [0.00, 0.45, 0.60, 0.85],   # T2
])
_TEXTURE_GAMMA = np.array([1.0, 0.6, 1.6])


@dataclass
class PhantomConfig:
    H: int = 64
    W: int = 64
    tumor_present: bool = True
    noise_std: float = 0.04
    texture_strength: float = 0.12
    # anatomy is drawn from anatomy_seed when given, so slices of one patient share it
    anatomy_seed: int | None = None
    slice_pos: float = 0.0

    def validate(self):
        for name in ("H", "W"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 32 or v % 32:
                raise ConfigError(f"{name}={v!r} must be an integer >= 32 and a multiple of 32")
        if not -1.0 <= self.slice_pos <= 1.0:
            raise ConfigError("slice_pos must lie in [-1, 1]")


@dataclass
class MultimodalSlice:
    pixels: np.ndarray
    slice_id: str = ""
    patient_id: str = ""
    labeled: bool = True


@dataclass
class SegmentationMask:
    labels: np.ndarray


def _anatomy(rng: np.random.Generator, H: int, W: int) -> dict:
    return {
        "body_c": (H * (0.5 + rng.uniform(-0.04, 0.04)), W * (0.5 + rng.uniform(-0.04, 0.04))),
        "body_ax": (H * rng.uniform(0.40, 0.46), W * rng.uniform(0.36, 0.44)),
        "gland_c": (H * rng.uniform(0.35, 0.65), W * rng.uniform(0.30, 0.70)),
        "gland_ax": (H * rng.uniform(0.12, 0.20), W * rng.uniform(0.10, 0.17)),
        "gland_theta": rng.uniform(0, math.pi),
        # tumor position in gland-normalised coordinates, radius as fraction of minor axis
        "tumor_uv": rng.uniform(-0.3, 0.3, size=2),
        "tumor_r": rng.uniform(0.35, 0.55),
    }


def _ellipse_level(yy, xx, c, ax, theta=0.0):
    dy, dx = yy - c[0], xx - c[1]
    ct, st = math.cos(theta), math.sin(theta)
    u = (ct * dx + st * dy) / ax[1]
    v = (-st * dx + ct * dy) / ax[0]
    return u * u + v * v, u, v


def _smooth_field(rng, H, W, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal((H, W)), sigma, mode="wrap")
    return (f - f.min()) / (np.ptp(f) + 1e-12)


def generate_phantom(seed: int, cfg: PhantomConfig | None = None):
    """Render one phantom slice and its mask; a pure function of ``(seed, cfg)``.

    Returns:
        (MultimodalSlice, SegmentationMask) with pixels float32 [3, H, W] and
        labels uint8 [H, W].
    """
    cfg = cfg or PhantomConfig()
    cfg.validate()
    H, W = int(cfg.H), int(cfg.W)
    rng = np.random.default_rng(seed)
    arng = np.random.default_rng(cfg.anatomy_seed) if cfg.anatomy_seed is not None else rng
    anat = _anatomy(arng, H, W)

    # slices away from the centre of a patient volume show a smaller cross-section
    scale = math.sqrt(max(1.0 - 0.5 * cfg.slice_pos ** 2, 0.2))
    jitter = rng.uniform(-0.02, 0.02, size=2) * (H, W)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    body, _, _ = _ellipse_level(yy, xx, anat["body_c"], anat["body_ax"])
    gc = (anat["gland_c"][0] + jitter[0], anat["gland_c"][1] + jitter[1])
    gax = (anat["gland_ax"][0] * scale, anat["gland_ax"][1] * scale)
    gland, u, v = _ellipse_level(yy, xx, gc, gax, anat["gland_theta"])

    labels = np.zeros((H, W), np.uint8)
    tissue = np.zeros((H, W), np.int64)
    tissue[body <= 1.0] = 1
    gland_in = gland <= 1.0
    tissue[gland_in] = 2
    labels[gland_in] = 1

    if cfg.tumor_present:
        tu, tv = anat["tumor_uv"] + rng.uniform(-0.05, 0.05, size=2)
        r = anat["tumor_r"] * (0.6 + 0.4 * scale)
        # lobulated blob in gland coordinates, clipped to the inner gland so it never touches the rim
        ang = np.arctan2(v - tv, u - tu)
        phase = rng.uniform(0, 2 * math.pi, size=2)
        radius = r * (1 + 0.15 * np.cos(3 * ang + phase[0]) + 0.08 * np.cos(5 * ang + phase[1]))
        tumor = (np.hypot(u - tu, v - tv) <= radius) & (gland <= 0.7 ** 2)
        if not tumor.any():
            # degenerate tiny cross-section: the gland's innermost pixel becomes the lesion
            tumor = gland == gland.min()
        tissue[tumor] = 3
        labels[tumor] = 2

    texture = _smooth_field(rng, H, W, sigma=max(H / 32, 1.0))
    pixels = np.empty((3, H, W), np.float32)
    for c in range(3):
        # slight partial-volume blur at tissue boundaries
        base = ndimage.gaussian_filter(_TISSUE_INTENSITY[c][tissue], 0.6)
        tex = texture ** _TEXTURE_GAMMA[c]
        img = base + cfg.texture_strength * (tex - 0.5) * (tissue > 0)
        img = img + cfg.noise_std * rng.standard_normal((H, W))
        lo, hi = np.percentile(img, [0.5, 99.5])
        pixels[c] = np.clip((img - lo) / (hi - lo + 1e-12), 0.0, 1.0)

    return MultimodalSlice(pixels=pixels), SegmentationMask(labels=labels)


# ---------------------------------------------------------------------------
# manifests

@dataclass
class ManifestEntry:
    slice_id: str
    slice_path: str
    patient_id: str
    center_id: str = "c0"
    mask_path: str | None = None
    tumor_present: bool | None = None

    @property
    def labeled(self) -> bool:
        return self.mask_path is not None


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    root: str = "."

    @property
    def labeled_total(self) -> int:
        return sum(e.labeled for e in self.entries)

    @property
    def unlabeled_total(self) -> int:
        return len(self.entries) - self.labeled_total

    def labeled(self) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.labeled], self.root)

    def patients(self) -> list:
        return sorted({e.patient_id for e in self.entries})

    def select_patients(self, ids, include=True) -> "DatasetManifest":
        ids = set(ids)
        return DatasetManifest([e for e in self.entries if (e.patient_id in ids) == include], self.root)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.root) / p

    def validate(self):
        ids = [e.slice_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate slice_id in manifest")
        for e in self.entries:
            if not self.resolve(e.slice_path).exists():
                raise DataError(f"missing slice file {e.slice_path}")
            if e.mask_path is not None and not self.resolve(e.mask_path).exists():
                raise DataError(f"missing mask file {e.mask_path}")

    def to_dict(self) -> dict:
        return {
            "entries": [asdict(e) for e in self.entries],
            "labeled_total": self.labeled_total,
            "unlabeled_total": self.unlabeled_total,
        }

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path, validate=True) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        entries = [ManifestEntry(**e) for e in d["entries"]]
        m = cls(entries, str(path.parent))
        if validate:
            m.validate()
        return m

    def load_arrays(self, labels=True):
        """Stack all slices as float32 [N,3,H,W] (and uint8 masks [N,H,W] for labeled manifests)."""
        if not self.entries:
            raise DataError("empty manifest")
        x = np.stack([np.load(self.resolve(e.slice_path)) for e in self.entries]).astype(np.float32)
        if x.ndim != 4 or x.shape[1] != 3 or not np.isfinite(x).all():
            raise DataError(f"slices must be finite [3,H,W] arrays, got stack {x.shape}")
        if not labels:
            return x
        if any(not e.labeled for e in self.entries):
            raise DataError("manifest contains unlabeled entries")
        y = np.stack([np.load(self.resolve(e.mask_path)) for e in self.entries]).astype(np.int64)
        if y.shape != (x.shape[0],) + x.shape[2:]:
            raise DataError("mask shapes do not match slice shapes")
        if not np.isin(y, (0, 1, 2)).all():
            raise DataError("mask labels must lie in {0,1,2}")
        return x, y


def build_dataset(n_patients: int, slices_per_patient: int, labeled_fraction: float, seed: int,
                  out_dir, H: int = 64, W: int = 64, tumor_fraction: float = 0.85,
                  n_centers: int = 2) -> DatasetManifest:
    """Generate phantom patients and write them under ``out_dir`` with a manifest.

    Exactly ``round(labeled_fraction * total)`` entries carry a mask. Masks are
    written for labeled entries only, mirroring a dataset where only one side
    was annotated.
    """
    if not 0 < labeled_fraction <= 1:
        raise ConfigError("labeled_fraction must lie in (0, 1]")
    total = n_patients * slices_per_patient
    if total <= 0:
        raise ConfigError("dataset would have zero entries")
    out = Path(out_dir)
    (out / "slices").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    n_labeled = int(round(labeled_fraction * total))
    labeled = np.zeros(total, bool)
    labeled[rng.permutation(total)[:n_labeled]] = True
    anatomy_seeds = rng.integers(0, 2**31, size=n_patients)
    tumor = rng.random(total) < tumor_fraction

    entries = []
    k = 0
    for p in range(n_patients):
        pid = f"P{p:04d}"
        for s in range(slices_per_patient):
            pos = 0.0 if slices_per_patient == 1 else -1 + 2 * s / (slices_per_patient - 1)
            cfg = PhantomConfig(H=H, W=W, tumor_present=bool(tumor[k]),
                                anatomy_seed=int(anatomy_seeds[p]), slice_pos=pos)
            sl, mask = generate_phantom(int(seed) * LABEL_PARAM_BASE + k, cfg)
            sid = f"{pid}_S{s:03d}"
            np.save(out / "slices" / f"{sid}.npy", sl.pixels)
            mask_rel = None
            if labeled[k]:
                mask_rel = f"masks/{sid}.npy"
                np.save(out / mask_rel, mask.labels)
            entries.append(ManifestEntry(sid, f"slices/{sid}.npy", pid, f"c{p % n_centers}",
                                         mask_rel, bool(tumor[k])))
            k += 1
    manifest = DatasetManifest(entries, str(out))
    manifest.save(out / "manifest.json")
    return manifest


def split_dataset(manifest: DatasetManifest, ratio: float = 0.8, seed: int = 0,
                  by_patient: bool = True):
    """Train/test split over the labeled entries.

    With ``by_patient`` the split is done over patients so no patient appears in
    both halves; otherwise slices are split directly.
    """
    if not 0 < ratio < 1:
        raise ConfigError("ratio must lie strictly between 0 and 1")
    lab = manifest.labeled()
    rng = np.random.default_rng(seed)
    if not by_patient:
        if len(lab.entries) < 2:
            raise SplitError("need at least 2 labeled slices")
        order = rng.permutation(len(lab.entries))
        n_train = min(max(int(round(ratio * len(order))), 1), len(order) - 1)
        train = [lab.entries[i] for i in sorted(order[:n_train])]
        test = [lab.entries[i] for i in sorted(order[n_train:])]
        return DatasetManifest(train, manifest.root), DatasetManifest(test, manifest.root)

    patients = lab.patients()
    if len(patients) < 2:
        raise SplitError("need at least 2 patients with labeled slices")
    order = rng.permutation(len(patients))
    n_train = min(max(int(round(ratio * len(patients))), 1), len(patients) - 1)
    train_ids = {patients[i] for i in order[:n_train]}
    return lab.select_patients(train_ids), lab.select_patients(train_ids, include=False)
