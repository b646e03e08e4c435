"""Segmentation metrics: DSC, MPA, MIoU and Hausdorff distance.

Per-class values are one-vs-rest; the "mean" figures are macro averages over
the foreground classes {1, 2}. Hausdorff distance is taken over all
foreground pixels of a class (not only the boundary), in pixel units.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DataError, DimensionError

FOREGROUND = (1, 2)
CLASS_NAMES = {1: "parotid", 2: "tumor"}

# best row of the published first ablation (DSC/MPA/MIoU in %, HD in pixels)
REFERENCE_BEST = {"dsc": 89.60, "mpa": 99.36, "miou": 85.11, "hd": 2.98}


class ConfusionCounts(NamedTuple):
    tp: int
    fp: int
    fn: int
    tn: int


def confusion(pred, gt, cls: int) -> ConfusionCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    p = pred == cls
    g = gt == cls
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def dsc(c: ConfusionCounts) -> float:
    den = c.fp + 2 * c.tp + c.fn
    return 1.0 if den == 0 else 2 * c.tp / den


def mpa(c: ConfusionCounts) -> float:
    return (c.tp + c.tn) / (c.fn + c.tp + c.fp + c.tn)


def miou(c: ConfusionCounts) -> float:
    den = c.fn + c.tp + c.fp
    return 1.0 if den == 0 else c.tp / den


def directed_hausdorff(a, b) -> float:
    """max over a in A of the distance from a to its nearest point of B."""
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("point sets must be non-empty")
    d, _ = cKDTree(b).query(a, k=1)
    return float(d.max())


def hausdorff(a, b) -> float:
    """Symmetric Hausdorff distance between two non-empty point sets."""
    return max(directed_hausdorff(a, b), directed_hausdorff(b, a))


def mask_hausdorff(pred_fg: np.ndarray, gt_fg: np.ndarray):
    """Hausdorff distance between two boolean masks, or None if either is empty.

    Uses exact Euclidean distance transforms, which is equivalent to the point
    set definition on the pixel grid.
    """
    if not pred_fg.any() or not gt_fg.any():
        return None
    to_gt = ndimage.distance_transform_edt(~gt_fg)
    to_pred = ndimage.distance_transform_edt(~pred_fg)
    return float(max(to_gt[pred_fg].max(), to_pred[gt_fg].max()))


def slice_metrics(pred, gt, classes=FOREGROUND) -> dict:
    """Per-class {dsc, mpa, miou, hd, vacuous} for one slice; hd is None when undefined."""
    out = {}
    for k in classes:
        c = confusion(pred, gt, k)
        out[k] = {
            "dsc": dsc(c), "mpa": mpa(c), "miou": miou(c),
            "hd": mask_hausdorff(np.asarray(pred) == k, np.asarray(gt) == k),
            "vacuous": c.tp + c.fp + c.fn == 0,
        }
    return out


@dataclass
class MetricsReport:
    per_class: dict = field(default_factory=dict)
    macro: dict = field(default_factory=dict)
    skipped_hd_count: int = 0
    vacuous_count: int = 0
    n_slices: int = 0

    def rows(self) -> list:
        rows = []
        for k, m in self.per_class.items():
            rows.append({"class": CLASS_NAMES.get(int(k), str(k)), **m})
        rows.append({"class": "mean", **self.macro, "n": self.n_slices,
                     "skipped_hd": self.skipped_hd_count})
        return rows

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        d["reference_best"] = REFERENCE_BEST
        return d

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.suffix == ".csv":
            cols = ["class", "dsc", "mpa", "miou", "hd", "n", "skipped_hd"]
            with path.open("w", newline="") as f:
                w = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore")
                w.writeheader()
                for r in self.rows():
                    w.writerow(r)
                f.write("# reference best (%, HD px): " +
                        " ".join(f"{k}={v}" for k, v in REFERENCE_BEST.items()) + "\n")
        else:
            path.write_text(json.dumps(self.to_dict(), indent=1))

    def footer(self) -> str:
        return ("reference best row: DSC {dsc:.2f}  MPA {mpa:.2f}  MIoU {miou:.2f}  HD {hd:.2f}"
                .format(**REFERENCE_BEST))


def aggregate(preds, gts, classes=FOREGROUND) -> MetricsReport:
    """Mean over slices per class, then macro over classes; HD over defined pairs only."""
    preds = list(preds)
    gts = list(gts)
    if not gts:
        raise DataError("empty test set")
    acc = {k: {"dsc": [], "mpa": [], "miou": [], "hd": []} for k in classes}
    skipped = vacuous = 0
    for p, g in zip(preds, gts, strict=True):
        for k, m in slice_metrics(p, g, classes).items():
            for name in ("dsc", "mpa", "miou"):
                acc[k][name].append(m[name])
            if m["hd"] is None:
                skipped += 1
            else:
                acc[k]["hd"].append(m["hd"])
            vacuous += m["vacuous"]
    per_class = {}
    all_hd = []
    for k in classes:
        per_class[k] = {name: float(np.mean(acc[k][name])) for name in ("dsc", "mpa", "miou")}
        per_class[k]["hd"] = float(np.mean(acc[k]["hd"])) if acc[k]["hd"] else math.nan
        per_class[k]["n"] = len(gts)
        per_class[k]["skipped_hd"] = len(gts) - len(acc[k]["hd"])
        all_hd += acc[k]["hd"]
    macro = {name: float(np.mean([per_class[k][name] for k in classes]))
             for name in ("dsc", "mpa", "miou")}
    macro["hd"] = float(np.mean(all_hd)) if all_hd else math.nan
    return MetricsReport(per_class, macro, skipped, vacuous, len(gts))


def predict(model, images, batch_size: int = 32) -> np.ndarray:
    """Arg-max label maps for a float array [N, 3, H, W]."""
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.as_tensor(images[i:i + batch_size])
            out.append(model(x).argmax(dim=1).numpy())
    model.train(was_training)
    return np.concatenate(out).astype(np.uint8)


def evaluate(model, test_manifest) -> MetricsReport:
    """Run ``model`` over every labeled slice of ``test_manifest`` and aggregate."""
    if not test_manifest.entries:
        raise DataError("empty test set")
    x, y = test_manifest.load_arrays()
    return aggregate(predict(model, x), y)
