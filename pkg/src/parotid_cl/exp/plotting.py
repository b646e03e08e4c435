"""Test-loss curve figures: one per arm plus an overlay, each with a full and a zoomed panel."""

from __future__ import annotations

import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..runtime import log  # noqa: E402


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_").lower() or "arm"


def _runs(entry) -> list:
    """Normalise one arm's curves to a list of test-loss sequences (one per seed)."""
    runs = entry if isinstance(entry, list) else [entry]
    out = []
    for r in runs:
        seq = r.get("test_loss", []) if isinstance(r, dict) else r
        if len(seq):
            out.append(np.asarray(seq, dtype=float))
    return out


def _zoom_limits(series) -> tuple:
    # zoomed panel: from the overall minimum up to the worst value over the second half of training
    tail = np.concatenate([s[len(s) // 2:] for s in series])
    lo = min(float(s.min()) for s in series)
    hi = float(tail.max())
    pad = 0.05 * max(hi - lo, 1e-6)
    return lo - pad, hi + pad


def _dual(fig_title, series: dict, path: Path):
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.8))
    for ax, zoom in zip(axes, (False, True)):
        for label, s in series.items():
            ax.plot(np.arange(1, len(s) + 1), s, label=label, lw=1.4)
        ax.set_xlabel("epoch")
        ax.set_ylabel("test loss")
        ax.grid(alpha=0.3)
        if zoom:
            ax.set_ylim(*_zoom_limits(list(series.values())))
            ax.set_title("zoomed")
        else:
            ax.set_title("full range")
    axes[0].legend(fontsize=7)
    fig.suptitle(fig_title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def emit_plots(curves: dict, out_dir) -> list:
    """Write ``<arm>.png`` per arm and ``overlay.png``.

    Args:
        curves: arm name -> a curves dict (with ``test_loss``) or a list of
            them, one per seed.
        out_dir: output directory, created if needed.

    Returns:
        Paths written. Arms without any test-loss values are skipped with a warning.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written, overlay = [], {}
    for arm, entry in curves.items():
        runs = _runs(entry)
        if not runs:
            log.warning("arm %r has an empty test-loss curve; left out of the plots", arm)
            continue
        per_seed = {f"run {i}": s for i, s in enumerate(runs)}
        path = out / f"{_slug(arm)}.png"
        _dual(arm, per_seed, path)
        written.append(path)
        n = min(len(s) for s in runs)
        overlay[arm] = np.median(np.stack([s[:n] for s in runs]), axis=0)
    if overlay:
        path = out / "overlay.png"
        _dual("test loss, median over runs", overlay, path)
        written.append(path)
    return written
