"""Static figures written with the Agg backend."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "toolseg",
}
# fixed metadata keeps PNG bytes stable across reruns
_PNG_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_META, bbox_inches="tight")
    plt.close(fig)
    return path


def training_curves(epoch_records: dict[str, list[dict]], path: str | Path) -> Path:
    """Loss and test Dice per epoch, one line per labelled run."""
    with plt.rc_context(_STYLE):
        fig, (ax_l, ax_d) = plt.subplots(1, 2, figsize=(9, 3.4))
        for label, recs in epoch_records.items():
            ep = [r["epoch"] for r in recs]
            ax_l.plot(ep, [r["l_sl"] for r in recs], label=f"{label} L_sl")
            if any(r.get("l_cl") is not None for r in recs):
                ax_l.plot(ep, [r["l_cl"] if r["l_cl"] is not None else np.nan for r in recs],
                          ls="--", label=f"{label} L_cl")
            pts = [(r["epoch"], r["test_dice"]) for r in recs if r.get("test_dice") is not None]
            if pts:
                ax_d.plot(*zip(*pts), marker="o", ms=3, label=label)
        ax_l.set_xlabel("epoch")
        ax_l.set_ylabel("loss")
        ax_d.set_xlabel("epoch")
        ax_d.set_ylabel("test Dice")
        ax_d.set_ylim(0, 1)
        ax_l.legend(fontsize=7, frameon=False)
        ax_d.legend(fontsize=7, frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def comparison_bars(labels: Sequence[str], per_seed: Sequence[Sequence[float]], path: str | Path,
                    title: str = "") -> Path:
    """Mean Dice bars with population-std error bars and the individual seeds as dots."""
    means = [float(np.mean(v)) for v in per_seed]
    stds = [float(np.std(v)) for v in per_seed]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(labels), 3.4))
        x = np.arange(len(labels))
        ax.bar(x, means, yerr=stds, capsize=3, color="0.75", edgecolor="0.3")
        for xi, vals in zip(x, per_seed):
            ax.plot(np.full(len(vals), xi), vals, "k.", ms=4)
        ax.set_xticks(x, labels, rotation=20, ha="right")
        ax.set_ylabel("test Dice")
        lo = min(min(v) for v in per_seed) if per_seed else 0.0
        ax.set_ylim(max(0.0, lo - 0.1), 1.0)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def labeled_grid(tiles: Sequence[np.ndarray], labels: Sequence[str], path: str | Path, ncols: int = 4) -> Path:
    n = len(tiles)
    ncols = max(1, min(ncols, n))
    nrows = (n + ncols - 1) // ncols
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(2.2 * ncols, 2.4 * nrows), squeeze=False)
        for ax in axes.flat:
            ax.axis("off")
        for ax, tile, lab in zip(axes.flat, tiles, labels):
            ax.imshow(np.clip(tile, 0, 1), interpolation="nearest")
            ax.set_title(lab, fontsize=7)
        fig.tight_layout()
        return _save(fig, path)
