"""Figures written straight to image files (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def error_vs_steps(rows, path, metric: str = "rmse") -> None:
    """Line plot of ``metric`` against inference step count, one line per mode.

    ``rows`` holds objects with ``count``, ``mode`` and ``report`` attributes.
    """
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for mode in sorted({r.mode for r in rows}):
        sel = sorted((r for r in rows if r.mode == mode), key=lambda r: r.count)
        ax.plot([r.count for r in sel], [getattr(r.report, metric) for r in sel], marker="o", label=mode)
    ax.set_xlabel("inference steps")
    ax.set_ylabel(metric.upper())
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def depth_panel(rgb, raw, refined, pred, gt, mask, path, title: str | None = None) -> None:
    """RGB, raw, refined, predicted and ground-truth depth, plus |pred - gt| over the mask."""
    valid = [a for a in (gt, refined, pred) if a is not None]
    lo, hi = float(np.min(gt)), float(np.max(gt))
    panels = [("rgb", rgb, None), ("raw", raw, "viridis"), ("refined", refined, "viridis"),
              ("prediction", pred, "viridis"), ("ground truth", gt, "viridis")]
    panels = [p for p in panels if p[1] is not None]
    fig, axes = plt.subplots(1, len(panels) + 1, figsize=(2.4 * (len(panels) + 1), 2.4))
    for ax, (name, img, cmap) in zip(axes, panels):
        if cmap is None:
            ax.imshow(np.clip(img, 0, 1))
        else:
            ax.imshow(np.where(img > 0, img, np.nan), cmap=cmap, vmin=lo, vmax=hi)
        ax.set_title(name, fontsize=8)
    err = np.abs((pred if pred is not None else valid[-1]) - gt) * np.asarray(mask, dtype=float)
    im = axes[-1].imshow(err, cmap="magma")
    axes[-1].set_title("|error| in mask", fontsize=8)
    fig.colorbar(im, ax=axes[-1], fraction=0.046)
    for ax in axes:
        ax.set_axis_off()
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def loss_curve(records, path) -> None:
    """Training loss (and its terms when present) against step."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    steps = [r["step"] for r in records]
    for key in ("loss", "l_ddim", "l_pixel", "l_2"):
        if records and key in records[0]:
            ax.plot(steps, [r[key] for r in records], label=key)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
