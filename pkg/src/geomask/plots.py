"""Figures for reports. Rendered with the Agg backend and no metadata so the
same inputs give byte-identical PNGs."""

from __future__ import annotations

from typing import Dict, Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .synth import LULC_CLASSES  # noqa: E402

_SAVE = {"dpi": 100, "metadata": {"Software": None}}


def _save(fig, path) -> None:
    fig.savefig(path, format="png", **_SAVE)
    plt.close(fig)


def loss_curves(histories: Mapping[str, dict], path) -> None:
    """Training loss (and validation CE when present) per run."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in sorted(histories):
        h = histories[name]
        ax.plot(h["step"], h["train_loss"], lw=0.8, label=f"{name} train")
        val = h.get("val") or []
        if val:
            steps = [v["step"] for v in val]
            ax.plot(steps, [float(np.mean(list(v["ce"].values()))) for v in val], "o-", ms=3, label=f"{name} val")
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy (nats)")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    _save(fig, path)


def geoloc_heatmap(grid: np.ndarray, path, truth: Optional[Sequence[float]] = None) -> None:
    """Sampled-location density on the quarter-degree lat/lon grid."""
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.imshow(np.log1p(grid * 1e3), origin="lower", extent=(-180, 180, -90, 90), cmap="magma", aspect="auto")
    if truth is not None:
        ax.plot(truth[1], truth[0], "c+", ms=10)
    ax.set_xlabel("longitude")
    ax.set_ylabel("latitude")
    _save(fig, path)


def _show(ax, name: str, raster: np.ndarray) -> None:
    r = np.asarray(raster)
    if name == "optical":
        img = np.clip(r[[2, 1, 0]].transpose(1, 2, 0) * 3.0, 0, 1)
        ax.imshow(img)
    elif name == "lulc":
        ax.imshow(r[0], cmap="tab10", vmin=0, vmax=9, interpolation="nearest")
    else:
        ax.imshow(r[0], cmap="viridis")
    ax.set_title(name, fontsize=8)
    ax.axis("off")


def chain_panel(sample, generated: Dict[str, object], inputs: Sequence[str], path) -> None:
    """Top row: observed inputs and ground truth; bottom row: generations."""
    targets = [m for m in generated if isinstance(generated[m], np.ndarray) and np.ndim(generated[m]) == 3]
    cols = max(len(inputs), len(targets), 1)
    fig, axes = plt.subplots(2, cols, figsize=(2.2 * cols, 4.6), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for j, m in enumerate(inputs):
        _show(axes[0, j], f"{m}", sample.rasters[m])
    for j, m in enumerate(targets):
        _show(axes[1, j], f"{m} (generated)", generated[m])
    fig.suptitle(f"{sample.sample_id}  classes: {', '.join(LULC_CLASSES)}", fontsize=7)
    _save(fig, path)
