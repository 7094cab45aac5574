"""Colour coding of flow and scalar maps, and report figures."""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import hsv_to_rgb  # noqa: E402

SCALAR_CMAP = "magma"


def colorize_flow(flow: np.ndarray, max_magnitude: float | None = None) -> np.ndarray:
    """(2, H, W) flow -> (H, W, 3) uint8.

    Hue follows the direction (0 = +x, counter-clockwise in image
    coordinates), saturation the magnitude relative to ``max_magnitude``;
    zero motion is white.
    """
    flow = np.nan_to_num(np.asarray(flow, dtype=np.float64))
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"flow must be (2, H, W), got {flow.shape}")
    u, v = flow
    mag = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(mag.max())
    max_magnitude = max(max_magnitude, 1e-12)
    hsv = np.stack([np.mod(np.arctan2(v, u) / (2 * np.pi), 1.0), np.clip(mag / max_magnitude, 0, 1), np.ones_like(u)], -1)
    return np.round(hsv_to_rgb(hsv) * 255).astype(np.uint8)


def colorize_scalar(
    values: np.ndarray, vmin: float | None = None, vmax: float | None = None, valid: np.ndarray | None = None
) -> np.ndarray:
    """(H, W) map -> (H, W, 3) uint8 through a fixed colormap; invalid or
    non-finite pixels are black."""
    values = np.asarray(values, dtype=np.float64)
    ok = np.isfinite(values)
    if valid is not None:
        ok &= np.asarray(valid, bool)
    finite = values[ok]
    if vmin is None:
        vmin = float(finite.min()) if finite.size else 0.0
    if vmax is None:
        vmax = float(finite.max()) if finite.size else 1.0
    lo, hi = vmin, vmax
    span = hi - lo if hi > lo else 1.0
    norm = np.clip((np.where(ok, values, lo) - lo) / span, 0.0, 1.0)
    rgb = matplotlib.colormaps[SCALAR_CMAP](norm)[..., :3]
    rgb[~ok] = 0.0
    return np.round(rgb * 255).astype(np.uint8)


def save_prediction_figure(path, image: np.ndarray, flow, disp, change, gt=None) -> None:
    """Reference view plus the three colour-coded outputs (and ground truth if given)."""
    vmax = float(max(np.nanmax(disp), np.nanmax(change), 1e-6))
    fmax = float(np.hypot(*flow).max())
    rows = [("prediction", flow, disp, change)]
    if gt is not None:
        vmax = max(vmax, float(gt.disp.max()), float(gt.change.max()))
        fmax = max(fmax, float(np.hypot(*gt.flow).max()))
        rows.append(("ground truth", gt.flow, gt.disp, gt.change))
    fig, axes = plt.subplots(len(rows), 4, figsize=(14, 2.2 * len(rows) + 0.4), squeeze=False)
    for r, (label, f, d, c) in enumerate(rows):
        panels = [image.transpose(1, 2, 0), colorize_flow(f, fmax), colorize_scalar(d, 0, vmax), colorize_scalar(c, 0, vmax)]
        titles = ["L1", f"flow ({label})", f"disparity ({label})", f"disparity change ({label})"]
        for ax, img, t in zip(axes[r], panels, titles):
            ax.imshow(np.clip(img, 0, 1) if img.dtype != np.uint8 else img)
            ax.set_title(t, fontsize=9)
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_curves(path, curves: Mapping[str, Sequence[tuple]], ylabel: str, title: str = "", logy: bool = False) -> None:
    """Line plot of named (x, y) series."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, pts in curves.items():
        if len(pts):
            xs, ys = zip(*pts)
            ax.plot(xs, ys, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    if logy:
        ax.set_yscale("log")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_bench_figure(path, rows: Sequence[dict]) -> None:
    names = [r["variant"] for r in rows]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.bar(names, [r["mean_s"] * 1000 for r in rows], color="tab:blue")
    ax1.set_ylabel("forward time (ms)")
    ax2 = ax1.twinx()
    ax2.plot(names, [r["params"] / 1e6 for r in rows], "o-", color="tab:red")
    ax2.set_ylabel("parameters (M)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
