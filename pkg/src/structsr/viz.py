"""PNG grids and loss-curve plots for run directories."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import save_png


def _to_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    return np.clip(img, 0.0, 1.0)


def tile_grid(rows: list[list[np.ndarray]], pad: int = 2) -> np.ndarray:
    """Tile rows of equal-size images into one canvas with white padding."""
    cell_h = max(img.shape[0] for row in rows for img in row)
    cell_w = max(img.shape[1] for row in rows for img in row)
    ncols = max(len(row) for row in rows)
    canvas = np.ones(
        (len(rows) * (cell_h + pad) + pad, ncols * (cell_w + pad) + pad, 3)
    )
    for r, row in enumerate(rows):
        for c, img in enumerate(row):
            img = _to_rgb(img)
            y = pad + r * (cell_h + pad)
            x = pad + c * (cell_w + pad)
            canvas[y : y + img.shape[0], x : x + img.shape[1]] = img
    return canvas


def save_grid(path: Path, rows: list[list[np.ndarray]]) -> None:
    save_png(Path(path), tile_grid(rows))


def upscale_nearest(img: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def plot_loss_log(csv_path: Path, out_path: Path) -> None:
    import csv

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"empty loss log {csv_path}")
    it = [int(r["iteration"]) for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    axes[0].plot(it, [float(r["rec_l2"]) for r in rows])
    axes[0].set_title("reconstruction L2")
    axes[1].plot(it, [float(r["rec_perceptual"]) for r in rows])
    axes[1].set_title("perceptual proxy")
    axes[2].plot(it, [float(r["aux_loss"]) for r in rows])
    axes[2].set_title("auxiliary loss")
    for ax in axes:
        ax.set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def plot_probe(rows: list[dict], out_path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ts = [r["t"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(ts, [r["mse_conditional"] for r in rows], marker="o", label="structural features")
    ax.plot(ts, [r["mse_unconditional"] for r in rows], marker="s", label="token only")
    ax.set_xlabel("timestep")
    ax.set_ylabel("denoised-prediction MSE")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
