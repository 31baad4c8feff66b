"""Rendering: the PPM classification map and matplotlib figures.

The PPM path is the canonical, dependency-free map output; the figure
helpers write PNG companions for reports and sweeps. Everything renders
off-screen (Agg) and goes straight to files.
"""

from __future__ import annotations

import colorsys

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import DataError


def class_palette(n_classes: int) -> list[tuple[int, int, int]]:
    """RGB color per class id 0..n: index 0 is reserved black, class
    c >= 1 gets hue (c-1)/n at full saturation and value."""
    if n_classes < 1:
        raise DataError(f"palette needs at least 1 class, got {n_classes}")
    palette = [(0, 0, 0)]
    for c in range(1, n_classes + 1):
        r, g, b = colorsys.hsv_to_rgb((c - 1) / n_classes, 1.0, 1.0)
        palette.append((round(255 * r), round(255 * g), round(255 * b)))
    return palette


def render_class_map(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """(H, W) class ids -> (H, W, 3) uint8 image via the fixed palette."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DataError(f"class map needs a 2-d label image, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > n_classes):
        raise DataError(f"labels outside [0, {n_classes}]")
    lut = np.array(class_palette(n_classes), dtype=np.uint8)
    return lut[labels]


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary PPM (P6), 8 bits per channel."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError(f"PPM needs an (H, W, 3) image, got shape {rgb.shape}")
    height, width = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    """Inverse of write_ppm, for tests and quick inspection."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise DataError(f"{path}: not a binary PPM")
        width, height = (int(v) for v in fh.readline().split())
        maxval = int(fh.readline())
        if maxval != 255:
            raise DataError(f"{path}: unsupported max value {maxval}")
        data = fh.read(width * height * 3)
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3)


def save_training_curves(history, path) -> None:
    """Train loss and validation overall accuracy per epoch."""
    epochs = [r.epoch for r in history]
    fig, ax_loss = plt.subplots(figsize=(6.4, 4.0))
    ax_loss.plot(epochs, [r.train_loss for r in history], color="tab:red", label="train loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss", color="tab:red")
    ax_oa = ax_loss.twinx()
    ax_oa.plot(epochs, [r.val_oa for r in history], color="tab:blue", label="val OA")
    ax_oa.set_ylabel("validation OA", color="tab:blue")
    ax_oa.set_ylim(0.0, 1.05)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_confusion_figure(counts: np.ndarray, path, class_names: list[str] | None = None) -> None:
    counts = np.asarray(counts)
    n = counts.shape[0]
    names = class_names if class_names else [f"class {c}" for c in range(1, n + 1)]
    fig, ax = plt.subplots(figsize=(0.6 * n + 2.4, 0.6 * n + 2.0))
    image = ax.imshow(counts, cmap="Blues")
    ax.set_xticks(range(n), names, rotation=45, ha="right")
    ax.set_yticks(range(n), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if n <= 12:
        threshold = counts.max() / 2 if counts.max() else 0
        for i in range(n):
            for j in range(n):
                color = "white" if counts[i, j] > threshold else "black"
                ax.text(j, i, str(counts[i, j]), ha="center", va="center", color=color)
    fig.colorbar(image, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_sweep_figure(rows: list[dict], axis_name: str, path) -> None:
    """Metric-vs-value chart for one sweep; rows with errors are skipped."""
    good = [r for r in rows if not r.get("error")]
    if not good:
        return
    values = [r["value"] for r in good]
    numeric = all(isinstance(v, (int, float)) for v in values)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    x = values if numeric else range(len(values))
    for metric, style in (("oa", "o-"), ("aa", "s-"), ("kappa", "^-")):
        ax.plot(x, [r[metric] for r in good], style, label=metric.upper() if metric != "kappa" else "Kappa")
    if not numeric:
        ax.set_xticks(range(len(values)), [str(v) for v in values])
    ax.set_xlabel(axis_name)
    ax.set_ylabel("score")
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
