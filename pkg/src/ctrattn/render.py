"""Overlay, heatmap and frame-sequence rendering of attention maps."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .metrics import RENDER_THRESHOLD, SMOOTH_LEVELS

SMOOTH_SIGMA = 1.0


def smooth(maps, sigma: float = SMOOTH_SIGMA) -> np.ndarray:
    """Gaussian-smooth each (H, W) map; edges replicate the border value."""
    m = np.asarray(maps, dtype=np.float64)
    sig = (0,) * (m.ndim - 2) + (sigma, sigma)
    return ndimage.gaussian_filter(m, sigma=sig, mode="nearest", truncate=4.0)


def render_smoothed(level_maps) -> np.ndarray:
    """Average of smoothed maps across sparsity levels, scaled to [0, 1].

    ``level_maps``: (L, N, H, W) maps at each level. Scaling divides by the
    per-state maximum so constant inputs stay constant.
    """
    m = smooth(np.asarray(level_maps, dtype=np.float64)).mean(axis=0)
    peak = m.reshape(len(m), -1).max(axis=1)
    peak = np.where(peak > 0, peak, 1.0)
    return np.clip(m / peak[:, None, None], 0.0, 1.0)


def upscale(mask: np.ndarray, size: int) -> np.ndarray:
    k = size // mask.shape[-1]
    return np.kron(mask, np.ones((k, k)))


def overlay(frame: np.ndarray, attention: np.ndarray, alpha: float = 0.6) -> np.ndarray:
    """RGB uint8 image: grayscale frame with attention tinted red."""
    g = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0)
    a = upscale(np.asarray(attention, dtype=np.float64), g.shape[-1])
    rgb = np.stack([g, g, g], axis=-1)
    red = np.zeros_like(rgb)
    red[..., 0] = 1.0
    out = rgb * (1 - alpha * a[..., None]) + red * (alpha * a[..., None])
    return (out * 255.0 + 0.5).astype(np.uint8)


def binarize(psi, threshold: float = RENDER_THRESHOLD) -> np.ndarray:
    return (np.asarray(psi) >= threshold).astype(np.float64)


def save_png(img: np.ndarray, path: Path, scale: int = 4) -> Path:
    im = Image.fromarray(img)
    if scale > 1:
        im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
    path.parent.mkdir(parents=True, exist_ok=True)
    im.save(path)
    return path


def save_heatmap(mean_map: np.ndarray, path: Path, title: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(mean_map, cmap="viridis")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_title(title)
    ax.set_axis_off()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def save_histogram(samples: dict[str, np.ndarray], path: Path, bins: int = 30) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3))
    for name, v in samples.items():
        ax.hist(np.asarray(v), bins=bins, alpha=0.5, label=name)
    ax.set_xlabel("alignment score")
    ax.legend()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def write_overlays(frames, psi, out_dir: Path, prefix: str = "overlay") -> list[Path]:
    """One binarized overlay PNG per state, numbered from 000."""
    return [
        save_png(overlay(f, binarize(p)), out_dir / f"{prefix}_{i:03d}.png") for i, (f, p) in enumerate(zip(frames, psi))
    ]


def write_sequence(frames, maps, out_dir: Path, prefix: str = "frame") -> list[Path]:
    """Numbered continuous-overlay frames standing in for an animation."""
    return [save_png(overlay(f, m), out_dir / f"{prefix}_{i:04d}.png") for i, (f, m) in enumerate(zip(frames, maps))]


__all__ = [
    "SMOOTH_LEVELS",
    "binarize",
    "overlay",
    "render_smoothed",
    "save_heatmap",
    "save_histogram",
    "smooth",
    "write_overlays",
    "write_sequence",
]
