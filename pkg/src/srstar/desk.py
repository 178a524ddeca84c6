"""Small procedural HR corpus for desk-scale runs and tests."""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np
import torch

from .degradation import DownsampleKernel, downsample
from .pngio import to_uint, write_png


def procedural_image(size: int, rng: np.random.Generator, edge_sigma: float = 2.0,
                     max_freq: float = 0.11) -> torch.Tensor:
    """Colour gradient with soft-edged rectangles and discs plus sinusoidal gratings.

    Edges are Gaussian-softened and grating frequencies (cycles per pixel) stay
    below the Nyquist limit of the 4x smaller grid, so most of the detail is
    still present in a downsampled copy and can in principle be restored.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.empty((3, size, size))
    for c in range(3):
        gx, gy, base = rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(0.3, 0.7)
        img[c] = base + gx * (xx / size - 0.5) + gy * (yy / size - 0.5)
    for _ in range(int(rng.integers(3, 6))):
        color = rng.uniform(0.05, 0.95, size=3)
        if rng.integers(0, 2):
            y0, x0 = rng.uniform(0, 0.8, size=2) * size
            h, w = rng.uniform(0.1, 0.5, size=2) * size
            mask = ((yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)).astype(np.float64)
        else:
            cy, cx = rng.uniform(0.1, 0.9, size=2) * size
            r = rng.uniform(0.05, 0.25) * size
            mask = (((yy - cy) ** 2 + (xx - cx) ** 2) < r * r).astype(np.float64)
        if edge_sigma > 0:
            mask = cv2.GaussianBlur(mask, (0, 0), edge_sigma, borderType=cv2.BORDER_REFLECT)
        img = img * (1 - mask) + color[:, None, None] * mask
    for _ in range(3):
        freq = rng.uniform(0.5 * max_freq, max_freq)
        angle, phase = rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.04, 0.1) * rng.choice([-1.0, 1.0], size=3)
        wave = np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
        img = img + amp[:, None, None] * wave
    return torch.from_numpy(np.clip(img, 0, 1)).float()


def make_desk_corpus(folder: str | Path, n: int = 8, size: int = 128, seed: int = 0,
                     real_lr: bool = False, scale: int = 4) -> Path:
    """Write ``n`` procedural HR PNGs to ``folder/HR``.

    With ``real_lr`` a paired ``folder/LR`` is written too, using an
    antialiased bicubic shrink so it differs from the synthetic domains.
    """
    folder = Path(folder)
    rng = np.random.default_rng(seed)
    for i in range(n):
        hr = procedural_image(size, rng)
        # quantize first so the stored PNG round-trips exactly
        hr = torch.from_numpy(to_uint(hr).astype(np.float32) / 255).permute(2, 0, 1)
        write_png(folder / "HR" / f"img_{i:03d}.png", hr)
        if real_lr:
            lr = downsample(hr.double(), DownsampleKernel("bicubic", scale, antialias=True))
            write_png(folder / "LR" / f"img_{i:03d}.png", lr)
    return folder
