"""Forward observation model: LR synthesis, noise, resampling and domain labels.

All resampling goes through explicit separable weight matrices so the same
code serves downsampling (HR -> LR) and lifting LR images back onto the HR
grid. Tensors are ``(..., H, W)`` torch tensors with values nominally in [0, 1].
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass

import numpy as np
import torch

NUM_DOMAINS = 5
DEFAULT_SCALE = 4
METHODS = ("bicubic", "bilinear", "nearest")


class InvalidDomainError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class UnsupportedSynthesisError(ValueError):
    """Raised when asked to synthesize a domain that only exists as paired data."""


class Domain(enum.IntEnum):
    BICUBIC_LR = 0
    BILINEAR_LR = 1
    NEAREST_LR = 2
    REAL_LR = 3
    HR = 4

    @property
    def short(self) -> str:
        return _SHORT_NAMES[self]

    @classmethod
    def parse(cls, value: "Domain | int | str") -> "Domain":
        """Accept a Domain, its integer id, or a short/enum name."""
        if isinstance(value, Domain):
            return value
        if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
            try:
                return cls(int(value))
            except ValueError:
                raise InvalidDomainError(f"unknown domain id {value!r}") from None
        if isinstance(value, str):
            key = value.strip().lower()
            for dom, short in _SHORT_NAMES.items():
                if key in (short, dom.name.lower()):
                    return dom
        raise InvalidDomainError(f"unknown domain {value!r}")


_SHORT_NAMES = {
    Domain.BICUBIC_LR: "bicubic",
    Domain.BILINEAR_LR: "bilinear",
    Domain.NEAREST_LR: "nearest",
    Domain.REAL_LR: "real",
    Domain.HR: "hr",
}

LR_DOMAINS = (Domain.BICUBIC_LR, Domain.BILINEAR_LR, Domain.NEAREST_LR, Domain.REAL_LR)
SYNTHETIC_DOMAINS = {
    Domain.BICUBIC_LR: "bicubic",
    Domain.BILINEAR_LR: "bilinear",
    Domain.NEAREST_LR: "nearest",
}


def encode_label(domain: Domain | int | str) -> torch.Tensor:
    """One-hot vector of length 5 for ``domain``."""
    dom = Domain.parse(domain)
    onehot = torch.zeros(NUM_DOMAINS)
    onehot[int(dom)] = 1.0
    return onehot


def decode_label(onehot) -> Domain:
    vec = torch.as_tensor(onehot).flatten()
    if vec.numel() != NUM_DOMAINS:
        raise InvalidDomainError(f"one-hot vector must have length {NUM_DOMAINS}, got {vec.numel()}")
    hot = torch.nonzero(vec == 1).flatten()
    if hot.numel() != 1 or not torch.all((vec == 0) | (vec == 1)):
        raise InvalidDomainError(f"not a one-hot vector: {vec.tolist()}")
    return Domain(int(hot[0]))


@dataclass(frozen=True)
class DownsampleKernel:
    method: str = "bicubic"
    scale: int = DEFAULT_SCALE
    a: float = -0.75
    antialias: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown resampling method {self.method!r}")
        if not isinstance(self.scale, (int, np.integer)) or self.scale <= 0:
            raise ConfigError(f"scale must be a positive integer, got {self.scale!r}")


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ConfigError(f"noise sigma must be >= 0, got {self.sigma}")


def cubic(x: np.ndarray, a: float = -0.75) -> np.ndarray:
    """Keys cubic convolution kernel."""
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def triangle(x: np.ndarray) -> np.ndarray:
    return np.clip(1.0 - np.abs(x), 0.0, None)


def reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Mirror indices into [0, n) without repeating the edge sample."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


@functools.lru_cache(maxsize=256)
def resample_matrix(n_in: int, n_out: int, method: str, a: float = -0.75,
                    antialias: bool = False) -> np.ndarray:
    """Row-stochastic ``(n_out, n_in)`` matrix mapping a 1-D signal between grids.

    Half-pixel centres (aligned corners off); nearest picks the top-left
    source sample, ``floor(i * n_in / n_out)``.
    """
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"grid sizes must be positive, got {n_in} -> {n_out}")
    if method not in METHODS:
        raise ConfigError(f"unknown resampling method {method!r}")
    mat = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    rows = np.arange(n_out)
    if method == "nearest":
        cols = np.minimum(np.floor(rows * ratio).astype(np.int64), n_in - 1)
        mat[rows, cols] = 1.0
        mat.setflags(write=False)
        return mat

    kernel = (lambda t: cubic(t, a)) if method == "bicubic" else triangle
    radius = 2 if method == "bicubic" else 1
    stretch = ratio if (antialias and ratio > 1) else 1.0
    support = radius * stretch
    for i in rows:
        center = (i + 0.5) * ratio - 0.5
        lo = int(math.floor(center - support)) + 1
        hi = int(math.floor(center + support))
        taps = np.arange(lo, hi + 1)
        w = kernel((taps - center) / stretch)
        w = w / w.sum()
        np.add.at(mat[i], reflect_index(taps, n_in), w)
    mat.setflags(write=False)
    return mat


def _apply_separable(img: torch.Tensor, rows: np.ndarray, cols: np.ndarray) -> torch.Tensor:
    wr = torch.tensor(rows, dtype=img.dtype, device=img.device)
    wc = torch.tensor(cols, dtype=img.dtype, device=img.device)
    return wr @ img @ wc.T


def _check_image(img: torch.Tensor) -> None:
    if img.ndim < 2 or img.shape[-1] < 1 or img.shape[-2] < 1:
        raise ShapeError(f"expected (..., H, W) with H, W >= 1, got {tuple(img.shape)}")


def downsample(img: torch.Tensor, kernel: DownsampleKernel = DownsampleKernel()) -> torch.Tensor:
    """Shrink ``img`` by the kernel's integer scale."""
    _check_image(img)
    s = kernel.scale
    h, w = img.shape[-2:]
    if h % s or w % s:
        raise ShapeError(f"image {h}x{w} not divisible by scale {s}")
    rows = resample_matrix(h, h // s, kernel.method, kernel.a, kernel.antialias)
    cols = resample_matrix(w, w // s, kernel.method, kernel.a, kernel.antialias)
    return _apply_separable(img, rows, cols)


def to_canonical_grid(img: torch.Tensor, s: int = DEFAULT_SCALE, method: str = "bicubic",
                      a: float = -0.75) -> torch.Tensor:
    """Lift an LR-grid image onto the HR grid (``s`` times larger per side)."""
    if not isinstance(s, (int, np.integer)) or s <= 0:
        raise ConfigError(f"scale must be a positive integer, got {s!r}")
    _check_image(img)
    h, w = img.shape[-2:]
    rows = resample_matrix(h, h * s, method, a)
    cols = resample_matrix(w, w * s, method, a)
    return _apply_separable(img, rows, cols)


def add_noise(img: torch.Tensor, spec: NoiseSpec) -> torch.Tensor:
    """Add i.i.d. Gaussian noise with std ``spec.sigma``, reproducible per seed."""
    if spec.sigma == 0:
        return img.clone()
    gen = torch.Generator().manual_seed(int(spec.seed))
    noise = torch.randn(img.shape, generator=gen, dtype=torch.float64)
    return img + (spec.sigma * noise).to(img.dtype)


def synth_lr(hr: torch.Tensor, target: Domain | int | str, noise: NoiseSpec = NoiseSpec(),
             scale: int = DEFAULT_SCALE) -> torch.Tensor:
    """Synthesize a bicubic/bilinear/nearest LR observation of ``hr``."""
    dom = Domain.parse(target)
    if dom == Domain.REAL_LR:
        raise UnsupportedSynthesisError("real LR images come only from paired data")
    if dom == Domain.HR:
        raise InvalidDomainError("HR is not a synthesis target")
    lr = downsample(hr, DownsampleKernel(SYNTHETIC_DOMAINS[dom], scale))
    return add_noise(lr, noise)


def degrade_restore(img: torch.Tensor, scale: int = DEFAULT_SCALE) -> torch.Tensor:
    """Bicubic down-then-up round trip at ``scale`` on the same grid."""
    return to_canonical_grid(downsample(img, DownsampleKernel("bicubic", scale)), scale)
