"""Conditional residual generator and dual-head patch discriminator."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .degradation import NUM_DOMAINS, Domain, encode_label


class NumericError(ValueError):
    pass


class SizeError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    in_channels: int = 3
    base_channels: int = 64
    encdec_kernel: int = 5
    res_blocks: int = 5
    res_kernel: int = 3
    label_channels: int = NUM_DOMAINS
    theta_init: float = 1.0
    sigma_init: float = 5.0 / 255.0
    min_size: int = 16

    def __post_init__(self):
        for name in ("in_channels", "base_channels", "encdec_kernel", "res_kernel"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.res_blocks < 1:
            raise ValueError("res_blocks must be >= 1")
        if self.label_channels < 0:
            raise ValueError("label_channels must be >= 0")
        if self.theta_init <= 0 or self.sigma_init <= 0:
            raise ValueError("theta_init and sigma_init must be > 0")


@dataclass
class DiscriminatorConfig:
    image_size: int = 128
    in_channels: int = 3
    base_channels: int = 64
    layers: int = 6
    kernel: int = 4
    stride: int = 2
    negative_slope: float = 0.01
    num_domains: int = NUM_DOMAINS

    def __post_init__(self):
        if self.layers < 1 or self.base_channels < 1:
            raise ValueError("layers and base_channels must be positive")
        if self.image_size % self.downscale or self.image_size < self.downscale:
            raise ValueError(f"image_size {self.image_size} must be a positive multiple of {self.downscale}")

    @property
    def downscale(self) -> int:
        return self.stride ** self.layers

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.layers)]


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def init_weights(model: nn.Module, generator: torch.Generator | None = None, std: float = 0.02) -> None:
    """Zero-mean Gaussian conv weights, zero biases."""
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.normal_(m.weight, 0.0, std, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def projection_apply(residual: torch.Tensor, theta, sigma) -> torch.Tensor:
    """Project each sample of ``residual`` onto the l2 ball of radius theta*sigma*sqrt(N-1).

    A 3-D input is treated as a single sample; N counts its elements.
    """
    single = residual.ndim == 3
    r = residual.unsqueeze(0) if single else residual
    theta = torch.as_tensor(theta, dtype=r.dtype)
    sigma = torch.as_tensor(sigma, dtype=r.dtype).clamp_min(0)
    n = r[0].numel()
    radius = theta * sigma * max(n - 1, 0) ** 0.5
    norm = r.flatten(1).pow(2).sum(dim=1).clamp_min(torch.finfo(r.dtype).tiny).sqrt()
    scale = torch.clamp(radius / norm, max=1.0).view(-1, *([1] * (r.ndim - 1)))
    out = r * scale
    return out.squeeze(0) if single else out


class ProjectionLayer(nn.Module):
    """Trainable l2-ball projection with learned radius scale and noise level.

    Both scalars are stored as logarithms, so they stay strictly positive and
    an optimizer step changes them by a relative amount rather than driving
    them through zero.
    """

    def __init__(self, theta: float = 1.0, sigma: float = 5.0 / 255.0):
        super().__init__()
        self.log_theta = nn.Parameter(torch.tensor(math.log(theta)))
        self.log_sigma = nn.Parameter(torch.tensor(math.log(sigma)))

    @property
    def theta(self) -> torch.Tensor:
        return self.log_theta.exp()

    @property
    def sigma(self) -> torch.Tensor:
        return self.log_sigma.exp()

    def forward(self, residual):
        return projection_apply(residual, self.theta, self.sigma)


class SineResBlock(nn.Module):
    def __init__(self, channels: int, kernel: int):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv2d(channels, channels, kernel, padding=pad, padding_mode="reflect")
        self.conv2 = nn.Conv2d(channels, channels, kernel, padding=pad, padding_mode="reflect")

    def forward(self, x):
        return x + self.conv2(torch.sin(self.conv1(torch.sin(x))))


def label_batch(labels, batch: int, dtype=torch.float32) -> torch.Tensor:
    """Normalise labels (Domain, ids, or a (B, 5) one-hot tensor) to a (B, 5) tensor."""
    if isinstance(labels, torch.Tensor) and labels.ndim == 2:
        out = labels.to(dtype)
    elif isinstance(labels, (Domain, int, str)):
        out = encode_label(labels).to(dtype).expand(batch, -1)
    else:
        out = torch.stack([encode_label(d) for d in labels]).to(dtype)
    if out.shape[0] != batch:
        raise ValueError(f"got {out.shape[0]} labels for a batch of {batch}")
    return out


class Generator(nn.Module):
    """Encoder, sine-activated residual blocks, projection, decoder.

    The one-hot target label is tiled into constant planes and concatenated
    with the image. The projection clips the residual-block features onto an
    l2 ball before the decoder maps them to a 3-channel residual, and the
    output is the input minus that residual, so spatial size is preserved.
    """

    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.cfg = cfg
        c, k = cfg.base_channels, cfg.encdec_kernel
        self.encoder = nn.Conv2d(cfg.in_channels + cfg.label_channels, c, k, padding=k // 2,
                                 padding_mode="reflect")
        self.resnet = nn.Sequential(*[SineResBlock(c, cfg.res_kernel) for _ in range(cfg.res_blocks)])
        self.decoder = nn.Conv2d(c, cfg.in_channels, k, padding=k // 2, padding_mode="reflect")
        self.projection = ProjectionLayer(cfg.theta_init, cfg.sigma_init)

    def forward(self, img: torch.Tensor, labels=None) -> torch.Tensor:
        single = img.ndim == 3
        x = img.unsqueeze(0) if single else img
        h, w = x.shape[-2:]
        if min(h, w) < self.cfg.min_size:
            raise SizeError(f"generator input {h}x{w} below minimum {self.cfg.min_size}")
        if not torch.isfinite(x).all():
            raise NumericError("generator input contains non-finite values")
        feats = x
        if self.cfg.label_channels:
            lab = label_batch(labels, x.shape[0], x.dtype)
            feats = torch.cat([x, lab[:, :, None, None].expand(-1, -1, h, w)], dim=1)
        residual = self.decoder(self.projection(self.resnet(self.encoder(feats))))
        out = x - residual
        return out.squeeze(0) if single else out


class Discriminator(nn.Module):
    """Stride-2 leaky-ReLU conv stack with a patch real/fake head and a domain head."""

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        layers = []
        prev = cfg.in_channels
        pad = (cfg.kernel - cfg.stride) // 2
        for ch in cfg.channels:
            layers += [nn.Conv2d(prev, ch, cfg.kernel, cfg.stride, pad), nn.LeakyReLU(cfg.negative_slope)]
            prev = ch
        self.body = nn.Sequential(*layers)
        self.trg_head = nn.Conv2d(prev, 1, 3, 1, 1, bias=False)
        self.cls_head = nn.Conv2d(prev, cfg.num_domains, cfg.image_size // cfg.downscale, bias=False)

    def forward(self, img: torch.Tensor):
        single = img.ndim == 3
        x = img.unsqueeze(0) if single else img
        h, w = x.shape[-2:]
        step = self.cfg.downscale
        if min(h, w) < self.cfg.image_size or h % step or w % step:
            raise SizeError(f"discriminator needs sides >= {self.cfg.image_size} divisible by {step}, got {h}x{w}")
        feats = self.body(x)
        trg = self.trg_head(feats)
        cls = self.cls_head(feats).mean(dim=(2, 3))
        if single:
            return trg.squeeze(0), cls.squeeze(0)
        return trg, cls


def build_generator(cfg: GeneratorConfig = GeneratorConfig(), seed: int | None = None) -> Generator:
    g = Generator(cfg)
    init_weights(g, None if seed is None else torch.Generator().manual_seed(seed))
    return g


def build_discriminator(cfg: DiscriminatorConfig = DiscriminatorConfig(), seed: int | None = None) -> Discriminator:
    d = Discriminator(cfg)
    init_weights(d, None if seed is None else torch.Generator().manual_seed(seed))
    return d
