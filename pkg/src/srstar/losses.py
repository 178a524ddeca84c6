"""Generator/discriminator loss terms and their weighted objectives."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .degradation import ShapeError
from .models import label_batch

G_PARTS = ("per", "gan", "tv", "cls", "l1", "cyc")
D_PARTS = ("gan", "cls")


class TrainingDivergenceError(FloatingPointError):
    def __init__(self, part: str, value: float, iteration: int | None = None):
        where = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"loss term {part!r} is non-finite ({value}){where}")
        self.part = part
        self.iteration = iteration


class BackboneUnavailableError(RuntimeError):
    pass


@dataclass
class LossWeights:
    w_per: float = 1.0
    w_gan: float = 1.0
    w_tv: float = 1.0
    w_cls: float = 1.0
    w_l1: float = 10.0
    w_cyc: float = 10.0
    w_gan_d: float = 1.0
    w_cls_r: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")

    @classmethod
    def zeros(cls) -> "LossWeights":
        return cls(**{f.name: 0.0 for f in fields(cls)})

    def generator(self) -> dict[str, float]:
        return {"per": self.w_per, "gan": self.w_gan, "tv": self.w_tv,
                "cls": self.w_cls, "l1": self.w_l1, "cyc": self.w_cyc}

    def discriminator(self) -> dict[str, float]:
        return {"gan": self.w_gan_d, "cls": self.w_cls_r}


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b)
    return (a - b).abs().mean()


def cycle_loss(source: torch.Tensor, reconstructed: torch.Tensor) -> torch.Tensor:
    return l1_loss(source, reconstructed)


def tv_loss(img: torch.Tensor) -> torch.Tensor:
    """Anisotropic TV: mean |horizontal diff| + mean |vertical diff|."""
    if img.ndim < 2 or img.shape[-1] < 2 or img.shape[-2] < 2:
        raise ShapeError(f"total variation needs H, W >= 2, got {tuple(img.shape)}")
    dx = img[..., :, 1:] - img[..., :, :-1]
    dy = img[..., 1:, :] - img[..., :-1, :]
    return dx.abs().mean() + dy.abs().mean()


def adversarial_g(trg_map_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss, -log sigmoid(fake)."""
    return F.softplus(-trg_map_fake).mean()


def adversarial_d(trg_map_real: torch.Tensor, trg_map_fake: torch.Tensor) -> torch.Tensor:
    return F.softplus(-trg_map_real).mean() + F.softplus(trg_map_fake).mean()


def cls_loss(cls_logits: torch.Tensor, labels) -> torch.Tensor:
    """Cross-entropy of domain logits against the given domain(s)."""
    logits = cls_logits.unsqueeze(0) if cls_logits.ndim == 1 else cls_logits
    target = label_batch(labels, logits.shape[0], logits.dtype).argmax(dim=1)
    return F.cross_entropy(logits, target)


# -- feature backbones -------------------------------------------------------

class FeatureBackbone(nn.Module):
    """Frozen conv feature extractor returning a list of feature maps."""

    provenance = "fixed-random"

    def __init__(self, stages: list[nn.Module], mean=None, std=None, provenance: str | None = None):
        super().__init__()
        self.stages = nn.ModuleList(stages)
        if provenance is not None:
            self.provenance = provenance
        self.register_buffer("mean", torch.tensor(mean if mean is not None else [0.0, 0.0, 0.0]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std if std is not None else [1.0, 1.0, 1.0]).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        single = x.ndim == 3
        h = x.unsqueeze(0) if single else x
        h = (h - self.mean) / self.std
        feats = []
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats


def fixed_random_backbone(seed: int = 0, widths=(16, 32, 32)) -> FeatureBackbone:
    """Three random 3x3 conv+ReLU stages (last two stride 2) with pinned weights."""
    gen = torch.Generator().manual_seed(seed)
    stages = []
    prev = 3
    for i, w in enumerate(widths):
        conv = nn.Conv2d(prev, w, 3, stride=1 if i == 0 else 2, padding=1)
        fan_in = prev * 9
        with torch.no_grad():
            conv.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
            conv.bias.zero_()
        stages.append(nn.Sequential(conv, nn.ReLU()))
        prev = w
    return FeatureBackbone(stages)


_IMAGENET_MEAN = [0.485, 0.456, 0.406]
_IMAGENET_STD = [0.229, 0.224, 0.225]


def pretrained_backbone(name: str = "vgg19", weights_path: str | Path | None = None) -> FeatureBackbone:
    """Pretrained classifier taps from torchvision, without downloading.

    ``vgg19`` yields the relu5_4 map (perceptual loss); ``alexnet`` yields
    its five ReLU maps (LPIPS-style distance). Weights come from
    ``weights_path`` or the local torch hub cache.
    """
    try:
        import torchvision.models as tvm
    except ImportError as exc:
        raise BackboneUnavailableError("torchvision is not installed") from exc
    if name == "vgg19":
        weights, ctor, cuts = tvm.VGG19_Weights.IMAGENET1K_V1, tvm.vgg19, [(0, 36)]
    elif name == "alexnet":
        weights, ctor, cuts = tvm.AlexNet_Weights.IMAGENET1K_V1, tvm.alexnet, [(0, 2), (2, 5), (5, 8), (8, 10), (10, 12)]
    else:
        raise BackboneUnavailableError(f"unknown backbone {name!r}")
    if weights_path is None:
        weights_path = Path(torch.hub.get_dir()) / "checkpoints" / Path(weights.url).name
    weights_path = Path(weights_path)
    if not weights_path.is_file():
        raise BackboneUnavailableError(f"pretrained weights for {name} not found at {weights_path}")
    model = ctor()
    model.load_state_dict(torch.load(weights_path, map_location="cpu", weights_only=True))
    layers = list(model.features)
    stages = [nn.Sequential(*layers[a:b]) for a, b in cuts]
    return FeatureBackbone(stages, _IMAGENET_MEAN, _IMAGENET_STD, provenance="pretrained-classifier")


def load_backbone(spec: str, seed: int = 0) -> FeatureBackbone:
    """Resolve a backbone by name: ``fixed-random``, ``vgg19`` or ``alexnet``."""
    if spec in ("fixed-random", "random"):
        return fixed_random_backbone(seed)
    return pretrained_backbone(spec)


def perceptual_loss(a: torch.Tensor, b: torch.Tensor, backbone: FeatureBackbone | None) -> torch.Tensor:
    """Mean squared distance between the deepest backbone feature maps."""
    if backbone is None:
        raise BackboneUnavailableError("perceptual loss requires a feature backbone")
    _same_shape(a, b)
    fa = backbone(a)[-1]
    fb = backbone(b)[-1]
    return (fa - fb).pow(2).mean()


# -- objectives ---------------------------------------------------------------

def _weighted(parts: dict, weights: dict, names, iteration=None):
    total = 0.0
    for name in names:
        value = parts.get(name, 0.0)
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise TrainingDivergenceError(name, v, iteration)
        total = total + weights[name] * value
    return total


def total_g(parts: dict, weights: LossWeights = LossWeights(), iteration: int | None = None):
    """Weighted generator objective; ``parts`` keys are per/gan/tv/cls/l1/cyc."""
    return _weighted(parts, weights.generator(), G_PARTS, iteration)


def total_d(parts: dict, weights: LossWeights = LossWeights(), iteration: int | None = None):
    """Weighted discriminator objective; ``parts`` keys are gan/cls."""
    return _weighted(parts, weights.discriminator(), D_PARTS, iteration)
