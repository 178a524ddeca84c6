"""Corpus manifests, patch extraction, label sampling and augmentation."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .degradation import (
    DEFAULT_SCALE, Domain, ShapeError, SYNTHETIC_DOMAINS, degrade_restore, synth_lr,
    to_canonical_grid,
)
from .pngio import list_pngs, read_png

log = logging.getLogger(__name__)

HR_DIRNAME = "HR"
REAL_LR_DIRNAME = "LR"
PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
MANIFEST_VERSION = 1


class EmptyCorpusError(ValueError):
    pass


class PatchSizeError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    hr_path: str
    real_lr_path: str | None = None
    available_domains: tuple[int, ...] = ()

    @property
    def domains(self) -> tuple[Domain, ...]:
        return tuple(Domain(d) for d in self.available_domains)

    @property
    def name(self) -> str:
        return Path(self.hr_path).name


@dataclass
class CorpusManifest:
    root: str
    entries: list[ManifestEntry]
    checksum: str
    skipped: int = 0
    version: int = MANIFEST_VERSION

    def __len__(self):
        return len(self.entries)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "root": self.root,
            "checksum": self.checksum,
            "skipped": self.skipped,
            "entries": [asdict(e) for e in self.entries],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusManifest":
        entries = [ManifestEntry(e["hr_path"], e.get("real_lr_path"),
                                 tuple(e["available_domains"])) for e in data["entries"]]
        return cls(data["root"], entries, data["checksum"], data.get("skipped", 0),
                   data.get("version", MANIFEST_VERSION))

    @classmethod
    def load(cls, path: str | Path) -> "CorpusManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _looks_like_png(path: Path) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(8) == PNG_MAGIC
    except OSError:
        return False


def _hr_and_lr_dirs(root: Path) -> tuple[Path, Path | None]:
    if (root / HR_DIRNAME).is_dir():
        hr_dir = root / HR_DIRNAME
    else:
        hr_dir = root
    lr_dir = hr_dir.parent / REAL_LR_DIRNAME if hr_dir.name == HR_DIRNAME else None
    return hr_dir, (lr_dir if lr_dir is not None and lr_dir.is_dir() else None)


def scan_corpus(roots: list[str | Path]) -> CorpusManifest:
    """Index HR images (and same-named real LR images in a sibling ``LR`` folder).

    A root is either a folder of HR PNGs or a folder holding ``HR/`` and an
    optional ``LR/``. Unreadable files are skipped and counted.
    """
    if isinstance(roots, (str, Path)):
        roots = [roots]
    roots = [Path(r) for r in roots]
    entries = []
    skipped = 0
    digest = hashlib.sha256()
    all_domains = sorted(int(d) for d in (*SYNTHETIC_DOMAINS, Domain.HR))
    for root in sorted(roots, key=str):
        hr_dir, lr_dir = _hr_and_lr_dirs(root)
        for hr in list_pngs(hr_dir):
            if not _looks_like_png(hr):
                skipped += 1
                log.warning("skipping unreadable image %s", hr)
                continue
            lr = lr_dir / hr.name if lr_dir is not None else None
            if lr is not None and not lr.exists():
                lr = None
            if lr is not None and not _looks_like_png(lr):
                skipped += 1
                log.warning("skipping unreadable real LR image %s", lr)
                lr = None
            domains = all_domains + ([int(Domain.REAL_LR)] if lr is not None else [])
            entries.append(ManifestEntry(str(hr), str(lr) if lr else None, tuple(sorted(domains))))
    entries.sort(key=lambda e: e.hr_path)
    if not entries:
        raise EmptyCorpusError(f"no readable HR images under {[str(r) for r in roots]}")
    for e in entries:
        for p in (e.hr_path, e.real_lr_path):
            if p is None:
                continue
            digest.update(p.encode())
            digest.update(hashlib.sha256(Path(p).read_bytes()).digest())
    root = str(roots[0]) if len(roots) == 1 else ";".join(str(r) for r in sorted(roots, key=str))
    return CorpusManifest(root, entries, digest.hexdigest(), skipped)


def load_entry(entry: ManifestEntry, scale: int = DEFAULT_SCALE):
    """Decode an entry into ``(hr, real_lr_or_None)`` with HR cropped to ``scale`` x LR."""
    hr = read_png(entry.hr_path)
    if entry.real_lr_path is None:
        h = hr.shape[1] - hr.shape[1] % scale
        w = hr.shape[2] - hr.shape[2] % scale
        return hr[:, :h, :w], None
    lr = read_png(entry.real_lr_path)
    h = min(hr.shape[1] // scale, lr.shape[1])
    w = min(hr.shape[2] // scale, lr.shape[2])
    return hr[:, : h * scale, : w * scale], lr[:, :h, :w]


# -- patches -----------------------------------------------------------------

def patch_offsets(height: int, width: int, size: int, rng: np.random.Generator,
                  scale: int = DEFAULT_SCALE) -> tuple[int, int]:
    """Uniform top-left corner on the ``scale``-aligned lattice."""
    if size % scale:
        raise PatchSizeError(f"patch size {size} not divisible by scale {scale}")
    if size > min(height, width):
        raise PatchSizeError(f"patch size {size} exceeds image {height}x{width}")
    top = int(rng.integers(0, (height - size) // scale + 1)) * scale
    left = int(rng.integers(0, (width - size) // scale + 1)) * scale
    return top, left


def extract_patch(img: torch.Tensor, size: int, rng: np.random.Generator,
                  scale: int = DEFAULT_SCALE) -> torch.Tensor:
    top, left = patch_offsets(img.shape[-2], img.shape[-1], size, rng, scale)
    return img[..., top:top + size, left:left + size]


def extract_paired_patch(hr: torch.Tensor, lr: torch.Tensor | None, size: int,
                         rng: np.random.Generator, scale: int = DEFAULT_SCALE):
    """Crop HR and (optionally) its real LR partner at consistent offsets.

    Returns ``(hr_patch, lr_patch, hr_offset, lr_offset)``; offsets are
    ``(top, left)`` and ``hr_offset == scale * lr_offset``.
    """
    top, left = patch_offsets(hr.shape[-2], hr.shape[-1], size, rng, scale)
    hr_patch = hr[..., top:top + size, left:left + size]
    lr_off = (top // scale, left // scale)
    lr_patch = None
    if lr is not None:
        n = size // scale
        lr_patch = lr[..., lr_off[0]:lr_off[0] + n, lr_off[1]:lr_off[1] + n]
    return hr_patch, lr_patch, (top, left), lr_off


def domain_view(hr_patch: torch.Tensor, lr_patch: torch.Tensor | None, domain: Domain,
                scale: int = DEFAULT_SCALE) -> torch.Tensor | None:
    """The patch as seen in ``domain``, on the HR grid; None if unavailable."""
    domain = Domain.parse(domain)
    if domain == Domain.HR:
        return hr_patch
    if domain == Domain.REAL_LR:
        return None if lr_patch is None else to_canonical_grid(lr_patch, scale)
    return to_canonical_grid(synth_lr(hr_patch, domain, scale=scale), scale)


# -- labels ------------------------------------------------------------------

def sample_target_labels(batch: int, mode: str, rng: np.random.Generator) -> list[Domain]:
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    if mode == "hr_only":
        return [Domain.HR] * batch
    if mode == "random":
        return [Domain(int(i)) for i in rng.integers(0, len(Domain), size=batch)]
    raise ValueError(f"unknown label sampling mode {mode!r}")


# -- geometric augmentation ---------------------------------------------------

def apply_flip_rotate(img: torch.Tensor, hflip: bool, vflip: bool, quarter_turns: int) -> torch.Tensor:
    if hflip:
        img = torch.flip(img, dims=(-1,))
    if vflip:
        img = torch.flip(img, dims=(-2,))
    if quarter_turns % 4:
        img = torch.rot90(img, quarter_turns % 4, dims=(-2, -1))
    return img


def flip_rotate(*imgs, rng: np.random.Generator):
    """Apply one random flip/rotation draw identically to every given tensor.

    ``None`` entries pass through untouched. Returns a tuple.
    """
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    turns = int(rng.integers(0, 4))
    return tuple(None if im is None else apply_flip_rotate(im, hflip, vflip, turns) for im in imgs)


# -- mixture of augmentations ------------------------------------------------

MOA_OPS = ("blend", "rgb_perm", "mixup", "cutout", "cutmix", "cutmixup", "cutblur")
MIXING_OPS = frozenset({"mixup", "cutmix", "cutmixup"})
# ops that corrupt the network input only; supervision targets stay clean
INPUT_ONLY_OPS = frozenset({"cutout", "cutblur"})


def _uniform_probs(total: float = 0.5) -> dict[str, float]:
    return {op: total / len(MOA_OPS) for op in MOA_OPS}


@dataclass
class AugPolicy:
    enabled: bool = True
    probs: dict[str, float] = field(default_factory=_uniform_probs)
    mixup_alpha: float = 1.2
    cut_ratio_range: tuple[float, float] = (0.1, 0.4)
    blend_range: tuple[float, float] = (0.6, 1.0)
    fill_value: float = 0.0

    def __post_init__(self):
        unknown = set(self.probs) - set(MOA_OPS)
        if unknown:
            raise ValueError(f"unknown augmentation ops {sorted(unknown)}")
        if any(p < 0 or p > 1 for p in self.probs.values()):
            raise ValueError("augmentation probabilities must lie in [0, 1]")
        if sum(self.probs.values()) > 1 + 1e-9:
            raise ValueError("augmentation probabilities must sum to <= 1")
        if self.mixup_alpha <= 0:
            raise ValueError("mixup_alpha must be > 0")
        lo, hi = self.cut_ratio_range
        if not 0 < lo <= hi < 1:
            raise ValueError(f"cut_ratio_range must lie inside (0, 1), got {self.cut_ratio_range}")
        self.cut_ratio_range = (float(lo), float(hi))
        self.blend_range = tuple(self.blend_range)


@dataclass
class MoaDraw:
    """One sampled augmentation; ``op`` is None when nothing is applied."""
    op: str | None
    lam: float = 1.0
    box: tuple[int, int, int, int] | None = None  # (top, left, height, width)
    perm: tuple[int, ...] = (0, 1, 2)
    colors: torch.Tensor | None = None  # (B, C) blend colors


def draw_box(height: int, width: int, ratio_range, rng: np.random.Generator):
    """Rectangle whose area fraction lies in ``ratio_range``."""
    lo, hi = ratio_range
    area = height * width
    for _ in range(100):
        ratio = rng.uniform(lo, hi)
        h = int(round(height * np.sqrt(ratio)))
        h = min(max(h, 1), height)
        w = min(max(int(round(ratio * area / h)), 1), width)
        if lo <= h * w / area <= hi:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    raise ShapeError(f"cannot fit a box with area ratio in {ratio_range} into {height}x{width}")


def draw_moa(policy: AugPolicy, batch: int, channels: int, height: int, width: int,
             rng: np.random.Generator) -> MoaDraw:
    if not policy.enabled:
        return MoaDraw(None)
    u = rng.random()
    op = None
    acc = 0.0
    for name in MOA_OPS:
        acc += policy.probs.get(name, 0.0)
        if u < acc:
            op = name
            break
    if op is None:
        return MoaDraw(None)
    draw = MoaDraw(op)
    if op in ("mixup", "cutmixup"):
        draw.lam = float(rng.beta(policy.mixup_alpha, policy.mixup_alpha))
    if op == "blend":
        draw.lam = float(rng.uniform(*policy.blend_range))
        draw.colors = torch.from_numpy(rng.random((batch, channels)))
    if op == "rgb_perm":
        draw.perm = tuple(int(i) for i in rng.permutation(channels))
    if op in ("cutout", "cutmix", "cutmixup", "cutblur"):
        draw.box = draw_box(height, width, policy.cut_ratio_range, rng)
    return draw


def apply_moa(draw: MoaDraw, a: torch.Tensor, b: torch.Tensor, *, fill_value: float = 0.0,
              is_target: bool = False) -> torch.Tensor:
    """Apply a sampled augmentation to ``a`` (B, C, H, W) with partners ``b``."""
    if a.shape != b.shape:
        raise ShapeError(f"augmentation batches differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    op = draw.op
    if op is None or (is_target and op in INPUT_ONLY_OPS):
        return a
    lam = draw.lam
    if op == "mixup":
        return lam * a + (1 - lam) * b
    if op == "blend":
        color = draw.colors.to(a.dtype)[:, :, None, None].expand_as(a)
        return lam * a + (1 - lam) * color
    if op == "rgb_perm":
        return a[:, list(draw.perm)]
    top, left, h, w = draw.box
    region = (slice(None), slice(None), slice(top, top + h), slice(left, left + w))
    out = a.clone()
    if op == "cutout":
        out[region] = fill_value
    elif op == "cutmix":
        out[region] = b[region]
    elif op == "cutmixup":
        out[region] = lam * a[region] + (1 - lam) * b[region]
    elif op == "cutblur":
        out[region] = degrade_restore(a)[region]
    return out


def moa_apply(batch_a: torch.Tensor, batch_b: torch.Tensor, policy: AugPolicy,
              rng: np.random.Generator) -> torch.Tensor:
    """Draw and apply at most one augmentation to ``batch_a``."""
    if batch_a.shape != batch_b.shape:
        raise ShapeError(f"augmentation batches differ in shape: {tuple(batch_a.shape)} vs {tuple(batch_b.shape)}")
    draw = draw_moa(policy, *batch_a.shape, rng)
    return apply_moa(draw, batch_a, batch_b, fill_value=policy.fill_value)
