"""Full-reference metrics and the per-domain evaluation protocol."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch
import torch.nn.functional as F

from .corpus import CorpusManifest, load_entry
from .degradation import LR_DOMAINS, Domain, ShapeError, synth_lr, to_canonical_grid
from .pngio import write_png

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b):
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def psnr(a, b, max_val: float = 1.0) -> float:
    """PSNR in dB over all elements; identical images give the 99 dB cap."""
    a, b = _pair(a, b)
    mse = float((a - b).pow(2).mean())
    if mse < 1e-12:
        return PSNR_CAP
    return min(10.0 * math.log10(max_val**2 / mse), PSNR_CAP)


def _gaussian_1d(size: int, sigma: float) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - size // 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs sides >= {SSIM_WINDOW}, got {tuple(a.shape)}")
    x = a.reshape(-1, 1, *a.shape[-2:])
    y = b.reshape(-1, 1, *b.shape[-2:])
    g = _gaussian_1d(SSIM_WINDOW, SSIM_SIGMA)
    gv, gh = g.view(1, 1, -1, 1), g.view(1, 1, 1, -1)

    def blur(t):
        return F.conv2d(F.conv2d(t, gv), gh)

    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(smap.mean(dim=(1, 2, 3)).mean())


def lpips(a, b, backbone) -> float | None:
    """Distance between channel-normalised backbone features; None without a backbone."""
    if backbone is None:
        return None
    a, b = _pair(a, b)
    dtype = next(backbone.buffers()).dtype
    fa = backbone(a.to(dtype))
    fb = backbone(b.to(dtype))
    total = 0.0
    for xa, xb in zip(fa, fb):
        na = xa / (xa.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-10)
        nb = xb / (xb.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-10)
        total += float((na - nb).pow(2).sum(dim=1).mean())
    return total


@dataclass
class EvalRecord:
    """Metrics for one LR domain (or the cross-domain average row)."""
    domain: str
    psnr_values: list[float] = field(default_factory=list)
    ssim_values: list[float] = field(default_factory=list)
    lpips_values: list[float] | None = None
    skipped: int = 0
    lpips_note: str = ""
    average_of: dict | None = None  # set on the average row: domain -> (psnr, ssim, lpips)

    @property
    def count(self) -> int:
        return len(self.psnr_values)

    @staticmethod
    def _mean(vals):
        return sum(vals) / len(vals) if vals else float("nan")

    @property
    def psnr(self) -> float:
        if self.average_of is not None:
            return self._mean([v[0] for v in self.average_of.values()])
        return self._mean(self.psnr_values)

    @property
    def ssim(self) -> float:
        if self.average_of is not None:
            return self._mean([v[1] for v in self.average_of.values()])
        return self._mean(self.ssim_values)

    @property
    def lpips(self) -> float | None:
        if self.average_of is not None:
            vals = [v[2] for v in self.average_of.values()]
            return None if any(v is None for v in vals) else self._mean(vals)
        return None if self.lpips_values is None else self._mean(self.lpips_values)


def average_record(records: list[EvalRecord]) -> EvalRecord:
    """Unweighted mean of per-domain means."""
    rows = {r.domain: (r.psnr, r.ssim, r.lpips) for r in records if r.count}
    note = records[0].lpips_note if records else ""
    return EvalRecord("average", lpips_note=note, average_of=rows)


def lr_input(hr: torch.Tensor, real_lr: torch.Tensor | None, domain: Domain, scale: int = 4):
    """The LR observation of an entry in ``domain``; None when it does not exist."""
    if domain == Domain.REAL_LR:
        return real_lr
    return synth_lr(hr, domain, scale=scale)


@torch.no_grad()
def super_resolve(generator: Callable, lr: torch.Tensor, scale: int = 4) -> torch.Tensor:
    """Blind SR: lift to the HR grid and translate to the HR domain."""
    lifted = to_canonical_grid(lr.float(), scale)
    return generator(lifted.unsqueeze(0), Domain.HR)[0].clamp(0, 1)


def identity_generator(img, labels=None):
    """Stub generator returning its input; its scores are the bicubic-upsampling baseline."""
    return img


def evaluate(generator, manifest: CorpusManifest, domains, backbone=None, scale: int = 4,
             panel_dir: str | Path | None = None, panel_limit: int = 4) -> list[EvalRecord]:
    """Super-resolve every entry from each LR domain and score against HR.

    ``generator`` is a checkpoint path or a callable ``(img, label) -> img``.
    Returns one record per domain followed by the average row (empty list for
    no domains). Entries without an LR observation or HR ground truth are
    skipped and counted.
    """
    domains = [Domain.parse(d) for d in domains]
    if not domains:
        return []
    if isinstance(generator, (str, Path)):
        from .trainer import load_generator
        generator = load_generator(generator)
    note = ""
    if backbone is not None:
        note = "" if getattr(backbone, "provenance", "") == "pretrained-classifier" else "non-comparable-to-paper"
    else:
        note = "unavailable"
    records = []
    for dom in domains:
        if dom not in LR_DOMAINS:
            raise ValueError(f"evaluation domains must be LR domains, got {dom.name}")
        rec = EvalRecord(dom.short, lpips_values=[] if backbone is not None else None, lpips_note=note)
        for i, entry in enumerate(manifest.entries):
            try:
                hr, real_lr = load_entry(entry, scale)
            except OSError:
                rec.skipped += 1
                continue
            lr = lr_input(hr, real_lr, dom, scale)
            if lr is None:
                rec.skipped += 1
                continue
            sr = super_resolve(generator, lr, scale)
            rec.psnr_values.append(psnr(sr, hr))
            rec.ssim_values.append(ssim(sr, hr))
            if backbone is not None:
                rec.lpips_values.append(lpips(sr, hr, backbone))
            if panel_dir is not None and i < panel_limit:
                write_png(Path(panel_dir) / f"{dom.short}_{Path(entry.hr_path).stem}.png",
                          make_panel(lr, sr, hr, scale))
        records.append(rec)
    records.append(average_record(records))
    return records


def make_panel(lr: torch.Tensor, sr: torch.Tensor, hr: torch.Tensor, scale: int = 4, gap: int = 4) -> torch.Tensor:
    """Side-by-side LR (pixel-replicated) | SR | HR strip."""
    lr_big = to_canonical_grid(lr.double(), scale, "nearest").float().clamp(0, 1)
    h = hr.shape[-2]
    sep = torch.ones(3, h, gap)
    return torch.cat([lr_big, sep, sr.float(), sep, hr.float()], dim=2)


TABLE_COLUMNS = ("domain", "images", "skipped", "psnr_db", "ssim", "lpips", "lpips_note")


def records_to_rows(records: list[EvalRecord]) -> list[dict]:
    rows = []
    for r in records:
        lp = r.lpips
        rows.append({
            "domain": r.domain,
            "images": r.count if r.average_of is None else sum(x.count for x in records if x.average_of is None),
            "skipped": r.skipped,
            "psnr_db": f"{r.psnr:.4f}",
            "ssim": f"{r.ssim:.4f}",
            "lpips": "n/a" if lp is None else f"{lp:.4f}",
            "lpips_note": r.lpips_note,
        })
    return rows


def write_results_table(records: list[EvalRecord], path: str | Path, delimiter: str = "\t") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS, delimiter=delimiter)
        writer.writeheader()
        writer.writerows(records_to_rows(records))
    return path
