"""PNG load/save with [0, 1] float conversion (8- and 16-bit)."""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np
import torch

PNG_SUFFIXES = (".png",)


class ImageReadError(OSError):
    pass


def read_png(path: str | Path) -> torch.Tensor:
    """Load an RGB float32 tensor of shape (3, H, W) in [0, 1]."""
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise ImageReadError(f"cannot decode image {path}")
    if arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ImageReadError(f"unsupported pixel type {arr.dtype} in {path}")
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    elif arr.shape[2] == 4:
        arr = cv2.cvtColor(arr, cv2.COLOR_BGRA2RGB)
    else:
        arr = cv2.cvtColor(arr, cv2.COLOR_BGR2RGB)
    data = torch.from_numpy(arr.astype(np.float32) / np.float32(scale))
    return data.permute(2, 0, 1).contiguous()


def to_uint(img: torch.Tensor, bits: int = 8) -> np.ndarray:
    if bits not in (8, 16):
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    peak = 255 if bits == 8 else 65535
    arr = img.detach().to(torch.float64).clamp(0, 1).permute(1, 2, 0).cpu().numpy()
    return np.rint(arr * peak).astype(np.uint8 if bits == 8 else np.uint16)


def write_png(path: str | Path, img: torch.Tensor, bits: int = 8) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = cv2.cvtColor(to_uint(img, bits), cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), arr):
        raise OSError(f"failed to write {path}")


def list_pngs(folder: str | Path) -> list[Path]:
    folder = Path(folder)
    if not folder.is_dir():
        return []
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in PNG_SUFFIXES)
