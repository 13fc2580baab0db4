"""PNG round-tripping for image tensors in [-1, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ShapeError


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """(3, H, W) or (1, 3, H, W) in [-1, 1] -> (H, W, 3) uint8."""
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ShapeError(f"expected a single image, got batch {tuple(x.shape)}")
        x = x[0]
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W), got {tuple(x.shape)}")
    arr = ((x.detach().clamp(-1, 1) + 1.0) * 127.5).round().clamp(0, 255)
    return arr.to(torch.uint8).permute(1, 2, 0).numpy()


def from_uint8(arr: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W, 3) uint8 -> (3, H, W) in [-1, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1).to(dtype)
    return t / 127.5 - 1.0


def save_image(x: torch.Tensor, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(x)).save(path)


def load_image(path: str | Path, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return from_uint8(arr, dtype)
