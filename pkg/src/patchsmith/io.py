"""PNG and tensor I/O. Pixel tensors are channels-first float in [0, 1]."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import torch
from PIL import Image


def to_uint8(img: torch.Tensor) -> np.ndarray:
    arr = img.detach().to(torch.float64).clamp(0, 1).cpu().numpy()
    return np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_png(img: torch.Tensor, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # Fixed encoder settings and no metadata chunks so output bytes are reproducible.
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)
    return path


def read_png(path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def tensor_digest(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()[:16]


def module_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def save_latent(t: torch.Tensor, path) -> Path:
    """Raw ``.npy`` dump; byte-stable for identical tensors."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.save(fh, t.detach().cpu().contiguous().numpy())
    return path


def load_latent(path) -> torch.Tensor:
    return torch.from_numpy(np.load(Path(path)))
