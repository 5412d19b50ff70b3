"""Physical-condition transforms and patch compositing onto person boxes.

Images and patches are ``(3, H, W)`` tensors in [0, 1]. All operations are
differentiable with respect to the patch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch.nn import functional as F

from . import seeding
from .errors import ConfigError, ShapeMismatchError


@dataclass(frozen=True)
class BoundingBox:
    """Normalized ``(cx, cy, w, h)`` box."""

    cx: float
    cy: float
    w: float
    h: float
    score: float = 1.0
    cls: int = 0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ConfigError(f"box has non-positive extent: {self}")

    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def clamped(self) -> "BoundingBox":
        x1, y1, x2, y2 = (min(max(v, 0.0), 1.0) for v in self.xyxy())
        if x2 <= x1 or y2 <= y1:
            raise ConfigError(f"box lies outside the image: {self}")
        return replace(self, cx=(x1 + x2) / 2, cy=(y1 + y2) / 2, w=x2 - x1, h=y2 - y1)


@dataclass
class SceneSample:
    image: torch.Tensor
    boxes: list[BoundingBox] = field(default_factory=list)
    source_id: str = ""

    def __post_init__(self):
        self.boxes = [b.clamped() for b in self.boxes]


@dataclass(frozen=True)
class TransformRanges:
    brightness: tuple[float, float] = (-0.1, 0.1)
    contrast: tuple[float, float] = (0.8, 1.2)
    noise: tuple[float, float] = (0.0, 0.05)
    rotation: tuple[float, float] = (-20.0, 20.0)
    scale: tuple[float, float] = (0.9, 1.1)

    @classmethod
    def identity(cls) -> "TransformRanges":
        return cls((0.0, 0.0), (1.0, 1.0), (0.0, 0.0), (0.0, 0.0), (1.0, 1.0))

    def validate(self) -> None:
        for name in ("brightness", "contrast", "noise", "rotation", "scale"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"{name} range is inverted: [{lo}, {hi}]")
        if self.contrast[0] <= 0 or self.scale[0] <= 0:
            raise ConfigError("contrast and scale ranges must be positive")
        if self.noise[0] < 0:
            raise ConfigError("noise amplitude must be non-negative")


@dataclass(frozen=True)
class TransformParams:
    brightness_shift: float = 0.0
    contrast_gain: float = 1.0
    noise_amplitude: float = 0.0
    rotation_deg: float = 0.0
    scale_jitter: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class PlacementPolicy:
    """Torso placement: patch width is ``width_frac`` of the box width, its
    centre sits ``center_y_frac`` of the box height below the box top.
    ``height_frac=None`` keeps the patch aspect ratio."""

    width_frac: float = 0.65
    center_y_frac: float = 0.45
    height_frac: float | None = None


def sample_transform(ranges: TransformRanges, seed: int) -> TransformParams:
    ranges.validate()
    rng = np.random.default_rng(seeding.derive_seed(seed, 7))
    draw = {name: float(rng.uniform(*getattr(ranges, name)))
            for name in ("brightness", "contrast", "noise", "rotation", "scale")}
    return TransformParams(draw["brightness"], draw["contrast"], draw["noise"],
                           draw["rotation"], draw["scale"], int(seeding.derive_seed(seed, 8)))


def _warp(img: torch.Tensor, rotation_deg: float, scale: float) -> torch.Tensor:
    th = math.radians(rotation_deg)
    c, s = math.cos(th) / scale, math.sin(th) / scale
    theta = torch.tensor([[c, -s, 0.0], [s, c, 0.0]], dtype=img.dtype)[None]
    grid = F.affine_grid(theta, [1, *img.shape], align_corners=False)
    return F.grid_sample(img[None], grid, mode="bilinear", padding_mode="border", align_corners=False)[0]


def apply_transform(patch: torch.Tensor, params: TransformParams) -> torch.Tensor:
    if patch.dim() != 3:
        raise ShapeMismatchError(f"patch must be (C, H, W), got {tuple(patch.shape)}")
    out = params.contrast_gain * (patch - 0.5) + 0.5 + params.brightness_shift
    if params.noise_amplitude > 0:
        out = out + params.noise_amplitude * seeding.uniform(patch.shape, params.seed, -1.0, 1.0, patch.dtype)
    out = out.clamp(0.0, 1.0)
    if params.rotation_deg != 0.0 or params.scale_jitter != 1.0:
        out = _warp(out, params.rotation_deg, params.scale_jitter)
    return out


def patch_region(box: BoundingBox, image_hw: tuple[int, int], patch_hw: tuple[int, int],
                 geometry: PlacementPolicy) -> tuple[int, int, int, int]:
    """Unclipped integer region ``(top, left, height, width)`` for one box."""
    H, W = image_hw
    bw, bh = box.w * W, box.h * H
    pw = geometry.width_frac * bw
    ph = geometry.height_frac * bh if geometry.height_frac is not None else pw * patch_hw[0] / patch_hw[1]
    pw_i, ph_i = max(1, int(round(pw))), max(1, int(round(ph)))
    cx = box.cx * W
    cy = (box.cy - box.h / 2) * H + geometry.center_y_frac * bh
    left = int(round(cx - pw_i / 2))
    top = int(round(cy - ph_i / 2))
    return top, left, ph_i, pw_i


def _resize(patch: torch.Tensor, h: int, w: int) -> torch.Tensor:
    if (h, w) == tuple(patch.shape[-2:]):
        return patch
    return F.interpolate(patch[None], size=(h, w), mode="bilinear", align_corners=False)[0]


def place_patch(scene: SceneSample, patch: torch.Tensor, geometry: PlacementPolicy | None = None) -> SceneSample:
    """Overwrite the resized patch onto each box, in box order; clipped at image edges."""
    geometry = geometry or PlacementPolicy()
    if not scene.boxes:
        return scene
    img = scene.image.to(patch.dtype).clone()
    H, W = img.shape[-2:]
    for box in scene.boxes:
        top, left, ph, pw = patch_region(box, (H, W), tuple(patch.shape[-2:]), geometry)
        resized = _resize(patch, ph, pw)
        y0, x0 = max(top, 0), max(left, 0)
        y1, x1 = min(top + ph, H), min(left + pw, W)
        if y1 <= y0 or x1 <= x0:
            continue
        img[:, y0:y1, x0:x1] = resized[:, y0 - top:y1 - top, x0 - left:x1 - left]
    return SceneSample(img, list(scene.boxes), scene.source_id)


def render_scene(scene: SceneSample, patch: torch.Tensor, ranges: TransformRanges, seed: int,
                 geometry: PlacementPolicy | None = None) -> SceneSample:
    return place_patch(scene, apply_transform(patch, sample_transform(ranges, seed)), geometry)
