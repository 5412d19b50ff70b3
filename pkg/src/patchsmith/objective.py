"""Victim-detector contract and the attack loss stack.

``total = mean_i L_det(I_i with P') + λ · L_tv(P')`` where ``P'`` is the
decoded APS resample of the optimized latent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence, runtime_checkable

import torch

from . import seeding
from .diffusion import LatentState, NoiseSchedule, SamplerConfig, aps_sample
from .errors import ConfigError, ShapeMismatchError, StageError
from .render import BoundingBox, PlacementPolicy, SceneSample, TransformRanges, render_scene

TV_EPS = 1e-8
PERSON = 0


@dataclass
class Detection:
    box: BoundingBox
    objectness: float | torch.Tensor
    class_probs: dict[int, float | torch.Tensor]

    def score(self, cls: int = PERSON):
        return self.objectness * self.class_probs[cls]


@dataclass
class RawDetections:
    """Dense pre-threshold detector output for a batch.

    ``boxes`` is ``(B, K, 4)`` normalized cx, cy, w, h; ``objectness`` is
    ``(B, K)``; ``class_probs`` is ``(B, K, C)``.
    """

    boxes: torch.Tensor
    objectness: torch.Tensor
    class_probs: torch.Tensor


@runtime_checkable
class DetectorContract(Protocol):
    input_size: int
    classes: Sequence[int]

    def raw(self, images: torch.Tensor) -> RawDetections:
        ...

    def detect(self, image: torch.Tensor, conf_threshold: float = 0.5) -> list[Detection]:
        ...


def detector_loss(detections: Sequence[Detection], person_class: int = PERSON, classes=None):
    """Confidence of the most salient person: max of objectness × class prob.
    An empty list scores 0."""
    if classes is not None and person_class not in classes:
        raise ConfigError(f"class {person_class} is not produced by this detector")
    confs = []
    for det in detections:
        if person_class not in det.class_probs:
            raise ConfigError(f"class {person_class} missing from detection class_probs")
        confs.append(det.objectness * det.class_probs[person_class])
    if not confs:
        return 0.0
    if any(isinstance(c, torch.Tensor) for c in confs):
        return torch.stack([torch.as_tensor(c) for c in confs]).max()
    return max(confs)


def max_person_confidence(raw: RawDetections, person_class: int = PERSON) -> torch.Tensor:
    """Per-image differentiable ``max_j obj_j · cls_j`` over all dense predictions."""
    if not 0 <= person_class < raw.class_probs.shape[-1]:
        raise ConfigError(f"class {person_class} is not produced by this detector")
    conf = raw.objectness * raw.class_probs[..., person_class]
    if conf.shape[-1] == 0:
        return conf.new_zeros(conf.shape[:-1])
    return conf.amax(dim=-1)


def tv_loss(patch: torch.Tensor, eps: float = TV_EPS) -> torch.Tensor:
    """Smoothed total variation over interior pixels (those with both a
    next-row and a next-column neighbour), summed over channels."""
    p = patch if patch.dim() == 3 else patch[None]
    if p.dim() != 3:
        raise ShapeMismatchError(f"patch must be (H, W) or (C, H, W), got {tuple(patch.shape)}")
    H, W = p.shape[-2:]
    if H < 2 and W < 2:
        raise ShapeMismatchError("TV needs at least two pixels along one axis")
    if H < 2 or W < 2:
        return p.sum() * 0.0
    d_row = p[:, 1:, :-1] - p[:, :-1, :-1]
    d_col = p[:, :-1, 1:] - p[:, :-1, :-1]
    return torch.sqrt(d_row ** 2 + d_col ** 2 + eps).sum()


@dataclass
class LossBreakdown:
    det_term: torch.Tensor
    tv_term: torch.Tensor
    lam: float
    total: torch.Tensor
    patch: torch.Tensor | None = field(default=None, repr=False)

    def as_row(self) -> dict[str, float]:
        return {"det_term": float(self.det_term.detach()), "tv_term": float(self.tv_term.detach()),
                "lambda": self.lam, "total": float(self.total.detach())}


@dataclass
class AttackStack:
    """Components bound together for the attack objective. ``detector`` may
    be a sequence, in which case detector losses are averaged (ensemble)."""

    predictor: object
    codec: object
    detector: object
    schedule: NoiseSchedule
    ranges: TransformRanges = field(default_factory=TransformRanges)
    geometry: PlacementPolicy = field(default_factory=PlacementPolicy)
    person_class: int = PERSON

    @property
    def detectors(self) -> list:
        d = self.detector
        return list(d) if isinstance(d, (list, tuple)) else [d]


def resample(latent: LatentState, cfg: SamplerConfig, stack: AttackStack) -> torch.Tensor:
    return stack.codec.decode(aps_sample(latent, cfg, stack.predictor, stack.schedule).value)


def batch_objective(scenes: Sequence[SceneSample], patch_latent: LatentState, sampler_cfg: SamplerConfig,
                    stack: AttackStack, lam: float = 0.1, render_seed: int | None = None) -> LossBreakdown:
    if len(scenes) < 1:
        raise ConfigError("batch_objective needs at least one scene")
    render_seed = sampler_cfg.seed if render_seed is None else render_seed
    try:
        patch = resample(patch_latent, sampler_cfg, stack)
    except Exception as exc:
        raise StageError("sample", exc) from exc
    try:
        images = torch.stack([
            render_scene(sc, patch, stack.ranges, seeding.derive_seed(render_seed, i), stack.geometry).image.to(patch.dtype)
            for i, sc in enumerate(scenes)])
    except Exception as exc:
        raise StageError("render", exc) from exc
    # A scene without person boxes has nothing to suppress and contributes 0.
    has_person = torch.tensor([bool(sc.boxes) for sc in scenes], dtype=patch.dtype)
    try:
        per_detector = [(max_person_confidence(det.raw(images), stack.person_class) * has_person).mean()
                        for det in stack.detectors]
        det_term = torch.stack(per_detector).mean()
    except Exception as exc:
        raise StageError("detect", exc) from exc
    tv = tv_loss(patch)
    return LossBreakdown(det_term, tv, float(lam), det_term + lam * tv, patch)
