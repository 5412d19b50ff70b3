"""Desk-scale world: synthetic patch textures for the toy generator, a toy
detector, scene corpora with reference labels, and on-disk caching of the
trained fixtures."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .diffusion import NoiseSchedule, build_schedule
from .evaluation import generate_reference_labels, with_reference_boxes
from .generator import (
    ConditionRef,
    IdentityCodec,
    ToyPredictor,
    ToyTrainConfig,
    load_toy_predictor,
    make_toy_predictor,
    save_toy_predictor,
)
from .objective import AttackStack
from .render import PlacementPolicy, SceneSample, TransformRanges
from .toydetector import (
    DetectorTrainConfig,
    ToyDetector,
    load_toy_detector,
    make_scene_set,
    make_toy_detector,
    save_toy_detector,
)

log = logging.getLogger(__name__)

TEXTURE_CLASSES = ("stripes", "checker", "blobs")


def texture(kind: str, rng: np.random.Generator, size: int = 16) -> torch.Tensor:
    c1, c2 = rng.uniform(0.1, 0.9, (2, 3, 1, 1))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "stripes":
        th = rng.uniform(0, np.pi)
        period = rng.uniform(4.0, 8.0)
        phase = rng.uniform(0, 2 * np.pi)
        m = 0.5 + 0.5 * np.tanh(3.0 * np.sin((xx * np.cos(th) + yy * np.sin(th)) * 2 * np.pi / period + phase))
        img = c1 * m + c2 * (1 - m)
    elif kind == "checker":
        cell = int(rng.integers(3, 6))
        oy, ox = rng.integers(0, cell, 2)
        m = (((yy + oy) // cell + (xx + ox) // cell) % 2)[None]
        img = np.where(m > 0, c1, c2)
    elif kind == "blobs":
        coarse = torch.from_numpy(rng.uniform(0.1, 0.9, (1, 3, 3, 3)))
        img = F.interpolate(coarse, size=(size, size), mode="bicubic", align_corners=False)[0].numpy()
    else:
        raise ValueError(f"unknown texture {kind!r}")
    return torch.from_numpy(np.clip(img, 0, 1).astype(np.float32))


def make_texture_set(n_per_class: int, seed: int, size: int = 16,
                     kinds=TEXTURE_CLASSES) -> tuple[torch.Tensor, list[int]]:
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for k, kind in enumerate(kinds):
        for _ in range(n_per_class):
            images.append(texture(kind, rng, size))
            labels.append(k)
    return torch.stack(images), labels


@dataclass(frozen=True)
class ToyWorldConfig:
    scene_size: int = 64
    patch_size: int = 16
    n_scenes: int = 200
    n_eval_scenes: int = 100
    detector_steps: int = 2000
    generator_steps: int = 3000
    textures_per_class: int = 300
    T: int = 1000
    schedule_kind: str = "scaled_linear"
    beta_min: float = 0.00085
    beta_max: float = 0.012
    seed: int = 0
    conf_threshold: float = 0.5

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.T, self.schedule_kind, self.beta_min, self.beta_max)

    def fixture_key(self, what: str) -> str:
        if what == "detector":
            fields = {"scene_size": self.scene_size, "steps": self.detector_steps, "seed": self.seed}
        else:
            fields = {"patch_size": self.patch_size, "steps": self.generator_steps,
                      "n": self.textures_per_class, "T": self.T, "seed": self.seed,
                      "schedule": [self.schedule_kind, self.beta_min, self.beta_max]}
        blob = json.dumps({"what": what, **fields}, sort_keys=True).encode()
        return f"{what}-{hashlib.sha256(blob).hexdigest()[:12]}"


@dataclass
class ToyWorld:
    config: ToyWorldConfig
    schedule: NoiseSchedule
    predictor: ToyPredictor
    codec: IdentityCodec
    detector: ToyDetector
    train_scenes: list[SceneSample]
    eval_scenes: list[SceneSample]
    train_reference: dict
    eval_reference: dict
    condition: ConditionRef = field(default_factory=lambda: ConditionRef.label(0, "stripes"))

    def stack(self, ranges: TransformRanges | None = None, geometry: PlacementPolicy | None = None) -> AttackStack:
        return AttackStack(self.predictor, self.codec, self.detector, self.schedule,
                           ranges or TransformRanges(), geometry or PlacementPolicy())

    @property
    def attack_scenes(self) -> list[SceneSample]:
        """Training scenes carrying the detector's clean person boxes."""
        return with_reference_boxes(self.train_scenes, self.train_reference)


def cache_dir(explicit: str | os.PathLike | None = None) -> Path:
    base = explicit or os.environ.get("PATCHSMITH_CACHE") or Path.home() / ".cache" / "patchsmith"
    p = Path(base)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _save_atomic(save, obj, path: Path) -> None:
    # Write-then-rename so a concurrent or interrupted run never sees a partial file.
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    save(obj, tmp)
    os.replace(tmp, path)


def toy_detector(cfg: ToyWorldConfig, cache: Path | None = None) -> ToyDetector:
    path = (cache or cache_dir()) / f"{cfg.fixture_key('detector')}.pt"
    if path.exists():
        return load_toy_detector(path)
    log.info("training toy detector -> %s", path)
    det = make_toy_detector(DetectorTrainConfig(steps=cfg.detector_steps, scene_size=cfg.scene_size, seed=cfg.seed))
    _save_atomic(save_toy_detector, det, path)
    return load_toy_detector(path)


def toy_generator(cfg: ToyWorldConfig, sched: NoiseSchedule, cache: Path | None = None) -> ToyPredictor:
    path = (cache or cache_dir()) / f"{cfg.fixture_key('generator')}.pt"
    if path.exists():
        return load_toy_predictor(path)
    log.info("training toy generator -> %s", path)
    data, labels = make_texture_set(cfg.textures_per_class, cfg.seed + 1, cfg.patch_size)
    pred = make_toy_predictor(data, sched, ToyTrainConfig(steps=cfg.generator_steps, labels=labels, seed=cfg.seed))
    _save_atomic(save_toy_predictor, pred, path)
    return load_toy_predictor(path)


def build_toy_world(cfg: ToyWorldConfig | None = None, cache: str | os.PathLike | None = None) -> ToyWorld:
    cfg = cfg or ToyWorldConfig()
    cdir = cache_dir(cache)
    sched = cfg.schedule()
    detector = toy_detector(cfg, cdir)
    predictor = toy_generator(cfg, sched, cdir)
    train = make_scene_set(cfg.n_scenes, cfg.seed + 20_000, cfg.scene_size, p_empty=0.0)
    evals = make_scene_set(cfg.n_eval_scenes, cfg.seed + 30_000, cfg.scene_size, p_empty=0.0)
    train_ref = generate_reference_labels(detector, train, conf_threshold=cfg.conf_threshold)
    eval_ref = generate_reference_labels(detector, evals, conf_threshold=cfg.conf_threshold)
    return ToyWorld(cfg, sched, predictor, IdentityCodec(predictor.latent_shape), detector,
                    train, evals, train_ref, eval_ref)
