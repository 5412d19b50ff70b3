"""Synthetic pedestrian scenes and a small grid detector trained on them.

Persons are drawn as head + torso + legs over smooth textured backgrounds
with distractor blobs. Torsos carry random shirt colours and prints so the
detector keys on silhouette rather than clothing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import kernels
from .errors import NumericError
from .objective import PERSON, Detection, RawDetections
from .render import BoundingBox, SceneSample

log = logging.getLogger(__name__)


# ----------------------------------------------------------------- scenes


def _smooth_field(rng, size, cells, lo, hi):
    coarse = torch.from_numpy(rng.uniform(lo, hi, (1, 3, cells, cells)))
    return F.interpolate(coarse, size=(size, size), mode="bicubic", align_corners=False)[0].clamp(0, 1).numpy()


def _print_texture(rng, h, w):
    kind = rng.integers(0, 4)
    base = rng.uniform(0, 1, 3)[:, None, None]
    if kind == 0:
        return np.broadcast_to(base, (3, h, w)).copy()
    other = rng.uniform(0, 1, 3)[:, None, None]
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 1:
        th = rng.uniform(0, np.pi)
        period = rng.uniform(2.5, 6.0)
        mask = (np.sin((xx * np.cos(th) + yy * np.sin(th)) * 2 * np.pi / period) > 0)
        return np.where(mask[None], base, other)
    if kind == 2:
        return rng.uniform(0, 1, (3, h, w))
    cell = rng.integers(2, 5)
    mask = ((yy // cell + xx // cell) % 2).astype(bool)
    return np.where(mask[None], base, other)


def draw_person(img, rng, left, top, w, h, textured=True):
    """Paint one person into ``img`` (3, S, S) in place; pixel-space box."""
    S = img.shape[-1]
    yy, xx = np.mgrid[0:S, 0:S]
    cx = left + w / 2
    skin = np.clip(np.array([0.85, 0.65, 0.5]) + rng.uniform(-0.12, 0.12, 3), 0, 1)
    pants = rng.uniform(0.0, 0.4, 3)
    r = 0.12 * h
    head = (xx + 0.5 - cx) ** 2 + (yy + 0.5 - (top + r)) ** 2 <= r ** 2
    img[:, head] = skin[:, None]
    t0, t1 = int(round(top + 0.22 * h)), int(round(top + 0.62 * h))
    x0, x1 = int(round(left)), int(round(left + w))
    th, tw = max(t1 - t0, 1), max(x1 - x0, 1)
    shirt = _print_texture(rng, th, tw) if textured else np.broadcast_to(rng.uniform(0, 1, 3)[:, None, None], (3, th, tw))
    img[:, t0:t1, x0:x1] = shirt[:, : img[:, t0:t1, x0:x1].shape[1], : img[:, t0:t1, x0:x1].shape[2]]
    l0, l1 = t1, int(round(top + h))
    for a, b in ((left + 0.08 * w, cx - 0.06 * w), (cx + 0.06 * w, left + 0.92 * w)):
        img[:, l0:l1, int(round(a)):int(round(b))] = pants[:, None, None]


def synth_scene(rng: np.random.Generator, size: int = 64, max_persons: int = 3,
                p_empty: float = 0.1, textured: bool = True) -> tuple[np.ndarray, list[BoundingBox]]:
    img = _smooth_field(rng, size, 4, 0.2, 0.85)
    img = np.clip(img + rng.normal(0, 0.02, img.shape), 0, 1)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(0, 4)):
        col = rng.uniform(0, 1, 3)[:, None]
        cx, cy, rad = rng.uniform(0, size, 2).tolist() + [rng.uniform(3, 8)]
        if rng.random() < 0.5:
            m = (xx - cx) ** 2 + (yy - cy) ** 2 <= rad ** 2
        else:
            m = (np.abs(xx - cx) <= rad) & (np.abs(yy - cy) <= rad * rng.uniform(0.4, 1.6))
        img[:, m] = col

    n = 0 if rng.random() < p_empty else int(rng.integers(1, max_persons + 1))
    placed: list[tuple[float, float, float, float]] = []
    boxes = []
    for _ in range(n * 20):
        if len(placed) == n:
            break
        w = rng.uniform(0.19, 0.28) * size
        h = w * rng.uniform(1.9, 2.3)
        left = rng.uniform(1, size - w - 1)
        top = rng.uniform(1, size - h - 1)
        if any(left < l2 + w2 + 2 and l2 < left + w + 2 for l2, _, w2, _ in placed):
            continue
        placed.append((left, top, w, h))
        draw_person(img, rng, left, top, w, h, textured)
        boxes.append(BoundingBox((left + w / 2) / size, (top + h / 2) / size, w / size, h / size))
    return img.astype(np.float32), boxes


def make_scene_set(n: int, seed: int, size: int = 64, **kw) -> list[SceneSample]:
    rng = np.random.default_rng(seed)
    scenes = []
    for i in range(n):
        img, boxes = synth_scene(rng, size, **kw)
        scenes.append(SceneSample(torch.from_numpy(img), boxes, f"synth-{seed}-{i:05d}"))
    return scenes


# --------------------------------------------------------------- detector


class GridDetectorNet(nn.Module):
    """Single-class detector: one prediction per stride-8 cell."""

    def __init__(self, width: int = 32):
        super().__init__()
        w = width
        self.body = nn.Sequential(
            nn.Conv2d(3, w // 2, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w // 2, w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=2, dilation=2), nn.SiLU(),
        )
        self.head = nn.Conv2d(2 * w, 6, 1)

    def forward(self, x):
        return self.head(self.body(x))


def _decode(out: torch.Tensor) -> RawDetections:
    B, _, gh, gw = out.shape
    rows = torch.arange(gh, dtype=out.dtype).view(1, gh, 1)
    cols = torch.arange(gw, dtype=out.dtype).view(1, 1, gw)
    obj = torch.sigmoid(out[:, 0])
    cls = torch.sigmoid(out[:, 1])
    cx = (cols + torch.sigmoid(out[:, 2])) / gw
    cy = (rows + torch.sigmoid(out[:, 3])) / gh
    w = torch.sigmoid(out[:, 4])
    h = torch.sigmoid(out[:, 5])
    boxes = torch.stack([cx, cy, w, h], dim=-1).reshape(B, gh * gw, 4)
    return RawDetections(boxes, obj.reshape(B, -1), cls.reshape(B, -1, 1))


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return np.stack([b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2, b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2], 1)


def postprocess(raw: RawDetections, conf_threshold: float = 0.5, nms_iou: float = 0.45,
                person_class: int = PERSON) -> list[list[Detection]]:
    out = []
    boxes_all = raw.boxes.detach().double().cpu().numpy()
    obj_all = raw.objectness.detach().double().cpu().numpy()
    cls_all = raw.class_probs.detach().double().cpu().numpy()
    for b in range(boxes_all.shape[0]):
        score = obj_all[b] * cls_all[b, :, person_class]
        idx = np.flatnonzero(score >= conf_threshold)
        dets = []
        if idx.size:
            keep = idx[kernels.nms(cxcywh_to_xyxy(boxes_all[b, idx]), score[idx], nms_iou)]
            for k in keep:
                cx, cy, w, h = (float(v) for v in boxes_all[b, k])
                if w <= 0 or h <= 0:
                    continue
                box = BoundingBox(cx, cy, w, h, float(score[k]), person_class)
                dets.append(Detection(box, float(obj_all[b, k]),
                                      {c: float(cls_all[b, k, c]) for c in range(cls_all.shape[-1])}))
        out.append(dets)
    return out


class ToyDetector:
    """Detector contract over :class:`GridDetectorNet`."""

    classes = (PERSON,)

    def __init__(self, net: GridDetectorNet, input_size: int = 64, nms_iou: float = 0.45, metadata: dict | None = None):
        net.eval().requires_grad_(False)
        self.net = net
        self.input_size = input_size
        self.nms_iou = nms_iou
        self.metadata = metadata or {}
        self._by_dtype = {torch.float32: net}

    def _net_for(self, dtype):
        if dtype not in self._by_dtype:
            import copy

            self._by_dtype[dtype] = copy.deepcopy(self.net).to(dtype)
        return self._by_dtype[dtype]

    def raw(self, images: torch.Tensor) -> RawDetections:
        x = images if images.dim() == 4 else images[None]
        if x.shape[-1] != self.input_size or x.shape[-2] != self.input_size:
            x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False)
        return _decode(self._net_for(x.dtype)(x))

    def detect(self, image: torch.Tensor, conf_threshold: float = 0.5) -> list[Detection]:
        with torch.no_grad():
            return postprocess(self.raw(image.to(torch.float32)), conf_threshold, self.nms_iou)[0]

    def detect_batch(self, images: torch.Tensor, conf_threshold: float = 0.5) -> list[list[Detection]]:
        # One image per forward pass: keeps results independent of batch composition.
        return [self.detect(img, conf_threshold) for img in images]


@dataclass
class DetectorTrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 2e-3
    width: int = 32
    n_train: int = 3000
    n_holdout: int = 200
    scene_size: int = 64
    seed: int = 0
    min_map: float = 0.95


def _targets(boxes_list, grid):
    B = len(boxes_list)
    pos = torch.zeros(B, grid, grid)
    tgt = torch.zeros(B, 4, grid, grid)
    for b, boxes in enumerate(boxes_list):
        for box in boxes:
            col = min(int(box.cx * grid), grid - 1)
            row = min(int(box.cy * grid), grid - 1)
            pos[b, row, col] = 1.0
            tgt[b, :, row, col] = torch.tensor([box.cx * grid - col, box.cy * grid - row, box.w, box.h])
    return pos, tgt


def detection_map(detector, scenes, iou_threshold=0.5, conf_threshold=0.05, interpolation="allpoint") -> float:
    """AP against the scenes' own ground-truth boxes (fixture acceptance)."""
    from .evaluation import average_precision

    dets = [detector.detect(sc.image, conf_threshold) for sc in scenes]
    return average_precision([[d.box for d in ds] for ds in dets], [sc.boxes for sc in scenes],
                             iou_threshold, interpolation)


def make_toy_detector(train_cfg: DetectorTrainConfig | None = None) -> ToyDetector:
    cfg = train_cfg or DetectorTrainConfig()
    torch.manual_seed(cfg.seed)
    scenes = make_scene_set(cfg.n_train, cfg.seed, cfg.scene_size)
    holdout = make_scene_set(cfg.n_holdout, cfg.seed + 10_000, cfg.scene_size)
    images = torch.stack([sc.image for sc in scenes])
    grid = cfg.scene_size // 8
    pos, tgt = _targets([sc.boxes for sc in scenes], grid)

    net = GridDetectorNet(cfg.width)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(cfg.steps, 1))
    gen = torch.Generator().manual_seed(cfg.seed)
    last = float("nan")
    for step in range(cfg.steps):
        idx = torch.randint(0, len(scenes), (cfg.batch_size,), generator=gen)
        x, p, t = images[idx], pos[idx], tgt[idx]
        if torch.rand(1, generator=gen).item() < 0.5:  # horizontal flip
            x, p, t = x.flip(-1), p.flip(-1), t.flip(-1).clone()
            t[:, 0] = torch.where(p > 0, 1.0 - t[:, 0], t[:, 0])
        out = net(x)
        l_obj = F.binary_cross_entropy_with_logits(out[:, 0], p, pos_weight=torch.tensor(4.0))
        mask = p > 0
        l_cls = F.binary_cross_entropy_with_logits(out[:, 1][mask], torch.ones_like(out[:, 1][mask]))
        pred_box = torch.stack([torch.sigmoid(out[:, k]) for k in range(2, 6)], 1)
        l_box = ((pred_box - t) ** 2).sum(1)[mask].mean() * 5.0
        loss = l_obj + l_cls + l_box
        if not torch.isfinite(loss):
            raise NumericError("toy detector training diverged", {"step": step})
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        last = float(loss.detach())
    det = ToyDetector(net, cfg.scene_size, metadata={"final_loss": last, "steps": cfg.steps})
    score = detection_map(det, holdout)
    det.metadata["holdout_map"] = score
    if cfg.steps > 0 and score < cfg.min_map:
        raise NumericError(f"toy detector reached mAP@0.5={score:.3f} < {cfg.min_map}", dict(det.metadata))
    return det


def save_toy_detector(det: ToyDetector, path) -> None:
    torch.save({"state": det.net.state_dict(), "width": det.net.head.in_channels // 2,
                "input_size": det.input_size, "metadata": det.metadata}, path)


def load_toy_detector(path) -> ToyDetector:
    blob = torch.load(path, weights_only=False)
    net = GridDetectorNet(blob["width"])
    net.load_state_dict(blob["state"])
    return ToyDetector(net, blob["input_size"], metadata=blob["metadata"])


DETECTOR_MANIFEST_KEYS = frozenset({"detector.kind", "detector.checkpoint", "runtime.reentrant"})


def adapt_detector(manifest) -> ToyDetector:
    """Bind a detector named by a manifest. Only ``detector.kind = toy``
    (a saved :class:`ToyDetector`) ships with the package."""
    from .errors import ConfigError
    from .generator import load_manifest

    man = load_manifest(manifest, DETECTOR_MANIFEST_KEYS)
    kind = man.get("detector.kind")
    if kind != "toy":
        raise ConfigError(f"unsupported detector.kind {kind!r}")
    return load_toy_detector(man.resolve("detector.checkpoint"))
