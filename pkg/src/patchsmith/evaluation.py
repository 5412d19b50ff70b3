"""Normalized-mAP evaluation: clean predictions become the reference labels,
so an unpatched run scores exactly 100 and any drop measures the attack."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from . import kernels, seeding
from .errors import ReferenceMismatchError, ShapeMismatchError
from .io import read_png
from .render import BoundingBox, PlacementPolicy, SceneSample, TransformRanges, render_scene

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    detector_id: str
    dataset_id: str
    map_percent: float
    n_images: int
    iou_threshold: float = 0.5
    conf_threshold: float = 0.5


# ----------------------------------------------------------------- AP


def _xyxy(boxes: Sequence[BoundingBox]) -> np.ndarray:
    return np.array([b.xyxy() for b in boxes], dtype=np.float64).reshape(-1, 4)


def average_precision(detections: Sequence[Sequence[BoundingBox]], ground_truth: Sequence[Sequence[BoundingBox]],
                      iou_threshold: float = 0.5, interpolation: str = "11point") -> float:
    """AP in [0, 1] for one class. ``detections[i]`` are scored boxes for
    image ``i``; operating points are taken at every distinct score."""
    if len(detections) != len(ground_truth):
        raise ShapeMismatchError("detections and ground truth cover different image counts")
    n_gt = sum(len(g) for g in ground_truth)
    det_img = np.array([i for i, ds in enumerate(detections) for _ in ds], dtype=np.int64)
    n_det = det_img.size
    if n_gt == 0:
        return 1.0 if n_det == 0 else 0.0
    if n_det == 0:
        return 0.0
    scores = np.array([b.score for ds in detections for b in ds], dtype=np.float64)
    boxes = np.concatenate([_xyxy(ds) for ds in detections if len(ds)])
    order = np.argsort(-scores, kind="stable")
    gt_img = np.array([i for i, gs in enumerate(ground_truth) for _ in gs], dtype=np.int64)
    gt_boxes = np.concatenate([_xyxy(gs) for gs in ground_truth if len(gs)])
    tp = kernels.greedy_match(det_img[order], boxes[order], gt_img, gt_boxes, iou_threshold)
    s = scores[order]
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    ctp = np.cumsum(tp)[ends]
    cfp = np.cumsum(~tp)[ends]
    return kernels.interpolated_ap(ctp, cfp, n_gt, interpolation)


# ----------------------------------------------------------- sidecars


def write_sidecar(path, labels: Mapping[str, Sequence[BoundingBox]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for image_id, boxes in labels.items():
            rec = {"image_id": image_id,
                   "boxes": [{"cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h, "score": b.score, "class": b.cls}
                             for b in boxes]}
            fh.write(json.dumps(rec) + "\n")
    return path


def read_sidecar(path) -> dict[str, list[BoundingBox]]:
    out: dict[str, list[BoundingBox]] = {}
    with Path(path).open() as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out[rec["image_id"]] = [BoundingBox(b["cx"], b["cy"], b["w"], b["h"], b["score"], b["class"])
                                    for b in rec["boxes"]]
    return out


def load_corpus(index_path) -> list[SceneSample]:
    """Scenes listed one path per line (relative to the index file).
    Unreadable images are skipped with a warning."""
    index_path = Path(index_path)
    scenes = []
    for line in index_path.read_text().splitlines():
        rel = line.strip()
        if not rel or rel.startswith("#"):
            continue
        p = Path(rel) if Path(rel).is_absolute() else index_path.parent / rel
        try:
            img = read_png(p)
        except Exception as exc:  # noqa: BLE001
            log.warning("skipping unreadable image %s: %s", p, exc)
            continue
        scenes.append(SceneSample(img, [], rel))
    return scenes


def _as_scenes(dataset) -> list[SceneSample]:
    if isinstance(dataset, (str, Path)):
        return load_corpus(dataset)
    return list(dataset)


def generate_reference_labels(detector, dataset, path=None, conf_threshold: float = 0.5,
                              person_class: int = 0) -> dict[str, list[BoundingBox]]:
    """Clean-image person predictions above ``conf_threshold``, keyed by image id."""
    labels: dict[str, list[BoundingBox]] = {}
    for sc in _as_scenes(dataset):
        dets = detector.detect(sc.image, conf_threshold)
        labels[sc.source_id] = [d.box for d in dets if d.box.cls == person_class]
    if path is not None:
        write_sidecar(path, labels)
    return labels


def with_reference_boxes(scenes: Sequence[SceneSample], reference: Mapping[str, Sequence[BoundingBox]]) -> list[SceneSample]:
    return [SceneSample(sc.image, list(reference[sc.source_id]), sc.source_id) for sc in scenes]


def evaluate_map(detector, dataset, reference, patch: torch.Tensor | None = None,
                 ranges: TransformRanges | None = None, seed: int = 1234, iou_threshold: float = 0.5,
                 conf_threshold: float = 0.5, interpolation: str = "11point",
                 geometry: PlacementPolicy | None = None, detector_id: str = "detector",
                 dataset_id: str = "dataset") -> EvalReport:
    scenes = _as_scenes(dataset)
    if not isinstance(reference, Mapping):
        reference = read_sidecar(reference)
    ids = [sc.source_id for sc in scenes]
    if len(set(ids)) != len(ids) or set(ids) != set(reference):
        missing = sorted(set(ids) ^ set(reference))[:5]
        raise ReferenceMismatchError(f"reference labels and corpus disagree on image ids, e.g. {missing}")
    ranges = ranges or TransformRanges()
    dets, gts = [], []
    for i, sc in enumerate(scenes):
        ref = list(reference[sc.source_id])
        image = sc.image
        if patch is not None and ref:
            with torch.no_grad():
                image = render_scene(SceneSample(image, ref, sc.source_id), patch.detach().to(torch.float32),
                                     ranges, seeding.derive_seed(seed, i), geometry).image
        dets.append([d.box for d in detector.detect(image, conf_threshold)])
        gts.append(ref)
    ap = average_precision(dets, gts, iou_threshold, interpolation)
    return EvalReport(detector_id, dataset_id, 100.0 * ap, len(scenes), iou_threshold, conf_threshold)


def write_reports_csv(path, reports: Sequence[EvalReport]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(asdict(reports[0]).keys()) if reports else list(EvalReport.__dataclass_fields__))
        w.writeheader()
        for r in reports:
            w.writerow(asdict(r))
    return path


# ---------------------------------------------------------- similarity


class RandomProjectionEmbedder:
    """Proxy image embedder: average-pool to ``grid × grid``, centre at 0.5,
    project with a fixed Gaussian matrix. Linear in ``image - 0.5``, so an
    image and its photographic negative ``1 - image`` embed antipodally."""

    def __init__(self, dim: int = 128, grid: int = 8, channels: int = 3, seed: int = 0):
        self.grid = grid
        self.proj = seeding.gaussian((channels * grid * grid, dim), seed, torch.float64)

    def __call__(self, img: torch.Tensor) -> torch.Tensor:
        x = img.detach().to(torch.float64)
        pooled = F.adaptive_avg_pool2d(x[None] - 0.5, self.grid)[0]
        return pooled.reshape(-1) @ self.proj


def embedding_similarity(img_a: torch.Tensor, img_b: torch.Tensor, embedder=None) -> float:
    if tuple(img_a.shape) != tuple(img_b.shape):
        raise ShapeMismatchError(f"image shapes differ: {tuple(img_a.shape)} vs {tuple(img_b.shape)}")
    embedder = embedder or RandomProjectionEmbedder(channels=img_a.shape[0])
    return cosine(embedder(img_a), embedder(img_b))


def cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = a.reshape(-1).to(torch.float64), b.reshape(-1).to(torch.float64)
    na, nb = float(a.norm()), float(b.norm())
    if na == 0.0 or nb == 0.0:
        return 0.0
    return max(-1.0, min(1.0, float(a @ b) / (na * nb)))


# -------------------------------------------------------- cross-model


def random_noise_patch(shape, seed: int = 0) -> torch.Tensor:
    return seeding.uniform(shape, seed, 0.0, 1.0, torch.float32)


@dataclass
class MatrixReport:
    patches: list[str]
    detectors: list[str]
    cells: dict[tuple[str, str], EvalReport | None]
    errors: dict[tuple[str, str], str] = field(default_factory=dict)

    def value(self, patch: str, detector: str) -> float:
        r = self.cells.get((patch, detector))
        return r.map_percent if r is not None else math.nan

    def row_average(self, patch: str) -> float:
        vals = [self.value(patch, d) for d in self.detectors]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    def column_average(self, detector: str) -> float:
        vals = [self.value(p, detector) for p in self.patches]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["patch", *self.detectors, "Avg."])
            for p in self.patches:
                w.writerow([p, *(f"{self.value(p, d):.4f}" for d in self.detectors), f"{self.row_average(p):.4f}"])
            w.writerow(["Avg.", *(f"{self.column_average(d):.4f}" for d in self.detectors), ""])
        return path


def cross_model_matrix(patches: Mapping[str, torch.Tensor | None], detectors: Mapping[str, object], corpus,
                       references: Mapping[str, Mapping[str, Sequence[BoundingBox]]], **eval_kw) -> MatrixReport:
    """Every patch against every detector. A failing cell is recorded and
    left empty; the remaining cells still run."""
    scenes = _as_scenes(corpus)
    cells: dict = {}
    errors: dict = {}
    for pname, patch in patches.items():
        for dname, det in detectors.items():
            try:
                cells[(pname, dname)] = evaluate_map(det, scenes, references[dname], patch,
                                                     detector_id=dname, **eval_kw)
            except Exception as exc:  # noqa: BLE001
                log.warning("matrix cell (%s, %s) failed: %s", pname, dname, exc)
                cells[(pname, dname)] = None
                errors[(pname, dname)] = str(exc)
    return MatrixReport(list(patches), list(detectors), cells, errors)
