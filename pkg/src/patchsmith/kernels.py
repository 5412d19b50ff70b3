"""Box kernels: IoU, NMS, VOC greedy matching and interpolated AP.

Each public function dispatches to a numba loop kernel or a numpy kernel
according to :mod:`patchsmith._accel`. Both produce identical results.
Boxes are ``(n, 4)`` float64 arrays in ``x1, y1, x2, y2`` order.
"""

from __future__ import annotations

import numpy as np

from . import _accel
from ._accel import njit

# ---------------------------------------------------------------- IoU


@njit
def _iou_matrix_nb(a, b):
    n, m = a.shape[0], b.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        for j in range(m):
            iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
            ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
            out[i, j] = inter / (area_a + area_b - inter)
    return out


def _iou_matrix_np(a, b):
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    valid = (iw > 0) & (ih > 0)
    inter = np.where(valid, iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(valid, inter / np.where(valid, union, 1.0), 0.0)


def iou_matrix(a, b) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    if _accel.backend() == "numba":
        return _iou_matrix_nb(a, b)
    return _iou_matrix_np(a, b)


# ---------------------------------------------------------------- NMS


@njit
def _nms_nb(boxes, order, thr):
    n = order.shape[0]
    suppressed = np.zeros(boxes.shape[0], dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    k = 0
    for ii in range(n):
        i = order[ii]
        if suppressed[i]:
            continue
        keep[k] = i
        k += 1
        area_i = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
        for jj in range(ii + 1, n):
            j = order[jj]
            if suppressed[j]:
                continue
            iw = min(boxes[i, 2], boxes[j, 2]) - max(boxes[i, 0], boxes[j, 0])
            ih = min(boxes[i, 3], boxes[j, 3]) - max(boxes[i, 1], boxes[j, 1])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            area_j = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
            if inter / (area_i + area_j - inter) > thr:
                suppressed[j] = True
    return keep[:k]


def _nms_np(boxes, order, thr):
    keep = []
    remaining = order.copy()
    while remaining.size:
        i = remaining[0]
        keep.append(i)
        if remaining.size == 1:
            break
        ious = _iou_matrix_np(boxes[i:i + 1], boxes[remaining[1:]])[0]
        remaining = remaining[1:][ious <= thr]
    return np.asarray(keep, dtype=np.int64)


def nms(boxes, scores, iou_threshold: float = 0.45) -> np.ndarray:
    """Indices kept by greedy NMS, highest score first (ties by index)."""
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable").astype(np.int64)
    if _accel.backend() == "numba":
        return _nms_nb(boxes, order, float(iou_threshold))
    return _nms_np(boxes, order, float(iou_threshold))


# ---------------------------------------------------------------- matching


@njit
def _match_nb(det_img, det_boxes, gt_img, gt_boxes, thr):
    n = det_img.shape[0]
    tp = np.zeros(n, dtype=np.bool_)
    used = np.zeros(gt_img.shape[0], dtype=np.bool_)
    for i in range(n):
        best, best_j = -1.0, -1
        area_i = (det_boxes[i, 2] - det_boxes[i, 0]) * (det_boxes[i, 3] - det_boxes[i, 1])
        for j in range(gt_img.shape[0]):
            if gt_img[j] != det_img[i]:
                continue
            iw = min(det_boxes[i, 2], gt_boxes[j, 2]) - max(det_boxes[i, 0], gt_boxes[j, 0])
            ih = min(det_boxes[i, 3], gt_boxes[j, 3]) - max(det_boxes[i, 1], gt_boxes[j, 1])
            iou = 0.0
            if iw > 0.0 and ih > 0.0:
                inter = iw * ih
                area_j = (gt_boxes[j, 2] - gt_boxes[j, 0]) * (gt_boxes[j, 3] - gt_boxes[j, 1])
                iou = inter / (area_i + area_j - inter)
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0 and best >= thr and not used[best_j]:
            tp[i] = True
            used[best_j] = True
    return tp


def _match_np(det_img, det_boxes, gt_img, gt_boxes, thr):
    tp = np.zeros(det_img.shape[0], dtype=bool)
    used = np.zeros(gt_img.shape[0], dtype=bool)
    by_image = {int(k): np.flatnonzero(gt_img == k) for k in np.unique(gt_img)}
    for i in range(det_img.shape[0]):
        cand = by_image.get(int(det_img[i]))
        if cand is None or cand.size == 0:
            continue
        ious = _iou_matrix_np(det_boxes[i:i + 1], gt_boxes[cand])[0]
        k = int(np.argmax(ious))
        if ious[k] >= thr and not used[cand[k]]:
            tp[i] = True
            used[cand[k]] = True
    return tp


def greedy_match(det_img, det_boxes, gt_img, gt_boxes, iou_threshold: float) -> np.ndarray:
    """VOC matching of score-sorted detections: each detection takes its
    highest-IoU ground truth in the same image; TP if that IoU clears the
    threshold and the ground truth is still free."""
    args = (np.ascontiguousarray(det_img, dtype=np.int64),
            np.ascontiguousarray(det_boxes, dtype=np.float64).reshape(-1, 4),
            np.ascontiguousarray(gt_img, dtype=np.int64),
            np.ascontiguousarray(gt_boxes, dtype=np.float64).reshape(-1, 4),
            float(iou_threshold))
    if _accel.backend() == "numba":
        return _match_nb(*args)
    return _match_np(*args)


# ---------------------------------------------------------------- AP


@njit
def _ap11_nb(ctp, cfp, n_gt):
    total = 0.0
    for k in range(11):
        best = 0.0
        for i in range(ctp.shape[0]):
            if 10 * ctp[i] >= k * n_gt:
                p = ctp[i] / (ctp[i] + cfp[i])
                if p > best:
                    best = p
        total += best
    return total / 11.0


def _ap11_np(ctp, cfp, n_gt):
    prec = ctp / np.maximum(ctp + cfp, 1)
    total = 0.0
    for k in range(11):
        ok = 10 * ctp >= k * n_gt
        total += prec[ok].max() if ok.any() else 0.0
    return total / 11.0


def interpolated_ap(ctp: np.ndarray, cfp: np.ndarray, n_gt: int, interpolation: str = "11point") -> float:
    """AP from cumulative TP/FP counts at each operating point.

    Recall thresholds for the 11-point rule are compared in integers
    (``10·TP >= k·n_gt``) so that exact recalls like 3/10 are not lost to
    rounding.
    """
    ctp = np.ascontiguousarray(ctp, dtype=np.int64)
    cfp = np.ascontiguousarray(cfp, dtype=np.int64)
    if interpolation == "11point":
        if _accel.backend() == "numba":
            return float(_ap11_nb(ctp, cfp, int(n_gt)))
        return float(_ap11_np(ctp, cfp, int(n_gt)))
    if interpolation == "allpoint":
        rec = np.concatenate([[0.0], ctp / n_gt])
        prec = np.concatenate([[1.0], ctp / np.maximum(ctp + cfp, 1)])
        env = np.maximum.accumulate(prec[::-1])[::-1]
        return float(np.sum((rec[1:] - rec[:-1]) * env[1:]))
    raise ValueError(f"unknown interpolation {interpolation!r}")
