"""Mask AP (COCO convention) and the joint mask-IoU + attribute-F1 AP."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .decoder import StagePrediction
from .synthdata import CLASS_NAMES, Scene, SceneAnnotation
from .tensor import DimensionError, bilinear_matrix, no_grad

THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)

# predicate(iou_matrix, f1_matrix, threshold) -> bool matrix (detections x gts)
Predicate = Callable[[np.ndarray, np.ndarray, float], np.ndarray]


@dataclass
class Detection:
    class_id: int
    score: float
    mask: np.ndarray  # bool, image resolution
    attributes: frozenset[int] = frozenset()


@dataclass
class APResult:
    ap: float
    per_class: dict[int, float]
    pr_samples: dict[int, list[float]] = field(default_factory=dict)


@dataclass
class EvalReport:
    ap_iou: float
    ap_iou_f1: float
    per_class: dict[str, dict[str, float]]
    thresholds: list[float]
    n_images: int
    pr_samples: dict[str, list[float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "ap_iou": self.ap_iou, "ap_iou_f1": self.ap_iou_f1, "per_class": self.per_class,
            "thresholds": self.thresholds, "n_images": self.n_images,
            "pr_samples": self.pr_samples,
        }


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """|a & b| / |a | b|; two empty masks agree (1), one empty gives 0."""
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a, b = a.astype(bool), b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def attribute_f1(pred: Sequence[int] | set, gt: Sequence[int] | set) -> float:
    pred, gt = set(pred), set(gt)
    if not pred and not gt:
        return 1.0
    if not pred or not gt:
        return 0.0
    tp = len(pred & gt)
    if tp == 0:
        return 0.0
    precision, recall = tp / len(pred), tp / len(gt)
    return 2 * precision * recall / (precision + recall)


def _iou_matrix(dets: list[Detection], gt: SceneAnnotation) -> np.ndarray:
    if not dets or not len(gt):
        return np.zeros((len(dets), len(gt)))
    d = np.stack([x.mask.reshape(-1) for x in dets]).astype(np.float64)
    g = gt.masks.reshape(len(gt), -1).astype(np.float64)
    if d.shape[1] != g.shape[1]:
        raise DimensionError(f"detection masks {dets[0].mask.shape} vs gt {gt.masks.shape[1:]}")
    inter = d @ g.T
    union = d.sum(1)[:, None] + g.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1), 1.0)


def _f1_matrix(dets: list[Detection], gt: SceneAnnotation) -> np.ndarray:
    gt_sets = [set(np.flatnonzero(row).tolist()) for row in gt.attributes]
    return np.array([[attribute_f1(d.attributes, g) for g in gt_sets] for d in dets]).reshape(
        len(dets), len(gt))


def interpolated_precision(tp: np.ndarray, n_gt: int) -> np.ndarray:
    """101-point interpolated precision for detections already sorted by score."""
    if len(tp) == 0 or n_gt == 0:
        return np.zeros_like(RECALL_POINTS)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    out = np.zeros_like(RECALL_POINTS)
    ok = idx < len(recall)
    out[ok] = precision[idx[ok]]
    return out


def average_precision(detections: list[list[Detection]], gts: list[SceneAnnotation],
                      predicate: Predicate, thresholds: Sequence[float] = THRESHOLDS) -> APResult:
    """COCO-style AP averaged over thresholds and over classes present in gt.

    Detections are visited in descending score order (stable in image, then
    detection order); each one claims the unmatched same-class gt instance of
    highest IoU among those the predicate accepts, else it is a false positive.
    """
    if len(detections) != len(gts):
        raise ValueError("need one detection list per ground-truth annotation")
    ious = [_iou_matrix(d, g) for d, g in zip(detections, gts)]
    f1s = [_f1_matrix(d, g) for d, g in zip(detections, gts)]
    classes = sorted({int(c) for g in gts for c in g.class_ids})
    per_class: dict[int, float] = {}
    samples: dict[int, list[float]] = {}
    for c in classes:
        entries = [(-det.score, i, k) for i, dets in enumerate(detections)
                   for k, det in enumerate(dets) if det.class_id == c]
        entries.sort()
        n_gt = sum(int((g.class_ids == c).sum()) for g in gts)
        aps = []
        for t_i, t in enumerate(thresholds):
            ok = [predicate(iou, f1, t) & (g.class_ids == c)[None, :]
                  for iou, f1, g in zip(ious, f1s, gts)]
            used = [np.zeros(len(g), dtype=bool) for g in gts]
            tp = np.zeros(len(entries))
            for e, (_, i, k) in enumerate(entries):
                cand = ok[i][k] & ~used[i]
                if cand.any():
                    j = int(np.argmax(np.where(cand, ious[i][k], -1.0)))
                    used[i][j] = True
                    tp[e] = 1.0
            curve = interpolated_precision(tp, n_gt)
            if t_i == 0:
                samples[c] = curve.tolist()
            aps.append(curve.mean())
        per_class[c] = float(np.mean(aps))
    ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return APResult(ap, per_class, samples)


def iou_predicate(iou, f1, t):
    return iou >= t


def iou_f1_predicate(f1_threshold: float | None = None) -> Predicate:
    def pred(iou, f1, t):
        return (iou >= t) & (f1 >= (t if f1_threshold is None else f1_threshold))

    return pred


def ap_iou(detections, gts) -> float:
    return average_precision(detections, gts, iou_predicate).ap


def ap_iou_f1(detections, gts, f1_threshold: float | None = None) -> float:
    return average_precision(detections, gts, iou_f1_predicate(f1_threshold)).ap


def detections_from_prediction(pred: StagePrediction, height: int, width: int) -> list[Detection]:
    """Queries whose arg-max class is not "no object" become detections."""
    logits = pred.class_logits.data
    z = logits - logits.max(axis=1, keepdims=True)
    prob = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    k_bg = logits.shape[1] - 1
    masks = pred.mask_logits.data
    rh = bilinear_matrix(masks.shape[1], height)
    rw = bilinear_matrix(masks.shape[2], width)
    out = []
    for q in np.flatnonzero(prob.argmax(axis=1) != k_bg):
        cls = int(prob[q, :k_bg].argmax())
        full = rh @ masks[q] @ rw.T
        attrs = frozenset(np.flatnonzero(pred.attr_logits.data[q] > 0).tolist())
        out.append(Detection(cls, float(prob[q, cls]), full > 0, attrs))
    return out


def predict_scene(model, image: np.ndarray) -> list[Detection]:
    with no_grad():
        out = model(image)
    return detections_from_prediction(out.stages[-1], image.shape[1], image.shape[2])


def evaluate(model, scenes: list[Scene], workers: int = 1,
             f1_threshold: float | None = None) -> EvalReport:
    """Run inference on every scene and score the final stage."""
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            dets = list(pool.map(lambda s: predict_scene(model, s.image), scenes))
    else:
        dets = [predict_scene(model, s.image) for s in scenes]
    gts = [s.annotation for s in scenes]
    r_iou = average_precision(dets, gts, iou_predicate)
    r_joint = average_precision(dets, gts, iou_f1_predicate(f1_threshold))
    per_class = {
        CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c): {
            "ap_iou": r_iou.per_class[c], "ap_iou_f1": r_joint.per_class[c]}
        for c in r_iou.per_class
    }
    samples = {CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c): v
               for c, v in r_iou.pr_samples.items()}
    return EvalReport(r_iou.ap, r_joint.ap, per_class, list(THRESHOLDS), len(scenes), samples)
