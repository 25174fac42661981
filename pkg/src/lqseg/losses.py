"""Focal, dice and attribute losses and their three-stage composition."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .decoder import StagePrediction
from .matching import Assignment
from .synthdata import SceneAnnotation, resize_nearest
from .tensor import ContractError, Tensor

LOG_FLOOR = math.log(1e-12)


@dataclass
class LossWeights:
    cls: float = 1.0
    mask: float = 1.0
    attr: float = 1.0


@dataclass
class LossReport:
    cls: list[float] = field(default_factory=list)
    focal: list[float] = field(default_factory=list)
    dice: list[float] = field(default_factory=list)
    attr: list[float] = field(default_factory=list)
    total: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)

    def recompute_total(self) -> float:
        w = self.weights
        return sum(
            w.cls * c + w.mask * (f + d) + w.attr * a
            for c, f, d, a in zip(self.cls, self.focal, self.dice, self.attr)
        )

    def log_record(self, iteration: int, lr: float) -> dict:
        return {"iter": iteration, "total": self.total, "cls": self.cls, "focal": self.focal,
                "dice": self.dice, "attr": self.attr, "lr": lr}

    @staticmethod
    def average(reports: list[LossReport]) -> LossReport:
        n = len(reports)
        out = LossReport(weights=reports[0].weights)
        for key in ("cls", "focal", "dice", "attr"):
            cols = zip(*(getattr(r, key) for r in reports))
            setattr(out, key, [sum(c) / n for c in cols])
        out.total = sum(r.total for r in reports) / n
        return out


def _check_binary(targets: np.ndarray, what: str) -> np.ndarray:
    t = np.asarray(targets, dtype=np.float64)
    if not np.all((t == 0) | (t == 1)):
        raise ContractError(f"{what} targets must be 0/1")
    return t


def _log_probs(logits: Tensor) -> tuple[Tensor, Tensor]:
    return (T.clamp_min(T.log_sigmoid(logits), LOG_FLOOR),
            T.clamp_min(T.log_sigmoid(-logits), LOG_FLOOR))


def focal_elementwise(logits: Tensor, targets, alpha: float = 0.25,
                      gamma: float = 2.0) -> Tensor:
    t = _check_binary(targets, "focal")
    if t.shape != logits.shape:
        raise T.DimensionError(f"focal: logits {logits.shape} vs targets {t.shape}")
    log_p, log_q = _log_probs(logits)
    pos, neg = log_p, log_q
    if gamma != 0:
        p = T.sigmoid(logits)
        pos = (1.0 - p) ** gamma * log_p
        neg = p**gamma * log_q
    return -(pos * (alpha * t) + neg * ((1 - alpha) * (1 - t)))


def focal_loss(logits: Tensor, targets, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean sigmoid focal loss."""
    return focal_elementwise(logits, targets, alpha, gamma).mean()


def bce_elementwise(logits: Tensor, targets) -> Tensor:
    t = _check_binary(targets, "bce")
    if t.shape != logits.shape:
        raise T.DimensionError(f"bce: logits {logits.shape} vs targets {t.shape}")
    log_p, log_q = _log_probs(logits)
    return -(log_p * t + log_q * (1 - t))


def dice_loss(mask_logits: Tensor, gt_mask, per_mask: bool = False) -> Tensor:
    """1 - (2 sum(p g) + 1) / (sum p + sum g + 1), smoothed so empty-vs-empty is 0.

    With a leading instance axis and ``per_mask`` the per-instance values are
    returned, otherwise their mean.
    """
    g = _check_binary(gt_mask, "dice")
    if g.shape != mask_logits.shape:
        raise T.DimensionError(f"dice: logits {mask_logits.shape} vs targets {g.shape}")
    p = T.sigmoid(mask_logits)
    if per_mask or mask_logits.ndim == 3:
        n = p.shape[0]
        pf = p.reshape(n, -1)
        gf = g.reshape(n, -1)
        inter = (pf * gf).sum(axis=1)
        loss = 1.0 - (inter * 2.0 + 1.0) / (pf.sum(axis=1) + (gf.sum(axis=1) + 1.0))
        return loss if per_mask else loss.mean()
    return 1.0 - ((p * g).sum() * 2.0 + 1.0) / (p.sum() + (float(g.sum()) + 1.0))


def attribute_loss(attr_logits: Tensor, attr_targets) -> Tensor:
    """Mean binary cross-entropy over every (matched query, attribute) cell."""
    return bce_elementwise(attr_logits, attr_targets).mean()


def stage_loss(pred: StagePrediction, gt: SceneAnnotation, assignment: Assignment,
               upsample_masks: bool = True, alpha: float = 0.25,
               gamma: float = 2.0) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """(cls, focal, dice, attr) for one stage against its own matching."""
    n_q, k1 = pred.class_logits.shape
    n_gt = len(gt)
    q_idx, g_idx = assignment.queries, assignment.gts
    cls_t = np.zeros((n_q, k1))
    cls_t[:, k1 - 1] = 1.0
    if n_gt:
        cls_t[q_idx, k1 - 1] = 0.0
        cls_t[q_idx, gt.class_ids[g_idx]] = 1.0
    # mean over classes, summed over queries, normalised by matched count
    cls = focal_elementwise(pred.class_logits, cls_t, alpha, gamma).sum() * (
        1.0 / (k1 * max(n_gt, 1)))
    if not n_gt:
        zero = Tensor(0.0)
        return cls, zero, zero, zero
    logits = T.take_rows(pred.mask_logits, q_idx)
    targets = gt.masks[g_idx]
    if upsample_masks:
        logits = T.resize_bilinear(logits, *targets.shape[1:])
    else:
        targets = resize_nearest(targets, *logits.shape[1:])
    focal = focal_loss(logits, targets.astype(np.float64), alpha, gamma)
    dice = dice_loss(logits, targets.astype(np.float64))
    attr = attribute_loss(T.take_rows(pred.attr_logits, q_idx), gt.attributes[g_idx])
    return cls, focal, dice, attr


def total_loss(stages: list[StagePrediction], gt: SceneAnnotation,
               assignments: list[Assignment], weights: LossWeights | None = None,
               expected_stages: int = 3, upsample_masks: bool = True) -> tuple[Tensor, LossReport]:
    """Sum over stages of weighted cls + mask (focal + dice) + attr losses."""
    weights = weights or LossWeights()
    if len(stages) != expected_stages:
        raise ContractError(f"expected {expected_stages} stages, got {len(stages)}")
    if len(assignments) != len(stages):
        raise ContractError("need one assignment per stage")
    report = LossReport(weights=weights)
    total = None
    for pred, asg in zip(stages, assignments):
        cls, focal, dice, attr = stage_loss(pred, gt, asg, upsample_masks)
        term = cls * weights.cls + (focal + dice) * weights.mask + attr * weights.attr
        total = term if total is None else total + term
        report.cls.append(cls.item())
        report.focal.append(focal.item())
        report.dice.append(dice.item())
        report.attr.append(attr.item())
    report.total = total.item()
    return total, report
