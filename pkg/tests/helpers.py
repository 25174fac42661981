"""Shared builders for hand-made predictions and annotations."""

import numpy as np

from lqseg.decoder import StagePrediction
from lqseg.synthdata import K_ATTR, SceneAnnotation
from lqseg.tensor import Tensor

BIG = 40.0


def prediction(mask_logits, class_logits, attr_logits, requires_grad=False) -> StagePrediction:
    t = lambda a: Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad)  # noqa: E731
    return StagePrediction(
        mask_logits=t(mask_logits), class_logits=t(class_logits), attr_logits=t(attr_logits),
        queries_out=None, queries_in=None, internal_mask_logits=None, initial_mask_logits=None)


def annotation(masks, class_ids, attributes=None) -> SceneAnnotation:
    masks = np.asarray(masks, dtype=bool)
    n = len(masks)
    if attributes is None:
        attributes = np.zeros((n, K_ATTR), dtype=np.uint8)
        attributes[:, 0] = 1
    return SceneAnnotation(np.asarray(class_ids, dtype=np.int64), masks,
                           np.asarray(attributes, dtype=np.uint8), np.arange(n, dtype=np.int64))


def perfect_prediction(ann: SceneAnnotation, n_queries: int, k_cls: int = 4, rows=None):
    """Saturated logits reproducing ``ann`` on queries ``rows`` and "no object" elsewhere."""
    n, h, w = ann.masks.shape
    rows = list(range(n)) if rows is None else list(rows)
    masks = np.full((n_queries, h, w), -BIG)
    cls = np.full((n_queries, k_cls + 1), -BIG)
    cls[:, k_cls] = BIG
    attrs = np.full((n_queries, ann.attributes.shape[1]), -BIG)
    for r, k in zip(rows, range(n)):
        masks[r] = np.where(ann.masks[k], BIG, -BIG)
        cls[r] = -BIG
        cls[r, ann.class_ids[k]] = BIG
        attrs[r] = np.where(ann.attributes[k] == 1, BIG, -BIG)
    return prediction(masks, cls, attrs)
