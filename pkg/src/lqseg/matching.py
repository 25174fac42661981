"""Bipartite matching of queries to ground-truth instances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import StagePrediction
from .synthdata import SceneAnnotation, resize_nearest
from .tensor import ContractError, _sigmoid

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
LOG_FLOOR = np.log(1e-12)


@dataclass
class CostMatrix:
    values: np.ndarray  # N_q x N_gt
    cls: np.ndarray
    mask_focal: np.ndarray
    mask_dice: np.ndarray
    attr: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (query, gt), sorted by query

    @property
    def queries(self) -> np.ndarray:
        return np.array([q for q, _ in self.pairs], dtype=np.int64)

    @property
    def gts(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)

    def total(self, costs) -> float:
        c = costs.values if isinstance(costs, CostMatrix) else np.asarray(costs)
        return float(sum(c[q, g] for q, g in self.pairs))


def _log_sigmoid(z: np.ndarray) -> np.ndarray:
    return np.maximum(np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z))), LOG_FLOOR)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cost_matrix(pred: StagePrediction, gt: SceneAnnotation, w_cls: float = 1.0,
                w_mask: float = 1.0, w_attr: float = 1.0) -> CostMatrix:
    logits = pred.mask_logits.data
    n_q, h, w = logits.shape
    n_gt = len(gt)
    if n_gt == 0:
        empty = np.zeros((n_q, 0))
        return CostMatrix(empty, empty, empty, empty, empty)
    targets = resize_nearest(gt.masks, h, w).reshape(n_gt, h * w).astype(np.float64)
    z = logits.reshape(n_q, h * w)

    prob = _softmax(pred.class_logits.data)
    c_cls = -prob[:, gt.class_ids]

    p = _sigmoid(z)
    pos = -FOCAL_ALPHA * (1 - p) ** FOCAL_GAMMA * _log_sigmoid(z)
    neg = -(1 - FOCAL_ALPHA) * p**FOCAL_GAMMA * _log_sigmoid(-z)
    c_focal = (pos @ targets.T + neg @ (1 - targets).T) / (h * w)
    c_dice = 1 - (2 * p @ targets.T + 1) / (p.sum(1)[:, None] + targets.sum(1)[None, :] + 1)

    za = pred.attr_logits.data
    ta = gt.attributes.astype(np.float64)
    c_attr = -(_log_sigmoid(za) @ ta.T + _log_sigmoid(-za) @ (1 - ta).T) / za.shape[1]

    values = w_cls * c_cls + w_mask * (c_focal + c_dice) + w_attr * c_attr
    return CostMatrix(values, c_cls, c_focal, c_dice, c_attr)


def _solve_square(c: np.ndarray) -> tuple[list[int], np.ndarray, np.ndarray]:
    """Shortest-augmenting-path Hungarian with row/column potentials.

    Returns (row -> column, u, v) with c - u[:, None] - v[None, :] >= 0 and
    zero on the matched cells.
    """
    n = c.shape[0]
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    owner = [0] * (n + 1)  # owner[j] = row (1-based) matched to column j
    way = [0] * (n + 1)
    rows = c.tolist()
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = owner[j0]
            row = rows[i0 - 1]
            ui = u[i0]
            delta, j1 = inf, 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta, j1 = minv[j], j
            for j in range(n + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    row_to_col = [0] * n
    for j in range(1, n + 1):
        row_to_col[owner[j] - 1] = j - 1
    return row_to_col, np.array(u[1:]), np.array(v[1:])


def hungarian(costs) -> Assignment:
    """Minimum-cost assignment of every gt column to a distinct query row.

    Among all optimal assignments the one whose (query, gt) pair list is
    lexicographically smallest is returned, so exact ties resolve the same
    way every time.
    """
    c = np.asarray(costs.values if isinstance(costs, CostMatrix) else costs, dtype=np.float64)
    if c.ndim != 2:
        raise ContractError(f"cost matrix must be 2-D, got shape {c.shape}")
    n_q, n_gt = c.shape
    if n_gt > n_q:
        raise ContractError(f"more ground-truth instances ({n_gt}) than queries ({n_q})")
    if not np.all(np.isfinite(c)):
        raise ContractError("cost matrix contains non-finite entries")
    if n_gt == 0:
        return Assignment([])
    sq = np.zeros((n_q, n_q))
    sq[:, :n_gt] = c
    row_to_col, u, v = _solve_square(sq)
    tol = 1e-9 * max(1.0, float(np.abs(sq).max()))
    tight = (sq - u[:, None] - v[None, :]) <= tol
    adj = [np.flatnonzero(tight[i]).tolist() for i in range(n_q)]

    match_r = list(row_to_col)
    match_c = [0] * n_q
    for r, col in enumerate(match_r):
        match_c[col] = r
    fixed = [False] * n_q  # rows whose column is final

    def augment(r: int, target: int, seen: set[int], banned: int) -> bool:
        # alternating path from free row r to free column target
        for col in adj[r]:
            if col == banned or col in seen:
                continue
            seen.add(col)
            if col == target:
                match_r[r], match_c[col] = col, r
                return True
            r2 = match_c[col]
            if fixed[r2] or r2 == r:
                continue
            if augment(r2, target, seen, banned):
                match_r[r], match_c[col] = col, r
                return True
        return False

    for q in range(n_q):
        cur = match_r[q]
        limit = cur if cur < n_gt else n_gt
        for g in adj[q]:
            if g >= limit:
                break
            r = match_c[g]
            if fixed[r]:
                continue
            snapshot = (list(match_r), list(match_c))
            fixed[q] = True
            match_r[q], match_c[g] = g, q
            if augment(r, cur, set(), g):
                break
            match_r[:], match_c[:] = snapshot
            fixed[q] = False
        fixed[q] = True
    pairs = [(q, match_r[q]) for q in range(n_q) if match_r[q] < n_gt]
    return Assignment(pairs)

