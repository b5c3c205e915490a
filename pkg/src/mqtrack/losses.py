"""Set matching and training losses.

Boxes are normalised (cx, cy, w, h).  Appearance vectors are unit rows, so
cosine distance is ``1 - dot``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from mqtrack import grad as G
from mqtrack.grad import Tensor
from mqtrack.kernels import linear_assignment

GIOU_EPS = 1e-9


@dataclass(frozen=True)
class LossWeights:
    app_match: float = 1.0
    app_loss: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    w_neg: float = 0.1

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"LossWeights.{name} must be >= 0")


def hungarian(costs) -> list[tuple[int, int]]:
    """Minimum-cost injective mapping of rows (predictions) to columns (ground truth)."""
    return linear_assignment(costs)


def _corners(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def giou(b1, b2) -> float:
    """Generalised IoU of two (cx, cy, w, h) boxes, in [-1, 1]."""
    a, b = _corners(b1), _corners(b2)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    enclose = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    return inter / (union + GIOU_EPS) - (enclose - union) / (enclose + GIOU_EPS)


def giou_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    a = _corners(np.asarray(pred).reshape(-1, 4))[:, None, :]
    b = _corners(np.asarray(gt).reshape(-1, 4))[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    enclose = (np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])) * (
        np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    )
    return inter / (union + GIOU_EPS) - (enclose - union) / (enclose + GIOU_EPS)


def giou_tensor(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Row-wise gIoU between predicted (n, 4) and fixed target (n, 4) boxes."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    g = G.constant(_corners(gt))
    cxy, half = pred[:, 0:2], pred[:, 2:4] * 0.5
    p_lo, p_hi = cxy - half, cxy + half
    lo = G.maximum(p_lo, g[:, 0:2])
    hi = G.minimum(p_hi, g[:, 2:4])
    wh = G.relu(hi - lo)
    inter = wh[:, 0] * wh[:, 1]
    area_p = pred[:, 2] * pred[:, 3]
    area_g = G.constant(gt[:, 2] * gt[:, 3])
    union = area_p + area_g - inter
    e_wh = G.maximum(p_hi, g[:, 2:4]) - G.minimum(p_lo, g[:, 0:2])
    enclose = e_wh[:, 0] * e_wh[:, 1]
    return inter / (union + GIOU_EPS) - (enclose - union) / (enclose + GIOU_EPS)


def match_cost(pred: tuple, gt: tuple, weights: LossWeights = LossWeights()) -> float:
    """Matching cost between ``(box, app)`` and ``(box_gt, app_gt or None)``."""
    b, a = pred
    b_gt, a_gt = gt
    b, b_gt = np.asarray(b, dtype=np.float64), np.asarray(b_gt, dtype=np.float64)
    cost = weights.l1 * float(np.abs(b - b_gt).sum()) + weights.giou * (1.0 - giou(b, b_gt))
    if a_gt is not None:
        cost += weights.app_match * (1.0 - float(np.dot(a, a_gt)))
    return cost


def cost_matrix(
    pred_boxes: np.ndarray,
    pred_app: np.ndarray,
    gt_boxes: np.ndarray,
    gt_app: Sequence[np.ndarray | None],
    weights: LossWeights = LossWeights(),
) -> np.ndarray:
    """Vectorised :func:`match_cost` for all prediction/ground-truth pairs."""
    pred_boxes = np.asarray(pred_boxes).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes).reshape(-1, 4)
    c = weights.l1 * np.abs(pred_boxes[:, None, :] - gt_boxes[None, :, :]).sum(-1)
    c += weights.giou * (1.0 - giou_matrix(pred_boxes, gt_boxes))
    for j, a_gt in enumerate(gt_app):
        if a_gt is not None:
            c[:, j] += weights.app_match * (1.0 - np.asarray(pred_app) @ np.asarray(a_gt))
    return c


def appearance_loss(anchor, positive, negatives, w_neg: float = 0.1) -> Tensor:
    """-log(exp(s+) / (exp(s+) + w_neg * sum_j exp(s-_j))) with s = dot products."""
    anchor = anchor if isinstance(anchor, Tensor) else G.constant(anchor)
    positive = positive if isinstance(positive, Tensor) else G.constant(positive)
    s_pos = G.sum_(anchor * positive)
    if negatives is None:
        return s_pos * 0.0
    negs = negatives if isinstance(negatives, Tensor) else G.constant(np.asarray(negatives, dtype=np.float64))
    if negs.data.size == 0:
        return s_pos * 0.0
    if negs.data.ndim == 1:
        negs = G.reshape(negs, (1, -1))
    s_neg = G.matmul(negs, G.reshape(anchor, (-1, 1)))
    denom = G.exp(s_pos) + G.sum_(G.exp(s_neg)) * w_neg
    return G.log(denom) - s_pos


def batched_appearance_loss(anchors: Tensor, bank: Tensor, positive_rows: Sequence[int], w_neg: float) -> Tensor:
    """Sum of :func:`appearance_loss` for each anchor row against ``bank``.

    Row ``t`` of ``anchors`` has positive ``bank[positive_rows[t]]``; every
    other bank row is a negative.
    """
    T, N = anchors.shape[0], bank.shape[0]
    sims = G.matmul(anchors, G.transpose(bank))
    onehot = np.zeros((T, N))
    onehot[np.arange(T), positive_rows] = 1.0
    weight = np.where(onehot > 0, 1.0, w_neg)
    s_pos = G.sum_(sims * G.constant(onehot), axis=1)
    denom = G.sum_(G.exp(sims) * G.constant(weight), axis=1)
    return G.sum_(G.log(denom) - s_pos)


@dataclass
class MatchResult:
    pairs: list[tuple[int, object]]  # (prediction row, gt id)
    by_identity: int
    by_hungarian: int


def match_predictions(
    pred_boxes: np.ndarray,
    pred_app: np.ndarray,
    gt: Sequence[tuple[object, np.ndarray]],
    track_rows: Mapping[object, int],
    det_rows: Sequence[int],
    prev_app: Mapping[object, np.ndarray],
    tau_conf: float,
    weights: LossWeights = LossWeights(),
    identity_always: bool = False,
) -> MatchResult:
    """Ground-truth mapping for one tracking frame.

    Known tracks whose appearance still confirms (cosine distance to their
    previous-frame vector below ``tau_conf``) keep their identity; the rest
    of the ground truth is Hungarian-matched against Det rows.  With
    ``identity_always`` every known track keeps its identity unchecked.
    """
    ids = [gid for gid, _ in gt]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ground-truth ids in one frame")
    boxes = {gid: np.asarray(b, dtype=np.float64) for gid, b in gt}
    pairs: list[tuple[int, object]] = []
    for gid in ids:
        row = track_rows.get(gid)
        if row is None:
            continue
        if identity_always or (gid in prev_app and 1.0 - float(pred_app[row] @ prev_app[gid]) < tau_conf):
            pairs.append((row, gid))
    n_ident = len(pairs)
    taken = {gid for _, gid in pairs}
    rest = [gid for gid in ids if gid not in taken]
    if rest and len(det_rows):
        det_rows = list(det_rows)
        c = cost_matrix(
            pred_boxes[det_rows],
            pred_app[det_rows],
            np.stack([boxes[g] for g in rest]),
            [prev_app.get(g) for g in rest],
            weights,
        )
        for r, j in hungarian(c):
            pairs.append((det_rows[r], rest[j]))
    return MatchResult(pairs, n_ident, len(pairs) - n_ident)


def set_prediction_loss(
    pred_boxes: Tensor,
    pred_app: Tensor,
    gt: Sequence[tuple[object, np.ndarray]],
    track_rows: Mapping[object, int],
    det_rows: Sequence[int],
    prev_bank: Tensor | None,
    prev_rows: Mapping[object, int],
    tau_conf: float,
    weights: LossWeights = LossWeights(),
    identity_always: bool = False,
) -> tuple[Tensor, dict]:
    """Box + appearance set-prediction loss for one tracking frame.

    ``prev_bank`` holds every appearance output of the previous frame;
    ``prev_rows`` maps ground-truth ids to their row there.  Returns the
    scalar loss and a diagnostics dict.
    """
    prev_app = {} if prev_bank is None else {gid: prev_bank.data[r] for gid, r in prev_rows.items()}
    match = match_predictions(
        pred_boxes.data, pred_app.data, gt, track_rows, det_rows, prev_app, tau_conf, weights, identity_always
    )
    diag = {
        "l1": 0.0,
        "giou": 0.0,
        "app": 0.0,
        "by_identity": match.by_identity,
        "by_hungarian": match.by_hungarian,
        "pairs": match.pairs,
    }
    if not match.pairs:
        return G.constant(0.0), diag
    boxes = dict(gt)
    rows = np.array([r for r, _ in match.pairs])
    target = np.stack([np.asarray(boxes[g], dtype=np.float64) for _, g in match.pairs])
    sel = pred_boxes[rows]
    l1 = G.sum_(G.abs_(sel - G.constant(target)))
    gi = G.sum_(1.0 - giou_tensor(sel, target))
    total = l1 * weights.l1 + gi * weights.giou
    diag["l1"], diag["giou"] = float(l1.data), float(gi.data)
    with_prev = [(r, prev_rows[g]) for r, g in match.pairs if g in prev_rows]
    if with_prev and prev_bank is not None:
        anchors = pred_app[np.array([r for r, _ in with_prev])]
        app = batched_appearance_loss(anchors, prev_bank, [p for _, p in with_prev], weights.w_neg)
        total = total + app * weights.app_loss
        diag["app"] = float(app.data)
    return total, diag
