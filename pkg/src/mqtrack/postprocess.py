"""Offline agreement between a forward and a backward tracking pass."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mqtrack.kernels import linear_assignment
from mqtrack.motio import MotRecord


@dataclass
class TrackSet:
    """Trajectories keyed by track id; ``boxes[id][frame] = (cx, cy, w, h)``."""

    num_frames: int
    boxes: dict[int, dict[int, np.ndarray]]
    appearance: dict[int, np.ndarray] = field(default_factory=dict)

    def reversed(self) -> "TrackSet":
        """Map frame indices t -> num_frames - 1 - t (a backward pass into forward time)."""
        last = self.num_frames - 1
        return TrackSet(
            self.num_frames,
            {i: {last - t: b for t, b in traj.items()} for i, traj in self.boxes.items()},
            dict(self.appearance),
        )

    def to_records(self, width_px: float = 1.0, height_px: float = 1.0) -> list[MotRecord]:
        out = []
        for tid in sorted(self.boxes):
            for t in sorted(self.boxes[tid]):
                cx, cy, w, h = self.boxes[tid][t]
                out.append(MotRecord(t + 1, tid, (cx - w / 2) * width_px, (cy - h / 2) * height_px, w * width_px, h * height_px, 1.0))
        return out

    @classmethod
    def from_records(cls, records, num_frames: int, width_px: float = 1.0, height_px: float = 1.0) -> "TrackSet":
        boxes: dict[int, dict[int, np.ndarray]] = {}
        for r in records:
            box = np.array([
                (r.bb_left + r.bb_width / 2) / width_px,
                (r.bb_top + r.bb_height / 2) / height_px,
                r.bb_width / width_px,
                r.bb_height / height_px,
            ])
            boxes.setdefault(r.id, {})[r.frame - 1] = box
        return cls(num_frames, boxes)


def box_iou(a: np.ndarray, b: np.ndarray) -> float:
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def mean_overlap(fwd: dict[int, np.ndarray], bwd: dict[int, np.ndarray]) -> float:
    """Mean IoU over the frames both trajectories cover; 0 if none."""
    shared = sorted(set(fwd) & set(bwd))
    if not shared:
        return 0.0
    return float(np.mean([box_iou(fwd[t], bwd[t]) for t in shared]))


def fill_gaps(traj: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Linear interpolation of every coordinate across interior gaps."""
    frames = sorted(traj)
    out = dict(traj)
    for t0, t1 in zip(frames, frames[1:]):
        for t in range(t0 + 1, t1):
            w = (t - t0) / (t1 - t0)
            out[t] = (1 - w) * traj[t0] + w * traj[t1]
    return dict(sorted(out.items()))


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    return 1.0 - float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


def b2f_postprocess(
    forward: TrackSet,
    backward: TrackSet,
    overlap_thresh: float = 0.5,
    id_match_thresh: float = 0.4,
    fill: bool = True,
    method: str = "track",
) -> TrackSet:
    """Keep forward tracks confirmed by the backward pass.

    ``backward`` must already be in forward frame order (see
    :meth:`TrackSet.reversed`).  ``method="track"`` keeps a forward track
    when any backward track overlaps it (mean IoU over shared frames above
    ``overlap_thresh``).  ``method="id"`` first pairs tracks one-to-one by
    appearance distance below ``id_match_thresh``, takes the partner's boxes
    for frames missing inside the forward span, then applies the overlap
    rule to the pair.
    """
    if forward.num_frames != backward.num_frames:
        raise ValueError(
            f"passes cover different sequence lengths ({forward.num_frames} vs {backward.num_frames})"
        )
    kept: dict[int, dict[int, np.ndarray]] = {}
    if method == "track":
        for fid, traj in forward.boxes.items():
            if any(mean_overlap(traj, b) > overlap_thresh for b in backward.boxes.values()):
                kept[fid] = dict(traj)
    elif method == "id":
        f_ids = [i for i in sorted(forward.boxes) if i in forward.appearance]
        b_ids = [i for i in sorted(backward.boxes) if i in backward.appearance]
        if f_ids and b_ids:
            cost = np.array([[_cos(forward.appearance[f], backward.appearance[b]) for b in b_ids] for f in f_ids])
            for r, c in linear_assignment(cost):
                if cost[r, c] >= id_match_thresh:
                    continue
                traj, partner = forward.boxes[f_ids[r]], backward.boxes[b_ids[c]]
                if mean_overlap(traj, partner) <= overlap_thresh:
                    continue
                lo, hi = min(traj), max(traj)
                merged = dict(traj)
                for t, box in partner.items():
                    if lo < t < hi and t not in merged:
                        merged[t] = box
                kept[f_ids[r]] = dict(sorted(merged.items()))
    else:
        raise ValueError(f"unknown B2F method {method!r}")
    if fill:
        kept = {i: fill_gaps(t) for i, t in kept.items()}
    return TrackSet(forward.num_frames, kept, {i: forward.appearance[i] for i in kept if i in forward.appearance})
