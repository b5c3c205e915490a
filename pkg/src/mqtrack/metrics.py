"""CLEAR-MOT (MOTA, ID switches), identity F1 and MT/ML counts.

Ground-truth rows with ``conf == 0`` are ignore regions (occluded objects in
our synthetic ground truth) and are dropped before evaluation.
"""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from mqtrack.kernels import iou_matrix, linear_assignment
from mqtrack.motio import MotRecord

MT_RATIO = 0.8
ML_RATIO = 0.2
_BIG = 1e6


@dataclass
class MetricsReport:
    name: str = "seq"
    mota: float = math.nan
    idf1: float = math.nan
    tp: int = 0
    fp: int = 0
    fn: int = 0
    idsw: int = 0
    gt: int = 0
    idtp: int = 0
    idfp: int = 0
    idfn: int = 0
    mt: int = 0
    ml: int = 0
    gt_tracks: int = 0
    per_sequence: list["MetricsReport"] = field(default_factory=list)


COLUMNS = ("name", "MOTA", "IDF1", "TP", "FP", "FN", "IDSW", "GT", "IDTP", "IDFP", "IDFN", "MT", "ML", "GT_TRACKS")


def _rates(r: MetricsReport) -> MetricsReport:
    r.mota = 1.0 - (r.fn + r.fp + r.idsw) / r.gt if r.gt > 0 else math.nan
    denom = 2 * r.idtp + r.idfp + r.idfn
    r.idf1 = 2 * r.idtp / denom if denom > 0 else math.nan
    return r


def _xyxy(rec: MotRecord) -> tuple[float, float, float, float]:
    return (rec.bb_left, rec.bb_top, rec.bb_left + rec.bb_width, rec.bb_top + rec.bb_height)


def _by_frame(records: Iterable[MotRecord], what: str) -> dict[int, dict[int, tuple]]:
    frames: dict[int, dict[int, tuple]] = defaultdict(dict)
    for r in records:
        if r.id in frames[r.frame]:
            raise ValueError(f"duplicate {what} id {r.id} in frame {r.frame}")
        frames[r.frame][r.id] = _xyxy(r)
    return frames


def match_frame(
    gt: dict[int, tuple], pred: dict[int, tuple], prev: dict[int, int], iou_thresh: float
) -> dict[int, int]:
    """gt id -> pred id for one frame, keeping still-valid pairs from ``prev``."""
    if not gt or not pred:
        return {}
    g_ids, p_ids = list(gt), list(pred)
    iou = iou_matrix(np.array([gt[g] for g in g_ids]), np.array([pred[p] for p in p_ids]))
    gi = {g: i for i, g in enumerate(g_ids)}
    pj = {p: j for j, p in enumerate(p_ids)}
    out: dict[int, int] = {}
    for g, p in prev.items():
        if g in gi and p in pj and iou[gi[g], pj[p]] >= iou_thresh:
            out[g] = p
    rest_g = [g for g in g_ids if g not in out]
    used = set(out.values())
    rest_p = [p for p in p_ids if p not in used]
    if rest_g and rest_p:
        sub = iou[np.ix_([gi[g] for g in rest_g], [pj[p] for p in rest_p])]
        cost = np.where(sub >= iou_thresh, 1.0 - sub, _BIG)
        for r, c in linear_assignment(cost):
            if cost[r, c] < _BIG:
                out[rest_g[r]] = rest_p[c]
    return out


def evaluate(
    gt_records: Sequence[MotRecord],
    pred_records: Sequence[MotRecord],
    iou_thresh: float = 0.5,
    name: str = "seq",
    matcher=match_frame,
) -> MetricsReport:
    gt_f = _by_frame([r for r in gt_records if r.conf != 0], "ground-truth")
    pr_f = _by_frame(pred_records, "prediction")
    rep = MetricsReport(name=name)
    prev: dict[int, int] = {}
    last_match: dict[int, int] = {}
    gt_len: dict[int, int] = defaultdict(int)
    gt_hit: dict[int, int] = defaultdict(int)
    for f in sorted(set(gt_f) | set(pr_f)):
        g, p = gt_f.get(f, {}), pr_f.get(f, {})
        m = matcher(g, p, prev, iou_thresh)
        for gid in g:
            gt_len[gid] += 1
        for gid, pid in m.items():
            gt_hit[gid] += 1
            if gid in last_match and last_match[gid] != pid:
                rep.idsw += 1
            last_match[gid] = pid
        rep.tp += len(m)
        rep.fn += len(g) - len(m)
        rep.fp += len(p) - len(m)
        rep.gt += len(g)
        prev = m
    rep.gt_tracks = len(gt_len)
    for gid, n in gt_len.items():
        cover = gt_hit[gid] / n
        rep.mt += cover >= MT_RATIO
        rep.ml += cover <= ML_RATIO
    rep.idtp, rep.idfp, rep.idfn = _identity_counts(gt_f, pr_f, iou_thresh)
    return _rates(rep)


def _identity_counts(gt_f, pr_f, iou_thresh: float) -> tuple[int, int, int]:
    """Trajectory-level one-to-one matching maximising identity true positives."""
    g_ids = sorted({g for fr in gt_f.values() for g in fr})
    p_ids = sorted({p for fr in pr_f.values() for p in fr})
    n_gt = sum(len(fr) for fr in gt_f.values())
    n_pr = sum(len(fr) for fr in pr_f.values())
    if not g_ids or not p_ids:
        return 0, n_pr, n_gt
    gi = {g: i for i, g in enumerate(g_ids)}
    pj = {p: j for j, p in enumerate(p_ids)}
    overlap = np.zeros((len(g_ids), len(p_ids)), dtype=np.int64)
    for f, g in gt_f.items():
        p = pr_f.get(f)
        if not g or not p:
            continue
        gl, pl = list(g), list(p)
        hit = iou_matrix(np.array([g[x] for x in gl]), np.array([p[y] for y in pl])) >= iou_thresh
        for r, c in zip(*np.nonzero(hit)):
            overlap[gi[gl[r]], pj[pl[c]]] += 1
    idtp = int(sum(overlap[r, c] for r, c in linear_assignment(-overlap.astype(np.float64))))
    return idtp, n_pr - idtp, n_gt - idtp


def combine(reports: Sequence[MetricsReport], name: str = "OVERALL") -> MetricsReport:
    """Sum counts over sequences and recompute rates from the totals."""
    total = MetricsReport(name=name, per_sequence=list(reports))
    for r in reports:
        for attr in ("tp", "fp", "fn", "idsw", "gt", "idtp", "idfp", "idfn", "mt", "ml", "gt_tracks"):
            setattr(total, attr, getattr(total, attr) + getattr(r, attr))
    return _rates(total)


def _row(r: MetricsReport) -> list[str]:
    return [
        r.name,
        f"{r.mota:.4f}",
        f"{r.idf1:.4f}",
        *(str(getattr(r, a)) for a in ("tp", "fp", "fn", "idsw", "gt", "idtp", "idfp", "idfn", "mt", "ml", "gt_tracks")),
    ]


def _rows(report) -> list[list[str]]:
    if isinstance(report, MetricsReport):
        if report.per_sequence:
            return [_row(r) for r in report.per_sequence] + [_row(report)]
        return [_row(report)]
    reports = list(report)
    if not reports:
        return []
    if len(reports) == 1:
        return [_row(reports[0])]
    return _rows(combine(reports))


def report_format(report) -> str:
    """Whitespace-aligned table; ``line.split()`` recovers the fields."""
    rows = [list(COLUMNS)] + _rows(report)
    widths = [max(len(row[i]) for row in rows) for i in range(len(COLUMNS))]
    return "\n".join("  ".join(cell.rjust(w) if i else cell.ljust(w) for i, (cell, w) in enumerate(zip(row, widths))).rstrip() for row in rows) + "\n"


def write_report_csv(report, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        w.writerows(_rows(report))


def parse_report(text: str) -> list[dict[str, str]]:
    lines = [ln.split() for ln in text.strip().splitlines()]
    header, body = lines[0], lines[1:]
    return [dict(zip(header, row)) for row in body]


REPORT_FIELDS = tuple(f.name for f in fields(MetricsReport) if f.name != "per_sequence")
