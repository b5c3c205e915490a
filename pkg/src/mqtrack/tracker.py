"""Auto-regressive multi-query tracking: confirmation, reID, spawning, hypotheses.

One :class:`Tracker` instance follows one sequence.  Each frame, the
previous outputs of every active track are turned back into decoder
queries; the aggregated answer is accepted when its appearance stays close
to the track's memory.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from mqtrack.kernels import iou_matrix, linear_assignment
from mqtrack.model import (
    ALL_KINDS,
    SEMANTIC_KINDS,
    BoundingBox,
    Mode,
    QueryKind,
    SemanticQueryBundle,
)

# (tau_conf, tau_agree) per benchmark regime
TAU_PRESETS = {
    "mot17": (0.75, 0.1),
    "mot20": (0.65, 0.05),
    "tao-person": (0.80, 0.2),
    "gmot40": (0.85, 0.2),
    "tao": (0.65, 0.1),
}

_INFEASIBLE = 4.0  # above any cosine distance


# ------------------------------------------------------------------ appearance


def cosine_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine distance of a zero vector is undefined")
    return float(np.clip(1.0 - np.dot(u, v) / (nu * nv), 0.0, 2.0))


def _distances(query, candidates) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    c = np.asarray(candidates, dtype=np.float64).reshape(-1, q.shape[-1])
    nq, nc = np.linalg.norm(q), np.linalg.norm(c, axis=1)
    if nq == 0 or np.any(nc == 0):
        raise ValueError("cosine distance of a zero vector is undefined")
    return np.clip(1.0 - (c @ q) / (nc * nq), 0.0, 2.0)


def match_by_appearance(query_vec, candidates, tau: float) -> tuple[int, float] | None:
    """Closest candidate if its cosine distance is below ``tau`` (lowest index wins ties)."""
    if len(candidates) == 0:
        return None
    d = _distances(query_vec, candidates)
    j = int(np.argmin(d))
    return (j, float(d[j])) if d[j] < tau else None


class AppearanceMemory:
    """The spawn-frame vector (optional) plus a ring buffer of the last ``last`` vectors."""

    def __init__(self, keep_first: bool = True, last: int = 5):
        if last < 0 or (last == 0 and not keep_first):
            raise ValueError("memory must retain at least one vector")
        self.keep_first = keep_first
        self.last = last
        self.first: np.ndarray | None = None
        self.recent: deque[np.ndarray] = deque(maxlen=last)
        self._seen = False

    @property
    def capacity(self) -> int:
        return int(self.keep_first) + self.last

    def add(self, a) -> None:
        a = np.asarray(a, dtype=np.float64)
        n = np.linalg.norm(a)
        if n == 0:
            raise ValueError("appearance vectors must be nonzero")
        a = a / n
        if not self._seen and self.keep_first:
            self.first = a
        elif self.last:
            self.recent.append(a)
        self._seen = True

    def vectors(self) -> list[np.ndarray]:
        out = [self.first] if self.first is not None else []
        return out + list(self.recent)

    def __len__(self) -> int:
        return len(self.vectors())

    def copy(self) -> "AppearanceMemory":
        m = AppearanceMemory(self.keep_first, self.last)
        m.first = self.first
        m.recent = deque(self.recent, maxlen=self.last)
        m._seen = self._seen
        return m


def memory_distance(memory: AppearanceMemory, a, metric: str = "min") -> float:
    vecs = memory.vectors()
    if not vecs:
        raise ValueError("memory is empty")
    if metric == "min":
        return float(_distances(a, np.stack(vecs)).min())
    if metric == "avg":
        mean = np.mean(vecs, axis=0)
        if np.linalg.norm(mean) == 0:
            return 1.0
        return cosine_distance(a, mean)
    raise ValueError(f"unknown memory metric {metric!r}")


# ------------------------------------------------------------------ config and state


@dataclass(frozen=True)
class TrackerConfig:
    tau_conf: float = 0.75
    tau_agree: float = 0.1
    k_hyp: int = 5
    memory_first: bool = True
    memory_last: int = 5
    memory_metric: str = "min"
    lost_patience: int = 3
    mode: Mode = Mode.PRIVATE_AND_PUBLIC
    kinds: frozenset = ALL_KINDS
    aggregation: str = "collab_gating"
    multi_hypothesis: bool = True
    spawn_from_det: bool = True
    dedup_iou: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        object.__setattr__(self, "kinds", frozenset(self.kinds))
        if not 0 <= self.tau_conf <= 2:
            raise ValueError("tau_conf must lie in [0, 2]")
        if self.tau_agree < 0:
            raise ValueError("tau_agree must be >= 0")
        if self.k_hyp < 1:
            raise ValueError("k_hyp must be >= 1")
        if self.lost_patience < 0:
            raise ValueError("lost_patience must be >= 0")
        if self.memory_metric not in ("min", "avg"):
            raise ValueError("memory_metric must be 'min' or 'avg'")
        if self.memory_last < 0 or (self.memory_last == 0 and not self.memory_first):
            raise ValueError("memory must retain at least one vector")
        if not self.kinds:
            raise ValueError("at least one query kind is required")

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrackerConfig":
        tau_conf, tau_agree = TAU_PRESETS[name.lower()]
        return cls(tau_conf=tau_conf, tau_agree=tau_agree, **overrides)

    def new_memory(self) -> AppearanceMemory:
        return AppearanceMemory(self.memory_first, self.memory_last)


class TrackState(enum.Enum):
    ACTIVE = "active"
    LOST = "lost"
    FINISHED = "finished"


@dataclass
class Branch:
    """A tentative continuation: its own boxes, query bundle and memory."""

    suffix: list[tuple[int, BoundingBox]]
    apps: list[np.ndarray]
    bundle: SemanticQueryBundle
    memory: AppearanceMemory
    alive: bool = True

    def extend(self, t: int, V, b, a, tag: int) -> None:
        self.suffix.append((t, BoundingBox.from_array(b)))
        self.apps.append(np.array(a, dtype=np.float64))
        self.bundle = _bundle(V, b, a, tag)
        self.memory.add(a)


@dataclass
class Track:
    id: int
    tag: int
    bundle: SemanticQueryBundle
    memory: AppearanceMemory
    trajectory: list[tuple[int, BoundingBox]] = field(default_factory=list)
    state: TrackState = TrackState.ACTIVE
    frames_lost: int = 0
    hypotheses: list[Branch] = field(default_factory=list)
    apps: list[np.ndarray] = field(default_factory=list)

    @property
    def forked(self) -> bool:
        return bool(self.hypotheses)

    @property
    def head(self) -> Branch | None:
        return self.hypotheses[0] if self.hypotheses else None

    def record(self, t: int, b, a) -> None:
        self.trajectory.append((t, BoundingBox.from_array(b)))
        self.apps.append(np.array(a, dtype=np.float64))

    def mean_appearance(self) -> np.ndarray | None:
        if not self.apps:
            return None
        m = np.mean(self.apps, axis=0)
        n = np.linalg.norm(m)
        return m / n if n > 0 else m

    def boxes(self) -> dict[int, np.ndarray]:
        return {t: b.as_array() for t, b in self.trajectory}


@dataclass
class TrackUpdate:
    frame: int
    continued: list[int] = field(default_factory=list)
    spawned: list[int] = field(default_factory=list)
    lost: list[int] = field(default_factory=list)
    finished: list[int] = field(default_factory=list)


@dataclass
class _Candidate:
    V: np.ndarray
    b: np.ndarray
    a: np.ndarray
    source: str  # "det" or "detection"
    claimed: bool = False


# ------------------------------------------------------------------ engine


class Tracker:
    """Tracks one sequence frame by frame with a decoder model."""

    def __init__(self, model, config: TrackerConfig = TrackerConfig()):
        self.model = model
        self.config = config
        self.tracks: dict[int, Track] = {}
        self.frame = -1
        self._next_id = 0
        self._prev_det_app: np.ndarray | None = None

    # --- helpers
    def _free_tag(self) -> int | None:
        used = {t.tag for t in self.tracks.values() if t.state is not TrackState.FINISHED}
        for i in range(self.model.config.n_tags):
            if i not in used:
                return i
        return None

    def _spawn(self, t: int, V, b, a) -> Track | None:
        tag = self._free_tag()
        if tag is None:
            return None
        track = Track(self._next_id, tag, _bundle(V, b, a, tag), self.config.new_memory())
        self._next_id += 1
        track.memory.add(a)
        track.record(t, b, a)
        self.tracks[track.id] = track
        return track

    def _decode(self, frame_memory, owners_bundles, detections, mode, kinds):
        batch = self.model.build_query_batch(owners_bundles, detections, mode, kinds)
        return self.model.decode(frame_memory, batch), batch

    def _aggregate(self, out, batch, owners) -> dict:
        groups, keep = [], []
        for owner in owners:
            g = {k: r[0] for k in SEMANTIC_KINDS if (r := batch.rows(owner, k))}
            if g:
                groups.append(g)
                keep.append(owner)
        if not groups:
            return {}
        V, b, a, _ = self.model.aggregate_rows(out, groups, self.config.aggregation)
        result = {}
        for i, (owner, g) in enumerate(zip(keep, groups)):
            pos = out.app.data[g[QueryKind.POS]] if QueryKind.POS in g else None
            ident = out.app.data[g[QueryKind.ID]] if QueryKind.ID in g else None
            result[owner] = (V.data[i], b.data[i], a.data[i], pos, ident)
        return result

    def _confident(self, pos_app, id_app) -> bool:
        if pos_app is None or id_app is None:
            return True
        return cosine_distance(pos_app, id_app) < self.config.tau_agree

    def _dist(self, memory: AppearanceMemory, a) -> float:
        return memory_distance(memory, a, self.config.memory_metric)

    # --- lifecycle
    def init(self, frame, detections: Sequence[BoundingBox] | None = None) -> TrackUpdate:
        """Start the sequence at ``frame``: one track per public detection."""
        cfg = self.config
        if cfg.mode.uses_detections and detections is None:
            raise ValueError(f"{cfg.mode.value} tracking needs detections for the first frame")
        if self.frame >= 0:
            raise RuntimeError("tracker already initialised")
        self.frame = 0
        update = TrackUpdate(0)
        dets = list(detections or []) if cfg.mode.uses_detections else []
        mem = self.model.encode_frame(frame)
        out, batch = self._decode(mem, [], dets, cfg.mode, cfg.kinds)
        for r in batch.rows("detection"):
            V, b, a = out.triple(r)
            track = self._spawn(0, V, b, a)
            if track is not None:
                update.spawned.append(track.id)
        self._remember_det(out, batch)
        return update

    def _remember_det(self, out, batch) -> None:
        rows = batch.rows("det")
        self._prev_det_app = out.app.data[rows].copy() if rows else None

    def step(self, frame, detections: Sequence[BoundingBox] | None = None) -> TrackUpdate:
        cfg = self.config
        if self.frame < 0:
            raise RuntimeError("call init() first")
        self.frame += 1
        t = self.frame
        update = TrackUpdate(t)
        dets = list(detections or []) if cfg.mode.uses_detections else []

        active = sorted(i for i, tr in self.tracks.items() if tr.state is TrackState.ACTIVE)
        mem = self.model.encode_frame(frame)
        mains = [(i, self.tracks[i].head.bundle if self.tracks[i].forked else self.tracks[i].bundle) for i in active]
        out, batch = self._decode(mem, mains, dets, cfg.mode, cfg.kinds)
        own = self._aggregate(out, batch, active)

        cands = [
            _Candidate(*out.triple(r), source=o)
            for r, o in enumerate(batch.owners)
            if o in ("det", "detection")
        ]

        # 1. own-output confirmation
        confirmed: dict[int, tuple] = {}  # id -> (V, b, a, distance)
        gate: dict[int, bool] = {}
        for i in active:
            tr = self.tracks[i]
            if i not in own:
                continue
            V, b, a, pos_app, id_app = own[i]
            gate[i] = self._confident(pos_app, id_app)
            memory = tr.head.memory if tr.forked else tr.memory
            d = self._dist(memory, a)
            if d < cfg.tau_conf:
                confirmed[i] = (V, b, a, d)
        self._dedup_confirmed(confirmed)

        # 2. alternate branches follow their own outputs
        alt_boxes = self._advance_alternates(mem, t)

        taken = [c[1] for c in confirmed.values()] + alt_boxes
        self._claim_overlaps(cands, taken)

        # 3. tracks with no surviving continuation, plus lost ones, try reID
        def has_alternate(tr):
            return any(br.alive for br in tr.hypotheses[1:])

        newly_lost = [i for i in active if i not in confirmed and not has_alternate(self.tracks[i])]
        pool = sorted(
            [i for i, tr in self.tracks.items() if tr.state is TrackState.LOST] + newly_lost
        )
        reid = self._reid(pool, cands)

        # 4. commit per track
        base_memory: dict[int, AppearanceMemory] = {}
        for i in active:
            tr = self.tracks[i]
            if i in confirmed:
                V, b, a, _ = confirmed[i]
                if tr.forked:
                    tr.head.extend(t, V, b, a, tr.tag)
                    self._maybe_commit(tr)
                else:
                    base_memory[i] = tr.memory.copy()
                    tr.memory.add(a)
                    tr.record(t, b, a)
                    tr.bundle = _bundle(V, b, a, tr.tag)
                update.continued.append(i)
            elif tr.forked and has_alternate(tr):
                tr.head.alive = False
                self._maybe_commit(tr)
                update.continued.append(i)
        for i in pool:
            tr = self.tracks[i]
            if tr.forked:
                tr.head.alive = False
                self._commit(tr, self._longest(tr))
            if i in reid:
                c = reid[i]
                tr.state = TrackState.ACTIVE
                tr.frames_lost = 0
                tr.memory.add(c.a)
                tr.record(t, c.b, c.a)
                tr.bundle = _bundle(c.V, c.b, c.a, tr.tag)
                update.continued.append(i)
            elif tr.state is TrackState.ACTIVE:
                tr.state = TrackState.LOST
                tr.frames_lost = 0
                self._expire(tr, update)
            else:
                tr.frames_lost += 1
                self._expire(tr, update)
        for tr in self.tracks.values():
            # surviving branches first, so the head is always queryable
            tr.hypotheses.sort(key=lambda br: not br.alive)

        # 5. uncertain tracks fork onto nearby candidates
        if cfg.multi_hypothesis and cfg.k_hyp > 1:
            for i in sorted(base_memory):
                if not gate.get(i, True):
                    self._fork(self.tracks[i], t, cands, base_memory[i])

        # 6. new tracks
        for c in self._spawn_candidates(cands):
            track = self._spawn(t, c.V, c.b, c.a)
            if track is not None:
                c.claimed = True
                update.spawned.append(track.id)
        self._remember_det(out, batch)
        return update

    def _expire(self, tr: Track, update: TrackUpdate) -> None:
        if tr.frames_lost >= self.config.lost_patience:
            tr.state = TrackState.FINISHED
            update.finished.append(tr.id)
        else:
            update.lost.append(tr.id)

    def _dedup_confirmed(self, confirmed: dict) -> None:
        """Two tracks on one object: the one closer to its memory keeps it."""
        ids = sorted(confirmed, key=lambda i: (confirmed[i][3], i))
        kept: list[int] = []
        for i in ids:
            box = confirmed[i][1]
            if kept and iou_matrix(_xyxy(box[None]), _xyxy(np.stack([confirmed[k][1] for k in kept]))).max() > self.config.dedup_iou:
                del confirmed[i]
            else:
                kept.append(i)

    def _claim_overlaps(self, cands: list[_Candidate], boxes: list) -> None:
        if not cands or not boxes:
            return
        ious = iou_matrix(_xyxy(np.stack([c.b for c in cands])), _xyxy(np.stack(boxes)))
        for c, row in zip(cands, ious):
            if row.max() > self.config.dedup_iou:
                c.claimed = True

    def _reid(self, pool: list[int], cands: list[_Candidate]) -> dict[int, _Candidate]:
        free = [c for c in cands if not c.claimed]
        if not pool or not free:
            return {}
        cost = np.array([[self._dist(self.tracks[i].memory, c.a) for c in free] for i in pool])
        cost = np.where(cost < self.config.tau_conf, cost, _INFEASIBLE)
        out = {}
        for r, j in linear_assignment(cost):
            if cost[r, j] < self.config.tau_conf:
                out[pool[r]] = free[j]
                free[j].claimed = True
        return out

    def _spawn_candidates(self, cands: list[_Candidate]) -> list[_Candidate]:
        cfg = self.config
        picked: list[_Candidate] = []
        det_spawn = cfg.mode is Mode.PRIVATE or (cfg.mode is Mode.PRIVATE_AND_PUBLIC and cfg.spawn_from_det)
        for c in cands:
            if c.claimed:
                continue
            if c.source == "det":
                if not det_spawn or self._prev_det_app is None:
                    continue
                if match_by_appearance(c.a, self._prev_det_app, cfg.tau_conf) is None:
                    continue
            if picked and iou_matrix(_xyxy(c.b[None]), _xyxy(np.stack([p.b for p in picked]))).max() > cfg.dedup_iou:
                continue
            picked.append(c)
        return picked

    # --- hypotheses
    def _fork(self, tr: Track, t: int, cands: list[_Candidate], base: AppearanceMemory) -> None:
        """Open alternates next to the continuation just recorded at ``t``."""
        cfg = self.config
        own_box = tr.trajectory[-1][1].as_array()
        scored = []
        for j, c in enumerate(cands):
            if c.claimed:
                continue
            if iou_matrix(_xyxy(c.b[None]), _xyxy(own_box[None]))[0, 0] > cfg.dedup_iou:
                continue
            d = self._dist(base, c.a)
            if d < cfg.tau_conf:
                scored.append((d, j))
        scored.sort()
        alts = [cands[j] for _, j in scored[: cfg.k_hyp - 1]]
        if not alts:
            return
        # the frame just recorded becomes the first entry of branch 0
        t_last, b_last = tr.trajectory.pop()
        a_last = tr.apps.pop()
        main = Branch([(t_last, b_last)], [a_last], tr.bundle, tr.memory)
        tr.memory = base
        tr.hypotheses = [main]
        for c in alts:
            c.claimed = True
            br = Branch([], [], tr.bundle, base.copy())
            br.extend(t, c.V, c.b, c.a, tr.tag)
            tr.hypotheses.append(br)

    def _advance_alternates(self, frame_memory, t: int) -> list:
        """Decode and confirm every alternate branch; returns their accepted boxes."""
        cfg = self.config
        semantic = cfg.kinds - {QueryKind.DET}
        boxes = []
        depth = max((len(tr.hypotheses) for tr in self.tracks.values()), default=0)
        for j in range(1, depth):
            owners = [
                (i, tr.hypotheses[j].bundle)
                for i, tr in sorted(self.tracks.items())
                if tr.state is TrackState.ACTIVE and len(tr.hypotheses) > j and tr.hypotheses[j].alive
            ]
            if not owners:
                continue
            if not semantic:
                for i, _ in owners:
                    self.tracks[i].hypotheses[j].alive = False
                continue
            out, batch = self._decode(frame_memory, owners, (), Mode.PUBLIC, semantic)
            res = self._aggregate(out, batch, [i for i, _ in owners])
            for i, _ in owners:
                br = self.tracks[i].hypotheses[j]
                if i not in res:
                    br.alive = False
                    continue
                V, b, a, _, _ = res[i]
                if self._dist(br.memory, a) < cfg.tau_conf:
                    br.extend(t, V, b, a, self.tracks[i].tag)
                    boxes.append(b)
                else:
                    br.alive = False
        return boxes

    @staticmethod
    def _longest(tr: Track) -> Branch:
        # most recent last frame, then longest suffix, then lowest index
        return max(
            tr.hypotheses,
            key=lambda br: (br.suffix[-1][0] if br.suffix else -1, len(br.suffix), -tr.hypotheses.index(br)),
        )

    def _maybe_commit(self, tr: Track) -> bool:
        """Commit when at most one branch survives; True if the track lives on."""
        alive = [br for br in tr.hypotheses if br.alive]
        if len(alive) > 1:
            return True
        if len(alive) == 1:
            self._commit(tr, alive[0])
            return True
        return False

    def _commit(self, tr: Track, br: Branch) -> None:
        tr.trajectory.extend(br.suffix)
        tr.apps.extend(br.apps)
        tr.memory = br.memory
        tr.bundle = br.bundle
        tr.hypotheses = []

    def finalize(self) -> list[Track]:
        """Commit surviving branches (sequence end) and return all tracks by id."""
        for tr in self.tracks.values():
            if tr.forked:
                alive = [br for br in tr.hypotheses if br.alive]
                self._commit(tr, max(alive, key=lambda br: len(br.suffix)) if alive else self._longest(tr))
        return [self.tracks[i] for i in sorted(self.tracks)]


def _bundle(V, b, a, tag: int) -> SemanticQueryBundle:
    return SemanticQueryBundle(np.array(V, dtype=np.float64), BoundingBox.from_array(b), np.array(a, dtype=np.float64), tag)


def _xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half = boxes[:, 2:] / 2
    return np.concatenate([boxes[:, :2] - half, boxes[:, :2] + half], axis=1)


def track_sequence(
    model,
    frames: Iterable[np.ndarray],
    config: TrackerConfig = TrackerConfig(),
    detections: Sequence[Sequence[BoundingBox] | None] | None = None,
) -> list[Track]:
    """Run a fresh :class:`Tracker` over ``frames``; ``detections[t]`` feeds frame ``t``."""
    tracker = Tracker(model, config)
    for t, frame in enumerate(frames):
        dets = detections[t] if detections is not None and t < len(detections) else None
        if t == 0:
            tracker.init(frame, dets if dets is not None or not config.mode.uses_detections else [])
        else:
            tracker.step(frame, dets)
    return tracker.finalize()


def with_kinds(config: TrackerConfig, kinds: Iterable[QueryKind]) -> TrackerConfig:
    return replace(config, kinds=frozenset(kinds))
