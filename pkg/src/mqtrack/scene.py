"""Synthetic scenes rendered as feature grids, pseudo-tracking pairs, and disk layout.

Each object paints a fixed unit signature into the grid cells it covers,
weighted by the covered fraction of each cell.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from mqtrack.motio import MotRecord, read_mot, write_mot


class AugmentationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    grid_h: int = 12
    grid_w: int = 12
    channels: int = 8
    n_objects_min: int = 2
    n_objects_max: int = 4
    speed_min: float = 0.005
    speed_max: float = 0.02
    size_min: float = 0.15
    size_max: float = 0.25
    motion_noise: float = 0.002
    pixel_noise: float = 0.01
    palette_size: int = 8
    palette_seed: int = 0
    occlusion_rate: float = 0.0
    occlusion_min: int = 1
    occlusion_max: int = 3
    length: int = 30
    cell_px: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_objects_min <= self.n_objects_max:
            raise ValueError("object count range is empty")
        if not 0 <= self.speed_min <= self.speed_max:
            raise ValueError("velocity range is empty")
        if not 0 < self.size_min <= self.size_max <= 1:
            raise ValueError("size range is empty")
        if not 1 <= self.occlusion_min <= self.occlusion_max:
            raise ValueError("occlusion duration range is empty")
        if self.length < 1 or self.grid_h < 1 or self.grid_w < 1 or self.channels < 1 or self.palette_size < 1:
            raise ValueError("sizes must be positive")
        if not 0 <= self.occlusion_rate <= 1:
            raise ValueError("occlusion_rate must lie in [0, 1]")

    @property
    def width_px(self) -> int:
        return self.grid_w * self.cell_px

    @property
    def height_px(self) -> int:
        return self.grid_h * self.cell_px


@dataclass
class GtObject:
    track_id: int
    box: np.ndarray  # normalised (cx, cy, w, h)
    visible: bool


@dataclass
class Sequence:
    frames: np.ndarray  # (T, H, W, C)
    gt: list[list[GtObject]]
    width_px: int = 512
    height_px: int = 512
    signatures: dict[int, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)

    def visible(self, t: int) -> list[GtObject]:
        return [o for o in self.gt[t] if o.visible]

    def reversed(self) -> "Sequence":
        return Sequence(self.frames[::-1].copy(), self.gt[::-1], self.width_px, self.height_px, dict(self.signatures))


def palette(channels: int, size: int, seed: int = 0) -> np.ndarray:
    """Unit signatures; mutually orthogonal when ``size <= channels``."""
    rng = np.random.default_rng(seed)
    if size <= channels:
        q, _ = np.linalg.qr(rng.normal(size=(channels, channels)))
        return q.T[:size].copy()
    v = rng.normal(size=(size, channels))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def coverage(box: np.ndarray, h: int, w: int) -> np.ndarray:
    """Fraction of each grid cell covered by a (cx, cy, w, h) box."""
    cx, cy, bw, bh = box
    x0, x1 = cx - bw / 2, cx + bw / 2
    y0, y1 = cy - bh / 2, cy + bh / 2
    edges_x = np.arange(w + 1) / w
    edges_y = np.arange(h + 1) / h
    ox = np.clip(np.minimum(edges_x[1:], x1) - np.maximum(edges_x[:-1], x0), 0, None) * w
    oy = np.clip(np.minimum(edges_y[1:], y1) - np.maximum(edges_y[:-1], y0), 0, None) * h
    return oy[:, None] * ox[None, :]


def render(objects: list[tuple[np.ndarray, np.ndarray]], h: int, w: int, channels: int) -> np.ndarray:
    frame = np.zeros((h, w, channels))
    for box, sig in objects:
        frame += coverage(box, h, w)[:, :, None] * sig[None, None, :]
    return frame


def generate_scene(config: SceneConfig) -> Sequence:
    rng = np.random.default_rng(config.seed)
    n = int(rng.integers(config.n_objects_min, config.n_objects_max + 1))
    if n > config.palette_size:
        raise ValueError(f"{n} objects exceed the palette of {config.palette_size}")
    pal = palette(config.channels, config.palette_size, config.palette_seed)
    colours = rng.choice(config.palette_size, size=n, replace=False)
    sizes = rng.uniform(config.size_min, config.size_max, size=(n, 2))
    pos = rng.uniform(sizes / 2, 1 - sizes / 2)
    speed = rng.uniform(config.speed_min, config.speed_max, size=n)
    angle = rng.uniform(0, 2 * math.pi, size=n)
    vel = np.stack([speed * np.cos(angle), speed * np.sin(angle)], axis=1)
    occluded_for = np.zeros(n, dtype=int)

    frames = np.zeros((config.length, config.grid_h, config.grid_w, config.channels))
    gt: list[list[GtObject]] = []
    for t in range(config.length):
        if t > 0:
            for i in range(n):
                if occluded_for[i] > 0:
                    occluded_for[i] -= 1
                elif config.occlusion_rate > 0 and rng.random() < config.occlusion_rate:
                    occluded_for[i] = int(rng.integers(config.occlusion_min, config.occlusion_max + 1))
        objs = []
        row = []
        for i in range(n):
            box = np.array([pos[i, 0], pos[i, 1], sizes[i, 0], sizes[i, 1]])
            visible = occluded_for[i] == 0
            row.append(GtObject(i, box, bool(visible)))
            if visible:
                objs.append((box, pal[colours[i]]))
        frame = render(objs, config.grid_h, config.grid_w, config.channels)
        if config.pixel_noise > 0:
            frame += rng.normal(0.0, config.pixel_noise, size=frame.shape)
        frames[t] = frame
        gt.append(row)
        # constant velocity with jitter, reflecting off the borders
        if config.motion_noise > 0:
            pos = pos + vel + rng.normal(0.0, config.motion_noise, size=pos.shape)
        else:
            pos = pos + vel
        lo, hi = sizes / 2, 1 - sizes / 2
        below, above = pos < lo, pos > hi
        pos = np.where(below, 2 * lo - pos, pos)
        pos = np.where(above, 2 * hi - pos, pos)
        vel = np.where(below | above, -vel, vel)
        pos = np.clip(pos, lo, hi)
    return Sequence(frames, gt, config.width_px, config.height_px, {i: pal[colours[i]] for i in range(n)})


# ------------------------------------------------------------------ pseudo pairs


def _affine_boxes(boxes: np.ndarray, s: float, t: np.ndarray) -> np.ndarray:
    out = boxes.copy()
    out[:, :2] = 0.5 + s * (boxes[:, :2] - 0.5) + t
    out[:, 2:] = s * boxes[:, 2:]
    return out


def _inside(boxes: np.ndarray) -> bool:
    lo = boxes[:, :2] - boxes[:, 2:] / 2
    hi = boxes[:, :2] + boxes[:, 2:] / 2
    return bool(np.all(lo >= 0) and np.all(hi <= 1))


def warp_frame(frame: np.ndarray, s: float, t: np.ndarray) -> np.ndarray:
    """Resample ``frame`` under p -> 0.5 + s (p - 0.5) + t in normalised coordinates."""
    if s == 1.0 and not np.any(t):
        return frame.copy()
    h, w = frame.shape[:2]
    off_y = (0.5 - 0.5 * h - t[1] * h) / s + 0.5 * h - 0.5
    off_x = (0.5 - 0.5 * w - t[0] * w) / s + 0.5 * w - 0.5
    return ndimage.affine_transform(
        frame, np.diag([1 / s, 1 / s, 1.0]), offset=(off_y, off_x, 0.0), order=1, mode="constant", cval=0.0
    )


def pseudo_pair(
    frame: np.ndarray,
    gt_boxes: np.ndarray,
    max_aug: float = 0.05,
    enforce_no_loss: bool = True,
    seed: int | np.random.Generator = 0,
    max_retries: int = 100,
):
    """Two training frames from one: ``frame`` and a random translation + scale of it.

    Returns ``(frame_a, frame_b, boxes_b, keep)`` where ``boxes_b[k]`` is the
    transformed box of original index ``keep[k]``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    for _ in range(max_retries):
        s = 1.0 + rng.uniform(-max_aug, max_aug) if max_aug > 0 else 1.0
        t = rng.uniform(-max_aug, max_aug, size=2) if max_aug > 0 else np.zeros(2)
        moved = _affine_boxes(boxes, s, t)
        if enforce_no_loss and not _inside(moved):
            continue
        keep = list(range(len(boxes)))
        if not enforce_no_loss:
            lo = np.clip(moved[:, :2] - moved[:, 2:] / 2, 0, 1)
            hi = np.clip(moved[:, :2] + moved[:, 2:] / 2, 0, 1)
            wh = hi - lo
            keep = [i for i in range(len(boxes)) if wh[i, 0] > 0 and wh[i, 1] > 0]
            moved = np.concatenate([(lo + hi) / 2, wh], axis=1)[keep]
        return frame.copy(), warp_frame(frame, s, t), moved, keep
    raise AugmentationError(
        f"no transform kept all {len(boxes)} boxes inside the frame after {max_retries} draws (max_aug={max_aug})"
    )


# ------------------------------------------------------------------ disk layout


def to_pixels(box: np.ndarray, width_px: int, height_px: int) -> tuple[float, float, float, float]:
    cx, cy, w, h = box
    return ((cx - w / 2) * width_px, (cy - h / 2) * height_px, w * width_px, h * height_px)


def from_pixels(left, top, width, height, width_px: int, height_px: int) -> np.ndarray:
    return np.array([(left + width / 2) / width_px, (top + height / 2) / height_px, width / width_px, height / height_px])


def gt_records(seq: Sequence) -> list[MotRecord]:
    """Ground truth as MOT rows; occluded objects carry conf 0 (ignored by evaluation)."""
    out = []
    for t, row in enumerate(seq.gt):
        for o in row:
            out.append(MotRecord(t + 1, o.track_id, *to_pixels(o.box, seq.width_px, seq.height_px), 1.0 if o.visible else 0.0))
    return out


def detection_records(seq: Sequence, frames: range | None = None) -> list[MotRecord]:
    """Visible ground-truth boxes as public detections (id -1)."""
    frames = range(len(seq)) if frames is None else frames
    out = []
    for t in frames:
        for o in seq.visible(t):
            out.append(MotRecord(t + 1, -1, *to_pixels(o.box, seq.width_px, seq.height_px), 1.0))
    return out


def save_sequence(seq: Sequence, out_dir, config: SceneConfig | None = None) -> Path:
    """``frames/000001.npy ...``, ``gt.txt`` (MOT) and ``meta.json``."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(seq.frames):
        np.save(out / "frames" / f"{t + 1:06d}.npy", frame)
    write_mot(gt_records(seq), out / "gt.txt")
    meta = {
        "length": len(seq),
        "grid": list(seq.frames.shape[1:]),
        "width_px": seq.width_px,
        "height_px": seq.height_px,
        "scene": asdict(config) if config is not None else None,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_sequence(path) -> Sequence:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{path} is not a sequence directory (no meta.json)")
    meta = json.loads(meta_path.read_text())
    frames = np.stack([np.load(path / "frames" / f"{t + 1:06d}.npy") for t in range(meta["length"])])
    wpx, hpx = meta["width_px"], meta["height_px"]
    gt: list[list[GtObject]] = [[] for _ in range(meta["length"])]
    gt_path = path / "gt.txt"
    if gt_path.exists():
        for r in read_mot(gt_path, "ground_truth"):
            box = from_pixels(r.bb_left, r.bb_top, r.bb_width, r.bb_height, wpx, hpx)
            gt[r.frame - 1].append(GtObject(r.id, box, r.conf > 0))
    return Sequence(frames, gt, wpx, hpx)
