"""Two-frame training: an init frame, then a tracking frame fed with its outputs."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np

from mqtrack import grad as G
from mqtrack.grad import Tape
from mqtrack.losses import LossWeights, set_prediction_loss
from mqtrack.model import (
    ALL_KINDS,
    SEMANTIC_KINDS,
    BoundingBox,
    MQTModel,
    Mode,
    ModelConfig,
    SemanticQueryBundle,
)
from mqtrack.scene import Sequence as SceneSequence
from mqtrack.scene import pseudo_pair

log = logging.getLogger(__name__)

GtFrame = list[tuple[int, np.ndarray]]


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    lr: float = 2e-3
    lr_final: float = 2e-4
    seed: int = 0
    grad_clip: float = 1.0
    p_init_pos: float = 0.5
    p_drop_track: float = 0.15
    p_reverse: float = 0.5
    p_pseudo_pair: float = 0.0
    max_aug: float = 0.05
    warmup_identity: float = 0.3
    aux_weight: float = 1.0
    tau_conf: float = 0.75
    box_jitter: float = 0.15

    def __post_init__(self):
        if self.iterations < 0 or self.lr <= 0 or self.lr_final <= 0:
            raise ValueError("iterations must be >= 0 and learning rates > 0")
        for name in ("p_init_pos", "p_drop_track", "p_reverse", "p_pseudo_pair", "warmup_identity"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            m = self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            self.params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# ------------------------------------------------------------------ samples


@dataclass
class Pair:
    frame_a: np.ndarray
    gt_a: GtFrame
    frame_b: np.ndarray
    gt_b: GtFrame


def scene_pairs(seq: SceneSequence) -> list[Pair]:
    out = []
    for t in range(len(seq) - 1):
        gt_a = [(o.track_id, o.box) for o in seq.visible(t)]
        gt_b = [(o.track_id, o.box) for o in seq.visible(t + 1)]
        out.append(Pair(seq.frames[t], gt_a, seq.frames[t + 1], gt_b))
    return out


def sample_pair(sequences: Sequence[SceneSequence], cfg: TrainConfig, rng: np.random.Generator) -> Pair:
    seq = sequences[int(rng.integers(len(sequences)))]
    t = int(rng.integers(len(seq) - 1)) if len(seq) > 1 else 0
    if len(seq) == 1 or rng.random() < cfg.p_pseudo_pair:
        vis = seq.visible(t)
        boxes = np.array([o.box for o in vis]).reshape(-1, 4)
        fa, fb, moved, keep = pseudo_pair(seq.frames[t], boxes, cfg.max_aug, True, rng)
        return Pair(fa, [(o.track_id, o.box) for o in vis], fb, [(vis[i].track_id, moved[k]) for k, i in enumerate(keep)])
    gt_a = [(o.track_id, o.box) for o in seq.visible(t)]
    gt_b = [(o.track_id, o.box) for o in seq.visible(t + 1)]
    pair = Pair(seq.frames[t], gt_a, seq.frames[t + 1], gt_b)
    if rng.random() < cfg.p_reverse:
        pair = Pair(pair.frame_b, pair.gt_b, pair.frame_a, pair.gt_a)
    return pair


# ------------------------------------------------------------------ loss


def jitter_box(box, scale: float, rng: np.random.Generator) -> BoundingBox:
    """Perturb centre and size in proportion to the box size."""
    b = np.asarray(box, dtype=np.float64).copy()
    if scale > 0:
        b[:2] += rng.normal(0.0, scale, 2) * b[2:]
        b[2:] *= np.exp(rng.normal(0.0, scale, 2))
    b[2:] = np.clip(b[2:], 1e-3, 1.0)
    b[:2] = np.clip(b[:2], 0.0, 1.0)
    return BoundingBox.from_array(b)



def pair_loss(
    model: MQTModel,
    P,
    pair: Pair,
    rng: np.random.Generator,
    cfg: TrainConfig,
    weights: LossWeights,
    identity_always: bool,
) -> tuple[G.Tensor, dict]:
    mc = model.config
    n_gt = max(1, len(pair.gt_a))
    # init frame: some objects arrive as pos queries, the rest must be found by det queries
    ids_a = [gid for gid, _ in pair.gt_a]
    boxes_a = dict(pair.gt_a)
    given = [gid for gid in ids_a if rng.random() < cfg.p_init_pos]
    mem_a = model.encode_frame(pair.frame_a, P)
    batch_a = model.build_query_batch(
        [], [jitter_box(boxes_a[g], cfg.box_jitter, rng) for g in given], Mode.PRIVATE_AND_PUBLIC, ALL_KINDS, P
    )
    out_a = model.decode(mem_a, batch_a, P)
    rows_given = dict(zip(given, batch_a.rows("detection")))
    loss_a, diag_a = set_prediction_loss(
        out_a.boxes, out_a.app, pair.gt_a, rows_given, batch_a.rows("det"), None, {}, cfg.tau_conf, weights,
        identity_always=True,
    )
    init_row = {gid: r for r, gid in diag_a["pairs"]}
    total = loss_a * (1.0 / n_gt)
    box_part = (diag_a["l1"] * weights.l1 + diag_a["giou"] * weights.giou) / n_gt
    app_part = 0.0

    # tracking frame
    ids_b = {gid for gid, _ in pair.gt_b}
    tracked = [g for g in ids_a if g in init_row and (g not in ids_b or rng.random() >= cfg.p_drop_track)]
    if len(tracked) > mc.n_tags:
        tracked = tracked[: mc.n_tags]
    tags = rng.permutation(mc.n_tags)[: len(tracked)]
    V_a, b_a, a_a = out_a.V.data, out_a.boxes.data, out_a.app.data
    tracks = [
        (g, SemanticQueryBundle(V_a[init_row[g]], jitter_box(b_a[init_row[g]], cfg.box_jitter, rng), a_a[init_row[g]], int(tag)))
        for g, tag in zip(tracked, tags)
    ]
    mem_b = model.encode_frame(pair.frame_b, P)
    batch_b = model.build_query_batch(tracks, (), Mode.PRIVATE, ALL_KINDS, P)
    out_b = model.decode(mem_b, batch_b, P)
    det_rows = batch_b.rows("det")
    prev_bank = out_a.app
    n_gt_b = max(1, len(pair.gt_b))
    if tracked:
        groups = [{k: batch_b.rows(g, k)[0] for k in SEMANTIC_KINDS} for g in tracked]
        V, b, a, _ = model.aggregate_rows(out_b, groups, "collab_gating", P)
        idx = np.array(det_rows)
        pred_boxes = G.concat([b, out_b.boxes[idx]], axis=0)
        pred_app = G.concat([a, out_b.app[idx]], axis=0)
        T = len(tracked)
        loss_b, diag_b = set_prediction_loss(
            pred_boxes, pred_app, pair.gt_b, {g: i for i, g in enumerate(tracked)}, list(range(T, T + len(det_rows))),
            prev_bank, init_row, cfg.tau_conf, weights, identity_always=identity_always,
        )
        if cfg.aux_weight > 0:
            for k in SEMANTIC_KINDS:
                rows = np.array([batch_b.rows(g, k)[0] for g in tracked])
                aux, _ = set_prediction_loss(
                    out_b.boxes[rows], out_b.app[rows], pair.gt_b, {g: i for i, g in enumerate(tracked)}, [],
                    prev_bank, init_row, cfg.tau_conf, weights, identity_always=True,
                )
                total = total + aux * (cfg.aux_weight / n_gt_b)
    else:
        loss_b, diag_b = set_prediction_loss(
            out_b.boxes, out_b.app, pair.gt_b, {}, det_rows, prev_bank, init_row, cfg.tau_conf, weights
        )
    total = total + loss_b * (1.0 / n_gt_b)
    box_part += (diag_b["l1"] * weights.l1 + diag_b["giou"] * weights.giou) / n_gt_b
    app_part += diag_b["app"] * weights.app_loss / n_gt_b
    return total, {"box": box_part, "app": app_part, "by_identity": diag_b["by_identity"]}


# ------------------------------------------------------------------ loop


@dataclass
class TrainResult:
    model: MQTModel
    history: list[dict]
    seconds: float


def train(
    sequences: Sequence[SceneSequence],
    model_config: ModelConfig = ModelConfig(),
    cfg: TrainConfig = TrainConfig(),
    weights: LossWeights = LossWeights(),
    model: MQTModel | None = None,
    callback: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Fit a model on adjacent-frame pairs drawn from ``sequences``; deterministic per seed."""
    if not sequences:
        raise ValueError("no training sequences")
    rng = np.random.default_rng(cfg.seed)
    model = model or MQTModel(model_config, seed=cfg.seed)
    opt = Adam(model.params, cfg.lr)
    history = []
    start = time.perf_counter()
    warm = int(cfg.warmup_identity * cfg.iterations)
    for it in range(cfg.iterations):
        frac = it / max(1, cfg.iterations - 1)
        opt.lr = cfg.lr * (cfg.lr_final / cfg.lr) ** frac
        pair = sample_pair(sequences, cfg, rng)
        tape = Tape()
        P = model.view(tape)
        loss, diag = pair_loss(model, P, pair, rng, cfg, weights, identity_always=it < warm)
        if loss.recorded:
            grads = P.grads(tape.backward(loss))
            norm = clip_by_global_norm(grads, cfg.grad_clip)
            opt.step(grads)
        else:
            norm = 0.0
        row = {"iteration": it, "total": float(loss.data), "box": diag["box"], "app": diag["app"], "grad_norm": norm}
        history.append(row)
        if callback is not None:
            callback(it, row)
        if it % 100 == 0:
            log.info("iter %d loss %.4f box %.4f app %.4f", it, row["total"], row["box"], row["app"])
    return TrainResult(model, history, time.perf_counter() - start)


def write_loss_csv(history: Sequence[dict], path) -> None:
    cols = ["iteration", "total", "box", "app", "grad_norm"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in history:
            w.writerow([row["iteration"]] + [repr(float(row[c])) for c in cols[1:]])


# ------------------------------------------------------------------ checkpoints

_CFG_PREFIX = "__config__."


def save_model(model: MQTModel, path) -> None:
    blob = dict(model.params)
    for f in fields(ModelConfig):
        blob[_CFG_PREFIX + f.name] = np.array([float(getattr(model.config, f.name))])
    G.save_checkpoint(blob, path)


def load_model(path) -> MQTModel:
    blob = G.load_checkpoint(path)
    cfg_vals = {k[len(_CFG_PREFIX):]: int(v[0]) for k, v in blob.items() if k.startswith(_CFG_PREFIX)}
    params = {k: v for k, v in blob.items() if not k.startswith(_CFG_PREFIX)}
    config = ModelConfig(**cfg_vals) if cfg_vals else ModelConfig()
    return MQTModel(config, params)


def model_config_dict(config: ModelConfig) -> dict:
    return asdict(config)
