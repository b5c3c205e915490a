"""Toy multi-query tracking transformer.

Encoder: per-cell linear projection of a feature grid, fixed 2-D sinusoidal
positions, post-norm self-attention layers.  Decoder: post-norm layers of
query self-attention, dense cross-attention to the encoder memory, and a
feed-forward block.  Every query carries a reference box; the box head
predicts a logit offset from it and the query's sinusoidal position is
added to attention queries, which stands in for deformable sampling.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from mqtrack import grad as G
from mqtrack.grad import Tape, Tensor

LOGIT_CLIP = 1e-4


class CapacityError(RuntimeError):
    pass


class QueryKind(enum.Enum):
    POS = "pos"
    ID = "id"
    BOTH = "both"
    DET = "det"


SEMANTIC_KINDS = (QueryKind.POS, QueryKind.ID, QueryKind.BOTH)
ALL_KINDS = frozenset(QueryKind)


class Mode(enum.Enum):
    PUBLIC = "public"
    PRIVATE = "private"
    PRIVATE_AND_PUBLIC = "private_and_public"

    @classmethod
    def parse(cls, text: "str | Mode") -> "Mode":
        if isinstance(text, Mode):
            return text
        try:
            return cls(str(text).replace("-", "_"))
        except ValueError:
            raise ValueError(f"unknown mode {text!r}") from None

    @property
    def uses_det_queries(self) -> bool:
        return self is not Mode.PUBLIC

    @property
    def uses_detections(self) -> bool:
        return self is not Mode.PRIVATE


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    d_ff: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_app: int = 16
    n_det_queries: int = 16
    n_tags: int = 16
    grid_h: int = 12
    grid_w: int = 12
    channels: int = 8
    gate_hidden: int = 32

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if int(value) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive, got {value}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % 4:
            raise ValueError("d_model must be divisible by 4 (2-D sinusoidal encoding)")


@dataclass(frozen=True)
class BoundingBox:
    """Normalised (cx, cy, w, h)."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0 and 0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box out of range: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])

    @classmethod
    def from_array(cls, v) -> "BoundingBox":
        cx, cy, w, h = (float(x) for x in v)
        return cls(cx, cy, w, h)


@dataclass
class SemanticQueryBundle:
    V_prev: np.ndarray
    b_prev: BoundingBox
    a_prev: np.ndarray
    tag_index: int


@dataclass
class QueryBatch:
    queries: Tensor | None  # (n, d_model)
    kinds: list[QueryKind]
    owners: list  # track id, "detection" or "det"
    pos_boxes: np.ndarray  # (n, 4); NaN rows for non-pos queries

    def __len__(self) -> int:
        return len(self.kinds)

    def rows(self, owner, kind: QueryKind | None = None) -> list[int]:
        return [
            i for i, (o, k) in enumerate(zip(self.owners, self.kinds))
            if o == owner and (kind is None or k == kind)
        ]


@dataclass
class DecoderOutput:
    V: Tensor | None  # (n, d_model)
    boxes: Tensor | None  # (n, 4) in (0, 1)
    app: Tensor | None  # (n, d_app), unit rows
    kinds: list[QueryKind]
    owners: list

    def __len__(self) -> int:
        return len(self.kinds)

    def triple(self, row: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.V.data[row], self.boxes.data[row], self.app.data[row]


@dataclass
class AggregatedOutput:
    V: np.ndarray
    b: np.ndarray
    a: np.ndarray
    gate_weights: dict[QueryKind, float] = field(default_factory=dict)


# ------------------------------------------------------------------ encodings


def sinusoid_freqs(d_model: int) -> np.ndarray:
    k = d_model // 4
    if k == 1:
        return np.array([2 * math.pi])
    return 2 * math.pi * 0.5 * 16.0 ** (np.arange(k) / (k - 1))


def sinusoid_2d(xy: np.ndarray, d_model: int) -> np.ndarray:
    """Fixed 2-D encoding of points in [0, 1]^2: [sin x, cos x, sin y, cos y]."""
    f = sinusoid_freqs(d_model)
    ax = xy[:, :1] * f
    ay = xy[:, 1:2] * f
    return np.concatenate([np.sin(ax), np.cos(ax), np.sin(ay), np.cos(ay)], axis=1)


def _sinusoid_2d_tensor(xy: Tensor, d_model: int) -> Tensor:
    f = G.constant(sinusoid_freqs(d_model)[None, :])
    ax = G.matmul(xy[:, 0:1], f)
    ay = G.matmul(xy[:, 1:2], f)
    return G.concat([G.sin(ax), G.cos(ax), G.sin(ay), G.cos(ay)], axis=1)


def grid_centers(h: int, w: int) -> np.ndarray:
    ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def box_logit(b: np.ndarray) -> np.ndarray:
    b = np.clip(b, LOGIT_CLIP, 1 - LOGIT_CLIP)
    return np.log(b) - np.log1p(-b)


# ------------------------------------------------------------------ parameters


class ParamView:
    """Exposes a parameter dict as tensors; leaves on ``tape`` when given."""

    def __init__(self, params: dict[str, np.ndarray], tape: Tape | None = None, overrides=None):
        self.params = params
        self.tape = tape
        self.overrides = overrides or {}
        self.leaves: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        if name in self.overrides:
            return self.overrides[name]
        t = self.leaves.get(name)
        if t is None:
            t = self.tape.leaf(self.params[name]) if self.tape is not None else Tensor(self.params[name])
            self.leaves[name] = t
        return t

    def grads(self, grad_map: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
        return {name: grad_map[t.node_id] for name, t in self.leaves.items() if t.node_id is not None}


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d, ff, da = config.d_model, config.d_ff, config.d_app
    p: dict[str, np.ndarray] = {}

    def lin(name, fan_in, fan_out, zero=False):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        p[f"{name}.w"] = np.zeros((fan_in, fan_out)) if zero else rng.uniform(-lim, lim, (fan_in, fan_out))
        p[f"{name}.b"] = np.zeros(fan_out)

    def attn(name):
        for part in ("q", "k", "v", "o"):
            lin(f"{name}.{part}", d, d)

    def norm(name):
        p[f"{name}.g"] = np.ones(d)
        p[f"{name}.b"] = np.zeros(d)

    lin("enc.proj", config.channels, d)
    for i in range(config.n_enc_layers):
        attn(f"enc{i}.attn")
        norm(f"enc{i}.ln1")
        lin(f"enc{i}.ff1", d, ff)
        lin(f"enc{i}.ff2", ff, d)
        norm(f"enc{i}.ln2")
    for i in range(config.n_dec_layers):
        attn(f"dec{i}.self")
        norm(f"dec{i}.ln1")
        attn(f"dec{i}.cross")
        norm(f"dec{i}.ln2")
        lin(f"dec{i}.ff1", d, ff)
        lin(f"dec{i}.ff2", ff, d)
        norm(f"dec{i}.ln3")
    lin("query.pos", 4, d)
    lin("query.id", da, d)
    lin("query.ref", d, 4, zero=True)
    p["query.det"] = rng.normal(0.0, 1.0, (config.n_det_queries, d))
    p["query.tags"] = rng.normal(0.0, 0.5, (config.n_tags, d))
    lin("head.box1", d + 2 * config.n_heads * config.n_dec_layers, d)
    lin("head.box2", d, d)
    lin("head.box3", d, 4, zero=True)
    lin("head.app1", d, d)
    lin("head.app2", d, da)
    lin("gate.l1", 3 * d, config.gate_hidden)
    lin("gate.l2", config.gate_hidden, 3)
    return p


# ------------------------------------------------------------------ building blocks


def _linear(P: ParamView, name: str, x: Tensor) -> Tensor:
    return G.matmul(x, P[f"{name}.w"]) + P[f"{name}.b"]


def _mha(P: ParamView, name: str, q_in: Tensor, k_in: Tensor, v_in: Tensor, n_heads: int) -> Tensor:
    n, d = q_in.shape
    m = k_in.shape[0]
    dh = d // n_heads
    q = G.transpose(G.reshape(_linear(P, f"{name}.q", q_in), (n, n_heads, dh)), (1, 0, 2))
    k = G.transpose(G.reshape(_linear(P, f"{name}.k", k_in), (m, n_heads, dh)), (1, 2, 0))
    v = G.transpose(G.reshape(_linear(P, f"{name}.v", v_in), (m, n_heads, dh)), (1, 0, 2))
    att = G.softmax(G.matmul(q, k) * (1.0 / math.sqrt(dh)))
    out = G.reshape(G.transpose(G.matmul(att, v), (1, 0, 2)), (n, d))
    return _linear(P, f"{name}.o", out)


def head_scales(n_heads: int) -> np.ndarray:
    """Per-head strength of the reference-box locality bias; head 0 stays global."""
    return np.concatenate([[0.0], 0.5 * 4.0 ** np.arange(n_heads - 1)])


def _rows_to_cols(col: Tensor, m: int) -> Tensor:
    """(n, 1) -> (n, m) by repetition along columns."""
    return G.matmul(col, G.constant(np.ones((1, m))))


def _locality_bias(ref: Tensor, cells: np.ndarray, n_heads: int) -> Tensor:
    """-beta_h * squared cell distance to the reference centre in box units, (H, n, m)."""
    n, m = ref.shape[0], cells.shape[0]
    d2 = None
    for c in (0, 1):
        diff = _rows_to_cols(ref[:, c:c + 1], m) - G.constant(np.ones((n, 1)) @ cells[None, :, c])
        term = diff * diff / (_rows_to_cols(ref[:, c + 2:c + 3], m) * _rows_to_cols(ref[:, c + 2:c + 3], m))
        d2 = term if d2 is None else d2 + term
    return G.stack([d2 * (-float(b)) for b in head_scales(n_heads)], axis=0)


def _cross_attn(P: ParamView, name: str, q_in: Tensor, k_in: Tensor, v_in: Tensor, n_heads: int, bias: Tensor):
    n, d = q_in.shape
    m = k_in.shape[0]
    dh = d // n_heads
    q = G.transpose(G.reshape(_linear(P, f"{name}.q", q_in), (n, n_heads, dh)), (1, 0, 2))
    k = G.transpose(G.reshape(_linear(P, f"{name}.k", k_in), (m, n_heads, dh)), (1, 2, 0))
    v = G.transpose(G.reshape(_linear(P, f"{name}.v", v_in), (m, n_heads, dh)), (1, 0, 2))
    att = G.softmax(G.matmul(q, k) * (1.0 / math.sqrt(dh)) + bias)
    out = G.reshape(G.transpose(G.matmul(att, v), (1, 0, 2)), (n, d))
    return _linear(P, f"{name}.o", out), att


def _centroid_offsets(att: Tensor, cells: np.ndarray, ref: Tensor) -> Tensor:
    """Attention-weighted cell centre minus reference centre, in box units: (n, 2H)."""
    H, n, m = att.shape
    cen = G.reshape(G.transpose(G.reshape(G.matmul(G.reshape(att, (H * n, m)), G.constant(cells)), (H, n, 2)), (1, 0, 2)), (n, 2 * H))
    ref_xy = G.concat([ref[:, 0:2]] * H, axis=1)
    ref_wh = G.concat([ref[:, 2:4]] * H, axis=1)
    return (cen - ref_xy) / ref_wh


def _ln(P: ParamView, name: str, x: Tensor) -> Tensor:
    return G.layer_norm(x, P[f"{name}.g"], P[f"{name}.b"])


def _ffn(P: ParamView, prefix: str, x: Tensor) -> Tensor:
    return _linear(P, f"{prefix}.ff2", G.relu(_linear(P, f"{prefix}.ff1", x)))


def _expand_cols(col: Tensor, width: int) -> Tensor:
    """(n, 1) -> (n, width) by repetition."""
    return G.matmul(col, G.constant(np.ones((1, width))))


# ------------------------------------------------------------------ model


class MQTModel:
    def __init__(self, config: ModelConfig | None = None, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.params = params if params is not None else init_params(self.config, seed)
        self._cells = grid_centers(self.config.grid_h, self.config.grid_w)
        self._cell_pe = sinusoid_2d(self._cells, self.config.d_model)

    def view(self, tape: Tape | None = None, overrides=None) -> ParamView:
        return ParamView(self.params, tape, overrides)

    # --- encoder
    def encode_frame(self, frame: np.ndarray, P: ParamView | None = None) -> Tensor:
        P = P or self.view()
        cfg = self.config
        frame = np.asarray(frame, dtype=np.float64)
        if frame.ndim != 3 or frame.shape[2] != cfg.channels:
            raise ValueError(f"frame must be (H, W, {cfg.channels}), got {frame.shape}")
        if frame.shape[:2] != (cfg.grid_h, cfg.grid_w):
            raise ValueError(f"frame grid {frame.shape[:2]} != configured {(cfg.grid_h, cfg.grid_w)}")
        tokens = G.constant(frame.reshape(-1, cfg.channels))
        x = _linear(P, "enc.proj", tokens) + G.constant(self._cell_pe)
        for i in range(cfg.n_enc_layers):
            x = _ln(P, f"enc{i}.ln1", x + _mha(P, f"enc{i}.attn", x, x, x, cfg.n_heads))
            x = _ln(P, f"enc{i}.ln2", x + _ffn(P, f"enc{i}", x))
        return x

    # --- queries
    def encode_pos_query(self, b, P: ParamView | None = None) -> Tensor:
        P = P or self.view()
        box = b if isinstance(b, BoundingBox) else BoundingBox.from_array(b)
        return _linear(P, "query.pos", G.constant(box.as_array()[None, :]))[0]

    def build_query_batch(
        self,
        tracks: Sequence[tuple[object, SemanticQueryBundle]],
        public_detections: Sequence[BoundingBox] = (),
        mode: Mode | str = Mode.PRIVATE,
        kinds: Iterable[QueryKind] = ALL_KINDS,
        P: ParamView | None = None,
    ) -> QueryBatch:
        """Queries for ``tracks`` given as ``(owner, bundle)`` pairs.

        Each track contributes Pos/Id/Both rows (those enabled in ``kinds``)
        with its tag embedding added; Det rows follow in private modes and
        one untagged Pos row per public detection in public modes.
        """
        P = P or self.view()
        cfg = self.config
        mode = Mode.parse(mode)
        kinds = frozenset(kinds)
        if len(tracks) > cfg.n_tags:
            raise CapacityError(f"{len(tracks)} tracks exceed the tag pool of {cfg.n_tags}")
        rows: list[Tensor] = []
        out_kinds: list[QueryKind] = []
        owners: list = []
        pos_boxes: list[np.ndarray] = []
        nan4 = np.full(4, np.nan)
        tags = [bundle.tag_index for _, bundle in tracks]
        if len(set(tags)) != len(tags):
            raise ValueError("tag indices must be unique among tracks")
        for owner, bundle in tracks:
            if not 0 <= bundle.tag_index < cfg.n_tags:
                raise CapacityError(f"tag index {bundle.tag_index} outside pool of {cfg.n_tags}")
            tag = P["query.tags"][bundle.tag_index]
            if QueryKind.POS in kinds:
                rows.append(self.encode_pos_query(bundle.b_prev, P) + tag)
                out_kinds.append(QueryKind.POS)
                pos_boxes.append(bundle.b_prev.as_array())
                owners.append(owner)
            if QueryKind.ID in kinds:
                a = G.constant(np.asarray(bundle.a_prev, dtype=np.float64)[None, :])
                rows.append(_linear(P, "query.id", a)[0] + tag)
                out_kinds.append(QueryKind.ID)
                pos_boxes.append(nan4)
                owners.append(owner)
            if QueryKind.BOTH in kinds:
                rows.append(G.constant(np.asarray(bundle.V_prev, dtype=np.float64)) + tag)
                out_kinds.append(QueryKind.BOTH)
                pos_boxes.append(nan4)
                owners.append(owner)
        if mode.uses_det_queries and QueryKind.DET in kinds:
            det = P["query.det"]
            for i in range(cfg.n_det_queries):
                rows.append(det[i])
                out_kinds.append(QueryKind.DET)
                pos_boxes.append(nan4)
                owners.append("det")
        if mode.uses_detections:
            for box in public_detections:
                rows.append(self.encode_pos_query(box, P))
                out_kinds.append(QueryKind.POS)
                pos_boxes.append(box.as_array())
                owners.append("detection")
        queries = G.stack(rows, axis=0) if rows else None
        return QueryBatch(queries, out_kinds, owners, np.array(pos_boxes).reshape(-1, 4))

    # --- decoder
    def decode(self, memory: Tensor, batch: QueryBatch, P: ParamView | None = None) -> DecoderOutput:
        P = P or self.view()
        cfg = self.config
        if len(batch) == 0:
            return DecoderOutput(None, None, None, [], [])
        if memory.shape[1] != cfg.d_model or batch.queries.shape[1] != cfg.d_model:
            raise ValueError("memory and queries must share d_model")
        tgt = batch.queries
        has_box = ~np.isnan(batch.pos_boxes[:, 0])
        learned = _linear(P, "query.ref", tgt)
        if has_box.any():
            fixed = np.where(has_box[:, None], box_logit(np.nan_to_num(batch.pos_boxes, nan=0.5)), 0.0)
            keep = np.repeat((~has_box)[:, None], 4, axis=1).astype(np.float64)
            ref_logit = learned * keep + G.constant(fixed)
        else:
            ref_logit = learned
        ref = G.sigmoid(ref_logit)
        qpos = _sinusoid_2d_tensor(ref[:, 0:2], cfg.d_model)
        mem_k = memory + G.constant(self._cell_pe)
        bias = _locality_bias(ref, self._cells, cfg.n_heads)
        offsets = []
        for i in range(cfg.n_dec_layers):
            q = tgt + qpos
            tgt = _ln(P, f"dec{i}.ln1", tgt + _mha(P, f"dec{i}.self", q, q, tgt, cfg.n_heads))
            cross, att = _cross_attn(P, f"dec{i}.cross", tgt + qpos, mem_k, memory, cfg.n_heads, bias)
            offsets.append(_centroid_offsets(att, self._cells, ref))
            tgt = _ln(P, f"dec{i}.ln2", tgt + cross)
            tgt = _ln(P, f"dec{i}.ln3", tgt + _ffn(P, f"dec{i}", tgt))
        V = tgt
        h = G.relu(_linear(P, "head.box1", G.concat([V] + offsets, axis=1)))
        h = G.relu(_linear(P, "head.box2", h))
        boxes = G.sigmoid(_linear(P, "head.box3", h) + ref_logit)
        app = G.l2_normalize(_linear(P, "head.app2", G.relu(_linear(P, "head.app1", V))))
        return DecoderOutput(V, boxes, app, list(batch.kinds), list(batch.owners))

    def run(self, frame, tracks, public_detections=(), mode=Mode.PRIVATE, kinds=ALL_KINDS, P=None):
        P = P or self.view()
        memory = self.encode_frame(frame, P)
        batch = self.build_query_batch(tracks, public_detections, mode, kinds, P)
        return self.decode(memory, batch, P)

    # --- aggregation
    def gate_logits(self, v_concat: Tensor, P: ParamView | None = None) -> Tensor:
        P = P or self.view()
        return _linear(P, "gate.l2", G.relu(_linear(P, "gate.l1", v_concat)))

    def aggregate_rows(
        self,
        out: DecoderOutput,
        groups: Sequence[dict[QueryKind, int]],
        method: str = "collab_gating",
        P: ParamView | None = None,
    ) -> tuple[Tensor, Tensor, Tensor, np.ndarray]:
        """Batched aggregation; ``groups[t]`` maps present kinds to output rows.

        Returns (V, b, a, weights) with weights of shape (T, 3) over
        (pos, id, both); rows for absent kinds are zero.
        """
        P = P or self.view()
        T = len(groups)
        d = self.config.d_model
        present = np.array([[k in g for k in SEMANTIC_KINDS] for g in groups], dtype=bool)
        if T == 0:
            raise ValueError("no groups to aggregate")
        for t, g in enumerate(groups):
            if not g:
                raise ValueError(f"group {t} has no query kinds")
            if QueryKind.DET in g and len(g) > 1:
                raise ValueError("det outputs aggregate on their own")
            if QueryKind.DET in g:
                present[t, 0] = True  # det rides in the first slot

        def gather(source: Tensor, width: int):
            cols = []
            for slot, kind in enumerate(SEMANTIC_KINDS):
                idx = [g.get(kind, g.get(QueryKind.DET)) if slot == 0 else g.get(kind) for g in groups]
                if all(i is None for i in idx):
                    cols.append(None)
                    continue
                take = [i if i is not None else 0 for i in idx]
                mask = np.array([i is not None for i in idx], dtype=np.float64)
                block = source[np.array(take)]
                if not mask.all():
                    block = block * G.constant(np.repeat(mask[:, None], width, axis=1))
                cols.append(block)
            return cols

        Vc = gather(out.V, d)
        bc = gather(out.boxes, 4)
        ac = gather(out.app, self.config.d_app)
        if method == "collab_gating":
            padded = [c if c is not None else G.constant(np.zeros((T, d))) for c in Vc]
            raw = G.sigmoid(self.gate_logits(G.concat(padded, axis=1), P))
            masked = raw * G.constant(present.astype(np.float64))
            total = G.reshape(G.sum_(masked, axis=1), (T, 1))
            w = masked * _expand_cols(G.constant(np.ones((T, 1))) / total, 3)
        elif method == "avg":
            counts = present.sum(axis=1, keepdims=True).astype(np.float64)
            w = G.constant(present / counts)
        elif method == "max":
            return self._aggregate_max(Vc, bc, ac, present)
        elif method == "heuristic":
            return self._aggregate_heuristic(Vc, bc, ac, present)
        else:
            raise ValueError(f"unknown aggregation {method!r}")

        def combine(cols, width):
            acc = None
            for slot, c in enumerate(cols):
                if c is None:
                    continue
                term = _expand_cols(w[:, slot:slot + 1], width) * c
                acc = term if acc is None else acc + term
            return acc

        V = combine(Vc, d)
        b = combine(bc, 4)
        a = G.l2_normalize(combine(ac, self.config.d_app))
        return V, b, a, w.data

    def _aggregate_max(self, Vc, bc, ac, present):
        def pool(cols):
            acc = None
            for slot, c in enumerate(cols):
                if c is None:
                    continue
                if not present[:, slot].all():
                    # absent slots must never win the max
                    fill = np.where(present[:, slot][:, None], 0.0, -1e9)
                    c = c + G.constant(np.repeat(fill, c.shape[1], axis=1))
                acc = c if acc is None else G.maximum(acc, c)
            return acc

        w = present / present.sum(axis=1, keepdims=True)
        return pool(Vc), pool(bc), G.l2_normalize(pool(ac)), w

    def _aggregate_heuristic(self, Vc, bc, ac, present):
        # preferred source slot per output, with fallbacks when absent
        order = {"b": (0, 2, 1), "a": (1, 2, 0), "V": (2, 0, 1)}
        T = present.shape[0]

        def pick(cols, key, width):
            acc = None
            chosen = np.full(T, -1)
            for slot in order[key]:
                take = present[:, slot] & (chosen < 0)
                chosen[take] = slot
            for slot, c in enumerate(cols):
                sel = chosen == slot
                if c is None or not sel.any():
                    continue
                term = c * G.constant(np.repeat(sel[:, None].astype(np.float64), width, axis=1))
                acc = term if acc is None else acc + term
            return acc

        w = np.zeros((T, 3))
        w[np.arange(T), [next(s for s in order["b"] if present[t, s]) for t in range(T)]] = 1.0
        return (
            pick(Vc, "V", self.config.d_model),
            pick(bc, "b", 4),
            G.l2_normalize(pick(ac, "a", self.config.d_app)),
            w,
        )

    def aggregate(self, triples: dict[QueryKind, tuple], method: str = "collab_gating") -> AggregatedOutput:
        """Aggregate one object's per-kind (V, b, a) outputs.

        A single present kind passes through unchanged.
        """
        if not triples:
            raise ValueError("aggregate needs at least one query kind")
        if len(triples) == 1:
            kind, (V, b, a) = next(iter(triples.items()))
            return AggregatedOutput(np.asarray(V), np.asarray(b), np.asarray(a), {kind: 1.0})
        kinds = list(triples)
        out = DecoderOutput(
            G.constant(np.stack([triples[k][0] for k in kinds])),
            G.constant(np.stack([triples[k][1] for k in kinds])),
            G.constant(np.stack([triples[k][2] for k in kinds])),
            kinds,
            [0] * len(kinds),
        )
        V, b, a, w = self.aggregate_rows(out, [{k: i for i, k in enumerate(kinds)}], method)
        weights = {k: float(w[0, SEMANTIC_KINDS.index(k)]) for k in kinds if k in SEMANTIC_KINDS}
        return AggregatedOutput(V.data[0], b.data[0], a.data[0], weights)


def renormalize_gates(raw: Sequence[float], present: Sequence[bool]) -> np.ndarray:
    """Drop weights of absent kinds and rescale the rest to sum to one."""
    raw = np.asarray(raw, dtype=np.float64)
    mask = np.asarray(present, dtype=bool)
    if not mask.any():
        raise ValueError("no query kind present")
    w = np.where(mask, raw, 0.0)
    return w / w.sum()
