"""End-to-end acceptance checks, one group per criterion.

The two training-based groups share session fixtures; together they take
several minutes on one core.  A summary line per criterion is printed at
the end of the run.
"""
import itertools
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ScriptedModel, linear_path, scripted_frames
from mqtrack import grad as G
from mqtrack.kernels import IMPLEMENTATIONS, linear_assignment
from mqtrack.losses import appearance_loss, set_prediction_loss
from mqtrack.metrics import combine, evaluate
from mqtrack.model import SEMANTIC_KINDS, BoundingBox, MQTModel, ModelConfig, Mode, ParamView, QueryKind, SemanticQueryBundle
from mqtrack.motio import MotFormatError, MotRecord, read_mot, write_mot
from mqtrack.scene import SceneConfig, generate_scene, gt_records
from mqtrack.tracker import TrackerConfig, track_sequence
from mqtrack.train import TrainConfig, train

SEEDS = range(10)
EPS = 1e-5
TOL = 1e-4


# ---------------------------------------------------------------- 1: gradients

GRAD_MODEL = ModelConfig(d_model=8, d_ff=8, n_heads=2, n_enc_layers=1, n_dec_layers=2, d_app=4,
                         n_det_queries=3, n_tags=4, grid_h=3, grid_w=3, channels=2, gate_hidden=4)

COMPOSITES = {
    "encoder": ("enc.proj.w", "enc0.attn.q.w", "enc0.attn.v.b", "enc0.ln1.g", "enc0.ff1.w", "enc0.ln2.b"),
    "decoder": ("dec0.self.k.w", "dec0.cross.q.w", "dec1.cross.v.w", "dec1.ln2.g", "dec0.ff2.w",
                "query.pos.w", "query.id.w", "query.ref.w", "query.det", "query.tags"),
    "box_head": ("head.box1.w", "head.box2.b", "head.box3.w", "head.box3.b"),
    "app_head": ("head.app1.w", "head.app2.w", "head.app2.b"),
    "gating": ("gate.l1.w", "gate.l1.b", "gate.l2.w", "gate.l2.b"),
}


def _grad_model(seed):
    model = MQTModel(GRAD_MODEL, seed=seed)
    rng = np.random.default_rng(100 + seed)
    # move every parameter off its initial value so zero-initialised layers pass gradient
    for k, v in model.params.items():
        model.params[k] = v + rng.normal(0.0, 0.1, v.shape)
    return model


def _model_objective(model, seed):
    rng = np.random.default_rng(seed)
    frame = rng.random((3, 3, 2))
    tracks = []
    for tag in range(2):
        a = rng.normal(size=4)
        box = BoundingBox(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.15, 0.3, 2))
        tracks.append((tag, SemanticQueryBundle(rng.normal(size=8), box, a / np.linalg.norm(a), tag)))
    dets = [BoundingBox(0.5, 0.5, 0.2, 0.2)]
    n_rows = 2 * 3 + len(dets) + GRAD_MODEL.n_det_queries
    wb, wa = rng.normal(size=(n_rows, 4)), rng.normal(size=(n_rows, 4))
    wv, wg = rng.normal(size=(2, 8)), rng.normal(size=(2, 4))

    def objective(P):
        out = model.run(frame, tracks, dets, Mode.PRIVATE_AND_PUBLIC, P=P)
        groups = [{k: i for i, (ow, k) in enumerate(zip(out.owners, out.kinds)) if ow == owner} for owner in (0, 1)]
        V, b, a, _ = model.aggregate_rows(out, groups, "collab_gating", P)
        return (G.sum_(out.boxes * G.constant(wb)) + G.sum_(out.app * G.constant(wa))
                + G.sum_(V * G.constant(wv)) + G.sum_(a * G.constant(wg)) + G.sum_(b * G.constant(wg)))

    return objective


@pytest.mark.criterion(1)
@pytest.mark.parametrize("composite", list(COMPOSITES))
def test_gradients_of_model_composites(composite):
    worst = 0.0
    for seed in SEEDS:
        model = _grad_model(seed)
        objective = _model_objective(model, seed)
        rng = np.random.default_rng(seed)
        for name in COMPOSITES[composite]:
            size = model.params[name].size
            coords = rng.choice(size, size=min(size, 6), replace=False)

            def f(x, name=name):
                return objective(ParamView(model.params, x.tape, {name: x}))

            worst = max(worst, G.finite_difference_check(f, model.params[name], eps=EPS, coords=coords))
    assert worst < TOL, f"{composite}: max relative error {worst:.2e}"


@pytest.mark.criterion(1)
def test_gradients_of_appearance_loss():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        anchor, pos, negs = rng.normal(size=6), rng.normal(size=6), rng.normal(size=(4, 6))
        checks = [
            lambda x: appearance_loss(x, G.constant(pos), G.constant(negs), 0.1),
            lambda x: appearance_loss(G.constant(anchor), x, G.constant(negs), 0.1),
            lambda x: appearance_loss(G.constant(anchor), G.constant(pos), x, 0.1),
        ]
        for f, at in zip(checks, (anchor, pos, negs)):
            assert G.finite_difference_check(f, at, eps=EPS) < TOL


@pytest.mark.criterion(1)
def test_gradients_of_set_prediction_loss():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        n_pred = 5
        boxes = np.column_stack([rng.uniform(0.25, 0.75, (n_pred, 2)), rng.uniform(0.1, 0.3, (n_pred, 2))])
        app = rng.normal(size=(n_pred, 4))
        gt = [(g, boxes[i] + rng.normal(0, 0.03, 4)) for i, g in enumerate(("a", "b", "c"))]
        bank = G.constant(rng.normal(size=(3, 4)))
        args = (gt, {"a": 0}, [1, 2, 3, 4], bank, {"a": 0, "b": 1, "c": 2}, 0.5)

        def f_boxes(x):
            return set_prediction_loss(x, G.constant(app), *args)[0]

        def f_app(x):
            return set_prediction_loss(G.constant(boxes), x, *args)[0]

        assert G.finite_difference_check(f_boxes, boxes, eps=EPS) < TOL
        assert G.finite_difference_check(f_app, app, eps=EPS) < TOL


# ---------------------------------------------------------------- 2: assignment oracle

_PERMS = {n: np.array(list(itertools.permutations(range(n)))) for n in range(1, 8)}


def _exhaustive(cost):
    n = cost.shape[0]
    perms = _PERMS[n]
    totals = cost[np.arange(n), perms].sum(axis=1)
    best = perms[int(np.argmin(totals))]
    return sum(float(cost[i, best[i]]) for i in range(n)), totals.min()


@pytest.mark.criterion(2)
@pytest.mark.parametrize("backend", sorted(IMPLEMENTATIONS))
def test_hungarian_equals_exhaustive_search(backend):
    rng = np.random.default_rng(2024)
    for trial in range(1000):
        n = int(rng.integers(1, 8))
        if trial % 2:
            cost = rng.integers(0, 20, (n, n)).astype(np.float64)  # many ties, exact sums
        else:
            cost = rng.random((n, n))
        pairs = linear_assignment(cost, backend)
        got = sum(float(cost[r, c]) for r, c in pairs)
        want, _ = _exhaustive(cost)
        assert sorted(c for _, c in pairs) == list(range(n))
        assert got == want, (trial, cost)


# ---------------------------------------------------------------- 3: appearance loss closed form


@pytest.mark.criterion(3)
def test_appearance_loss_closed_forms():
    e = np.eye(3)
    got = float(appearance_loss(e[0], e[0], e[1:], 0.1).data)
    # log(e^1 + 0.1 e^0 + 0.1 e^0) - 1
    assert math.log(math.e + 0.2) - 1 == pytest.approx(0.0710, abs=1e-4)
    assert got == pytest.approx(0.0710, abs=1e-4)
    assert float(appearance_loss(e[0], e[0], [], 0.1).data) == 0.0


# ---------------------------------------------------------------- 4: metrics oracle


def _rec(frame, tid, left, size=10.0):
    return MotRecord(frame, tid, float(left), 0.0, size, size)


@pytest.mark.criterion(4)
def test_hand_counted_mota():
    gt = [_rec(f, g, 100 * (g - 1)) for g in (1, 2) for f in (1, 2, 3)]
    pred = [_rec(1, 10, 0), _rec(1, 20, 100), _rec(2, 10, 0), _rec(2, 30, 300), _rec(3, 10, 0), _rec(3, 21, 100)]
    r = evaluate(gt, pred)
    assert (r.gt, r.fn, r.fp, r.idsw) == (6, 1, 1, 1)
    assert r.mota == 0.5


def _synthetic_output(rng):
    gt, pred = [], []
    n_obj, n_frames = int(rng.integers(1, 6)), int(rng.integers(2, 12))
    ids = rng.permutation(50)[:n_obj] + 1
    for f in range(1, n_frames + 1):
        for g in range(n_obj):
            x = 60.0 * g + 2.0 * f
            if rng.random() < 0.9:
                gt.append(_rec(f, g + 1, x))
            if rng.random() < 0.85:
                pid = int(ids[g]) if rng.random() < 0.9 else int(rng.integers(100, 110))
                if not any(p.frame == f and p.id == pid for p in pred):
                    pred.append(_rec(f, pid, x + rng.uniform(-3, 3)))
        if rng.random() < 0.25:
            pred.append(_rec(f, 999, 1000.0))
    return gt, pred


def _counts(r):
    return (r.tp, r.fp, r.fn, r.idsw, r.gt, r.idtp, r.idfp, r.idfn)


@pytest.mark.criterion(4)
def test_metric_invariances_on_random_outputs():
    rng = np.random.default_rng(4)
    for _ in range(100):
        gt, pred = _synthetic_output(rng)
        base = evaluate(gt, pred)
        ids = sorted({p.id for p in pred})
        mapping = dict(zip(ids, (int(x) for x in rng.permutation(10_000)[: len(ids)] + 5000)))
        relabelled = [replace(p, id=mapping[p.id]) for p in pred]
        assert _counts(evaluate(gt, relabelled)) == _counts(base)
        assert evaluate(gt, relabelled).mota == base.mota
        doubled = combine([base, evaluate(gt, pred)])
        assert _counts(doubled) == tuple(2 * c for c in _counts(base))
        if base.gt:
            assert doubled.mota == pytest.approx(base.mota, abs=1e-12)
            assert doubled.idf1 == pytest.approx(base.idf1, abs=1e-12)


# ---------------------------------------------------------------- 5: overfit check

OVERFIT_SCENE = SceneConfig(grid_h=12, grid_w=12, n_objects_min=3, n_objects_max=3, length=30, occlusion_rate=0.0, seed=0)
OVERFIT_TRAIN = TrainConfig(iterations=5000, seed=0)
FIRST_FRAME_TRACKER = TrackerConfig(spawn_from_det=False)


def _score(model, seq, tracker_cfg):
    dets = [[BoundingBox.from_array(o.box) for o in seq.visible(0)]]
    tracks = track_sequence(model, seq.frames, tracker_cfg, dets)
    recs = [
        MotRecord(t + 1, tr.id, (b.cx - b.w / 2) * seq.width_px, (b.cy - b.h / 2) * seq.height_px,
                  b.w * seq.width_px, b.h * seq.height_px)
        for tr in tracks for t, b in tr.trajectory
    ]
    return evaluate(gt_records(seq), recs)


@pytest.fixture(scope="session")
def overfit_run():
    seq = generate_scene(OVERFIT_SCENE)
    start = time.process_time()
    res = train([seq], ModelConfig(grid_h=12, grid_w=12), OVERFIT_TRAIN)
    return seq, res, time.process_time() - start


@pytest.mark.criterion(5)
def test_overfit_single_sequence(overfit_run):
    seq, res, cpu_seconds = overfit_run
    assert OVERFIT_TRAIN.iterations <= 5000
    assert cpu_seconds <= 600, f"training took {cpu_seconds:.0f}s of CPU time"
    r = _score(res.model, seq, FIRST_FRAME_TRACKER)
    print(f"overfit: MOTA {r.mota:.3f} IDF1 {r.idf1:.3f} IDSW {r.idsw} in {cpu_seconds:.0f}s")
    assert r.mota >= 0.95 and r.idf1 >= 0.95 and r.idsw == 0


# ---------------------------------------------------------------- 6, 7: held-out suite

SUITE_BASE = SceneConfig(grid_h=12, grid_w=12, n_objects_min=2, n_objects_max=4, length=30, occlusion_rate=0.03)
SUITE_SEEDS = (1, 2, 3)
SUITE_SEQUENCES = 5
N_TRAIN_SCENES = 256
SUITE_TRAIN = TrainConfig(iterations=5000, seed=0)


@pytest.fixture(scope="session")
def suite_model():
    scenes = [generate_scene(replace(SUITE_BASE, seed=1000 + i)) for i in range(N_TRAIN_SCENES)]
    return train(scenes, ModelConfig(grid_h=12, grid_w=12), SUITE_TRAIN).model


@pytest.fixture(scope="session")
def held_out():
    return [generate_scene(replace(SUITE_BASE, seed=100 * s + i)) for s in SUITE_SEEDS for i in range(SUITE_SEQUENCES)]


def _suite_means(model, scenes, tracker_cfg):
    reports = [_score(model, seq, tracker_cfg) for seq in scenes]
    return float(np.mean([r.mota for r in reports])), float(np.mean([r.idf1 for r in reports]))


@pytest.mark.criterion(6)
def test_all_query_kinds_beat_each_single_kind(suite_model, held_out):
    assert len(held_out) >= 15 and SUITE_BASE.occlusion_rate > 0
    all_mota, _ = _suite_means(suite_model, held_out, FIRST_FRAME_TRACKER)
    lines = [f"all kinds: mean MOTA {all_mota:.3f}"]
    singles = {}
    for kind in QueryKind:
        cfg = replace(FIRST_FRAME_TRACKER, kinds=frozenset({kind}))
        singles[kind.value], _ = _suite_means(suite_model, held_out, cfg)
        lines.append(f"{kind.value} only: mean MOTA {singles[kind.value]:.3f}")
    print("\n".join(lines))
    assert all(all_mota >= m for m in singles.values()), lines


@pytest.mark.criterion(7)
def test_first_plus_recent_memory_beats_last_frame_only(suite_model, held_out):
    _, rich = _suite_means(suite_model, held_out, FIRST_FRAME_TRACKER)
    last_only = replace(FIRST_FRAME_TRACKER, memory_first=False, memory_last=1)
    _, poor = _suite_means(suite_model, held_out, last_only)
    assert (FIRST_FRAME_TRACKER.memory_first, FIRST_FRAME_TRACKER.memory_last, FIRST_FRAME_TRACKER.memory_metric) == (True, 5, "min")
    print(f"first+last5/min: mean IDF1 {rich:.3f}; last frame only: {poor:.3f}")
    assert rich >= poor


# ---------------------------------------------------------------- 8: tracker state machine

LENGTH = 16


def _frames_of(track):
    return [t for t, _ in track.trajectory]


def _scripted(hidden, patience):
    frames = scripted_frames({0: linear_path((0.2, 0.5), (0.02, 0.0), LENGTH, hidden=hidden)}, LENGTH)
    dets = [[BoundingBox.from_array(frames[0][0][0])]] + [None] * (LENGTH - 1)
    return track_sequence(ScriptedModel(), frames, TrackerConfig(lost_patience=patience), dets)


@pytest.mark.criterion(8)
@pytest.mark.parametrize("patience", [1, 2, 3])
def test_reid_within_patience(patience):
    hidden = set(range(6, 6 + patience))
    tracks = _scripted(hidden, patience)
    assert len(tracks) == 1
    assert _frames_of(tracks[0]) == [t for t in range(LENGTH) if t not in hidden]


@pytest.mark.criterion(8)
@pytest.mark.parametrize("patience", [0, 2])
def test_occlusion_beyond_patience_spawns_new_id(patience):
    hidden = set(range(6, 6 + patience + 1))
    tracks = _scripted(hidden, patience)
    assert [t.id for t in tracks] == [0, 1]
    assert _frames_of(tracks[0]) == list(range(6))


@pytest.mark.criterion(8)
@pytest.mark.parametrize("seed", range(3))
def test_single_hypothesis_path_is_bit_exact(seed):
    model = MQTModel(ModelConfig(grid_h=8, grid_w=8, d_model=16, d_ff=16, n_heads=2, n_det_queries=6), seed=seed)
    seq = generate_scene(SceneConfig(grid_h=8, grid_w=8, length=10, seed=seed, occlusion_rate=0.1))
    dets = [[BoundingBox.from_array(o.box) for o in seq.visible(0)]] + [None] * 9

    def snap(cfg):
        tracks = track_sequence(model, seq.frames, cfg, dets)
        return [(t.id, [(f, b.as_array().tobytes()) for f, b in t.trajectory]) for t in tracks]

    base = TrackerConfig(tau_conf=1.0)
    k1 = snap(replace(base, k_hyp=1))
    assert k1 == snap(replace(base, multi_hypothesis=False))
    assert k1 == snap(replace(base, k_hyp=4, tau_agree=3.0))


# ---------------------------------------------------------------- 9: aggregation contracts

AGG_MODEL = ModelConfig(d_model=8, d_ff=8, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_app=4,
                        n_det_queries=2, n_tags=2, grid_h=3, grid_w=3, channels=2, gate_hidden=4)


def _triples(rng, kinds):
    out = {}
    for k in kinds:
        a = rng.normal(size=4)
        out[k] = (rng.normal(size=8), rng.uniform(0.2, 0.8, 4), a / np.linalg.norm(a))
    return out


@pytest.mark.criterion(9)
def test_single_kind_is_passed_through():
    rng = np.random.default_rng(9)
    for seed in range(5):
        model = MQTModel(AGG_MODEL, seed=seed)
        for method in ("collab_gating", "avg", "max", "heuristic"):
            for kind in SEMANTIC_KINDS:
                t = _triples(rng, [kind])
                agg = model.aggregate(t, method)
                for got, want in zip((agg.V, agg.b, agg.a), t[kind]):
                    np.testing.assert_array_equal(got, want)


@pytest.mark.criterion(9)
def test_gate_weights_sum_to_one_for_every_subset():
    rng = np.random.default_rng(10)
    for seed in range(5):
        model = MQTModel(AGG_MODEL, seed=seed)
        for n in (1, 2, 3):
            for subset in itertools.combinations(SEMANTIC_KINDS, n):
                agg = model.aggregate(_triples(rng, subset), "collab_gating")
                assert set(agg.gate_weights) == set(subset)
                assert sum(agg.gate_weights.values()) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.criterion(9)
def test_avg_is_idempotent():
    rng = np.random.default_rng(11)
    model = MQTModel(AGG_MODEL, seed=0)
    for n in (2, 3):
        for subset in itertools.combinations(SEMANTIC_KINDS, n):
            (V, b, a), = _triples(rng, [subset[0]]).values()
            agg = model.aggregate({k: (V, b, a) for k in subset}, "avg")
            np.testing.assert_allclose(agg.V, V, atol=1e-12)
            np.testing.assert_allclose(agg.b, b, atol=1e-12)
            np.testing.assert_allclose(agg.a, a, atol=1e-12)


# ---------------------------------------------------------------- 10: format fidelity


@pytest.mark.criterion(10)
def test_mot_round_trip_on_random_records(tmp_path):
    rng = np.random.default_rng(10)
    n = 10_000
    floats = rng.normal(0, 1000, (n, 7)) * rng.choice([1e-3, 1.0, 1e3], (n, 7))
    recs = [
        MotRecord(int(f), int(i), l, t, abs(w) + 1e-3, abs(h) + 1e-3, c, x, y, z)
        for f, i, (l, t, w, h, c, x, y), z in zip(
            rng.integers(1, 10**6, n), rng.integers(-1, 10**6, n), floats.tolist(), rng.normal(size=n).tolist()
        )
    ]
    write_mot(recs, tmp_path / "a.txt")
    back = read_mot(tmp_path / "a.txt", "detections")
    assert back == recs
    write_mot(back, tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


@pytest.mark.criterion(10)
@pytest.mark.parametrize("bad", ["1,2,3,4,5", "a,1,1,1,1,1,1,-1,-1,-1", "2,1,1,1,nan?,1,1,-1,-1,-1", "0,1,1,1,1,1,1,-1,-1,-1"])
def test_malformed_lines_report_line_numbers(tmp_path, bad):
    good = "1,1,10,10,5,5,1,-1,-1,-1"
    path = tmp_path / "m.txt"
    path.write_text("\n".join([good, good, "", good, bad, good]) + "\n")
    with pytest.raises(MotFormatError) as info:
        read_mot(path, "detections")
    assert info.value.line_no == 5
    assert f"{path}:5:" in str(info.value)
