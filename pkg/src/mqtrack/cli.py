"""Command line: ``mqtrack {simulate,train,track,b2f,eval}``.

Exit codes: 0 success, 1 usage error (bad flags, malformed config, mode
without its inputs), 2 runtime error (missing or malformed data files).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from mqtrack import config as C
from mqtrack.metrics import evaluate, report_format, write_report_csv
from mqtrack.model import BoundingBox, Mode
from mqtrack.motio import MotFormatError, MotRecord, read_mot, write_mot
from mqtrack.postprocess import TrackSet, b2f_postprocess
from mqtrack.scene import detection_records, generate_scene, load_sequence, save_sequence, to_pixels

log = logging.getLogger("mqtrack")

EFFECTIVE_CONFIG = "effective_config.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config(args) -> C.RunConfig:
    cfg = C.load(args.config) if args.config else C.RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "mode", None):
        cfg = replace(cfg, tracker=replace(cfg.tracker, mode=Mode.parse(args.mode)))
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


# ------------------------------------------------------------------ commands


def cmd_simulate(cfg: C.RunConfig, out: Path) -> list[Path]:
    """Write ``run.sequences`` scenes as ``seq000``, ``seq001``, ... with gt and public detections."""
    written = []
    for i in range(cfg.run.sequences):
        scene_cfg = replace(cfg.scene, seed=cfg.scene.seed + i)
        seq = generate_scene(scene_cfg)
        path = save_sequence(seq, out / f"seq{i:03d}", scene_cfg)
        write_mot(detection_records(seq), path / "det.txt")
        written.append(path)
    C.save(cfg, out / EFFECTIVE_CONFIG)
    return written


def cmd_train(cfg: C.RunConfig, data: list[Path], out: Path) -> Path:
    from mqtrack.train import save_model, train, write_loss_csv

    sequences = [load_sequence(_require(d, "sequence directory")) for d in data]
    grid = sequences[0].frames.shape[1:]
    model_cfg = replace(cfg.model, grid_h=grid[0], grid_w=grid[1], channels=grid[2])
    result = train(sequences, model_cfg, cfg.train, cfg.loss)
    ckpt = out / "model.ckpt"
    save_model(result.model, ckpt)
    write_loss_csv(result.history, out / "loss.csv")
    C.save(replace(cfg, model=model_cfg), out / EFFECTIVE_CONFIG)
    log.info("trained %d iterations in %.1fs", cfg.train.iterations, result.seconds)
    return ckpt


def _detections_by_frame(records: list[MotRecord], n: int, w: int, h: int, first_only: bool):
    frames: list[list[BoundingBox] | None] = [None if first_only and t > 0 else [] for t in range(n)]
    for r in records:
        t = r.frame - 1
        if not 0 <= t < n:
            raise ValueError(f"detection frame {r.frame} outside the sequence (1..{n})")
        if frames[t] is None:
            continue
        box = np.array([(r.bb_left + r.bb_width / 2) / w, (r.bb_top + r.bb_height / 2) / h, r.bb_width / w, r.bb_height / h])
        frames[t].append(BoundingBox.from_array(np.clip(box, [0, 0, 1e-6, 1e-6], 1.0)))
    return frames


def cmd_track(cfg: C.RunConfig, checkpoint: Path, data: Path, out: Path, detections: Path | None, reverse: bool) -> Path:
    from mqtrack.tracker import track_sequence
    from mqtrack.train import load_model

    mode = cfg.tracker.mode
    if mode.uses_detections and detections is None:
        raise UsageError(f"--mode {mode.value} needs --detections")
    model = load_model(_require(checkpoint, "checkpoint"))
    seq = load_sequence(_require(data, "sequence directory"))
    n = len(seq)
    dets = None
    if mode.uses_detections:
        records = read_mot(_require(detections, "detections file"), "detections")
        dets = _detections_by_frame(records, n, seq.width_px, seq.height_px, cfg.run.public_frames == "first")
    frames = seq.frames
    if reverse:
        frames = frames[::-1]
        dets = dets[::-1] if dets is not None else None
        if dets is not None and cfg.run.public_frames == "first":
            dets = _detections_by_frame(records, n, seq.width_px, seq.height_px, False)[::-1]
            dets = [d if t == 0 else None for t, d in enumerate(dets)]
    tracks = track_sequence(model, frames, cfg.tracker, dets)
    recs = []
    appearance = {}
    for tr in tracks:
        for t, b in tr.trajectory:
            frame = n - t if reverse else t + 1
            recs.append(MotRecord(frame, tr.id, *to_pixels(b.as_array(), seq.width_px, seq.height_px), 1.0))
        mean = tr.mean_appearance()
        if mean is not None:
            appearance[str(tr.id)] = [float(x) for x in mean]
    recs.sort(key=lambda r: (r.frame, r.id))
    path = out / "tracks.txt"
    write_mot(recs, path)
    meta = {"num_frames": n, "width_px": seq.width_px, "height_px": seq.height_px, "reversed": reverse, "appearance": appearance}
    (out / "tracks.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    C.save(cfg, out / EFFECTIVE_CONFIG)
    return path


def _read_trackset(path: Path) -> tuple[TrackSet, dict]:
    meta_path = path.with_suffix(".meta.json")
    if not meta_path.exists():
        raise FileNotFoundError(f"sidecar {meta_path} not found (written by 'mqtrack track')")
    meta = json.loads(meta_path.read_text())
    ts = TrackSet.from_records(read_mot(path, "ground_truth"), meta["num_frames"], meta["width_px"], meta["height_px"])
    ts.appearance = {int(k): np.array(v) for k, v in meta.get("appearance", {}).items()}
    return ts, meta


def cmd_b2f(cfg: C.RunConfig, forward: Path, backward: Path, out: Path) -> Path:
    fwd, meta = _read_trackset(_require(forward, "forward track file"))
    bwd, _ = _read_trackset(_require(backward, "backward track file"))
    refined = b2f_postprocess(
        fwd, bwd, cfg.run.b2f_overlap, cfg.run.b2f_id_thresh, cfg.run.b2f_fill, cfg.run.b2f_method
    )
    path = out / "tracks.txt"
    write_mot(refined.to_records(meta["width_px"], meta["height_px"]), path)
    meta = dict(meta, appearance={str(k): [float(x) for x in v] for k, v in refined.appearance.items()}, reversed=False)
    (out / "tracks.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    C.save(cfg, out / EFFECTIVE_CONFIG)
    return path


def cmd_eval(gt: list[Path], pred: list[Path], out: Path | None, iou_thresh: float = 0.5) -> str:
    if len(gt) != len(pred):
        raise UsageError("--gt and --pred need the same number of files")
    reports = []
    for g, p in zip(gt, pred):
        name = _require(g, "ground-truth file").parent.name or "seq"
        reports.append(evaluate(read_mot(g, "ground_truth"), read_mot(_require(p, "prediction file"), "ground_truth"), iou_thresh, name))
    text = report_format(reports)
    if out is not None:
        (out / "report.txt").write_text(text)
        write_report_csv(reports, out / "report.csv")
    return text


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mqtrack", description="Multi-query tracking toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="flat key = value configuration file")
        sp.add_argument("--seed", type=int, help="overrides scene.seed and train.seed")
        sp.add_argument("--out", required=out_required, help="output directory")

    sp = sub.add_parser("simulate", help="generate synthetic sequences")
    common(sp)
    sp = sub.add_parser("train", help="train a model on sequences")
    common(sp)
    sp.add_argument("--data", nargs="+", required=True, help="sequence directories")
    sp = sub.add_parser("track", help="track one sequence")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="sequence directory")
    sp.add_argument("--mode", choices=[m.value for m in Mode] + ["private-and-public"])
    sp.add_argument("--detections", help="MOT-format public detections")
    sp.add_argument("--reverse", action="store_true", help="track backwards in time (output keeps forward frame numbers)")
    sp = sub.add_parser("b2f", help="confirm forward tracks with a backward pass")
    common(sp)
    sp.add_argument("--forward", required=True)
    sp.add_argument("--backward", required=True)
    sp = sub.add_parser("eval", help="score predictions against ground truth")
    common(sp, out_required=False)
    sp.add_argument("--gt", nargs="+", required=True)
    sp.add_argument("--pred", nargs="+", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args)
        if args.command == "simulate":
            for path in cmd_simulate(cfg, _out_dir(args)):
                print(path)
        elif args.command == "train":
            print(cmd_train(cfg, [Path(d) for d in args.data], _out_dir(args)))
        elif args.command == "track":
            det = Path(args.detections) if args.detections else None
            print(cmd_track(cfg, Path(args.checkpoint), Path(args.data), _out_dir(args), det, args.reverse))
        elif args.command == "b2f":
            print(cmd_b2f(cfg, Path(args.forward), Path(args.backward), _out_dir(args)))
        elif args.command == "eval":
            out = _out_dir(args) if args.out else None
            sys.stdout.write(cmd_eval([Path(g) for g in args.gt], [Path(p) for p in args.pred], out, cfg.run.iou_thresh))
    except (UsageError, C.ConfigError) as exc:
        print(f"mqtrack: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, MotFormatError) as exc:
        print(f"mqtrack: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
