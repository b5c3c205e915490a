"""MOTChallenge CSV records: ``frame,id,bb_left,bb_top,bb_width,bb_height,conf,x,y,z``."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

N_FIELDS = 10


class MotFormatError(ValueError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class MotRecord:
    frame: int
    id: int
    bb_left: float
    bb_top: float
    bb_width: float
    bb_height: float
    conf: float = 1.0
    x: float = -1.0
    y: float = -1.0
    z: float = -1.0

    def validate(self) -> None:
        if self.frame < 1:
            raise ValueError(f"frame must be >= 1, got {self.frame}")
        if not (self.bb_width > 0 and self.bb_height > 0):
            raise ValueError(f"box must have positive size: {self}")


def _fmt(v: float) -> str:
    return repr(float(v))


def format_record(r: MotRecord) -> str:
    return ",".join(
        [str(int(r.frame)), str(int(r.id))]
        + [_fmt(v) for v in (r.bb_left, r.bb_top, r.bb_width, r.bb_height, r.conf, r.x, r.y, r.z)]
    )


def parse_line(line: str, path="<string>", line_no: int = 1) -> MotRecord:
    fields = [f.strip() for f in line.strip().split(",")]
    if len(fields) < N_FIELDS:
        raise MotFormatError(path, line_no, f"expected {N_FIELDS} fields, got {len(fields)}")
    try:
        frame = _parse_int(fields[0])
        tid = _parse_int(fields[1])
        vals = [float(f) for f in fields[2:N_FIELDS]]
    except ValueError as exc:
        raise MotFormatError(path, line_no, str(exc)) from None
    rec = MotRecord(frame, tid, *vals)
    if rec.frame < 1:
        raise MotFormatError(path, line_no, f"frame must be >= 1, got {rec.frame}")
    return rec


def _parse_int(text: str) -> int:
    value = float(text)
    if not value.is_integer():
        raise ValueError(f"not an integer: {text!r}")
    return int(value)


def read_mot(path, kind: str = "ground_truth") -> list[MotRecord]:
    """Parse a MOT file; ``kind`` is ``detections`` or ``ground_truth``."""
    if kind not in ("detections", "ground_truth"):
        raise ValueError(f"unknown kind {kind!r}")
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = parse_line(line, path, line_no)
            if kind == "ground_truth" and rec.id < 0:
                raise MotFormatError(path, line_no, "ground-truth rows need a non-negative id")
            records.append(rec)
    return records


def write_mot(records: Iterable[MotRecord], path) -> None:
    path = Path(path)
    lines = []
    for r in records:
        r.validate()
        lines.append(format_record(r))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(line + "\n" for line in lines))
