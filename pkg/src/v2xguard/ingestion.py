"""NDJSON trace parsing, ego alignment and per-sender grouping."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from pathlib import Path

from .domain import EGO_ID, AttackLabel, CamRecord, KinematicState, MsgType

logger = logging.getLogger(__name__)

DEFAULT_MAX_GAP = 2.0


@dataclass
class ParseReport:
    lines: int = 0
    records: int = 0
    errors: list[tuple[int, str]] = field(default_factory=list)

    @property
    def error_count(self) -> int:
        return len(self.errors)


@dataclass(frozen=True)
class TraceFile:
    path: str | None
    records: tuple[CamRecord, ...]


@dataclass(frozen=True, slots=True)
class AlignedObservation:
    cam: CamRecord
    ego: CamRecord

    @property
    def gap(self) -> float:
        return self.cam.recv_time - self.ego.recv_time


def _xy(value, name: str) -> tuple[float, float]:
    if isinstance(value, (int, float)):
        raise ValueError(f"{name} must be an array")
    if len(value) < 2:
        raise ValueError(f"{name} needs at least 2 components")
    return float(value[0]), float(value[1])


def _heading(value) -> tuple[float, float]:
    # scalar headings are angles in radians
    if isinstance(value, (int, float)):
        hx, hy = math.cos(value), math.sin(value)
    else:
        hx, hy = _xy(value, "hed")
    norm = math.hypot(hx, hy)
    if not math.isfinite(norm) or norm < 1e-6:
        return 0.0, 0.0
    return hx / norm, hy / norm


def record_from_json(obj: dict) -> CamRecord:
    if not isinstance(obj, dict):
        raise ValueError(f"line must decode to an object, got {type(obj).__name__}")
    msg_type = MsgType(int(obj["type"]))
    recv = float(obj["rcvTime"])
    send = float(obj.get("sendTime", recv))
    px, py = _xy(obj["pos"], "pos")
    sx, sy = _xy(obj.get("spd", (0.0, 0.0)), "spd")
    ax, ay = _xy(obj.get("acl", (0.0, 0.0)), "acl")
    hx, hy = _heading(obj.get("hed", (0.0, 0.0)))
    state = KinematicState(px, py, sx, sy, ax, ay, hx, hy)
    label = AttackLabel.parse(obj["label"]) if "label" in obj else AttackLabel.BENIGN
    if msg_type == MsgType.EGO:
        sender = EGO_ID
    else:
        # pseudonyms are the transmitted identities, so Sybil ghosts stay distinct
        sender = str(obj.get("senderPseudo", obj.get("sender")))
        if obj.get("senderPseudo") is None and obj.get("sender") is None:
            raise ValueError("received record without sender")
    return CamRecord(msg_type, recv, send, sender, state, label)


def record_to_json(rec: CamRecord, with_label: bool = False) -> dict:
    s = rec.state
    obj: dict = {"type": int(rec.msg_type), "rcvTime": rec.recv_time, "sendTime": rec.send_time}
    if not rec.is_ego:
        obj["sender"] = rec.sender_id
    obj["pos"] = [s.pos_x, s.pos_y, 0.0]
    obj["spd"] = [s.spd_x, s.spd_y, 0.0]
    obj["acl"] = [s.acl_x, s.acl_y, 0.0]
    obj["hed"] = [s.hed_x, s.hed_y, 0.0]
    if with_label:
        obj["label"] = rec.label.code
    return obj


def parse_trace(lines: Iterable[str], path: str | None = None) -> tuple[TraceFile, ParseReport]:
    """Parse one JSON object per line; malformed lines are counted, not fatal."""
    report = ParseReport()
    records: list[CamRecord] = []
    for lineno, line in enumerate(lines, start=1):
        s = line.strip()
        if not s:
            continue
        report.lines += 1
        try:
            records.append(record_from_json(json.loads(s)))
        except (ValueError, KeyError, TypeError) as exc:
            report.errors.append((lineno, f"{type(exc).__name__}: {exc}"))
    report.records = len(records)
    if report.errors:
        logger.warning("%s: %d malformed line(s) skipped", path or "<stream>", report.error_count)
    return TraceFile(path, tuple(records)), report


def read_trace(path: str | Path) -> tuple[TraceFile, ParseReport]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as f:
        return parse_trace(f, str(path))


def iter_trace_lines(trace: TraceFile, with_label: bool = False) -> Iterator[str]:
    for rec in trace.records:
        yield json.dumps(record_to_json(rec, with_label), separators=(",", ":"))


def write_trace(trace: TraceFile, path: str | Path, with_label: bool = False) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as f:
        for line in iter_trace_lines(trace, with_label):
            f.write(line)
            f.write("\n")


def align(trace: TraceFile, max_gap: float = DEFAULT_MAX_GAP) -> tuple[list[AlignedObservation], int]:
    """Pair each received CAM with the latest ego state at or before its receive time.

    Returns the kept observations (in receive-time order) and the number of
    received records discarded for a missing or stale ego state.
    """
    egos = sorted((r for r in trace.records if r.is_ego), key=lambda r: r.recv_time)
    cams = sorted((r for r in trace.records if not r.is_ego), key=lambda r: r.recv_time)
    out: list[AlignedObservation] = []
    discarded = 0
    cursor = -1
    for cam in cams:
        while cursor + 1 < len(egos) and egos[cursor + 1].recv_time <= cam.recv_time:
            cursor += 1
        if cursor < 0 or cam.recv_time - egos[cursor].recv_time > max_gap:
            discarded += 1
            continue
        out.append(AlignedObservation(cam, egos[cursor]))
    return out, discarded


def group_by_sender(observations: Iterable[AlignedObservation]) -> dict[str, list[AlignedObservation]]:
    """Group by sender, sort by receive time, keep the first of duplicate timestamps."""
    groups: dict[str, list[AlignedObservation]] = {}
    for obs in observations:
        groups.setdefault(obs.cam.sender_id, []).append(obs)
    result = {}
    for sender, items in groups.items():
        # stable sort keeps file order among equal timestamps
        items.sort(key=lambda o: o.cam.recv_time)
        kept: list[AlignedObservation] = []
        for obs in items:
            if kept and kept[-1].cam.recv_time == obs.cam.recv_time:
                continue
            kept.append(obs)
        result[sender] = kept
    return result
