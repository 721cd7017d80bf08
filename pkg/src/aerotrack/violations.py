"""Geofence and threshold rules: double parking, crosswalk obstruction and
lane changes on the approach to a U-turn."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import Homography, project, project_many

NO_PARKING = "no_parking"
CROSSWALK = "crosswalk"
UTURN_APPROACH = "uturn_approach"
LANE_REGION = "lane_region"
ZONE_KINDS = (NO_PARKING, CROSSWALK, UTURN_APPROACH, LANE_REGION)

DOUBLE_PARKING = "double_parking"
CROSSWALK_OBSTRUCTION = "crosswalk_obstruction"
ILLEGAL_LANE_CHANGE = "illegal_lane_change"

MAX_GAP = 2  # frames of exit/re-entry jitter bridged inside a dwell
LANE_HOLD = 3  # frames a new lane index must persist before it counts


@dataclass(frozen=True)
class Zone:
    id: str
    kind: str
    polygon: np.ndarray  # world metres, (n, 2)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        poly = np.asarray(self.polygon, dtype=np.float64).reshape(-1, 2)
        if len(poly) < 3:
            raise ValueError(f"zone {self.id!r}: polygon needs at least 3 vertices")
        if self.kind not in ZONE_KINDS:
            raise ValueError(f"zone {self.id!r}: unknown kind {self.kind!r}")
        object.__setattr__(self, "polygon", poly)

    def contains(self, p) -> bool:
        return point_in_polygon(p, self.polygon)


@dataclass(frozen=True)
class ViolationEvent:
    track_id: int
    kind: str
    zone_id: str
    start_frame: int
    end_frame: int
    evidence: dict

    def __post_init__(self):
        if self.end_frame < self.start_frame:
            raise ValueError("end_frame precedes start_frame")

    def to_dict(self) -> dict:
        return {"track_id": int(self.track_id), "kind": self.kind, "zone_id": self.zone_id,
                "start_frame": int(self.start_frame), "end_frame": int(self.end_frame),
                "evidence": dict(self.evidence)}


@dataclass
class TrackSeries:
    """Per-frame world positions and speeds (km/h, NaN where unknown) of one track."""

    track_id: int
    frames: list
    world: np.ndarray
    speeds: np.ndarray

    def __post_init__(self):
        self.frames = [int(f) for f in self.frames]
        self.world = np.asarray(self.world, dtype=np.float64).reshape(-1, 2)
        self.speeds = np.asarray(self.speeds, dtype=np.float64).reshape(-1)
        if not (len(self.frames) == len(self.world) == len(self.speeds)):
            raise ValueError(f"track {self.track_id}: frames, positions and speeds differ in length")
        if any(b <= a for a, b in zip(self.frames, self.frames[1:])):
            raise ValueError(f"track {self.track_id}: frames must be strictly increasing")


def point_in_polygon(p, poly) -> bool:
    """Even-odd ray casting; points on the boundary count as inside."""
    x, y = float(p[0]), float(p[1])
    poly = np.asarray(poly, dtype=np.float64)
    n = len(poly)
    inside = False
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        # on-segment test first so edges and vertices are inclusive
        cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
        scale = max(1.0, abs(x2 - x1) + abs(y2 - y1))
        if abs(cross) <= 1e-12 * scale and min(x1, x2) <= x <= max(x1, x2) and min(y1, y2) <= y <= max(y1, y2):
            return True
        if (y1 > y) != (y2 > y):
            xi = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xi:
                inside = not inside
    return inside


def zones_from_dicts(items, h: Optional[Homography] = None) -> list:
    """Build zones from config dicts.

    Keys: ``id``, ``kind``, ``polygon`` and optionally ``frame`` (``world`` or
    ``pixel``). A ``uturn_approach`` zone also carries ``stop_point`` and
    ``axis`` (direction of travel toward the stop line), in the same frame.
    """
    zones = []
    for d in items or []:
        d = dict(d)
        frame = d.pop("frame", "world")
        poly = np.asarray(d.pop("polygon"), dtype=np.float64)
        meta = {k: v for k, v in d.items() if k not in ("id", "kind")}
        if frame == "pixel":
            if h is None:
                raise ValueError(f"zone {d.get('id')!r} is in pixels but no homography is given")
            poly = project_many(h, poly)
            if "stop_point" in meta:
                sp = np.asarray(meta["stop_point"], dtype=np.float64)
                ax = np.asarray(meta.get("axis", (1.0, 0.0)), dtype=np.float64)
                a, b = project(h, sp), project(h, sp + ax)
                meta["stop_point"] = [a[0], a[1]]
                meta["axis"] = [b[0] - a[0], b[1] - a[1]]
        elif frame != "world":
            raise ValueError(f"zone {d.get('id')!r}: frame must be 'world' or 'pixel'")
        zones.append(Zone(str(d["id"]), d["kind"], poly, meta))
    return zones


def _runs(flags, frames, max_gap: int):
    """Maximal runs of True over frame indices, bridging gaps of <= max_gap frames.

    Missing frames count as part of a gap.
    """
    out = []
    start = last = None
    for ok, f in zip(flags, frames):
        if not ok:
            continue
        if last is not None and f - last - 1 <= max_gap:
            last = f
            continue
        if last is not None:
            out.append((start, last))
        start = last = f
    if last is not None:
        out.append((start, last))
    return out


def _dwell_events(series, zones, kind, event_kind, v_stop, dwell_min, fps):
    need = math.ceil(dwell_min * fps - 1e-9)
    events = []
    for s in series:
        slow = s.speeds < v_stop  # NaN compares False
        for z in zones:
            if z.kind != kind:
                continue
            flags = [bool(sl) and z.contains(p) for sl, p in zip(slow, s.world)]
            for a, b in _runs(flags, s.frames, MAX_GAP):
                n = b - a + 1
                if n > need:
                    events.append(ViolationEvent(s.track_id, event_kind, z.id, a, b,
                                                 {"dwell_s": round(n / fps, 9)}))
    return events


def detect_double_parking(series, zones, v_stop: float = 2.0, dwell_min: float = 10.0, fps: float = 25.0):
    return _sorted(_dwell_events(series, zones, NO_PARKING, DOUBLE_PARKING, v_stop, dwell_min, fps))


def detect_crosswalk_obstruction(series, zones, v_stop: float = 2.0, dwell_min: float = 10.0, fps: float = 25.0):
    return _sorted(_dwell_events(series, zones, CROSSWALK, CROSSWALK_OBSTRUCTION, v_stop, dwell_min, fps))


def _polyline_distance(p, line) -> float:
    line = np.asarray(line, dtype=np.float64)
    best = math.inf
    for a, b in zip(line[:-1], line[1:]):
        ab = b - a
        denom = float(ab @ ab)
        t = 0.0 if denom == 0 else min(1.0, max(0.0, float((p - a) @ ab) / denom))
        best = min(best, float(np.hypot(*(a + t * ab - p))))
    return best


def lane_index(p, centerlines) -> int:
    """Index of the nearest lane centerline (first on ties)."""
    p = np.asarray(p, dtype=np.float64)
    d = [_polyline_distance(p, c) for c in centerlines]
    return int(np.argmin(d))


def _centerlines(lanes):
    if isinstance(lanes, dict):
        lanes = lanes.get("centerlines")
    if not lanes:
        raise ValueError("lane change detection needs lane geometry (centerlines)")
    out = [np.asarray(c, dtype=np.float64).reshape(-1, 2) for c in lanes]
    if any(len(c) < 2 for c in out):
        raise ValueError("each lane centerline needs at least 2 points")
    return out


def detect_lane_change_violation(series, uturn_zone: Zone, lanes, d_max: float = 100.0, hold: int = LANE_HOLD):
    """Lane-index changes inside the approach zone closer than ``d_max`` to the stop line.

    A change is accepted once the new index persists for ``hold`` samples;
    it is dated at the first sample in the new lane and its evidence is the
    along-axis distance to the stop line there.
    """
    lines = _centerlines(lanes)
    stop = np.asarray(uturn_zone.metadata.get("stop_point"), dtype=np.float64)
    axis = np.asarray(uturn_zone.metadata.get("axis", (1.0, 0.0)), dtype=np.float64)
    if stop.shape != (2,) or not np.hypot(*axis) > 0:
        raise ValueError(f"zone {uturn_zone.id!r} needs stop_point and a non-zero axis")
    axis = axis / np.hypot(*axis)
    events = []
    for s in series:
        idx = [lane_index(p, lines) for p in s.world]
        cur = idx[0] if idx else None
        i = 1
        while i < len(idx):
            if idx[i] != cur and idx[i:i + hold] == [idx[i]] * hold:
                p = s.world[i]
                d = float((stop - p) @ axis)
                if uturn_zone.contains(p) and 0.0 <= d < d_max:
                    events.append(ViolationEvent(
                        s.track_id, ILLEGAL_LANE_CHANGE, uturn_zone.id, s.frames[i - 1], s.frames[i],
                        {"distance_m": round(d, 9), "from_lane": cur, "to_lane": idx[i]}))
                cur = idx[i]
            i += 1
    return _sorted(events)


def _sorted(events):
    return sorted(events, key=lambda e: (e.start_frame, e.track_id, e.kind, e.zone_id, e.end_frame))


def detect_all(series, zones, lanes=None, fps: float = 25.0, v_stop: float = 2.0,
               dwell_min: float = 10.0, d_max: float = 100.0):
    events = detect_double_parking(series, zones, v_stop, dwell_min, fps)
    events += detect_crosswalk_obstruction(series, zones, v_stop, dwell_min, fps)
    for z in zones:
        if z.kind == UTURN_APPROACH:
            events += detect_lane_change_violation(series, z, lanes, d_max)
    return _sorted(events)


def write_events_jsonl(path, events) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


def read_events_jsonl(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(ViolationEvent(d["track_id"], d["kind"], d["zone_id"], d["start_frame"],
                                          d["end_frame"], d["evidence"]))
    return out
