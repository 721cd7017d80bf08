import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aerotrack.geometry import Homography
from aerotrack.violations import (CROSSWALK, CROSSWALK_OBSTRUCTION, DOUBLE_PARKING, ILLEGAL_LANE_CHANGE, NO_PARKING,
                                  UTURN_APPROACH, TrackSeries, Zone, detect_all, detect_crosswalk_obstruction,
                                  detect_double_parking, detect_lane_change_violation, lane_index, point_in_polygon,
                                  read_events_jsonl, write_events_jsonl, zones_from_dicts)

FPS = 25.0
BOX = [(0, 0), (20, 0), (20, 10), (0, 10)]


def _stop_series(tid, secs, at=(10.0, 5.0), lead=25, tail=25, moving_kmh=30.0):
    """Drive in at speed, stop for ``secs`` seconds, drive off."""
    n = int(round(secs * FPS))
    frames = list(range(lead + n + tail))
    world = [at] * len(frames)
    speeds = [moving_kmh] * lead + [0.0] * n + [moving_kmh] * tail
    return TrackSeries(tid, frames, world, speeds)


def test_double_parking_examples():
    z = [Zone("P", NO_PARKING, BOX)]
    ev = detect_double_parking([_stop_series(1, 12)], z, fps=FPS)
    assert len(ev) == 1 and ev[0].kind == DOUBLE_PARKING
    assert (ev[0].start_frame, ev[0].end_frame) == (25, 324)
    assert ev[0].evidence["dwell_s"] == pytest.approx(12.0)
    assert detect_double_parking([_stop_series(2, 8)], z, fps=FPS) == []
    assert detect_double_parking([_stop_series(3, 10)], z, fps=FPS) == []  # "more than", not "at least"
    outside = _stop_series(4, 15, at=(50.0, 50.0))
    assert detect_double_parking([outside], z, fps=FPS) == []


def test_crosswalk_examples():
    z = [Zone("C", CROSSWALK, BOX)]
    ev = detect_crosswalk_obstruction([_stop_series(1, 11), _stop_series(2, 9)], z, fps=FPS)
    assert [(e.track_id, e.kind) for e in ev] == [(1, CROSSWALK_OBSTRUCTION)]
    assert ev[0].evidence["dwell_s"] == pytest.approx(11.0)
    # transit at 20 km/h is never slow
    frames = list(range(100))
    moving = TrackSeries(3, frames, [(10.0, 5.0)] * 100, [20.0] * 100)
    assert detect_crosswalk_obstruction([moving], z, fps=FPS) == []
    # a parking rule does not fire in a crosswalk
    assert detect_double_parking([_stop_series(1, 11)], z, fps=FPS) == []


def test_short_gaps_bridged_long_gaps_split():
    z = [Zone("P", NO_PARKING, BOX)]
    s = _stop_series(1, 12)
    s.speeds[100:102] = 30.0  # 2-frame jitter
    assert len(detect_double_parking([s], z, fps=FPS)) == 1
    s.speeds[100:110] = 30.0  # split into 3 s and 8.6 s
    assert detect_double_parking([s], z, fps=FPS) == []


def test_nan_speed_is_not_slow():
    z = [Zone("P", NO_PARKING, BOX)]
    s = _stop_series(1, 12)
    s.speeds[:] = np.nan
    assert detect_double_parking([s], z, fps=FPS) == []


def _uturn(stop=(150.0, 55.0)):
    return Zone("U", UTURN_APPROACH, [(0, 40), (160, 40), (160, 70), (0, 70)],
                {"stop_point": list(stop), "axis": [1.0, 0.0]})


LANES = {"centerlines": [[(0, 50), (200, 50)], [(0, 60), (200, 60)]]}


def _lane_change_series(x_change, tid=1, step=1.0):
    xs = np.arange(0, 150, step)
    ys = np.where(xs < x_change, 50.0, 60.0)
    return TrackSeries(tid, list(range(len(xs))), np.column_stack([xs, ys]), np.full(len(xs), 40.0))


def test_lane_change_within_range():
    ev = detect_lane_change_violation([_lane_change_series(125)], _uturn(), LANES)
    assert len(ev) == 1 and ev[0].kind == ILLEGAL_LANE_CHANGE
    assert ev[0].evidence["distance_m"] == pytest.approx(25.0)
    assert (ev[0].start_frame, ev[0].end_frame) == (124, 125)
    assert (ev[0].evidence["from_lane"], ev[0].evidence["to_lane"]) == (0, 1)


def test_lane_change_too_far_or_absent():
    far = _uturn(stop=(300.0, 55.0))
    far = Zone("U", UTURN_APPROACH, [(0, 40), (400, 40), (400, 70), (0, 70)], far.metadata)
    assert detect_lane_change_violation([_lane_change_series(149.5)], far, LANES) == []  # 150 m out
    straight = TrackSeries(1, range(100), np.column_stack([np.arange(100.0), np.full(100, 50.0)]), np.full(100, 40.0))
    assert detect_lane_change_violation([straight], _uturn(), LANES) == []


def test_lane_flicker_is_not_a_change():
    s = _lane_change_series(1000)
    s.world[60:62, 1] = 60.0  # two samples only
    assert detect_lane_change_violation([s], _uturn(), LANES) == []


def test_missing_lane_geometry_raises():
    with pytest.raises(ValueError, match="lane"):
        detect_all([_lane_change_series(125)], [_uturn()], lanes=None)


def test_lane_index_nearest():
    assert lane_index((10, 52), LANES["centerlines"]) == 0
    assert lane_index((10, 58), LANES["centerlines"]) == 1
    assert lane_index((10, 55), LANES["centerlines"]) == 0  # tie goes to the first


def _winding(p, poly):
    """Winding-number oracle for strictly interior / exterior points."""
    x, y = p
    wn = 0
    n = len(poly)
    for i in range(n):
        (x1, y1), (x2, y2) = poly[i], poly[(i + 1) % n]
        cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
        if y1 <= y < y2 and cross > 0:
            wn += 1
        elif y2 <= y < y1 and cross < 0:
            wn -= 1
    return wn != 0


def test_point_in_polygon_boundary_inclusive():
    sq = np.array(BOX, dtype=float)
    for p in [(0, 0), (20, 10), (10, 0), (0, 5), (20, 3.5)]:
        assert point_in_polygon(p, sq)
    assert not point_in_polygon((20.001, 5), sq)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_point_in_polygon_matches_winding_oracle(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(3, 9))
    ang = np.sort(rng.uniform(0, 2 * math.pi, k))
    rad = rng.uniform(2, 10, k)
    poly = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])  # star-shaped, simple
    for p in rng.uniform(-11, 11, (50, 2)):
        assert point_in_polygon(p, poly) == _winding(p, poly)


def _rescan_oracle(series, zone, v_stop, need_frames):
    """Every maximal window of slow in-zone samples, with gaps of <= 2 frames."""
    hits = sorted(f for f, p, v in zip(series.frames, series.world, series.speeds)
                  if v < v_stop and point_in_polygon(p, zone.polygon))
    out = []
    i = 0
    while i < len(hits):
        j = i
        while j + 1 < len(hits) and hits[j + 1] - hits[j] <= 3:
            j += 1
        if hits[j] - hits[i] + 1 > need_frames:
            out.append((hits[i], hits[j]))
        i = j + 1
    return out


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_dwell_matches_rescan_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 400))
    frames = np.cumsum(rng.integers(1, 3, n)).tolist()
    world = rng.uniform(-2, 22, (n, 2))
    world[:, 1] = rng.choice([5.0, 15.0], n, p=[0.9, 0.1])
    speeds = rng.choice([0.5, 5.0, np.nan], n, p=[0.85, 0.1, 0.05])
    s = TrackSeries(1, frames, world, speeds)
    zone = Zone("P", NO_PARKING, BOX)
    got = [(e.start_frame, e.end_frame) for e in detect_double_parking([s], [zone], fps=5.0, dwell_min=4.0)]
    assert got == _rescan_oracle(s, zone, 2.0, 20)


def test_detect_all_deterministic_and_sorted(tmp_path):
    zones = [Zone("P", NO_PARKING, BOX), Zone("C", CROSSWALK, [(30, 0), (40, 0), (40, 10), (30, 10)]), _uturn()]
    series = [_lane_change_series(125, tid=3), _stop_series(2, 11, at=(35, 5)), _stop_series(1, 12)]
    a = detect_all(series, zones, LANES, fps=FPS)
    b = detect_all(list(reversed(series)), zones, LANES, fps=FPS)
    assert a == b
    assert [e.kind for e in a] == [DOUBLE_PARKING, CROSSWALK_OBSTRUCTION, ILLEGAL_LANE_CHANGE]
    write_events_jsonl(tmp_path / "e.jsonl", a)
    assert read_events_jsonl(tmp_path / "e.jsonl") == a
    first = json.loads((tmp_path / "e.jsonl").read_text().splitlines()[0])
    assert list(first) == sorted(first)


def test_zones_from_pixels():
    H = Homography.scaling(0.5)
    zs = zones_from_dicts([{"id": "U", "kind": "uturn_approach", "frame": "pixel",
                            "polygon": [[0, 0], [10, 0], [10, 10]], "stop_point": [8, 2], "axis": [2, 0]}], H)
    assert np.allclose(zs[0].polygon, [[0, 0], [5, 0], [5, 5]])
    assert zs[0].metadata["stop_point"] == [4, 1] and zs[0].metadata["axis"] == [1, 0]
    with pytest.raises(ValueError):
        zones_from_dicts([{"id": "X", "kind": "no_parking", "frame": "pixel", "polygon": BOX}])
    with pytest.raises(ValueError):
        Zone("bad", "parking_lot", BOX)
    with pytest.raises(ValueError):
        Zone("bad", NO_PARKING, BOX[:2])
    with pytest.raises(ValueError):
        TrackSeries(1, [0, 0], [(0, 0), (1, 1)], [1, 1])
