"""Gate counts, OD matrices, heatmaps, class correlations, congestion
clustering and CLEAR-MOT style evaluation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .classify import CLASS_ORDER
from .detect import RotatedBox, rotated_iou
from .track import hungarian


# -- gates and crossings ----------------------------------------------------

@dataclass(frozen=True)
class Gate:
    """Directed segment p0 -> p1. Crossing from its right to its left is +1."""

    id: str
    p0: tuple
    p1: tuple


class Crossing(NamedTuple):
    gate_id: str
    frame_index: int
    direction: int


class TrackPath(NamedTuple):
    track_id: int
    vehicle_class: Optional[str]
    points: list  # (frame_index, (x, y)), any coordinate frame shared with the gates


def gates_from_dicts(items) -> list:
    return [Gate(str(d["id"]), tuple(map(float, d["p0"])), tuple(map(float, d["p1"]))) for d in items or []]


def _side(g: Gate, p) -> float:
    return (g.p1[0] - g.p0[0]) * (p[1] - g.p0[1]) - (g.p1[1] - g.p0[1]) * (p[0] - g.p0[0])


def segment_crossing(g: Gate, a, b) -> int:
    """Signed crossing of the step a -> b over gate g: +1, -1 or 0.

    A point with side >= 0 is on the left; the crossing point must fall
    within the gate's extent (endpoints included).
    """
    sa, sb = _side(g, a), _side(g, b)
    if (sa >= 0) == (sb >= 0):
        return 0
    t = sa / (sa - sb)
    px, py = a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])
    gx, gy = g.p1[0] - g.p0[0], g.p1[1] - g.p0[1]
    u = ((px - g.p0[0]) * gx + (py - g.p0[1]) * gy) / (gx * gx + gy * gy)
    if not 0.0 <= u <= 1.0:
        return 0
    return 1 if sb >= 0 else -1


def track_crossings(points, gates) -> list:
    """All gate crossings along a frame-ordered polyline, dated at the arriving sample."""
    pts = sorted(points, key=lambda fp: fp[0])
    out = []
    for (_, a), (fb, b) in zip(pts, pts[1:]):
        for g in gates:
            d = segment_crossing(g, a, b)
            if d:
                out.append(Crossing(g.id, int(fb), d))
    return out


def paths_from_tracks(tracks) -> list:
    """Matched points of tracker tracks as :class:`TrackPath` values."""
    return [TrackPath(t.id, t.vehicle_class, [(p.frame_index, (p.x, p.y)) for p in t.matched_points()])
            for t in tracks]


@dataclass
class CountTable:
    rows: list
    cols: list
    cells: np.ndarray

    @property
    def total(self) -> int:
        return int(self.cells.sum())

    def per_interval(self, duration_s: float, interval_s: float = 900.0) -> np.ndarray:
        """Counts rescaled to a rate per ``interval_s`` (default 15 minutes)."""
        if not duration_s > 0:
            raise ValueError("duration must be positive")
        return self.cells * (interval_s / duration_s)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["point", "class", "count"])
            for i, r in enumerate(self.rows):
                for j, c in enumerate(self.cols):
                    w.writerow([r, c, int(self.cells[i, j])])


def count_crossings(paths, gates, classes=CLASS_ORDER) -> CountTable:
    """Signed crossings per (gate, class); every crossing counts, re-crossings included.

    Tracks without a known class are tallied under the first class column
    only if that class is listed; otherwise they are skipped.
    """
    rows = [g.id for g in gates]
    cols = list(classes)
    cells = np.zeros((len(rows), len(cols)), dtype=np.int64)
    gi = {g: i for i, g in enumerate(rows)}
    ci = {c: j for j, c in enumerate(cols)}
    for p in paths:
        if p.vehicle_class not in ci:
            continue
        for c in track_crossings(p.points, gates):
            cells[gi[c.gate_id], ci[p.vehicle_class]] += 1
    return CountTable(rows, cols, cells)


@dataclass
class ODMatrix:
    gates: list
    cells: np.ndarray
    excluded: int = 0  # tracks with a single crossing: no distinct exit observed

    @property
    def total(self) -> int:
        return int(self.cells.sum())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["origin"] + list(self.gates))
            for g, row in zip(self.gates, self.cells):
                w.writerow([g] + [int(v) for v in row])
            w.writerow(["excluded_single_crossing", self.excluded])


def od_matrix(paths, gates) -> ODMatrix:
    """Origin = first crossed gate, destination = last, for tracks with >= 2 crossings."""
    ids = [g.id for g in gates]
    gi = {g: i for i, g in enumerate(ids)}
    cells = np.zeros((len(ids), len(ids)), dtype=np.int64)
    excluded = 0
    for p in paths:
        cr = track_crossings(p.points, gates)
        if not cr:
            continue
        if len(cr) == 1:
            excluded += 1
            continue
        cells[gi[cr[0].gate_id], gi[cr[-1].gate_id]] += 1
    return ODMatrix(ids, cells, excluded)


def heatmap_grid(counts: CountTable) -> np.ndarray:
    cells = np.asarray(counts.cells, dtype=np.float64)
    m = cells.max() if cells.size else 0.0
    return cells / m if m > 0 else np.zeros_like(cells)


def class_correlation(counts: CountTable) -> np.ndarray:
    """Pearson r between class count vectors across points; NaN where undefined."""
    x = np.asarray(counts.cells, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("correlation needs at least 2 observation points")
    d = x - x.mean(axis=0)
    ss = (d * d).sum(axis=0)
    k = x.shape[1]
    r = np.full((k, k), np.nan)
    for i in range(k):
        for j in range(k):
            if ss[i] > 0 and ss[j] > 0:
                r[i, j] = 1.0 if i == j else float((d[:, i] @ d[:, j]) / math.sqrt(ss[i] * ss[j]))
    return r


def write_grid_csv(path, rows, cols, grid, label="point") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([label] + list(cols))
        for r, vals in zip(rows, grid):
            w.writerow([r] + ["nan" if np.isnan(v) else repr(round(float(v), 12)) for v in vals])


# -- congestion -------------------------------------------------------------

def dbscan(points, eps: float, min_pts: int) -> np.ndarray:
    """Labels (-1 for noise) in discovery order over the input order.

    Neighbourhoods are closed balls (distance <= eps) that include the point
    itself. Border points go to the first cluster that reaches them.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if min_pts < 2:
        raise ValueError("min_pts must be >= 2")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    cells = np.floor(pts / eps).astype(np.int64)
    grid = {}
    for i, (cx, cy) in enumerate(map(tuple, cells)):
        grid.setdefault((cx, cy), []).append(i)
    eps2 = eps * eps

    def neighbours(i):
        cx, cy = cells[i]
        cand = [j for dx in (-1, 0, 1) for dy in (-1, 0, 1) for j in grid.get((cx + dx, cy + dy), ())]
        cand = np.array(sorted(cand))
        d2 = ((pts[cand] - pts[i]) ** 2).sum(axis=1)
        return cand[d2 <= eps2]

    visited = np.zeros(n, dtype=bool)
    cid = 0
    for i in range(n):
        if visited[i]:
            continue
        visited[i] = True
        nb = neighbours(i)
        if len(nb) < min_pts:
            continue
        labels[i] = cid
        queue = list(nb)
        k = 0
        while k < len(queue):
            j = queue[k]
            k += 1
            if labels[j] == -1:
                labels[j] = cid
            if visited[j]:
                continue
            visited[j] = True
            nbj = neighbours(j)
            if len(nbj) >= min_pts:
                queue.extend(nbj)
        cid += 1
    return labels


def _canonical(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return pts[np.lexsort((pts[:, 1], pts[:, 0]))]


@dataclass
class CongestionRegion:
    id: int
    start_frame: int
    end_frame: int
    centroids: list = field(default_factory=list)
    sizes: list = field(default_factory=list)

    def to_dict(self, fps: float) -> dict:
        c = np.mean(self.centroids, axis=0)
        return {"id": self.id, "start_frame": self.start_frame, "end_frame": self.end_frame,
                "duration_s": round((self.end_frame - self.start_frame + 1) / fps, 9),
                "mean_centroid": [round(float(c[0]), 9), round(float(c[1]), 9)],
                "max_size": int(max(self.sizes))}


def congestion_clusters(positions_per_frame, eps: float, min_pts: int, persist_min: float, fps: float):
    """Per-frame DBSCAN, clusters chained across consecutive frames by centroid proximity.

    ``positions_per_frame`` maps frame index -> (n, 2) world points. A chain is
    emitted when it lasts more than ``persist_min`` seconds.
    """
    chains = []
    active = []  # chains that have a cluster in the previous frame
    for f in sorted(positions_per_frame):
        pts = _canonical(positions_per_frame[f])
        labels = dbscan(pts, eps, min_pts)
        clusters = []
        for c in range(labels.max() + 1 if len(labels) else 0):
            member = pts[labels == c]
            clusters.append((member.mean(axis=0), len(member)))
        clusters.sort(key=lambda cs: (cs[0][0], cs[0][1]))
        live = [ch for ch in active if ch.end_frame == f - 1]
        pairs = sorted(
            ((float(np.hypot(*(ch.centroids[-1] - cen))), ci, k)
             for ci, ch in enumerate(live) for k, (cen, _) in enumerate(clusters)),
            key=lambda t: (t[0], live[t[1]].id, t[2]))
        used_c, used_k, nxt = set(), set(), []
        for d, ci, k in pairs:
            if d >= eps or ci in used_c or k in used_k:
                continue
            used_c.add(ci)
            used_k.add(k)
            ch = live[ci]
            ch.end_frame = f
            ch.centroids.append(clusters[k][0])
            ch.sizes.append(clusters[k][1])
            nxt.append(ch)
        for k, (cen, size) in enumerate(clusters):
            if k not in used_k:
                ch = CongestionRegion(len(chains), f, f, [cen], [size])
                chains.append(ch)
                nxt.append(ch)
        active = nxt
    keep = [ch for ch in chains if (ch.end_frame - ch.start_frame + 1) / fps > persist_min]
    return [CongestionRegion(i, ch.start_frame, ch.end_frame, ch.centroids, ch.sizes) for i, ch in enumerate(keep)]


# -- evaluation -------------------------------------------------------------

@dataclass
class MotReport:
    precision: float
    recall: float
    f1: float
    mota: float
    motp: float
    id_switches: int
    fp: int
    fn: int
    tp: int
    gt_total: int
    n_frames: int
    precision_defined: bool = True

    def to_dict(self) -> dict:
        return {k: (round(v, 12) if isinstance(v, float) else v) for k, v in self.__dict__.items()}

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")


def _similarity(metric, thr):
    if metric == "iou":
        def score(a, b):
            v = rotated_iou(a, b)
            return (v >= thr, 1.0 - v, v)
    elif metric == "distance":
        def score(a, b):
            d = math.hypot(a.cx - b.cx, a.cy - b.cy)
            return (d <= thr, d, 1.0 - d / thr)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return score


def _ratios(tp, fp, fn):
    precision_defined = tp + fp > 0
    p = tp / (tp + fp) if precision_defined else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1, precision_defined


def _ordered(items):
    # geometry first so that relabelling ids does not change tie-breaks
    return sorted(items, key=lambda ib: (ib[1].cx, ib[1].cy, ib[1].w, ib[1].h, ib[1].theta, ib[0]))


def evaluate_mot(gt, pred, match_thr: float = 0.5, metric: str = "iou") -> MotReport:
    """CLEAR-MOT over ``{frame: [(id, RotatedBox), ...]}`` mappings.

    Correspondences from the previous frame are kept while still valid; the
    rest are assigned by Hungarian matching on (1 - IoU) or distance. MOTA is
    not clamped and can be negative.
    """
    gt_total = sum(len(v) for v in gt.values())
    if gt_total == 0:
        raise ValueError("ground truth is empty")
    score = _similarity(metric, match_thr)
    frames = sorted(set(gt) | set(pred))
    tp = fp = fn = idsw = 0
    overlap = 0.0
    prev = {}  # gt id -> pred id matched in the previous frame it was matched
    last = {}  # gt id -> last pred id ever matched
    for f in frames:
        g = _ordered(gt.get(f, []))
        p = _ordered(pred.get(f, []))
        gidx = {gid: i for i, (gid, _) in enumerate(g)}
        pidx = {pid: j for j, (pid, _) in enumerate(p)}
        matches = {}
        taken = set()
        for i, (gid, gbox) in enumerate(g):
            pid = prev.get(gid)
            if pid in pidx and pidx[pid] not in taken:
                ok, _, sim = score(gbox, p[pidx[pid]][1])
                if ok:
                    matches[i] = (pidx[pid], sim)
                    taken.add(pidx[pid])
        free_g = [i for i in range(len(g)) if i not in matches]
        free_p = [j for j in range(len(p)) if j not in taken]
        if free_g and free_p:
            cost = np.full((len(free_g), len(free_p)), np.inf)
            sims = {}
            for a, i in enumerate(free_g):
                for b, j in enumerate(free_p):
                    ok, c, sim = score(g[i][1], p[j][1])
                    if ok:
                        cost[a, b] = c
                        sims[a, b] = sim
            for a, b in hungarian(cost):
                matches[free_g[a]] = (free_p[b], sims[a, b])
        cur = {}
        for i, (j, sim) in matches.items():
            gid, pid = g[i][0], p[j][0]
            if gid in last and last[gid] != pid:
                idsw += 1
            last[gid] = pid
            cur[gid] = pid
            overlap += sim
        # an object absent this frame keeps its correspondence unless another took the hypothesis
        claimed = set(cur.values())
        prev = {**{k: v for k, v in prev.items() if k not in gidx and v not in claimed}, **cur}
        tp += len(matches)
        fp += len(p) - len(matches)
        fn += len(g) - len(matches)
    pr, rc, f1, defined = _ratios(tp, fp, fn)
    mota = 1.0 - (fn + fp + idsw) / gt_total
    motp = overlap / tp if tp else 0.0
    return MotReport(pr, rc, f1, mota, motp, idsw, fp, fn, tp, gt_total, len(frames), defined)


def evaluate_detections(gt, pred, iou_thr: float = 0.5) -> dict:
    """Per-frame one-to-one matching at an IoU threshold, pooled over frames."""
    tp = fp = fn = 0
    for f in sorted(set(gt) | set(pred)):
        g, p = list(gt.get(f, [])), list(pred.get(f, []))
        m = 0
        if g and p:
            cost = np.full((len(g), len(p)), np.inf)
            for i, a in enumerate(g):
                for j, b in enumerate(p):
                    v = rotated_iou(a, b)
                    if v >= iou_thr:
                        cost[i, j] = 1.0 - v
            m = len(hungarian(cost))
        tp += m
        fp += len(p) - m
        fn += len(g) - m
    pr, rc, f1, defined = _ratios(tp, fp, fn)
    return {"tp": tp, "fp": fp, "fn": fn, "precision": pr, "recall": rc, "f1": f1,
            "precision_defined": defined}


def gt_boxes_by_frame(gt_boxes: dict, include_occluded: bool = False) -> dict:
    """``GroundTruth.boxes`` as ``{frame: [(id, RotatedBox)]}``."""
    out = {}
    for f, boxes in gt_boxes.items():
        out[int(f)] = [(b["id"], RotatedBox(b["cx"], b["cy"], b["w"], b["h"], b["theta"]))
                       for b in boxes if include_occluded or not b.get("occluded")]
    return out
