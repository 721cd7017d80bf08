"""Constant-velocity Kalman tracking with Hungarian data association."""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

TENTATIVE = "tentative"
CONFIRMED = "confirmed"
TERMINATED = "terminated"


# -- Kalman filter ----------------------------------------------------------

@dataclass(frozen=True)
class KalmanState:
    x: np.ndarray  # (px_x, px_y, vel_x, vel_y)
    P: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64).reshape(4))
        object.__setattr__(self, "P", np.asarray(self.P, dtype=np.float64).reshape(4, 4))

    @property
    def position(self):
        return float(self.x[0]), float(self.x[1])

    @property
    def velocity(self):
        return float(self.x[2]), float(self.x[3])


def transition_matrix(dt: float) -> np.ndarray:
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    return F


def white_acceleration_q(dt: float, q: float) -> np.ndarray:
    """Discrete white-noise-acceleration covariance with intensity ``q``."""
    a, b, c = dt ** 4 / 4.0, dt ** 3 / 2.0, dt ** 2
    return q * np.array([[a, 0, b, 0], [0, a, 0, b], [b, 0, c, 0], [0, b, 0, c]])


@dataclass(frozen=True)
class NoiseModel:
    F: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    R: np.ndarray
    dt: float = 1.0

    @classmethod
    def constant_velocity(cls, dt: float = 1.0, q: float = 0.05, r_sigma: float = 2.0) -> "NoiseModel":
        H = np.zeros((2, 4))
        H[0, 0] = H[1, 1] = 1.0
        return cls(transition_matrix(dt), white_acceleration_q(dt, q), H, np.eye(2) * r_sigma ** 2, dt)


def _sym(P):
    return 0.5 * (P + P.T)


def kf_predict(s: KalmanState, m: NoiseModel) -> KalmanState:
    return KalmanState(m.F @ s.x, _sym(m.F @ s.P @ m.F.T + m.Q))


def kf_update(s: KalmanState, z, m: NoiseModel) -> KalmanState:
    z = np.asarray(z, dtype=np.float64).reshape(2)
    if not np.all(np.isfinite(z)):
        raise ValueError(f"non-finite measurement {z}")
    S = m.H @ s.P @ m.H.T + m.R
    if not np.all(np.isfinite(S)) or np.linalg.cond(S) > 1e15:
        raise np.linalg.LinAlgError("innovation covariance is singular; R must be positive definite")
    K = np.linalg.solve(S, (s.P @ m.H.T).T).T
    x = s.x + K @ (z - m.H @ s.x)
    P = (np.eye(4) - K @ m.H) @ s.P
    return KalmanState(x, _sym(P))


# -- assignment -------------------------------------------------------------

def _solve_square(C):
    """Min-cost perfect matching on a square matrix; returns (row->col, u, v)."""
    n = len(C)
    INF = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            row = C[i0 - 1]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = [0] * n
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def hungarian(cost):
    """Optimal assignment for an n x m cost matrix; ``inf`` marks forbidden pairs.

    Maximises the number of allowed pairs, then minimises their total cost.
    Among optimal assignments, the one whose per-row column vector (unassigned
    rows count as column ``m``) is lexicographically smallest is returned.
    Result: sorted list of (row, col).
    """
    C = np.asarray(cost, dtype=np.float64)
    if C.size == 0:
        return []
    if C.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if np.isnan(C).any():
        raise ValueError("cost contains NaN")
    n, m = C.shape
    finite = np.isfinite(C)
    if not finite.any():
        return []
    N = max(n, m)
    scale = float(np.abs(C[finite]).max()) + 1.0
    big = 2.0 * (N + 1) * scale
    sq = np.zeros((N, N))
    sq[:n, :m] = np.where(finite, C, big)
    rows = sq.tolist()
    row_to_col, u, v = _solve_square(rows)

    # equality graph: every optimal assignment uses only tight edges
    tol = 1e-9 * scale
    tight = [[j for j in range(N) if abs(rows[i][j] - u[i] - v[j]) <= tol] for i in range(N)]
    real = [[bool(j < m and i < n and finite[i, j]) for j in range(N)] for i in range(N)]
    match_row = list(row_to_col)
    match_col = [0] * N
    for i, j in enumerate(match_row):
        match_col[j] = i
    # 0: free, 1: fixed to its column, 2: must stay on a non-real column
    state = [0] * N

    def augment(r0, target, seen):
        # alternating path from row r0 (just displaced) to free column target
        for x in tight[r0]:
            if x in seen or (state[r0] == 2 and real[r0][x]):
                continue
            seen.add(x)
            y = match_col[x] if x != target else None
            if y is not None and state[y] == 1:
                continue
            if x == target or augment(y, target, seen):
                match_row[r0] = x
                match_col[x] = r0
                return True
        return False

    def try_fix(r, c, final):
        if match_row[r] == c:
            state[r] = final
            return True
        r0 = match_col[c]
        if state[r0] == 1:
            return False
        saved = (list(match_row), list(match_col), state[r])
        c0 = match_row[r]
        match_row[r] = c
        match_col[c] = r
        state[r] = final
        if augment(r0, c0, {c}):
            return True
        match_row[:], match_col[:] = saved[0], saved[1]
        state[r] = saved[2]
        return False

    for r in range(n):
        if any(try_fix(r, c, 1) for c in sorted(j for j in tight[r] if real[r][j])):
            continue
        if not real[r][match_row[r]]:
            state[r] = 2
            continue
        for c in tight[r]:
            if not real[r][c] and try_fix(r, c, 2):
                break
    return [(r, match_row[r]) for r in range(n) if real[r][match_row[r]]]


# -- tracks -----------------------------------------------------------------

class TrackPoint(NamedTuple):
    frame_index: int
    x: float
    y: float
    vx: float
    vy: float
    matched: bool
    status: str
    zx: float = math.nan  # measurement that updated this point, if any
    zy: float = math.nan


@dataclass
class Track:
    id: int
    state: KalmanState
    history: list = field(default_factory=list)
    misses: int = 0
    hits: int = 1
    status: str = TENTATIVE
    labels: list = field(default_factory=list)
    box_wh: tuple = (1.0, 1.0)
    box_theta: float = 0.0
    ever_confirmed: bool = False

    @property
    def position(self):
        return self.state.position

    @property
    def vehicle_class(self) -> Optional[str]:
        """Majority vote over per-detection labels (ties: first seen)."""
        if not self.labels:
            return None
        counts = Counter(self.labels)
        best = max(counts.values())
        return next(lab for lab in self.labels if counts[lab] == best)

    def matched_points(self):
        return [p for p in self.history if p.matched]


@dataclass
class TrackerConfig:
    dt: float = 1.0
    q: float = 0.05
    r_sigma: float = 2.0
    gate: float = 60.0
    max_misses: int = 10
    confirm_hits: int = 3
    init_vel_var: float = 25.0

    def noise_model(self) -> NoiseModel:
        return NoiseModel.constant_velocity(self.dt, self.q, self.r_sigma)


class Tracker:
    """Single-writer multi-object tracker; call :meth:`step` once per frame."""

    def __init__(self, config: Optional[TrackerConfig] = None):
        self.config = config or TrackerConfig()
        self.model = self.config.noise_model()
        self.tracks: list = []
        self.finished: list = []
        self._next_id = 1

    def _spawn(self, det, frame_index, label):
        c = self.config
        P = np.diag([c.r_sigma ** 2, c.r_sigma ** 2, c.init_vel_var, c.init_vel_var])
        st = KalmanState([det.box.cx, det.box.cy, 0.0, 0.0], P)
        status = CONFIRMED if c.confirm_hits <= 1 else TENTATIVE
        t = Track(self._next_id, st, status=status, ever_confirmed=status == CONFIRMED)
        self._next_id += 1
        self._record(t, det, frame_index, label)
        return t

    def _record(self, t, det, frame_index, label):
        t.box_wh = (det.box.w, det.box.h)
        t.box_theta = det.box.theta
        if label is not None:
            t.labels.append(label)
        x, y = t.state.position
        vx, vy = t.state.velocity
        t.history.append(TrackPoint(frame_index, x, y, vx, vy, True, t.status, det.box.cx, det.box.cy))

    def step(self, dets, frame_index: int, labels=None):
        """Advance one frame with that frame's detections; returns live tracks."""
        c = self.config
        m = self.model
        labels = list(labels) if labels is not None else [d.class_hint for d in dets]
        for t in self.tracks:
            t.state = kf_predict(t.state, m)

        if self.tracks and dets:
            cost = np.full((len(self.tracks), len(dets)), np.inf)
            for i, t in enumerate(self.tracks):
                px, py = t.state.position
                for j, d in enumerate(dets):
                    dist = math.hypot(d.box.cx - px, d.box.cy - py)
                    if dist <= c.gate:
                        cost[i, j] = dist
            pairs = hungarian(cost)
        else:
            pairs = []

        matched_t = {i for i, _ in pairs}
        matched_d = {j for _, j in pairs}
        for i, j in pairs:
            t, d = self.tracks[i], dets[j]
            t.state = kf_update(t.state, (d.box.cx, d.box.cy), m)
            t.hits += 1
            t.misses = 0
            if t.status == TENTATIVE and t.hits >= c.confirm_hits:
                t.status = CONFIRMED
                t.ever_confirmed = True
            self._record(t, d, frame_index, labels[j])

        alive = []
        for i, t in enumerate(self.tracks):
            if i not in matched_t:
                t.misses += 1
                t.hits = 0
                if t.misses > c.max_misses:
                    t.status = TERMINATED
                    self.finished.append(t)
                    continue
                x, y = t.state.position
                vx, vy = t.state.velocity
                t.history.append(TrackPoint(frame_index, x, y, vx, vy, False, t.status))
            alive.append(t)
        for j, d in enumerate(dets):
            if j not in matched_d:
                alive.append(self._spawn(d, frame_index, labels[j]))
        self.tracks = alive
        return list(self.tracks)

    def all_tracks(self):
        return sorted(self.finished + self.tracks, key=lambda t: t.id)

    def confirmed_tracks(self):
        return [t for t in self.all_tracks() if t.ever_confirmed]


TRACK_FIELDS = ["track_id", "frame_index", "cx", "cy", "vx", "vy", "class", "status"]


def track_rows(tracks, include_coasted: bool = False):
    rows = []
    for t in sorted(tracks, key=lambda t: t.id):
        cls = t.vehicle_class or ""
        for p in t.history:
            if p.matched or include_coasted:
                rows.append((t.id, p.frame_index, p.x, p.y, p.vx, p.vy, cls, p.status))
    rows.sort(key=lambda r: (r[1], r[0]))
    return rows


def write_tracks_csv(path, tracks, include_coasted: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(TRACK_FIELDS)
        for tid, f, x, y, vx, vy, cls, st in track_rows(tracks, include_coasted):
            wr.writerow([tid, f, f"{x:.4f}", f"{y:.4f}", f"{vx:.4f}", f"{vy:.4f}", cls, st])


def read_tracks_csv(path) -> dict:
    """``track_id -> {"class", "points": [(frame, x, y, vx, vy, status)]}``."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            tid = int(row["track_id"])
            rec = out.setdefault(tid, {"class": row["class"] or None, "points": []})
            rec["points"].append((int(row["frame_index"]), float(row["cx"]), float(row["cy"]),
                                  float(row["vx"]), float(row["vy"]), row["status"]))
    return out
