"""Ground-plane homography calibration, projection and speed estimation."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np


class DegenerateConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Homography:
    """3x3 pixel -> world (metres) map, scaled so ``h[2, 2] == 1`` when possible."""

    h: np.ndarray
    rms: Optional[float] = None

    def __post_init__(self):
        h = np.array(self.h, dtype=np.float64)
        if h.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {h.shape}")
        if abs(h[2, 2]) > 1e-12:
            h = h / h[2, 2]
        top = np.abs(h).max()
        if not np.isfinite(h).all() or top == 0 or abs(np.linalg.det(h / top)) < 1e-12:
            raise DegenerateConfigurationError("homography is singular")
        object.__setattr__(self, "h", h)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    @classmethod
    def scaling(cls, metres_per_pixel: float) -> "Homography":
        return cls(np.diag([metres_per_pixel, metres_per_pixel, 1.0]))


def project(h, p):
    """Map a pixel point to world coordinates."""
    m = h.h if isinstance(h, Homography) else np.asarray(h, dtype=np.float64)
    x, y = float(p[0]), float(p[1])
    den = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if abs(den) <= 1e-12:
        raise ValueError(f"point ({x}, {y}) maps to infinity")
    return ((m[0, 0] * x + m[0, 1] * y + m[0, 2]) / den,
            (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / den)


def project_many(h, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    m = h.h if isinstance(h, Homography) else np.asarray(h, dtype=np.float64)
    hom = np.column_stack([pts, np.ones(len(pts))]) @ m.T
    if np.any(np.abs(hom[:, 2]) <= 1e-12):
        raise ValueError("point maps to infinity")
    return hom[:, :2] / hom[:, 2:3]


def _normalizer(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _collinear_triples(pts: np.ndarray, tol: float = 1e-9):
    scale = max(1.0, float(np.abs(pts).max()))
    out = []
    for i, j, k in itertools.combinations(range(len(pts)), 3):
        a, b, c = pts[i], pts[j], pts[k]
        cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(cross) <= tol * scale * scale:
            out.append((i, j, k))
    return out


def estimate_homography(pairs) -> Homography:
    """Normalised DLT from (pixel, world) correspondences.

    ``rms`` on the result is the reprojection error in pixels (world points
    mapped back through the inverse).
    """
    pairs = list(pairs)
    if len(pairs) < 4:
        raise DegenerateConfigurationError(f"need at least 4 correspondences, got {len(pairs)}")
    src = np.array([p for p, _ in pairs], dtype=np.float64)
    dst = np.array([q for _, q in pairs], dtype=np.float64)

    bad = _collinear_triples(src)
    if len(pairs) == 4 and bad:
        pts = sorted({i for t in bad for i in t})
        raise DegenerateConfigurationError(
            "collinear pixel points: " + ", ".join(f"#{i} ({src[i][0]:g}, {src[i][1]:g})" for i in pts))

    Ts, Td = _normalizer(src), _normalizer(dst)
    sn = (np.column_stack([src, np.ones(len(src))]) @ Ts.T)[:, :2]
    dn = (np.column_stack([dst, np.ones(len(dst))]) @ Td.T)[:, :2]
    rows = []
    for (x, y), (u, v) in zip(sn, dn):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    A = np.array(rows)
    _, sv, vt = np.linalg.svd(A)
    # a unique solution needs rank 8
    if sv[7] < 1e-10 * sv[0]:
        pts = sorted({i for t in bad for i in t}) or list(range(len(src)))
        raise DegenerateConfigurationError(
            "rank-deficient correspondences: " + ", ".join(f"#{i} ({src[i][0]:g}, {src[i][1]:g})" for i in pts))
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(Td) @ hn @ Ts
    H = Homography(h)
    back = project_many(H.inverse(), dst)
    rms = float(np.sqrt(((back - src) ** 2).sum(axis=1).mean()))
    return Homography(H.h, rms)


def read_calibration(path) -> Homography:
    """Parse ``px py wx wy`` lines (``#`` comments allowed) and fit a homography."""
    pairs = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            vals = line.split()
            if len(vals) != 4:
                raise ValueError(f"{path}:{n}: expected 'px py wx wy'")
            px, py, wx, wy = map(float, vals)
            pairs.append(((px, py), (wx, wy)))
    return estimate_homography(pairs)


def estimate_speed(track_positions, h: Homography, fps: float, window: int = 12):
    """Trailing-window speed in km/h for each position once the window fills.

    Returns a list of ``(frame_index, speed_kmh)``. The window is measured in
    frames of elapsed time, so gaps and subsampled tracks are handled; a track
    shorter than ``window`` gets a single value over its whole span.
    """
    if not fps > 0:
        raise ValueError("fps must be positive")
    if window < 1:
        raise ValueError("window must be >= 1")
    pts = sorted(track_positions, key=lambda fp: fp[0])
    if len(pts) < 2:
        raise ValueError("need at least 2 positions to estimate speed")
    frames = np.array([f for f, _ in pts], dtype=np.int64)
    world = project_many(h, [p for _, p in pts])
    seg = np.concatenate([[0.0], np.hypot(*np.diff(world, axis=0).T)])
    cum = np.cumsum(seg)
    span = int(frames[-1] - frames[0])
    need = min(window, span)
    out = []
    j = 0
    for i in range(len(frames)):
        if frames[i] - frames[0] < need or need == 0:
            continue
        while frames[i] - frames[j] > window:
            j += 1
        dt = (frames[i] - frames[j]) / fps
        if dt <= 0:
            continue
        out.append((int(frames[i]), float((cum[i] - cum[j]) / dt * 3.6)))
    return out
