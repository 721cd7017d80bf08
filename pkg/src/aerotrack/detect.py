"""Multi-scale, multi-angle NCC template matching with NMS."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .imaging import Frame, bilinear_sample, build_pyramid, level_to_base, read_pgm

UNDEFINED = float("-inf")
FLAT_VAR = 1e-6


def normalize_angle(theta: float) -> float:
    """Map an orientation onto (-pi/2, pi/2] (boxes are symmetric under pi)."""
    t = (theta + math.pi / 2) % math.pi - math.pi / 2
    if t <= -math.pi / 2:
        t += math.pi
    return t


@dataclass(frozen=True)
class Template:
    data: np.ndarray
    class_hint: Optional[str] = None
    name: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 3 or data.shape[1] < 3:
            raise ValueError(f"template must be at least 3x3, got shape {data.shape}")
        if not data.var() > 0:
            raise ValueError(f"template {self.name!r} has zero intensity variance")
        if data.min() < 0 or data.max() > 255:
            raise ValueError("template intensities must lie in [0, 255]")
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def from_pgm(cls, path, class_hint=None) -> "Template":
        return cls(read_pgm(path), class_hint, Path(path).stem)


@dataclass(frozen=True)
class RotatedBox:
    cx: float
    cy: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box sides must be positive, got w={self.w} h={self.h}")
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def aspect(self) -> float:
        return max(self.w, self.h) / min(self.w, self.h)

    @cached_property
    def corners(self) -> np.ndarray:
        """4 x 2 corner array with positive signed area."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        hw, hh = self.w / 2.0, self.h / 2.0
        local = np.array([(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + (self.cx, self.cy)

    @classmethod
    def from_xyxy(cls, x0, y0, x1, y1) -> "RotatedBox":
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0, 0.0)


@dataclass(frozen=True)
class Detection:
    box: RotatedBox
    score: float
    scale_index: int = 0
    angle: float = 0.0
    frame_index: int = 0
    class_hint: Optional[str] = None
    # oriented template footprint when ``box`` is the axis-aligned square
    footprint: Optional[RotatedBox] = None

    def __post_init__(self):
        if not -1.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [-1, 1]")


@dataclass
class MatchConfig:
    levels: int = 4
    scale_factor: float = 0.8
    angles: Sequence[float] = field(default_factory=lambda: [math.radians(a) for a in range(-45, 46, 5)])
    detect_thr: float = 0.7
    nms_iou: float = 0.4
    rotated_boxes: bool = False
    subpixel: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.levels < 1 or not self.angles:
            raise ValueError("empty scale/angle grid")
        if not 0 < self.detect_thr < 1:
            raise ValueError(f"detect_thr must lie in (0, 1), got {self.detect_thr}")
        if not 0 < self.nms_iou < 1:
            raise ValueError(f"nms_iou must lie in (0, 1), got {self.nms_iou}")


# -- templates --------------------------------------------------------------

def rotate_template(t: Template, theta: float) -> Template:
    """Rotate about the template centre with bilinear resampling.

    The canvas grows to hold the rotated footprint; uncovered pixels take
    the template mean.
    """
    if theta == 0:
        return t
    c, s = math.cos(theta), math.sin(theta)
    h, w = t.data.shape
    new_w = int(math.ceil(abs(c) * w + abs(s) * h - 1e-9))
    new_h = int(math.ceil(abs(s) * w + abs(c) * h - 1e-9))
    ys, xs = np.mgrid[0:new_h, 0:new_w].astype(np.float64)
    dx = xs - (new_w - 1) / 2.0
    dy = ys - (new_h - 1) / 2.0
    # inverse map: source = R(-theta) * (p - c') + c
    src_x = c * dx + s * dy + (w - 1) / 2.0
    src_y = -s * dx + c * dy + (h - 1) / 2.0
    out = bilinear_sample(t.data, src_x, src_y, fill=float(t.data.mean()))
    return Template(np.clip(out, 0.0, 255.0), t.class_hint, t.name)


# -- NCC --------------------------------------------------------------------

def _as_array(frame) -> np.ndarray:
    return frame.data if isinstance(frame, Frame) else np.asarray(frame, dtype=np.float64)


def ncc_score(frame, t: Template, x: int, y: int) -> float:
    """NCC of ``t`` placed with its top-left corner at column ``x``, row ``y``.

    Returns ``UNDEFINED`` (-inf) for a zero-variance patch.
    """
    img = _as_array(frame)
    th, tw = t.data.shape
    if x < 0 or y < 0 or y + th > img.shape[0] or x + tw > img.shape[1]:
        raise ValueError(f"template does not fit at ({x}, {y})")
    patch = img[y:y + th, x:x + tw].astype(np.float64)
    pd = patch - patch.mean()
    td = t.data - t.data.mean()
    pss = float((pd * pd).sum())
    if pss <= FLAT_VAR * patch.size:
        return UNDEFINED
    r = float((pd * td).sum()) / math.sqrt(pss * float((td * td).sum()))
    return min(1.0, max(-1.0, r))


def response_map(frame, t: Template, backend=None) -> np.ndarray:
    """Dense NCC over every placement; undefined placements are -inf."""
    img = _as_array(frame)
    if t.height > img.shape[0] or t.width > img.shape[1]:
        raise ValueError("template larger than frame")
    impl = kernels if backend is None else kernels.get_backend(backend)
    return impl.ncc_response(img, t.data)


def _refine(resp, r, c):
    def offset(lo, mid, hi):
        if not (math.isfinite(lo) and math.isfinite(hi)):
            return 0.0
        den = lo - 2.0 * mid + hi
        if den >= 0:
            return 0.0
        return min(0.5, max(-0.5, 0.5 * (lo - hi) / den))

    H, W = resp.shape
    dx = offset(resp[r, c - 1], resp[r, c], resp[r, c + 1]) if 0 < c < W - 1 else 0.0
    dy = offset(resp[r - 1, c], resp[r, c], resp[r + 1, c]) if 0 < r < H - 1 else 0.0
    return dx, dy


def _match_cell(level, scale, scale_index, template, rotated, angle, cfg, frame_index):
    img = level.data
    if rotated.height > img.shape[0] or rotated.width > img.shape[1]:
        return []
    resp = kernels.ncc_response(img, rotated.data)
    rows, cols = kernels.local_peaks(resp, cfg.detect_thr)
    out = []
    for r, c in zip(rows.tolist(), cols.tolist()):
        dx, dy = _refine(resp, r, c) if cfg.subpixel else (0.0, 0.0)
        x = c + dx + (rotated.width - 1) / 2.0
        y = r + dy + (rotated.height - 1) / 2.0
        bx, by = level_to_base(x, y, scale)
        w, h = template.width / scale, template.height / scale
        fp = RotatedBox(bx, by, w, h, angle)
        if cfg.rotated_boxes:
            box, fp = fp, None
        else:
            side = max(w, h)
            box = RotatedBox(bx, by, side, side, 0.0)
        out.append(Detection(box, float(resp[r, c]), scale_index, angle, frame_index, template.class_hint, fp))
    return out


def match(frame: Frame, templates, cfg: Optional[MatchConfig] = None, pyramid=None) -> list:
    """Detect vehicles over the (template x scale x angle) grid, then NMS."""
    cfg = cfg or MatchConfig()
    if isinstance(templates, Template):
        templates = [templates]
    if pyramid is None:
        pyramid = build_pyramid(frame, cfg.levels, cfg.scale_factor)
    cells = []
    for t in templates:
        rotations = [rotate_template(t, a) for a in cfg.angles]
        for k, level in enumerate(pyramid.levels):
            for a, rt in zip(cfg.angles, rotations):
                cells.append((level, pyramid.scale(k), k, t, rt, a, cfg, frame.timestamp_index))
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            results = list(ex.map(lambda args: _match_cell(*args), cells))
    else:
        results = [_match_cell(*args) for args in cells]
    dets = [d for cell in results for d in cell]
    return nms(dets, cfg.nms_iou)


# -- overlap and suppression ------------------------------------------------

def rotated_iou(a: RotatedBox, b: RotatedBox) -> float:
    ra = 0.5 * math.hypot(a.w, a.h)
    rb = 0.5 * math.hypot(b.w, b.h)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > ra + rb:
        return 0.0
    inter = kernels.convex_intersection_area(a.corners, b.corners)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def _rank_key(d: Detection):
    return (-d.score, d.box.cy, d.box.cx)


def nms(dets: Sequence[Detection], iou_thr: float) -> list:
    """Greedy NMS on rotated IoU; result sorted by descending score."""
    if not 0 < iou_thr < 1:
        raise ValueError(f"iou_thr must lie in (0, 1), got {iou_thr}")
    keep = []
    for d in sorted(dets, key=_rank_key):
        if all(rotated_iou(d.box, k.box) <= iou_thr for k in keep):
            keep.append(d)
    return keep


def soft_nms(dets: Sequence[Detection], mode: str = "linear", sigma: float = 0.5,
             final_thr: float = 0.1) -> list:
    """Soft-NMS: attenuate overlapping scores instead of discarding them."""
    if not final_thr > 0:
        raise ValueError("final_thr must be positive")
    if mode not in ("linear", "gaussian"):
        raise ValueError(f"unknown soft-NMS mode {mode!r}")
    pool = list(dets)
    keep = []
    while pool:
        best = min(pool, key=_rank_key)
        pool.remove(best)
        keep.append(best)
        rescored = []
        for d in pool:
            iou = rotated_iou(best.box, d.box)
            if mode == "linear":
                s = d.score * (1.0 - iou)
            else:
                s = d.score * math.exp(-(iou * iou) / sigma)
            if s >= final_thr:
                rescored.append(replace(d, score=s))
        pool = rescored
    return keep


# -- CSV --------------------------------------------------------------------

DETECTION_FIELDS = ["frame_index", "cx", "cy", "w", "h", "theta", "score", "scale_index", "angle"]


def write_detections_csv(path, dets) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(DETECTION_FIELDS + ["class_hint"])
        for d in dets:
            b = d.box
            wr.writerow([d.frame_index, f"{b.cx:.4f}", f"{b.cy:.4f}", f"{b.w:.4f}", f"{b.h:.4f}",
                         f"{b.theta:.6f}", f"{d.score:.6f}", d.scale_index, f"{d.angle:.6f}",
                         d.class_hint or ""])


def read_detections_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            box = RotatedBox(float(row["cx"]), float(row["cy"]), float(row["w"]), float(row["h"]),
                             float(row["theta"]))
            out.append(Detection(box, float(row["score"]), int(row["scale_index"]), float(row["angle"]),
                                 int(row["frame_index"]), row.get("class_hint") or None))
    return out
