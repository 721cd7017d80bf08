"""Deterministic synthetic aerial scenes with exact ground truth.

Vehicles are procedural top-down sprites moved along piecewise
constant-velocity paths in world metres and rendered through the inverse of
a ground-truth homography. A vehicle's ``scale`` is the pyramid scale at which
it appears at template size, so it is drawn magnified by ``1 / scale``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .geometry import Homography, project
from .imaging import Frame, bilinear_sample, quantize, save_frames, write_pgm

ROAD_LEVEL = 90
MARGIN = 2


class ScenarioError(ValueError):
    pass


# -- sprites ----------------------------------------------------------------

def _rect(a, x0, y0, x1, y1, v):
    a[y0:y1, x0:x1] = v


def _sprite(cls: str):
    """(intensity, alpha) arrays for a vehicle facing +x."""
    if cls == "motorcycle":
        v = np.full((3, 8), 60.0)
        _rect(v, 3, 0, 5, 3, 170)
        _rect(v, 0, 1, 1, 2, 30)
    elif cls == "bus":
        v = np.full((10, 34), 200.0)
        _rect(v, 30, 1, 33, 9, 50)
        for x in range(4, 28, 6):
            _rect(v, x, 3, x + 3, 7, 140)
        _rect(v, 0, 0, 34, 1, 165)
        _rect(v, 0, 9, 34, 10, 165)
    elif cls == "pickup":
        v = np.full((8, 18), 150.0)
        _rect(v, 12, 1, 15, 7, 45)
        _rect(v, 9, 1, 12, 7, 185)
        _rect(v, 1, 1, 8, 7, 105)
        _rect(v, 2, 2, 7, 6, 80)
    elif cls == "taxi":
        v = np.full((8, 16), 215.0)
        _rect(v, 10, 1, 13, 7, 50)
        _rect(v, 2, 1, 4, 7, 70)
        _rect(v, 5, 1, 10, 7, 235)
        _rect(v, 6, 3, 9, 5, 30)
    elif cls == "private_car":
        v = np.full((8, 16), 175.0)
        _rect(v, 10, 1, 13, 7, 45)
        _rect(v, 2, 1, 4, 7, 65)
        _rect(v, 4, 1, 10, 7, 205)
    else:
        raise ScenarioError(f"unknown vehicle class {cls!r}")
    alpha = np.ones_like(v)
    for y, x in ((0, 0), (0, -1), (-1, 0), (-1, -1)):
        alpha[y, x] = 0.5
    return v, alpha


def vehicle_template(cls: str, background: float = ROAD_LEVEL) -> np.ndarray:
    """Sprite composited on ``background`` with a fixed margin; the detector template."""
    v, alpha = _sprite(cls)
    h, w = v.shape
    out = np.full((h + 2 * MARGIN, w + 2 * MARGIN), float(background))
    inner = out[MARGIN:MARGIN + h, MARGIN:MARGIN + w]
    out[MARGIN:MARGIN + h, MARGIN:MARGIN + w] = alpha * v + (1 - alpha) * inner
    return quantize(out)


# -- config -----------------------------------------------------------------

@dataclass
class Segment:
    frames: int
    velocity: tuple  # metres / second in world axes


@dataclass
class VehicleSpec:
    id: int
    cls: str
    start: tuple  # world metres
    segments: list
    spawn_frame: int = 0
    scale: float = 1.0
    theta: float = 0.0  # radians

    @property
    def n_frames(self) -> int:
        return sum(s.frames for s in self.segments)


@dataclass
class ScenarioConfig:
    seed: int = 0
    width: int = 320
    height: int = 240
    fps: float = 25.0
    n_frames: int = 50
    background: float = ROAD_LEVEL
    texture: float = 0.0
    markings: list = field(default_factory=list)
    noise: float = 0.0
    homography: Optional[list] = None  # pixel -> world, default 0.1 m/px
    vehicles: list = field(default_factory=list)
    occlusions: list = field(default_factory=list)  # (vehicle id, first frame, last frame)
    zones: list = field(default_factory=list)
    gates: list = field(default_factory=list)
    lanes: dict = field(default_factory=dict)
    v_stop: float = 2.0
    dwell_min: float = 10.0
    d_max: float = 100.0

    def __post_init__(self):
        if self.n_frames < 0 or self.width < 8 or self.height < 8:
            raise ScenarioError("invalid frame geometry")
        if not self.fps > 0:
            raise ScenarioError("fps must be positive")

    @property
    def H(self) -> Homography:
        return Homography(np.array(self.homography if self.homography is not None
                                   else [[0.1, 0, 0], [0, 0.1, 0], [0, 0, 1]], dtype=float))

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        vehicles = []
        for v in d.pop("vehicles", []):
            segs = [Segment(int(s["frames"]), tuple(float(x) for x in s["velocity"])) for s in v["segments"]]
            theta = math.radians(float(v.get("theta_deg", 0.0)))
            vehicles.append(VehicleSpec(int(v["id"]), v["class"], tuple(float(x) for x in v["start"]), segs,
                                        int(v.get("spawn_frame", 0)), float(v.get("scale", 1.0)), theta))
        occ = [(int(o["vehicle"]), int(o["start"]), int(o["end"])) for o in d.pop("occlusions", [])]
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(vehicles=vehicles, occlusions=occ, **d)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k not in ("vehicles", "occlusions")}
        d["vehicles"] = [
            {"id": v.id, "class": v.cls, "start": list(v.start), "spawn_frame": v.spawn_frame,
             "scale": v.scale, "theta_deg": math.degrees(v.theta),
             "segments": [{"frames": s.frames, "velocity": list(s.velocity)} for s in v.segments]}
            for v in self.vehicles]
        d["occlusions"] = [{"vehicle": i, "start": a, "end": b} for i, a, b in self.occlusions]
        return d


def load_scenario(path) -> ScenarioConfig:
    with open(path) as fh:
        return ScenarioConfig.from_dict(yaml.safe_load(fh) or {})


# -- kinematics -------------------------------------------------------------

def world_track(v: VehicleSpec, fps: float):
    """World positions and speeds (km/h) for each frame the vehicle exists.

    The speed at a frame is that of the segment active until the next frame.
    """
    pos = [np.array(v.start, dtype=float)]
    speeds = []
    for seg in v.segments:
        vel = np.array(seg.velocity, dtype=float)
        for _ in range(seg.frames):
            speeds.append(float(np.hypot(*vel)) * 3.6)
            pos.append(pos[-1] + vel / fps)
    frames = list(range(v.spawn_frame, v.spawn_frame + len(speeds)))
    return frames, np.array(pos[:len(speeds)]), np.array(speeds)


# -- rendering --------------------------------------------------------------

def _background(cfg: ScenarioConfig, rng) -> np.ndarray:
    bg = np.full((cfg.height, cfg.width), float(cfg.background))
    if cfg.texture > 0:
        tex = rng.uniform(-cfg.texture, cfg.texture, size=(cfg.height // 4 + 2, cfg.width // 4 + 2))
        ys = (np.arange(cfg.height) + 0.5) / 4 - 0.5
        xs = (np.arange(cfg.width) + 0.5) / 4 - 0.5
        bg += bilinear_sample(tex, xs[None, :], ys[:, None])
    for m in cfg.markings:
        bg[int(m["y0"]):int(m["y1"]), int(m["x0"]):int(m["x1"])] = float(m["value"])
    return bg


def _footprint(cx, cy, w, h, theta):
    c, s = math.cos(theta), math.sin(theta)
    pts = []
    for lx, ly in ((-w / 2, -h / 2), (w / 2, -h / 2), (w / 2, h / 2), (-w / 2, h / 2)):
        pts.append((cx + c * lx - s * ly, cy + s * lx + c * ly))
    return pts


def _render_vehicle(img, sprite, alpha, cx, cy, mag, theta):
    h, w = sprite.shape
    pts = _footprint(cx, cy, w * mag, h * mag, theta)
    x0 = max(0, int(math.floor(min(p[0] for p in pts))) - 1)
    x1 = min(img.shape[1], int(math.ceil(max(p[0] for p in pts))) + 2)
    y0 = max(0, int(math.floor(min(p[1] for p in pts))) - 1)
    y1 = min(img.shape[0], int(math.ceil(max(p[1] for p in pts))) + 2)
    ys, xs = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    c, s = math.cos(theta), math.sin(theta)
    dx, dy = xs - cx, ys - cy
    sx = (c * dx + s * dy) / mag + (w - 1) / 2.0
    sy = (-s * dx + c * dy) / mag + (h - 1) / 2.0
    # pad by one transparent pixel so the silhouette edge blends smoothly
    sp = np.pad(sprite, 1, mode="edge")
    ap = np.pad(alpha, 1)
    a = bilinear_sample(ap, sx + 1, sy + 1, fill=0.0)
    val = bilinear_sample(sp, sx + 1, sy + 1, fill=0.0)
    region = img[y0:y1, x0:x1]
    img[y0:y1, x0:x1] = a * val + (1 - a) * region


@dataclass
class GroundTruth:
    boxes: dict  # frame -> list of box dicts
    tracks: dict  # id -> {"class", "frames", "world", "pixel", "speed_kmh"}
    violations: list
    crossings: list

    def to_json(self) -> str:
        return json.dumps({
            "boxes": {str(k): v for k, v in sorted(self.boxes.items())},
            "tracks": {str(k): v for k, v in sorted(self.tracks.items())},
            "violations": self.violations,
            "crossings": self.crossings,
        }, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        d = json.loads(text)
        return cls({int(k): v for k, v in d["boxes"].items()},
                   {int(k): v for k, v in d["tracks"].items()},
                   d["violations"], d["crossings"])


def generate(cfg: ScenarioConfig):
    """Render all frames and assemble ground truth. Returns (frames, gt)."""
    from . import analytics, violations  # local import: both depend on geometry only

    rng = np.random.default_rng(cfg.seed)
    H = cfg.H
    Hinv = H.inverse()
    bg = _background(cfg, rng)
    occluded = {(vid, f) for vid, a, b in cfg.occlusions for f in range(a, b + 1)}

    per_vehicle = []
    gt_tracks = {}
    for v in cfg.vehicles:
        frames, world, speeds = world_track(v, cfg.fps)
        pixel = np.array([project(Hinv, p) for p in world]) if len(world) else np.zeros((0, 2))
        sprite, alpha = _sprite(v.cls)
        per_vehicle.append((v, frames, pixel, sprite, alpha))
        gt_tracks[v.id] = {
            "class": v.cls, "frames": frames,
            "world": [[round(float(x), 9), round(float(y), 9)] for x, y in world],
            "pixel": [[round(float(x), 9), round(float(y), 9)] for x, y in pixel],
            "speed_kmh": [round(float(s), 9) for s in speeds],
        }

    frames_out = []
    boxes = {}
    for f in range(cfg.n_frames):
        img = bg.copy()
        fboxes = []
        occluders = []
        for v, frames, pixel, sprite, alpha in per_vehicle:
            i = f - v.spawn_frame
            if not 0 <= i < len(frames):
                continue
            cx, cy = pixel[i]
            mag = 1.0 / v.scale
            tw, th = (sprite.shape[1] + 2 * MARGIN) * mag, (sprite.shape[0] + 2 * MARGIN) * mag
            pts = _footprint(cx, cy, sprite.shape[1] * mag, sprite.shape[0] * mag, v.theta)
            if any(not (0 <= x <= cfg.width - 1 and 0 <= y <= cfg.height - 1) for x, y in pts):
                raise ScenarioError(f"vehicle {v.id} leaves the frame bounds at frame {f}")
            _render_vehicle(img, sprite, alpha, cx, cy, mag, v.theta)
            occ = (v.id, f) in occluded
            if occ:
                occluders.append(pts)
            fboxes.append({"id": v.id, "class": v.cls, "cx": round(float(cx), 9), "cy": round(float(cy), 9),
                           "w": tw, "h": th, "theta": v.theta, "occluded": occ})
        for pts in occluders:
            x0 = max(0, int(math.floor(min(p[0] for p in pts))) - 2)
            x1 = min(cfg.width, int(math.ceil(max(p[0] for p in pts))) + 3)
            y0 = max(0, int(math.floor(min(p[1] for p in pts))) - 2)
            y1 = min(cfg.height, int(math.ceil(max(p[1] for p in pts))) + 3)
            img[y0:y1, x0:x1] = bg[y0:y1, x0:x1]
        if cfg.noise > 0:
            img = img + rng.integers(-int(cfg.noise), int(cfg.noise) + 1, size=img.shape)
        frames_out.append(Frame(quantize(img), f, cfg.fps))
        boxes[f] = fboxes

    series = [violations.TrackSeries(vid, t["frames"], np.array(t["world"]).reshape(-1, 2),
                                     np.array(t["speed_kmh"]))
              for vid, t in sorted(gt_tracks.items())]
    events = violations.detect_all(series, violations.zones_from_dicts(cfg.zones, H), cfg.lanes,
                                   fps=cfg.fps, v_stop=cfg.v_stop, dwell_min=cfg.dwell_min, d_max=cfg.d_max)
    gates = analytics.gates_from_dicts(cfg.gates)
    crossings = []
    for vid, t in sorted(gt_tracks.items()):
        for c in analytics.track_crossings(list(zip(t["frames"], map(tuple, t["pixel"]))), gates):
            crossings.append({"track_id": vid, "gate": c.gate_id, "frame_index": c.frame_index,
                              "direction": c.direction})
    gt = GroundTruth(boxes, gt_tracks, [e.to_dict() for e in events], crossings)
    return frames_out, gt


def write_scenario_output(out_dir, cfg: ScenarioConfig, frames, gt: GroundTruth) -> None:
    """PGM frames under ``frames/``, class templates under ``templates/``, plus gt.json."""
    out = Path(out_dir)
    save_frames(out / "frames", frames)
    tdir = out / "templates"
    tdir.mkdir(parents=True, exist_ok=True)
    for cls in sorted({v.cls for v in cfg.vehicles}):
        write_pgm(tdir / f"{cls}.pgm", vehicle_template(cls, cfg.background))
    (out / "gt.json").write_text(gt.to_json())
