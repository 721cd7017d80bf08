"""Command line entry point: ``run``, ``evaluate`` and ``synth``.

Errors are reported as a single JSON line on stderr with a nonzero exit code.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy
import yaml

from . import __version__, analytics, classify, detect, geometry, imaging, kernels, synth, track, violations

OUTPUT_ENV = "AEROTRACK_OUTPUT_DIR"
STAGES = ("preprocess", "detect", "classify", "track", "geometry", "violations", "analytics")


class PipelineError(Exception):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


def _range(name, value, lo=None, hi=None, lo_open=False):
    bad = (lo is not None and (value <= lo if lo_open else value < lo)) or (hi is not None and value > hi)
    if bad:
        raise PipelineError(f"{name}={value} outside documented range")
    return value


def _existing(base: Path, p, what: str) -> Path:
    path = (base / p) if not os.path.isabs(p) else Path(p)
    if not path.exists():
        raise PipelineError(f"{what} not found: {path}", str(path))
    return path


@dataclass
class PipelineConfig:
    output: Path
    seed: Optional[int] = None
    frames_dir: Optional[Path] = None
    scenario: Optional[Path] = None
    detections_csv: Optional[Path] = None
    gt: Optional[Path] = None
    fps: float = 25.0
    templates: list = field(default_factory=list)  # (path, class)
    preprocess: dict = field(default_factory=dict)
    match: detect.MatchConfig = field(default_factory=detect.MatchConfig)
    tracker: dict = field(default_factory=dict)
    calibration: Optional[Path] = None
    homography: Optional[list] = None
    metres_per_pixel: Optional[float] = None
    speed_window: int = 12
    speed_source: str = "measured"
    rules: Optional[Path] = None
    zones: Optional[Path] = None
    violations: dict = field(default_factory=dict)
    congestion: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)
    stages: tuple = STAGES
    raw: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise PipelineError(f"config not found: {path}", str(path))
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        return cls.from_dict(raw, path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base: Path = Path(".")) -> "PipelineConfig":
        known = {"seed", "input", "fps", "templates", "preprocess", "detect", "track", "calibration",
                 "homography", "metres_per_pixel", "speed_window", "speed_source", "rules", "zones", "violations",
                 "congestion", "evaluation", "stages", "output", "gt"}
        unknown = set(raw) - known
        if unknown:
            raise PipelineError(f"unknown config keys: {sorted(unknown)}")
        env_out = os.environ.get(OUTPUT_ENV)
        out = Path(env_out) if env_out else Path(os.path.normpath(base / raw.get("output", "out")))
        src = raw.get("input") or {}
        opt = lambda k, what: _existing(base, src[k], what) if src.get(k) else None
        c = cls(output=out, raw=raw)
        c.seed = raw.get("seed")
        c.frames_dir = opt("frames", "frame directory")
        c.scenario = opt("scenario", "scenario file")
        c.detections_csv = opt("detections", "detections file")
        if sum(x is not None for x in (c.frames_dir, c.scenario, c.detections_csv)) != 1:
            raise PipelineError("input needs exactly one of: frames, scenario, detections")
        c.gt = _existing(base, raw["gt"], "ground truth file") if raw.get("gt") else None
        c.fps = _range("fps", float(raw.get("fps", 25.0)), 0, lo_open=True)
        for t in raw.get("templates") or []:
            c.templates.append((_existing(base, t["path"], "template file"), t.get("class")))
        c.preprocess = dict(raw.get("preprocess") or {})
        if c.preprocess.get("denoise") not in (None, "none", "gaussian", "median"):
            raise PipelineError(f"unknown denoise method {c.preprocess['denoise']!r}")
        d = dict(raw.get("detect") or {})
        angles = d.pop("angles_deg", None)
        kw = {}
        if angles is not None:
            if isinstance(angles, dict):
                a0, a1, st = float(angles["start"]), float(angles["stop"]), float(angles["step"])
                n = int(math.floor((a1 - a0) / st + 1e-9)) + 1
                angles = [a0 + i * st for i in range(n)]
            kw["angles"] = [math.radians(float(a)) for a in angles]
        for k in ("levels", "workers"):
            if k in d:
                kw[k] = int(d.pop(k))
        for k in ("scale_factor", "detect_thr", "nms_iou"):
            if k in d:
                kw[k] = float(d.pop(k))
        for k in ("rotated_boxes", "subpixel"):
            if k in d:
                kw[k] = bool(d.pop(k))
        if d:
            raise PipelineError(f"unknown detect keys: {sorted(d)}")
        try:
            c.match = detect.MatchConfig(**kw)
        except ValueError as e:
            raise PipelineError(str(e)) from None
        _range("detect.scale_factor", c.match.scale_factor, 0, 1, lo_open=True)
        c.tracker = dict(raw.get("track") or {})
        bad = set(c.tracker) - {"q", "r_sigma", "gate", "max_misses", "confirm_hits", "init_vel_var"}
        if bad:
            raise PipelineError(f"unknown track keys: {sorted(bad)}")
        c.calibration = _existing(base, raw["calibration"], "calibration file") if raw.get("calibration") else None
        c.homography = raw.get("homography")
        c.metres_per_pixel = raw.get("metres_per_pixel")
        c.speed_window = int(_range("speed_window", int(raw.get("speed_window", 12)), 1))
        c.speed_source = raw.get("speed_source", "measured")
        if c.speed_source not in ("measured", "filtered"):
            raise PipelineError(f"speed_source must be 'measured' or 'filtered', got {c.speed_source!r}")
        c.rules = _existing(base, raw["rules"], "rules file") if raw.get("rules") else None
        c.zones = _existing(base, raw["zones"], "zone file") if raw.get("zones") else None
        c.violations = {"v_stop": 2.0, "dwell_min": 10.0, "d_max": 100.0, **(raw.get("violations") or {})}
        c.congestion = {"eps": 5.0, "min_pts": 4, "persist_min": 30.0, **(raw.get("congestion") or {})}
        _range("congestion.eps", float(c.congestion["eps"]), 0, lo_open=True)
        _range("congestion.min_pts", int(c.congestion["min_pts"]), 2)
        c.evaluation = {"metric": "distance", "match_thr": 10.0, **(raw.get("evaluation") or {})}
        stages = tuple(raw.get("stages") or STAGES)
        unknown = set(stages) - set(STAGES)
        if unknown:
            raise PipelineError(f"unknown stages: {sorted(unknown)}")
        c.stages = stages
        return c

    def digest(self) -> str:
        text = json.dumps(self.raw, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()


# -- stages -----------------------------------------------------------------

def _preprocess(frames, p: dict):
    method = p.get("denoise")
    out = []
    for fr in frames:
        if method in ("gaussian", "median"):
            fr = imaging.denoise(fr, method, sigma=float(p.get("sigma", 1.0)), window=int(p.get("window", 3)))
        if p.get("clahe"):
            g = int(p.get("tile_grid", 8))
            fr = imaging.clahe(fr, (g, g), float(p.get("clip_limit", 2.0)))
        out.append(fr)
    return out


def _homography(cfg: PipelineConfig, scen) -> geometry.Homography:
    if cfg.calibration is not None:
        return geometry.read_calibration(cfg.calibration)
    if cfg.homography is not None:
        return geometry.Homography(np.asarray(cfg.homography, dtype=float))
    if cfg.metres_per_pixel is not None:
        return geometry.Homography.scaling(float(cfg.metres_per_pixel))
    if scen is not None:
        return scen.H
    raise PipelineError("no calibration: set calibration, homography or metres_per_pixel")


def _geofence(cfg: PipelineConfig, scen):
    if cfg.zones is not None:
        with open(cfg.zones) as fh:
            z = yaml.safe_load(fh) or {}
        return z.get("zones", []), z.get("gates", []), z.get("lanes", {})
    if scen is not None:
        return scen.zones, scen.gates, scen.lanes
    return [], [], {}


def track_series(tracks, h: geometry.Homography, fps: float, window: int, source: str = "measured"):
    """Violation-rule input from tracker tracks: world positions and km/h speeds.

    ``source`` picks the detection centres (``measured``) or the Kalman
    posterior (``filtered``) at each matched frame.
    """
    out = []
    speeds_rows = []
    for t in tracks:
        pts = t.matched_points()
        frames = [p.frame_index for p in pts]
        xy = [(p.zx, p.zy) if source == "measured" else (p.x, p.y) for p in pts]
        sp = np.full(len(pts), np.nan)
        if len(pts) >= 2:
            est = dict(geometry.estimate_speed(list(zip(frames, xy)), h, fps, window))
            for i, f in enumerate(frames):
                if f in est:
                    sp[i] = est[f]
                    speeds_rows.append((t.id, f, est[f]))
        world = geometry.project_many(h, xy) if xy else np.zeros((0, 2))
        out.append(violations.TrackSeries(t.id, frames, world, sp))
    speeds_rows.sort(key=lambda r: (r[1], r[0]))
    return out, speeds_rows


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(cfg: PipelineConfig) -> dict:
    """Execute the enabled stages and write all outputs; returns the manifest."""
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    stages = set(cfg.stages)
    counts = {}

    scen = gt = None
    frames = []
    if cfg.scenario is not None:
        try:
            scen = synth.load_scenario(cfg.scenario)
        except (KeyError, TypeError) as e:
            raise PipelineError(f"invalid scenario: {e}", str(cfg.scenario)) from None
        if cfg.seed is not None:
            scen.seed = int(cfg.seed)
        frames, gt = synth.generate(scen)
        (out / "gt.json").write_text(gt.to_json())
    elif cfg.frames_dir is not None:
        frames = imaging.load_frames(cfg.frames_dir, cfg.fps)
    if cfg.gt is not None:
        gt = synth.GroundTruth.from_json(cfg.gt.read_text())
    fps = scen.fps if scen is not None else cfg.fps
    counts["frames"] = len(frames)

    if "preprocess" in stages and frames:
        frames = _preprocess(frames, cfg.preprocess)

    templates = [detect.Template.from_pgm(p, cls) for p, cls in cfg.templates]
    if not templates and scen is not None:
        templates = [detect.Template(synth.vehicle_template(c, scen.background), c, c)
                     for c in sorted({v.cls for v in scen.vehicles})]

    # detection
    if cfg.detections_csv is not None:
        dets_by_frame = {}
        for d in detect.read_detections_csv(cfg.detections_csv):
            dets_by_frame.setdefault(d.frame_index, []).append(d)
        frame_ids = sorted(dets_by_frame)
        frame_ids = list(range(frame_ids[0], frame_ids[-1] + 1)) if frame_ids else []
    elif "detect" in stages:
        if not templates:
            raise PipelineError("detection needs at least one template")
        dets_by_frame = {fr.timestamp_index: detect.match(fr, templates, cfg.match) for fr in frames}
        frame_ids = [fr.timestamp_index for fr in frames]
    else:
        dets_by_frame, frame_ids = {}, [fr.timestamp_index for fr in frames]
    all_dets = [d for f in frame_ids for d in dets_by_frame.get(f, [])]
    detect.write_detections_csv(out / "detections.csv", all_dets)
    counts["detections"] = len(all_dets)

    rules = classify.ClassRules.load(cfg.rules) if cfg.rules else classify.default_rules()
    labels = {}
    if "classify" in stages:
        for f in frame_ids:
            labels[f] = [classify.classify(d, rules=rules).value for d in dets_by_frame.get(f, [])]

    confirmed = []
    if "track" in stages:
        tcfg = dict(cfg.tracker)
        if tcfg.get("gate") is None:
            widths = [t.width for t in templates] or [20]
            tcfg["gate"] = 3.0 * max(widths)
        tracker = track.Tracker(track.TrackerConfig(**tcfg))
        for f in frame_ids:
            tracker.step(dets_by_frame.get(f, []), f, labels.get(f))
        confirmed = tracker.confirmed_tracks()
    track.write_tracks_csv(out / "tracks.csv", confirmed)
    counts["confirmed_tracks"] = len(confirmed)

    series, speed_rows = [], []
    H = None
    if "geometry" in stages and confirmed:
        H = _homography(cfg, scen)
        series, speed_rows = track_series(confirmed, H, fps, cfg.speed_window, cfg.speed_source)
    _write_csv(out / "speeds.csv", ["track_id", "frame_index", "speed_kmh"],
               [(tid, f, f"{v:.4f}") for tid, f, v in speed_rows])

    zone_dicts, gate_dicts, lanes = _geofence(cfg, scen)
    events = []
    if "violations" in stages and series:
        zones = violations.zones_from_dicts(zone_dicts, H)
        v = cfg.violations
        events = violations.detect_all(series, zones, lanes, fps=fps, v_stop=float(v["v_stop"]),
                                       dwell_min=float(v["dwell_min"]), d_max=float(v["d_max"]))
    violations.write_events_jsonl(out / "violations.jsonl", events)
    counts["violations"] = len(events)

    if "analytics" in stages:
        gates = analytics.gates_from_dicts(gate_dicts)
        paths = analytics.paths_from_tracks(confirmed)
        table = analytics.count_crossings(paths, gates)
        table.write_csv(out / "counts.csv")
        od = analytics.od_matrix(paths, gates)
        od.write_csv(out / "od.csv")
        analytics.write_grid_csv(out / "heatmap.csv", table.rows, table.cols, analytics.heatmap_grid(table))
        if len(table.rows) >= 2:
            corr = analytics.class_correlation(table)
            analytics.write_grid_csv(out / "correlation.csv", table.cols, table.cols, corr, label="class")
        counts["crossings"] = table.total
        positions = {}
        for s in series:
            for f, p in zip(s.frames, s.world):
                positions.setdefault(f, []).append(p)
        cg = cfg.congestion
        regions = analytics.congestion_clusters({f: np.array(v) for f, v in positions.items()},
                                                float(cg["eps"]), int(cg["min_pts"]),
                                                float(cg["persist_min"]), fps)
        with open(out / "congestion.jsonl", "w") as fh:
            for r in regions:
                fh.write(json.dumps(r.to_dict(fps), sort_keys=True) + "\n")
        counts["congestion_regions"] = len(regions)

    if gt is not None and "track" in stages:
        report = evaluate_tracks(gt, out / "tracks.csv", cfg.evaluation)
        report.write_json(out / "mot_report.json")
        counts["mota"] = round(report.mota, 12)

    manifest = {
        "config_sha256": cfg.digest(),
        "config": cfg.raw,
        "seed": scen.seed if scen is not None else cfg.seed,
        "versions": {"aerotrack": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "kernel_backend": kernels.BACKEND,
        "counts": counts,
    }
    manifest["outputs"] = {p.name: _sha(p) for p in sorted(out.iterdir())
                           if p.is_file() and p.name != "manifest.json"}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1, default=str)
        fh.write("\n")
    return manifest


def evaluate_tracks(gt: synth.GroundTruth, tracks_csv: Path, evaluation: dict) -> analytics.MotReport:
    """Score an exported track CSV against ground truth (occluded GT boxes ignored)."""
    gt_frames = analytics.gt_boxes_by_frame(gt.boxes)
    pred = {}
    for tid, rec in track.read_tracks_csv(tracks_csv).items():
        for f, x, y, *_ in rec["points"]:
            pred.setdefault(f, []).append((tid, detect.RotatedBox(x, y, 1.0, 1.0, 0.0)))
    if gt.boxes and pred:
        lo, hi = min(gt.boxes), max(gt.boxes)
        outside = [f for f in pred if not lo <= f <= hi]
        if outside:
            raise PipelineError(f"prediction frames {min(outside)}..{max(outside)} outside GT range {lo}..{hi}")
    metric = evaluation.get("metric", "distance")
    thr = float(evaluation.get("match_thr", 10.0))
    if metric == "iou":
        raise PipelineError("track CSVs carry centres only; use the distance metric")
    return analytics.evaluate_mot(gt_frames, pred, thr, metric)


# -- command line -----------------------------------------------------------

def _cmd_run(args):
    cfg = PipelineConfig.load(args.config)
    manifest = run(cfg)
    print(json.dumps({"output": str(cfg.output), "counts": manifest["counts"]}, sort_keys=True))


def _cmd_evaluate(args):
    cfg = PipelineConfig.load(args.config)
    gt_path = Path(args.gt)
    if not gt_path.exists():
        raise PipelineError(f"ground truth not found: {gt_path}", str(gt_path))
    tracks_csv = cfg.output / "tracks.csv"
    if not tracks_csv.exists():
        raise PipelineError(f"pipeline output not found: {tracks_csv}", str(tracks_csv))
    report = evaluate_tracks(synth.GroundTruth.from_json(gt_path.read_text()), tracks_csv, cfg.evaluation)
    report.write_json(cfg.output / "mot_report.json")
    print(json.dumps(report.to_dict(), sort_keys=True))


def _cmd_synth(args):
    path = Path(args.scenario)
    if not path.exists():
        raise PipelineError(f"scenario file not found: {path}", str(path))
    scen = synth.load_scenario(path)
    if args.seed is not None:
        scen.seed = args.seed
    frames, gt = synth.generate(scen)
    synth.write_scenario_output(args.out, scen, frames, gt)
    print(json.dumps({"out": args.out, "frames": len(frames), "vehicles": len(scen.vehicles)}, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aerotrack", description="Aerial vehicle detection, tracking and analytics.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the pipeline described by a config file")
    r.add_argument("--config", required=True)
    r.set_defaults(func=_cmd_run)
    e = sub.add_parser("evaluate", help="score pipeline tracks against ground truth")
    e.add_argument("--config", required=True)
    e.add_argument("--gt", required=True)
    e.set_defaults(func=_cmd_evaluate)
    s = sub.add_parser("synth", help="render a synthetic scenario to PGM frames plus gt.json")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=_cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (PipelineError, OSError, ValueError, KeyError, yaml.YAMLError, np.linalg.LinAlgError) as e:
        err = {"error": type(e).__name__, "message": str(e)}
        path = getattr(e, "path", None) or getattr(e, "filename", None)
        if path:
            err["path"] = str(path)
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
