import json
import subprocess
import sys

import pytest
import yaml

from aerotrack.cli import OUTPUT_ENV, PipelineConfig, PipelineError, main

SCENARIO = {
    "seed": 1, "width": 160, "height": 100, "n_frames": 30, "noise": 2,
    "vehicles": [
        {"id": 1, "class": "taxi", "start": [2.0, 3.0], "segments": [{"frames": 30, "velocity": [10.0, 0.0]}]},
        {"id": 2, "class": "bus", "start": [13.0, 7.0], "segments": [{"frames": 30, "velocity": [-7.5, 0.0]}]},
    ],
    "gates": [{"id": "G", "p0": [80, 0], "p1": [80, 100]}],
}


@pytest.fixture
def project(tmp_path, configs_dir):
    (tmp_path / "scen.yaml").write_text(yaml.safe_dump(SCENARIO))
    cfg = {"input": {"scenario": "scen.yaml"}, "rules": str(configs_dir / "synth_rules.yaml"),
           "detect": {"levels": 1, "angles_deg": [0]}, "output": "out"}
    (tmp_path / "run.yaml").write_text(yaml.safe_dump(cfg))
    return tmp_path


def _tree(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_run_writes_outputs(project, monkeypatch, capsys):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    assert main(["run", "--config", str(project / "run.yaml")]) == 0
    out = project / "out"
    for name in ("detections.csv", "tracks.csv", "speeds.csv", "violations.jsonl", "counts.csv", "od.csv",
                 "heatmap.csv", "congestion.jsonl", "mot_report.json", "manifest.json", "gt.json"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["counts"]["confirmed_tracks"] == 2 and manifest["counts"]["crossings"] == 2
    assert manifest["outputs"]["tracks.csv"] and manifest["kernel_backend"] in ("cython", "python")
    assert json.loads(capsys.readouterr().out)["counts"]["mota"] == 1.0


def test_run_is_deterministic(project, monkeypatch):
    trees = []
    for name in ("a", "b"):
        monkeypatch.setenv(OUTPUT_ENV, str(project / name))
        assert main(["run", "--config", str(project / "run.yaml")]) == 0
        trees.append(_tree(project / name))
    assert trees[0] == trees[1]


def test_missing_template_names_path(project, capsys):
    cfg = yaml.safe_load((project / "run.yaml").read_text())
    cfg["templates"] = [{"path": "nope/taxi.pgm", "class": "taxi"}]
    (project / "bad.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["run", "--config", str(project / "bad.yaml")]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["path"].endswith("nope/taxi.pgm") and "template" in err["message"]


@pytest.mark.parametrize("patch,needle", [
    ({"fps": 0}, "fps"),
    ({"detect": {"scale_factor": 1.5}}, "scale_factor"),
    ({"colour": 1}, "colour"),
    ({"input": {}}, "input"),
    ({"stages": ["detect", "teleport"]}, "teleport"),
])
def test_config_validation(project, patch, needle):
    raw = {**yaml.safe_load((project / "run.yaml").read_text()), **patch}
    with pytest.raises(PipelineError, match=needle):
        PipelineConfig.from_dict(raw, project)


def test_evaluate_subcommand(project, monkeypatch, capsys):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    main(["run", "--config", str(project / "run.yaml")])
    capsys.readouterr()
    assert main(["evaluate", "--config", str(project / "run.yaml"), "--gt", str(project / "out" / "gt.json")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["mota"] == 1.0 and report["id_switches"] == 0
    assert main(["evaluate", "--config", str(project / "run.yaml"), "--gt", str(project / "missing.json")]) == 2


def test_synth_subcommand(project):
    out = project / "scene"
    r = subprocess.run([sys.executable, "-m", "aerotrack.cli", "synth", "--scenario", str(project / "scen.yaml"),
                        "--out", str(out)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert len(list((out / "frames").glob("*.pgm"))) == 30
    assert sorted(p.name for p in (out / "templates").iterdir()) == ["bus.pgm", "taxi.pgm"]
    gt = json.loads((out / "gt.json").read_text())
    assert len(gt["crossings"]) == 2


def test_run_from_frames_directory(project, monkeypatch):
    main(["synth", "--scenario", str(project / "scen.yaml"), "--out", str(project / "scene")])
    cfg = {"input": {"frames": "scene/frames"}, "fps": 25, "gt": "scene/gt.json",
           "templates": [{"path": "scene/templates/taxi.pgm", "class": "taxi"},
                         {"path": "scene/templates/bus.pgm", "class": "bus"}],
           "detect": {"levels": 1, "angles_deg": [0]}, "metres_per_pixel": 0.1, "output": "fr_out"}
    (project / "frames.yaml").write_text(yaml.safe_dump(cfg))
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    assert main(["run", "--config", str(project / "frames.yaml")]) == 0
    report = json.loads((project / "fr_out" / "mot_report.json").read_text())
    assert report["mota"] == 1.0
