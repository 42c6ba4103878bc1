import csv
import json

import numpy as np
import pytest

from seldkit import filterbank as fb
from seldkit import inference as inf
from seldkit.cli import main
from seldkit.waveform import labels_to_events, read_metadata

SCENE = {
    "duration": 20.0, "sample_rate": 4000, "noise_floor": 0.01, "seed": 3,
    "events": [
        {"class_id": 0, "t_start": 1.0, "t_end": 2.0, "band": [0.05, 0.1], "delays": [0, 1, 2, 3]},
        {"class_id": 1, "t_start": 1.0, "t_end": 5.0, "band": [0.2, 0.3], "delays": [0, -1, 0, 1],
         "trajectory": {"start": [45, 10]}},
        {"class_id": 2, "t_start": 8.0, "t_end": 18.0, "band": [0.1, 0.15], "delays": [0, 0, 0, 0],
         "trajectory": {"start": [-90, 0]}},
        {"class_id": 0, "t_start": 6.0, "t_end": 9.0, "band": [0.05, 0.1], "delays": [0, 1, 2, 3],
         "trajectory": {"start": [170, -20]}},
    ],
}


@pytest.fixture
def scene(tmp_path):
    spec = tmp_path / "scene.json"
    spec.write_text(json.dumps(SCENE))
    out = tmp_path / "scene"
    assert main(["synth", str(spec), "--out", str(out)]) == 0
    return out


def test_synth_outputs(scene):
    manifest = json.loads((scene / "manifest.json").read_text())
    assert manifest["seed"] == 3
    assert len(manifest["events"]) == 4
    assert manifest["events"][1]["band"] == [0.2, 0.3]
    assert manifest["events"][0]["delays"] == [0, 1, 2, 3]
    assert manifest["spec"]["duration"] == 20.0
    labels = read_metadata(scene / "metadata.csv")
    assert len(labels_to_events(labels)) == 4


def test_synth_deterministic(tmp_path, scene):
    spec = tmp_path / "scene.json"
    other = tmp_path / "again"
    assert main(["synth", str(spec), "--out", str(other)]) == 0
    for name in ("scene.wav", "metadata.csv", "manifest.json"):
        assert (scene / name).read_bytes() == (other / name).read_bytes()


def test_synth_seed_override(tmp_path, scene):
    other = tmp_path / "seeded"
    assert main(["synth", str(tmp_path / "scene.json"), "--out", str(other), "--seed", "9"]) == 0
    assert json.loads((other / "manifest.json").read_text())["seed"] == 9
    assert (scene / "scene.wav").read_bytes() != (other / "scene.wav").read_bytes()


def test_synth_invalid_band(tmp_path, capsys):
    bad = json.loads(json.dumps(SCENE))
    bad["events"][2]["band"] = [0.3, 0.3]
    spec = tmp_path / "bad.json"
    spec.write_text(json.dumps(bad))
    assert main(["synth", str(spec), "--out", str(tmp_path / "x")]) == 2
    assert "events[2].band" in capsys.readouterr().err


def test_usage_errors():
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["detect", "x", "--out", "y", "--d-t", "nope"]) == 2


def test_fit_filters_zero_iterations(tmp_path, scene):
    out = tmp_path / "fit"
    assert main(["fit-filters", str(scene), "--out", str(out), "--iterations", "0", "--stride", "50"]) == 0
    bank = fb.load_checkpoint(out / "filters.ckpt")
    f = bank.filters[0]
    assert (f.sinc.f1, f.sinc.f2) == (0.05, pytest.approx(0.45))
    assert not np.any(f.shifts)
    assert bank.stride == 50
    rows = list(csv.DictReader(open(out / "trace.csv")))
    assert len(rows) == 1 and rows[0]["iteration"] == "0"


def test_fit_filters_config_and_flags(tmp_path, scene):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"iterations": 3, "kernel_length": 101, "window": "none"}))
    out = tmp_path / "fit"
    assert main(["fit-filters", str(scene), "--out", str(out), "--config", str(cfg), "--iterations", "5"]) == 0
    bank = fb.load_checkpoint(out / "filters.ckpt")
    assert (bank.kernel_length, bank.window) == (101, "none")
    assert len(list(csv.DictReader(open(out / "trace.csv")))) == 6


def test_fit_filters_missing_manifest(tmp_path):
    assert main(["fit-filters", str(tmp_path), "--out", str(tmp_path / "o")]) == 2


def test_fit_filters_bad_learning_rate(tmp_path, scene):
    for rate in ("inf", "nan", "0"):
        assert main(["fit-filters", str(scene), "--out", str(tmp_path / "o"), "--learning-rate", rate]) == 2


def test_fit_filters_divergence_exit_code(tmp_path, scene, monkeypatch):
    # PCM input cannot carry NaN, so poison the samples after reading
    from seldkit import cli, waveform
    real = waveform.read_wav

    def poisoned(path):
        wave = real(path)
        samples = wave.samples.copy()
        samples[:, 8000] = np.nan
        return waveform.MultichannelWaveform(samples, wave.sample_rate)

    monkeypatch.setattr(cli.wio, "read_wav", poisoned)
    out = tmp_path / "fit"
    assert main(["fit-filters", str(scene), "--out", str(out), "--iterations", "20"]) == 3
    rows = list(csv.DictReader(open(out / "trace.csv")))
    assert rows and rows[-1]["loss"] == "nan"
    assert not (out / "filters.ckpt").exists()


def _events_from(path):
    return sorted((e.class_id, round(e.t_start, 6), round(e.t_end, 6)) for e in labels_to_events(read_metadata(path)))


def test_detect_oracle_reproduces_ground_truth(tmp_path, scene):
    out = tmp_path / "det"
    assert main(["detect", str(scene), "--out", str(out), "--dump-maps"]) == 0
    dets = inf.read_detections(out / "detections.json")
    got = sorted((d.class_id, round(d.t_start, 6), round(d.t_end, 6)) for d in dets)
    assert got == _events_from(scene / "metadata.csv")
    assert (out / "overlap_map.csv").read_text().startswith("# H=20,W=20,g=10")
    assert (out / "detections_trajectories.csv").exists()


def test_detect_impossible_gate(tmp_path, scene):
    out = tmp_path / "det"
    assert main(["detect", str(scene), "--out", str(out), "--d-t", "1.01"]) == 0
    assert (out / "detections.csv").read_text() == "class_id,t_start,t_end,score\n"


def test_detect_single_event_cap(tmp_path, scene):
    out = tmp_path / "det"
    assert main(["detect", str(scene), "--out", str(out), "--max-events", "1"]) == 0
    dets = inf.read_detections(out / "detections.json")
    assert inf.max_active(dets) == 1


def test_detect_deterministic(tmp_path, scene):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["detect", str(scene), "--out", str(a), "--refine-iterations", "2"]) == 0
    assert main(["detect", str(scene), "--out", str(b), "--refine-iterations", "2"]) == 0
    for name in ("detections.csv", "detections.json", "detections_trajectories.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_detect_files_mode_and_grid_mismatch(tmp_path, scene):
    from seldkit import proposals as pm
    events = labels_to_events(read_metadata(scene / "metadata.csv", 0.1, 200))
    grid = pm.build_grid(200, 20, 20, 10)
    overlap, _, scores, doas = inf.oracle_inputs(grid, events, 3)
    maps = tmp_path / "maps.npz"
    np.savez(maps, overlap=overlap.values, class_scores=scores, doas=doas, unit=10, frame_duration=0.1)
    out = tmp_path / "det"
    assert main(["detect", str(scene), "--maps", "files", "--maps-file", str(maps), "--out", str(out)]) == 0
    assert len(inf.read_detections(out / "detections.json")) >= 1
    np.savez(maps, overlap=overlap.values, class_scores=scores[:10], doas=doas, unit=10)
    assert main(["detect", str(scene), "--maps", "files", "--maps-file", str(maps), "--out", str(out)]) == 2
    assert main(["detect", str(scene), "--maps", "files", "--out", str(out)]) == 2


def test_eval_event_perfect_with_plots(tmp_path, scene):
    det = tmp_path / "det"
    assert main(["detect", str(scene), "--out", str(det)]) == 0
    out = tmp_path / "ev"
    assert main(["eval", str(det / "detections.json"), str(scene / "metadata.csv"), "--out", str(out),
                 "--plot"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["mAP"] == 1.0 and report["mAR"] == 1.0
    assert set(report["buckets"]) == {"small", "medium", "large"}
    rows = list(csv.DictReader(open(out / "summary.csv")))
    assert {r["bucket"] for r in rows} == {"all", "small", "medium", "large"}
    for name in ("ap_vs_tiou.svg", "precision_vs_confidence.svg"):
        assert (out / name).read_text().lstrip().startswith("<?xml")
    # byte-identical rerun, plots included
    again = tmp_path / "ev2"
    assert main(["eval", str(det / "detections.json"), str(scene / "metadata.csv"), "--out", str(again),
                 "--plot"]) == 0
    for name in ("report.json", "summary.csv", "ap_vs_tiou.svg", "precision_vs_confidence.svg"):
        assert (out / name).read_bytes() == (again / name).read_bytes()


def test_eval_segment_empty_detections(tmp_path, scene):
    det = tmp_path / "det"
    assert main(["detect", str(scene), "--out", str(det), "--d-t", "1.01"]) == 0
    out = tmp_path / "seg"
    assert main(["eval", str(det / "detections.csv"), str(scene / "metadata.csv"), "--mode", "segment",
                 "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["ER"] == 1.0 and report["F"] == 0.0


def test_eval_segment_perfect(tmp_path, scene, capsys):
    det = tmp_path / "det"
    assert main(["detect", str(scene), "--out", str(det)]) == 0
    out = tmp_path / "seg"
    assert main(["eval", str(det / "detections.json"), str(scene / "metadata.csv"), "--mode", "segment",
                 "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert (report["ER"], report["F"], report["LR_CD"]) == (0.0, 1.0, 1.0)
    assert report["LE_CD"] == pytest.approx(0.0, abs=1e-6)
    assert "ER_20" in capsys.readouterr().out


def test_eval_zero_ground_truth(tmp_path, scene):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    det = tmp_path / "det"
    assert main(["detect", str(scene), "--out", str(det)]) == 0
    assert main(["eval", str(det / "detections.json"), str(empty), "--out", str(tmp_path / "e")]) == 2
