"""Command-line entry point: ``seldkit {synth,fit-filters,detect,eval}``.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.
Every command is deterministic given its flags; no output carries a
timestamp.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from seldkit import filterbank as fb
from seldkit import inference as inf
from seldkit import metrics as mt
from seldkit import proposals as pm
from seldkit import waveform as wio
from seldkit.errors import SeldError, TrainingError, ValidationError

log = logging.getLogger("seldkit")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

SCENE_WAV = "scene.wav"
SCENE_CSV = "metadata.csv"
MANIFEST = "manifest.json"


class UsageError(SeldError):
    pass


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _resolve(args, config: dict, name: str, default):
    """Flag value if given, else config-file value, else the module default."""
    value = getattr(args, name, None)
    if value is not None:
        return value
    return config.get(name, config.get(name.replace("_", "-"), default))


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return raw


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _load_manifest(scene_dir: Path) -> dict:
    path = scene_dir / MANIFEST
    if not path.exists():
        raise UsageError(f"missing scene manifest {path}")
    return json.loads(path.read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = wio.load_scene_spec(args.spec)
    if args.seed is not None:
        spec.rng_seed = args.seed
    out = _out_dir(args.out)
    wave, events = wio.synth_scene(spec)
    num_frames = int(round(spec.duration / spec.frame_duration))
    try:
        wio.write_wav(out / SCENE_WAV, wave)
        wio.write_metadata(out / SCENE_CSV, wio.events_to_labels(events, spec.frame_duration, num_frames))
        _dump_json(out / MANIFEST, {
            "spec": wio.scene_spec_to_dict(spec),
            "seed": spec.rng_seed,
            "num_frames": num_frames,
            "files": {"waveform": SCENE_WAV, "metadata": SCENE_CSV},
            "events": [
                {"class_id": e.class_id, "track_id": e.track_id, "t_start": e.t_start, "t_end": e.t_end,
                 "band": list(s.band), "delays": list(s.delays)}
                for e, s in zip(events, spec.events)
            ],
        })
    except OSError as exc:
        raise UsageError(f"cannot write scene to {out}: {exc}") from exc
    log.info("wrote %d-event scene to %s", len(events), out)
    return EXIT_OK


# --------------------------------------------------------------------------
# fit-filters
# --------------------------------------------------------------------------

def _scene_events(manifest: dict) -> list[wio.SoundEvent]:
    dt = manifest["spec"].get("frame_duration", wio.FRAME_DURATION)
    events = []
    for e in manifest["events"]:
        count = wio.frames_spanned(e["t_start"], e["t_end"], dt)
        events.append(wio.SoundEvent(e["t_start"], e["t_end"], e["class_id"],
                                     np.tile([1.0, 0.0, 0.0], (count, 1)), e.get("track_id", 0)))
    return events


def cmd_fit_filters(args) -> int:
    scene = Path(args.scene)
    manifest = _load_manifest(scene)
    config = _load_config(args.config)
    defaults = fb.FitConfig()
    cfg = fb.FitConfig(
        learning_rate=float(_resolve(args, config, "learning_rate", defaults.learning_rate)),
        shift_learning_rate=float(_resolve(args, config, "shift_learning_rate", defaults.shift_learning_rate)),
        iterations=int(_resolve(args, config, "iterations", defaults.iterations)),
        silence_weight=float(_resolve(args, config, "silence_weight", defaults.silence_weight)),
        init_band=tuple(_resolve(args, config, "init_band", defaults.init_band)),
        kernel_length=int(_resolve(args, config, "kernel_length", defaults.kernel_length)),
        window=str(_resolve(args, config, "window", defaults.window)),
        tau_max=float(_resolve(args, config, "tau_max", defaults.tau_max)),
        seed=int(_resolve(args, config, "seed", defaults.seed)),
    )
    stride = int(_resolve(args, config, "stride", fb.STRIDE))
    if cfg.iterations < 0:
        raise UsageError("iterations must be >= 0")
    if cfg.window not in fb.WINDOWS:
        raise UsageError(f"window must be one of {fb.WINDOWS}")
    wave = wio.read_wav(scene / manifest["files"]["waveform"])
    out = _out_dir(args.out)
    status = EXIT_OK
    try:
        result = fb.fit_filters(wave, _scene_events(manifest), cfg)
        bank, trace = result.bank, result.trace
    except TrainingError as exc:
        log.error("%s", exc)
        bank, trace, status = None, exc.trace, EXIT_NUMERIC
    _write_trace(out / "trace.csv", trace)
    if bank is not None:
        bank.stride = stride
        fb.save_checkpoint(out / "filters.ckpt", bank)
    return status


def _write_trace(path: Path, trace: list[dict]) -> None:
    if not trace:
        path.write_text("", encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(trace[0]), lineterminator="\n")
        writer.writeheader()
        for row in trace:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# --------------------------------------------------------------------------
# detect
# --------------------------------------------------------------------------

def _inference_config(args, config: dict) -> inf.InferenceConfig:
    cfg = inf.InferenceConfig(
        d_t=float(_resolve(args, config, "d_t", inf.D_T)),
        d_s=float(_resolve(args, config, "d_s", inf.D_S)),
        nms_tiou=float(_resolve(args, config, "nms_tiou", inf.NMS_TIOU)),
        max_events=int(_resolve(args, config, "max_events", inf.MAX_EVENTS)),
        class_threshold=float(_resolve(args, config, "class_threshold", inf.CLASS_THRESHOLD)),
        refine_iterations=int(_resolve(args, config, "refine_iterations", inf.REFINE_ITERATIONS)),
    )
    cfg.validate()
    return cfg


def cmd_detect(args) -> int:
    scene = Path(args.scene)
    config = _load_config(args.config)
    cfg = _inference_config(args, config)
    unit = int(_resolve(args, config, "grid_unit", pm.GRID_UNIT))
    w = float(_resolve(args, config, "decay_weight", pm.DECAY_WEIGHT))
    if args.maps == "oracle":
        manifest = _load_manifest(scene)
        dt = manifest["spec"].get("frame_duration", wio.FRAME_DURATION)
        num_frames = int(manifest["num_frames"])
        labels = wio.read_metadata(scene / manifest["files"]["metadata"], dt, num_frames)
        events = wio.labels_to_events(labels)
        num_classes = int(_resolve(args, config, "num_classes", max((e.class_id for e in events), default=0) + 1))
        steps = num_frames // unit
        grid = pm.build_grid(num_frames, int(_resolve(args, config, "grid_h", steps)),
                             int(_resolve(args, config, "grid_w", steps)), unit, dt)
        overlap, smooth, scores, doas = inf.oracle_inputs(grid, events, num_classes, w)
    else:
        if args.maps_file is None:
            raise UsageError("--maps files requires --maps-file")
        grid, overlap, smooth, scores, doas = _load_maps(Path(args.maps_file))
    out = _out_dir(args.out)
    dets = inf.run_pipeline(overlap, smooth, scores, cfg, doas)
    inf.write_detections(out / "detections", dets, grid.frame_duration)
    if args.dump_maps:
        pm.save_map_csv(out / "overlap_map.csv", grid, overlap.values)
        agnostic = pm.combine_class_smoothness(smooth, scores)
        pm.save_map_csv(out / "smoothness_map.csv", grid, agnostic.values)
    log.info("%d detections written to %s", len(dets), out)
    return EXIT_OK


def _load_maps(path: Path):
    """Read an ``.npz`` with ``overlap`` (H, W), ``class_scores`` (H, W, K),
    ``doas`` (frames, K, 3), ``unit``, ``frame_duration`` and optionally
    ``smoothness`` ((H, W) or (K, H, W))."""
    try:
        data = np.load(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read maps file {path}: {exc}") from exc
    for key in ("overlap", "class_scores", "doas", "unit"):
        if key not in data:
            raise UsageError(f"maps file {path} lacks '{key}'")
    overlap = np.asarray(data["overlap"], dtype=np.float64)
    doas = np.asarray(data["doas"], dtype=np.float64)
    H, W = overlap.shape
    dt = float(data["frame_duration"]) if "frame_duration" in data else wio.FRAME_DURATION
    grid = pm.ProposalGrid(H, W, int(data["unit"]), doas.shape[0], dt)
    if "smoothness" in data:
        smooth = pm.SmoothnessMap(grid, np.asarray(data["smoothness"], dtype=np.float64))
    else:
        smooth = pm.motion_smoothness_map(grid, doas)
    overlap_values = np.where(grid.valid, overlap, pm.INVALID)
    return grid, pm.OverlapMap(grid, overlap_values), smooth, np.asarray(data["class_scores"]), doas


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

def cmd_eval(args) -> int:
    config = _load_config(args.config)
    dt = float(_resolve(args, config, "frame_duration", wio.FRAME_DURATION))
    dets = inf.read_detections(args.detections)
    num_frames = _resolve(args, config, "num_frames", None)
    gt_labels = wio.read_metadata(args.ground_truth, dt, None if num_frames is None else int(num_frames))
    out = _out_dir(args.out)
    if args.mode == "event":
        gts = wio.labels_to_events(gt_labels)
        if not gts:
            raise UsageError("ground truth has no events; event-based metrics are undefined")
        result = mt.evaluate_events(dets, gts)
        report = result.to_dict()
        _write_event_summary(out / "summary.csv", result)
        print(_event_table(result))
        if args.plot:
            _plot_event_curves(out, result)
    else:
        threshold = float(_resolve(args, config, "threshold", mt.ANGULAR_THRESHOLD))
        seg_len = float(_resolve(args, config, "seg_len", mt.SEGMENT_LENGTH))
        pred = mt.detections_to_labels(dets, dt, gt_labels.num_frames)
        result = mt.segment_eval(pred, gt_labels, threshold, seg_len)
        report = result.to_dict()
        _write_segment_summary(out / "summary.csv", result)
        print(_segment_table(result))
    report["mode"] = args.mode
    _dump_json(out / "report.json", report)
    return EXIT_OK


def _fmt(x) -> str:
    return f"{x:.4f}"


def _event_table(result: mt.EventEvalResult) -> str:
    lines = [f"{'bucket':<8} {'class':>5} {'AP':>8} {'AR':>8}"]
    for c, r in sorted(result.per_class.items()):
        lines.append(f"{'all':<8} {c:>5} {_fmt(r.ap):>8} {_fmt(r.ar):>8}")
    for b, v in result.buckets.items():
        for c, r in sorted(v["per_class"].items()):
            lines.append(f"{b:<8} {c:>5} {_fmt(r.ap):>8} {_fmt(r.ar):>8}")
    lines.append(f"mAP {_fmt(result.mAP)}  mAR {_fmt(result.mAR)}")
    for b, v in result.buckets.items():
        lines.append(f"  {b:<6} mAP {_fmt(v['mAP'])}  mAR {_fmt(v['mAR'])}")
    return "\n".join(lines)


def _segment_table(result: mt.SegmentEvalResult) -> str:
    t = int(result.threshold) if float(result.threshold).is_integer() else result.threshold
    head = f"{'bucket':<8} {'ER_' + str(t):>8} {'F_' + str(t):>8} {'LE_CD':>8} {'LR_CD':>8}"
    rows = [("all", result)] + list(result.buckets.items())
    lines = [head] + [
        f"{b:<8} {_fmt(r.ER):>8} {_fmt(r.F):>8} {r.LE_CD:>8.2f} {_fmt(r.LR_CD):>8}" for b, r in rows
    ]
    return "\n".join(lines)


def _write_event_summary(path: Path, result: mt.EventEvalResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bucket", "class_id", "AP", "AR"])
        for c, r in sorted(result.per_class.items()):
            w.writerow(["all", c, repr(r.ap), repr(r.ar)])
        for b, v in result.buckets.items():
            for c, r in sorted(v["per_class"].items()):
                w.writerow([b, c, repr(r.ap), repr(r.ar)])


def _write_segment_summary(path: Path, result: mt.SegmentEvalResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bucket", "ER", "F", "LE_CD", "LR_CD"])
        for b, r in [("all", result)] + list(result.buckets.items()):
            w.writerow([b, repr(r.ER), repr(r.F), repr(r.LE_CD), repr(r.LR_CD)])


def _plot_event_curves(out: Path, result: mt.EventEvalResult) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "seldkit"
    grid = np.asarray(mt.GRID)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for c, r in sorted(result.per_class.items()):
        ax.plot(grid, r.tally.precision.mean(axis=1), marker="o", ms=3, label=f"class {c}")
    ax.set_xlabel("tIoU threshold")
    ax.set_ylabel("AP")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "ap_vs_tiou.svg", metadata={"Date": None})
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for c, r in sorted(result.per_class.items()):
        ax.plot(grid, r.tally.precision.mean(axis=0), marker="o", ms=3, label=f"class {c}")
    ax.set_xlabel("confidence threshold")
    ax.set_ylabel("precision")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "precision_vs_confidence.svg", metadata={"Date": None})
    plt.close(fig)


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seldkit", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic scene from a JSON scene spec")
    p.add_argument("spec", help="scene spec JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override the spec's seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-filters", parents=[common], help="fit one MaxCorr filter to a synthesized scene")
    p.add_argument("scene", help="directory written by 'synth'")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file of parameter overrides")
    p.add_argument("--seed", type=int, help=f"frame subsampling seed (default {fb.FitConfig.seed})")
    p.add_argument("--learning-rate", dest="learning_rate", type=float,
                   help=f"band step size (default {fb.FitConfig.learning_rate})")
    p.add_argument("--shift-learning-rate", dest="shift_learning_rate", type=float,
                   help=f"shift step size (default {fb.FitConfig.shift_learning_rate})")
    p.add_argument("--iterations", type=int, help=f"default {fb.FitConfig.iterations}")
    p.add_argument("--silence-weight", dest="silence_weight", type=float,
                   help=f"default {fb.FitConfig.silence_weight}")
    p.add_argument("--init-band", dest="init_band", type=float, nargs=2, metavar=("F1", "F2"),
                   help=f"default {fb.FitConfig.init_band}")
    p.add_argument("--kernel-length", dest="kernel_length", type=int, help=f"default {fb.KERNEL_LENGTH}")
    p.add_argument("--stride", type=int, help=f"default {fb.STRIDE}")
    p.add_argument("--window", choices=fb.WINDOWS, help=f"default {fb.WINDOW}")
    p.add_argument("--tau-max", dest="tau_max", type=float, help=f"default {fb.TAU_MAX}")
    p.set_defaults(func=cmd_fit_filters)

    p = sub.add_parser("detect", parents=[common], help="gate, score and refine proposals into detections")
    p.add_argument("scene", help="scene directory (oracle maps read its metadata)")
    p.add_argument("--out", required=True)
    p.add_argument("--maps", choices=("oracle", "files"), default="oracle")
    p.add_argument("--maps-file", dest="maps_file", help="npz with overlap/class_scores/doas for --maps files")
    p.add_argument("--config", help="JSON file of parameter overrides")
    p.add_argument("--seed", type=int, help="accepted for uniformity; detection is deterministic")
    p.add_argument("--d-t", dest="d_t", type=float, help=f"overlap gate (default {inf.D_T})")
    p.add_argument("--d-s", dest="d_s", type=float, help=f"smoothness gate (default {inf.D_S})")
    p.add_argument("--nms-tiou", dest="nms_tiou", type=float, help=f"default {inf.NMS_TIOU}")
    p.add_argument("--max-events", dest="max_events", type=int, help=f"default {inf.MAX_EVENTS}")
    p.add_argument("--class-threshold", dest="class_threshold", type=float, help=f"default {inf.CLASS_THRESHOLD}")
    p.add_argument("--refine-iterations", dest="refine_iterations", type=int,
                   help=f"NMS -> clip passes (default {inf.REFINE_ITERATIONS})")
    p.add_argument("--grid-unit", dest="grid_unit", type=int, help=f"frames per grid step (default {pm.GRID_UNIT})")
    p.add_argument("--grid-h", dest="grid_h", type=int, help="duration steps (default num_frames // unit)")
    p.add_argument("--grid-w", dest="grid_w", type=int, help="start steps (default num_frames // unit)")
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--decay-weight", dest="decay_weight", type=float, help=f"default {pm.DECAY_WEIGHT}")
    p.add_argument("--dump-maps", dest="dump_maps", action="store_true", help="also write map CSV dumps")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", parents=[common], help="score detections against ground-truth metadata")
    p.add_argument("detections", help="detections .json or .csv (with _trajectories.csv sidecar)")
    p.add_argument("ground_truth", help="metadata CSV")
    p.add_argument("--mode", choices=("event", "segment"), default="event")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file of parameter overrides")
    p.add_argument("--seed", type=int, help="accepted for uniformity; evaluation is deterministic")
    p.add_argument("--plot", action="store_true", help="write AP/precision curves as SVG (event mode)")
    p.add_argument("--threshold", type=float, help=f"angular threshold in degrees (default {mt.ANGULAR_THRESHOLD})")
    p.add_argument("--seg-len", dest="seg_len", type=float, help=f"segment length in s (default {mt.SEGMENT_LENGTH})")
    p.add_argument("--num-frames", dest="num_frames", type=int)
    p.add_argument("--frame-duration", dest="frame_duration", type=float, help=f"default {wio.FRAME_DURATION}")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValidationError, UsageError) as exc:
        print(f"seldkit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"seldkit {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
