"""Turn proposal score maps into refined detections.

Ranking everywhere uses the key ``(-score, t_start, class_id, t_end)`` so
results never depend on input order.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from seldkit.errors import ShapeError, ValidationError
from seldkit.proposals import (
    DECAY_WEIGHT,
    OverlapMap,
    ProposalGrid,
    SmoothnessMap,
    ground_truth_overlap_map,
    motion_smoothness_map,
    tiou,
)
from seldkit.waveform import FRAME_DURATION, SoundEvent, class_tracks, time_to_frame

D_T = 0.5
D_S = 0.04
NMS_TIOU = 0.5
MAX_EVENTS = 2
CLASS_THRESHOLD = 0.5
ACTIVITY_THRESHOLD = 0.5
REFINE_ITERATIONS = 1


@dataclass(eq=False)
class Detection:
    class_id: int
    t_start: float
    t_end: float
    score: float
    trajectory: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.class_id = int(self.class_id)
        self.t_start, self.t_end, self.score = float(self.t_start), float(self.t_end), float(self.score)
        if not self.t_start < self.t_end:
            raise ValidationError(f"detection needs t_start < t_end, got [{self.t_start}, {self.t_end})")
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"detection score must be in [0, 1], got {self.score}")
        self.trajectory = np.asarray(self.trajectory, dtype=np.float64).reshape(-1, 3)

    @property
    def interval(self) -> tuple[float, float]:
        return (self.t_start, self.t_end)

    def key(self) -> tuple:
        return (self.class_id, self.t_start, self.t_end, self.score)


def rank_key(d) -> tuple:
    return (-d.score, d.t_start, d.class_id, d.t_end)


@dataclass
class InferenceConfig:
    d_t: float = D_T
    d_s: float = D_S
    nms_tiou: float = NMS_TIOU
    max_events: int = MAX_EVENTS
    class_threshold: float = CLASS_THRESHOLD
    refine_iterations: int = REFINE_ITERATIONS

    def validate(self) -> None:
        # d_t above 1 is accepted: it is the documented way to gate everything out
        if not self.d_t > 0:
            raise ValidationError(f"d_t must be > 0, got {self.d_t}")
        if self.d_s < 0:
            raise ValidationError(f"d_s must be >= 0, got {self.d_s}")
        if not 0 < self.nms_tiou < 1:
            raise ValidationError(f"nms_tiou must be in (0, 1), got {self.nms_tiou}")
        if self.max_events < 1:
            raise ValidationError(f"max_events must be >= 1, got {self.max_events}")
        if self.refine_iterations < 1:
            raise ValidationError(f"refine_iterations must be >= 1, got {self.refine_iterations}")


def gate_and_score(overlap: OverlapMap, smooth: SmoothnessMap, class_scores, config: InferenceConfig,
                   doas=None) -> list[Detection]:
    """Emit one raw detection per (valid cell, class) passing both gates.

    ``class_scores`` is (H, W, classes).  ``smooth`` may be class-agnostic
    (H, W) or per class (classes, H, W).  ``doas`` (frames, classes, 3), when
    given, supplies each detection's trajectory.
    """
    grid = overlap.grid
    scores = np.asarray(class_scores, dtype=np.float64)
    if scores.ndim != 3 or scores.shape[:2] != grid.shape:
        raise ShapeError(f"class scores {scores.shape} do not match grid {grid.shape}")
    if smooth.values.shape[-2:] != grid.shape:
        raise ShapeError(f"smoothness map {smooth.values.shape} does not match grid {grid.shape}")
    if smooth.per_class and smooth.values.shape[0] != scores.shape[2]:
        raise ShapeError("per-class smoothness map and class scores disagree on class count")
    dt = grid.frame_duration
    valid = grid.valid
    out = []
    for i, j in zip(*np.nonzero(valid & (overlap.values >= config.d_t))):
        start, end = j * grid.unit, (j + i + 1) * grid.unit
        for c in np.nonzero(scores[i, j] >= config.class_threshold)[0]:
            s_val = smooth.values[c, i, j] if smooth.per_class else smooth.values[i, j]
            if s_val > config.d_s:
                continue
            score = float(np.clip(overlap.values[i, j] * np.exp(-s_val) * scores[i, j, c], 0.0, 1.0))
            traj = np.zeros((0, 3)) if doas is None else np.asarray(doas)[start:end, c]
            out.append(Detection(int(c), start * dt, end * dt, score, traj))
    out.sort(key=rank_key)
    return out


def temporal_nms(dets: Iterable[Detection], nms_tiou: float = NMS_TIOU) -> list[Detection]:
    """Greedy intra-class suppression of detections with tIoU >= ``nms_tiou``."""
    kept: list[Detection] = []
    by_class: dict[int, list[Detection]] = {}
    for d in sorted(dets, key=rank_key):
        survivors = by_class.setdefault(d.class_id, [])
        if all(tiou(d.interval, k.interval) < nms_tiou for k in survivors):
            survivors.append(d)
            kept.append(d)
    return kept


def max_active(dets: Sequence[Detection]) -> int:
    """Largest number of simultaneously active (half-open) detections."""
    events = sorted([(d.t_start, 1) for d in dets] + [(d.t_end, -1) for d in dets])
    best = cur = 0
    for _, delta in events:
        cur += delta
        best = max(best, cur)
    return best


def max_event_clip(dets: Iterable[Detection], max_events: int = MAX_EVENTS) -> list[Detection]:
    """Drop lowest-ranked detections until no instant has more than ``max_events`` active."""
    if max_events < 1:
        raise ValidationError(f"max_events must be >= 1, got {max_events}")
    kept = sorted(dets, key=rank_key)
    while True:
        instants = sorted({d.t_start for d in kept})
        for t in instants:
            active = [d for d in kept if d.t_start <= t < d.t_end]
            if len(active) > max_events:
                kept.remove(max(active, key=rank_key))
                break
        else:
            return kept


def refine(dets: Iterable[Detection], config: InferenceConfig) -> list[Detection]:
    out = list(dets)
    for _ in range(config.refine_iterations):
        out = max_event_clip(temporal_nms(out, config.nms_tiou), config.max_events)
    return out


def run_pipeline(overlap: OverlapMap, smooth: SmoothnessMap, class_scores, config: InferenceConfig | None = None,
                 doas=None) -> list[Detection]:
    config = config or InferenceConfig()
    config.validate()
    return refine(gate_and_score(overlap, smooth, class_scores, config, doas), config)


def framewise_to_events(class_probs, doas, gt_doas=None, activity_threshold: float = ACTIVITY_THRESHOLD,
                        frame_duration: float = FRAME_DURATION) -> list[Detection]:
    """Convert framewise class probabilities and DoAs into scored events.

    Each maximal run of frames with probability >= threshold becomes one
    detection scored ``mean_prob * exp(-mean_doa_distance)``; the distance is
    measured against ``gt_doas`` on frames where the reference is active and
    is 0 without a reference.
    """
    probs = np.asarray(class_probs, dtype=np.float64)
    doas = np.asarray(doas, dtype=np.float64)
    if probs.ndim != 2 or doas.shape != probs.shape + (3,):
        raise ShapeError(f"need probs (frames, classes) and doas (frames, classes, 3), got {probs.shape}, {doas.shape}")
    ref = None if gt_doas is None else np.asarray(gt_doas, dtype=np.float64)
    out = []
    for c in range(probs.shape[1]):
        active = probs[:, c] >= activity_threshold
        edges = np.diff(np.concatenate(([0], active.astype(np.int8), [0])))
        for a, b in zip(np.nonzero(edges == 1)[0], np.nonzero(edges == -1)[0]):
            s_c = float(np.mean(probs[a:b, c]))
            d = 0.0
            if ref is not None:
                r = ref[a:b, c]
                on = np.linalg.norm(r, axis=1) > 0
                if on.any():
                    d = float(np.mean(np.linalg.norm(doas[a:b, c][on] - r[on], axis=1)))
            traj = doas[a:b, c]
            norms = np.linalg.norm(traj, axis=1, keepdims=True)
            traj = np.divide(traj, norms, out=np.zeros_like(traj), where=norms > 0)
            out.append(Detection(c, a * frame_duration, b * frame_duration,
                                 float(np.clip(s_c * np.exp(-d), 0.0, 1.0)), traj))
    out.sort(key=rank_key)
    return out


# --------------------------------------------------------------------------
# Oracle inputs
# --------------------------------------------------------------------------

def oracle_class_scores(grid: ProposalGrid, events: Sequence[SoundEvent], num_classes: int) -> np.ndarray:
    """Multi-hot scores marking the class(es) of each cell's best-overlapping event."""
    out = np.zeros(grid.shape + (num_classes,))
    best = np.zeros(grid.shape)
    dt = grid.frame_duration
    for i, j in grid.valid_cells():
        cell = (j * grid.unit * dt, (j + i) * grid.unit * dt)
        for ev in events:
            t = tiou(cell, (ev.t_start, ev.t_end))
            if t <= 0:
                continue
            if t > best[i - 1, j] + 1e-12:
                best[i - 1, j] = t
                out[i - 1, j] = 0.0
                out[i - 1, j, ev.class_id] = 1.0
            elif abs(t - best[i - 1, j]) <= 1e-12:
                out[i - 1, j, ev.class_id] = 1.0
    return out


def oracle_inputs(grid: ProposalGrid, events: Sequence[SoundEvent], num_classes: int, w: float = DECAY_WEIGHT):
    """Ground-truth overlap map, per-class smoothness, one-hot scores and DoA tracks."""
    doas = class_tracks(events, grid.num_frames, num_classes, grid.frame_duration)
    return (
        ground_truth_overlap_map(grid, events, w),
        motion_smoothness_map(grid, doas),
        oracle_class_scores(grid, events, num_classes),
        doas,
    )


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

def write_detections(stem, dets: Sequence[Detection], frame_duration: float = FRAME_DURATION) -> dict[str, Path]:
    """Write ``<stem>.csv``, ``<stem>_trajectories.csv`` and ``<stem>.json``."""
    stem = Path(stem)
    paths = {
        "csv": stem.with_suffix(".csv"),
        "trajectories": stem.with_name(stem.name + "_trajectories.csv"),
        "json": stem.with_suffix(".json"),
    }
    with open(paths["csv"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class_id", "t_start", "t_end", "score"])
        for d in dets:
            w.writerow([d.class_id, repr(d.t_start), repr(d.t_end), repr(d.score)])
    with open(paths["trajectories"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["detection_index", "frame", "x", "y", "z"])
        for k, d in enumerate(dets):
            first = time_to_frame(d.t_start, frame_duration)
            for n, (x, y, z) in enumerate(d.trajectory):
                w.writerow([k, first + n, repr(float(x)), repr(float(y)), repr(float(z))])
    paths["json"].write_text(json.dumps(detections_to_json(dets, frame_duration), indent=2) + "\n", encoding="utf-8")
    return paths


def detections_to_json(dets: Sequence[Detection], frame_duration: float = FRAME_DURATION) -> dict:
    return {
        "frame_duration": frame_duration,
        "detections": [
            {
                "class_id": d.class_id,
                "t_start": d.t_start,
                "t_end": d.t_end,
                "score": d.score,
                "first_frame": time_to_frame(d.t_start, frame_duration),
                "trajectory": d.trajectory.tolist(),
            }
            for d in dets
        ],
    }


def detections_from_json(doc: dict) -> list[Detection]:
    return [
        Detection(int(d["class_id"]), float(d["t_start"]), float(d["t_end"]), float(d["score"]),
                  np.asarray(d.get("trajectory", []), dtype=np.float64).reshape(-1, 3))
        for d in doc.get("detections", [])
    ]


def read_detections(path) -> list[Detection]:
    """Read detections from the JSON document or the CSV (+ sidecar trajectories)."""
    path = Path(path)
    if path.suffix == ".json":
        return detections_from_json(json.loads(path.read_text(encoding="utf-8")))
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.append((int(row["class_id"]), float(row["t_start"]), float(row["t_end"]), float(row["score"])))
    trajs: dict[int, list] = {k: [] for k in range(len(rows))}
    side = path.with_name(path.stem + "_trajectories.csv")
    if side.exists():
        with open(side, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                trajs[int(row["detection_index"])].append((float(row["x"]), float(row["y"]), float(row["z"])))
    return [Detection(c, s, e, sc, np.array(trajs[k]).reshape(-1, 3)) for k, (c, s, e, sc) in enumerate(rows)]
