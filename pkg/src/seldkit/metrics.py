"""Event-based (AP/AR over tIoU x confidence grids) and segment-based SELD metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from seldkit.errors import DomainError, ShapeError, UndefinedResultError
from seldkit.inference import Detection, rank_key
from seldkit.proposals import tiou
from seldkit.waveform import (
    FramewiseLabels,
    LabelEntry,
    SoundEvent,
    azel_to_unit,
    labels_to_events,
    time_to_frame,
    unit_to_azel,
)

GRID = tuple(round(0.1 + 0.05 * k, 2) for k in range(19))
BUCKETS = ("small", "medium", "large")
SMALL_MAX = 2.0
MEDIUM_MAX = 7.0
ANGULAR_THRESHOLD = 20.0
SEGMENT_LENGTH = 1.0
# tolerance on tIoU thresholds, absorbs rounding in frame -> seconds conversions
TIOU_EPS = 1e-9


@dataclass
class EventEvalConfig:
    tiou_grid: tuple[float, ...] = GRID
    conf_grid: tuple[float, ...] = GRID
    small_max: float = SMALL_MAX
    medium_max: float = MEDIUM_MAX

    def __post_init__(self):
        for name in ("tiou_grid", "conf_grid"):
            g = np.asarray(getattr(self, name))
            if g.ndim != 1 or len(g) == 0 or np.any(np.diff(g) <= 0) or g[0] < 0 or g[-1] > 1:
                raise DomainError(f"{name} must be strictly increasing within [0, 1]")


@dataclass
class Tally:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def precision(self) -> np.ndarray:
        n = self.tp + self.fp
        return np.where(n > 0, self.tp / np.maximum(n, 1), 1.0)

    @property
    def recall(self) -> np.ndarray:
        n = self.tp + self.fn
        return np.where(n > 0, self.tp / np.maximum(n, 1), 1.0)


@dataclass
class ClassResult:
    ap: float
    ar: float
    tally: Tally


@dataclass
class EventEvalResult:
    per_class: dict[int, ClassResult]
    mAP: float
    mAR: float
    buckets: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "mAR": self.mAR,
            "per_class": {str(c): _class_dict(r) for c, r in sorted(self.per_class.items())},
            "buckets": {
                b: {
                    "mAP": v["mAP"],
                    "mAR": v["mAR"],
                    "per_class": {str(c): _class_dict(r) for c, r in sorted(v["per_class"].items())},
                }
                for b, v in self.buckets.items()
            },
        }


def _class_dict(r: ClassResult) -> dict:
    return {"AP": r.ap, "AR": r.ar, "TP": r.tally.tp.tolist(), "FP": r.tally.fp.tolist(), "FN": r.tally.fn.tolist()}


@dataclass
class SegmentEvalResult:
    ER: float
    F: float
    LE_CD: float
    LR_CD: float
    TP: int = 0
    FP: int = 0
    FN: int = 0
    N_gt: int = 0
    threshold: float = ANGULAR_THRESHOLD
    segment_length: float = SEGMENT_LENGTH
    buckets: dict[str, "SegmentEvalResult"] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("ER", "F", "LE_CD", "LR_CD", "TP", "FP", "FN", "N_gt",
                                             "threshold", "segment_length")}
        out["buckets"] = {b: r.to_dict() for b, r in self.buckets.items()}
        return out


# --------------------------------------------------------------------------
# Basic measures
# --------------------------------------------------------------------------

def angular_distance(u, v) -> float:
    """Great-circle angle between two unit vectors, in degrees."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    for name, x in (("u", u), ("v", v)):
        if abs(np.linalg.norm(x) - 1.0) > 1e-6:
            raise DomainError(f"{name} is not a unit vector (norm {np.linalg.norm(x):.6g})")
    return math.degrees(math.acos(float(np.clip(np.dot(u, v), -1.0, 1.0))))


def bucketize(events, small_max: float = SMALL_MAX, medium_max: float = MEDIUM_MAX) -> list[str]:
    """Length bucket per event; upper edges are closed (2 s is small, 7 s medium)."""
    tags = []
    for ev in events:
        d = ev.t_end - ev.t_start
        tags.append("small" if d <= small_max + 1e-9 else "medium" if d <= medium_max + 1e-9 else "large")
    return tags


# --------------------------------------------------------------------------
# Matching and AP/AR
# --------------------------------------------------------------------------

@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int]]


def match_events(preds: Sequence[Detection], gts: Sequence[SoundEvent], tiou_thresh: float) -> MatchResult:
    """Greedy one-to-one matching by descending score; indices refer to the inputs.

    Each prediction takes the unmatched ground truth with the highest tIoU
    (ties: earlier start, then input order) if that tIoU reaches the threshold.
    """
    order = sorted(range(len(preds)), key=lambda k: rank_key(preds[k]))
    taken = [False] * len(gts)
    pairs = []
    for p in order:
        best, best_t = -1, -1.0
        for g, gt in enumerate(gts):
            if taken[g]:
                continue
            t = tiou(preds[p].interval, (gt.t_start, gt.t_end))
            if t > best_t + 1e-12 or (abs(t - best_t) <= 1e-12 and best >= 0 and gt.t_start < gts[best].t_start):
                best, best_t = g, t
        if best >= 0 and best_t > 0 and best_t >= tiou_thresh - TIOU_EPS:
            taken[best] = True
            pairs.append((p, best))
    tp = len(pairs)
    return MatchResult(tp, len(preds) - tp, len(gts) - tp, pairs)


def _tally(preds, gts, config: EventEvalConfig, gt_keep=None, pred_keep=None) -> Tally:
    """TP/FP/FN over the (tiou, conf) grid.

    ``gt_keep`` / ``pred_keep`` restrict counting to a bucket: matches to
    excluded ground truth are ignored, and unmatched predictions only count
    as FP when ``pred_keep`` marks them.
    """
    shape = (len(config.tiou_grid), len(config.conf_grid))
    tp, fp, fn = np.zeros(shape, int), np.zeros(shape, int), np.zeros(shape, int)
    gt_keep = np.ones(len(gts), bool) if gt_keep is None else np.asarray(gt_keep, bool)
    pred_keep = np.ones(len(preds), bool) if pred_keep is None else np.asarray(pred_keep, bool)
    for b, conf in enumerate(config.conf_grid):
        idx = [k for k, p in enumerate(preds) if p.score >= conf - TIOU_EPS]
        sub = [preds[k] for k in idx]
        for a, thresh in enumerate(config.tiou_grid):
            res = match_events(sub, gts, thresh)
            matched_p = {idx[p] for p, _ in res.pairs}
            matched_g = {g for _, g in res.pairs}
            tp[a, b] = sum(1 for _, g in res.pairs if gt_keep[g])
            fn[a, b] = sum(1 for g in range(len(gts)) if gt_keep[g] and g not in matched_g)
            fp[a, b] = sum(1 for k in idx if k not in matched_p and pred_keep[k])
    return Tally(tp, fp, fn)


def average_precision_recall(preds, gts, config: EventEvalConfig | None = None,
                             gt_keep=None, pred_keep=None) -> ClassResult:
    """AP/AR for one class: precision/recall averaged over conf, then over tIoU.

    Precision with no predictions and recall with no ground truth are 1.
    """
    config = config or EventEvalConfig()
    tally = _tally(preds, gts, config, gt_keep, pred_keep)
    ap = float(np.mean(np.mean(tally.precision, axis=1)))
    ar = float(np.mean(np.mean(tally.recall, axis=1)))
    return ClassResult(ap, ar, tally)


def map_mar(per_class: dict[int, ClassResult]) -> tuple[float, float]:
    if not per_class:
        raise UndefinedResultError("no class has ground truth; mAP/mAR undefined")
    aps = [per_class[c].ap for c in sorted(per_class)]
    ars = [per_class[c].ar for c in sorted(per_class)]
    return float(np.mean(aps)), float(np.mean(ars))


def evaluate_events(preds: Sequence[Detection], gts: Sequence[SoundEvent],
                    config: EventEvalConfig | None = None) -> EventEvalResult:
    """Per-class AP/AR, mAP/mAR over classes present in ground truth, plus length buckets."""
    config = config or EventEvalConfig()
    classes = sorted({g.class_id for g in gts})
    if not classes:
        raise UndefinedResultError("no ground-truth events; mAP/mAR undefined")
    per_class = {}
    split = {}
    for c in classes:
        p = [d for d in preds if d.class_id == c]
        g = [e for e in gts if e.class_id == c]
        split[c] = (p, g)
        per_class[c] = average_precision_recall(p, g, config)
    mAP, mAR = map_mar(per_class)
    buckets = {}
    for bucket in BUCKETS:
        bucket_class = {}
        for c in classes:
            p, g = split[c]
            g_tags = bucketize(g, config.small_max, config.medium_max)
            if bucket not in g_tags:
                continue
            p_tags = bucketize(p, config.small_max, config.medium_max)
            bucket_class[c] = average_precision_recall(
                p, g, config, [t == bucket for t in g_tags], [t == bucket for t in p_tags]
            )
        if bucket_class:
            b_ap, b_ar = map_mar(bucket_class)
            buckets[bucket] = {"mAP": b_ap, "mAR": b_ar, "per_class": bucket_class}
    return EventEvalResult(per_class, mAP, mAR, buckets)


# --------------------------------------------------------------------------
# Segment-based metrics
# --------------------------------------------------------------------------

def _segment_doas(labels: FramewiseLabels, frames_per_segment: int, num_segments: int):
    """{(segment, class): [mean unit DoA per track]} from framewise labels."""
    acc: dict[tuple[int, int], dict[int, list]] = {}
    for frame, entries in labels.frames.items():
        seg = frame // frames_per_segment
        if seg >= num_segments:
            continue
        for e in entries:
            acc.setdefault((seg, e.class_id), {}).setdefault(e.track_id, []).append(
                azel_to_unit(e.azimuth, e.elevation)
            )
    out = {}
    for key, tracks in acc.items():
        means = []
        for track in sorted(tracks):
            m = np.mean(tracks[track], axis=0)
            n = np.linalg.norm(m)
            means.append(m / n if n > 0 else np.array([1.0, 0.0, 0.0]))
        out[key] = means
    return out


def _pair_distance(pred: list, ref: list) -> float:
    """Mean angle over the min-cost pairing of predicted and reference tracks."""
    cost = np.array([[angular_distance(p, r) for r in ref] for p in pred])
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def segment_eval(pred: FramewiseLabels, gt: FramewiseLabels, threshold: float = ANGULAR_THRESHOLD,
                 seg_len: float = SEGMENT_LENGTH, with_buckets: bool = True) -> SegmentEvalResult:
    """Location-dependent ER/F at ``threshold`` degrees plus class-dependent LE/LR."""
    if abs(pred.frame_duration - gt.frame_duration) > 1e-12:
        raise ShapeError(f"frame grids differ: {pred.frame_duration} vs {gt.frame_duration}")
    frames_per_segment = int(round(seg_len / gt.frame_duration))
    if frames_per_segment < 1 or abs(frames_per_segment * gt.frame_duration - seg_len) > 1e-9:
        raise ShapeError(f"segment length {seg_len} is not a multiple of the frame duration")
    num_frames = max(gt.num_frames, pred.num_frames)
    num_segments = -(-num_frames // frames_per_segment)
    ref = _segment_doas(gt, frames_per_segment, num_segments)
    hyp = _segment_doas(pred, frames_per_segment, num_segments)

    tp_total = fp_total = fn_total = s_total = d_total = i_total = 0
    distances = []
    for seg in range(num_segments):
        tp = fp = fn = 0
        classes = {c for s, c in ref if s == seg} | {c for s, c in hyp if s == seg}
        for c in classes:
            r, h = ref.get((seg, c)), hyp.get((seg, c))
            if r and h:
                dist = _pair_distance(h, r)
                distances.append(dist)
                if dist <= threshold:
                    tp += 1
                else:
                    fp += 1
                    fn += 1
            elif h:
                fp += 1
            else:
                fn += 1
        tp_total += tp
        fp_total += fp
        fn_total += fn
        s_total += min(fp, fn)
        d_total += max(0, fn - fp)
        i_total += max(0, fp - fn)
    n_gt = len(ref)
    denom = 2 * tp_total + fp_total + fn_total
    result = SegmentEvalResult(
        ER=(s_total + d_total + i_total) / n_gt if n_gt else float(s_total + d_total + i_total),
        F=2 * tp_total / denom if denom else 1.0,
        LE_CD=float(np.mean(distances)) if distances else 180.0,
        LR_CD=len(distances) / n_gt if n_gt else 1.0,
        TP=tp_total, FP=fp_total, FN=fn_total, N_gt=n_gt,
        threshold=threshold, segment_length=seg_len,
    )
    if with_buckets:
        gt_events = labels_to_events(gt)
        pred_events = labels_to_events(pred)
        gt_tags = bucketize(gt_events)
        pred_tags = bucketize(pred_events)
        for bucket in BUCKETS:
            g = [e for e, t in zip(gt_events, gt_tags) if t == bucket]
            if not g:
                continue
            p = [e for e, t in zip(pred_events, pred_tags) if t == bucket]
            result.buckets[bucket] = segment_eval(
                _restrict(pred, p), _restrict(gt, g), threshold, seg_len, with_buckets=False
            )
    return result


def _restrict(labels: FramewiseLabels, events: Sequence[SoundEvent]) -> FramewiseLabels:
    keep = set()
    for ev in events:
        first = time_to_frame(ev.t_start, labels.frame_duration)
        for k in range(len(ev.trajectory)):
            keep.add((first + k, ev.class_id, ev.track_id))
    frames = {}
    for frame, entries in labels.frames.items():
        sel = [e for e in entries if (frame, e.class_id, e.track_id) in keep]
        if sel:
            frames[frame] = sel
    return FramewiseLabels(labels.frame_duration, frames, labels.num_frames)


def detections_to_labels(dets: Sequence[Detection], frame_duration: float, num_frames: int) -> FramewiseLabels:
    """Rasterize detections into framewise labels; each detection gets its own track id."""
    frames: dict[int, list] = {}
    for k, d in enumerate(dets):
        first = time_to_frame(d.t_start, frame_duration)
        count = time_to_frame(d.t_end, frame_duration) - first
        traj = d.trajectory
        if len(traj) == 0:
            continue
        az, el = unit_to_azel(traj)
        for n in range(min(count, len(traj))):
            frame = first + n
            if 0 <= frame < num_frames:
                frames.setdefault(frame, []).append(LabelEntry(d.class_id, k, float(az[n]), float(el[n])))
    return FramewiseLabels(frame_duration, frames, num_frames)
