"""Multichannel audio and label I/O, plus a synthetic scene generator.

Label frames are half-open: frame ``k`` covers ``[k*dt, (k+1)*dt)``.  DoA
trajectories are stored as Cartesian unit vectors.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.io import wavfile

from seldkit.errors import (
    EmptyWaveformError,
    MetadataError,
    SceneSpecError,
    ShapeError,
    UnsupportedEncodingError,
    ValidationError,
    WavFormatError,
)

FRAME_DURATION = 0.1
MAX_DELAY = 8.0
DELAY_TAPS = 64
MAX_OVERLAP = 2

_PCM = 0x0001
_EXTENSIBLE = 0xFFFE
_SCALE = {16: 32768.0, 32: 2147483648.0}
_DTYPE = {16: np.int16, 32: np.int32}


# --------------------------------------------------------------------------
# Types
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MultichannelWaveform:
    """``samples`` has shape (channels, T), float64 in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if samples.ndim != 2:
            raise ShapeError(f"samples must be (channels, T), got shape {samples.shape}")
        if samples.shape[0] < 1:
            raise ShapeError("waveform needs at least one channel")
        if int(self.sample_rate) <= 0:
            raise ValidationError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate


@dataclass(eq=False)
class SoundEvent:
    """One ground-truth sound object: time span, class, and per-frame DoA."""

    t_start: float
    t_end: float
    class_id: int
    trajectory: np.ndarray
    track_id: int = 0

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValidationError(f"event needs t_start < t_end, got [{self.t_start}, {self.t_end})")
        traj = np.asarray(self.trajectory, dtype=np.float64).reshape(-1, 3)
        if len(traj) and np.any(np.abs(np.linalg.norm(traj, axis=1) - 1.0) > 1e-6):
            raise ValidationError("trajectory vectors must have unit norm")
        self.trajectory = traj

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    def check_frames(self, frame_duration: float = FRAME_DURATION) -> None:
        expected = frames_spanned(self.t_start, self.t_end, frame_duration)
        if len(self.trajectory) != expected:
            raise ValidationError(
                f"trajectory has {len(self.trajectory)} frames, expected {expected}"
            )


class LabelEntry(NamedTuple):
    class_id: int
    track_id: int
    azimuth: float
    elevation: float


@dataclass
class FramewiseLabels:
    frame_duration: float = FRAME_DURATION
    frames: dict[int, list[LabelEntry]] = field(default_factory=dict)
    num_frames: int = 0

    @property
    def duration(self) -> float:
        return self.num_frames * self.frame_duration

    def max_overlap(self) -> int:
        return max((len(v) for v in self.frames.values()), default=0)


@dataclass
class TrajectorySpec:
    kind: str = "stationary"
    start: tuple[float, float] = (0.0, 0.0)
    end: tuple[float, float] | None = None


@dataclass
class EventSpec:
    class_id: int
    t_start: float
    t_end: float
    band: tuple[float, float]
    delays: tuple[float, ...]
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    amplitude: float = 0.3
    track_id: int = 0


@dataclass
class SceneSpec:
    duration: float
    events: list[EventSpec] = field(default_factory=list)
    noise_floor: float = 0.01
    sample_rate: int = 24000
    channels: int = 4
    frame_duration: float = FRAME_DURATION
    rng_seed: int = 0

    def validate(self) -> None:
        if not self.duration > 0:
            raise SceneSpecError("duration", "must be positive")
        if self.sample_rate <= 0:
            raise SceneSpecError("sample_rate", "must be positive")
        if self.channels < 1:
            raise SceneSpecError("channels", "must be >= 1")
        if self.noise_floor < 0:
            raise SceneSpecError("noise_floor", "must be >= 0")
        if not self.frame_duration > 0:
            raise SceneSpecError("frame_duration", "must be positive")
        for k, ev in enumerate(self.events):
            where = f"events[{k}]"
            f_lo, f_hi = ev.band
            if not 0 < f_lo < f_hi <= 0.5:
                raise SceneSpecError(f"{where}.band", f"need 0 < f_lo < f_hi <= 0.5, got ({f_lo}, {f_hi})")
            if len(ev.delays) != self.channels:
                raise SceneSpecError(f"{where}.delays", f"expected {self.channels} values, got {len(ev.delays)}")
            if any(abs(d) > MAX_DELAY for d in ev.delays):
                raise SceneSpecError(f"{where}.delays", f"|delay| must be <= {MAX_DELAY} samples")
            if not 0 <= ev.t_start < ev.t_end <= self.duration:
                raise SceneSpecError(f"{where}.t_start", "need 0 <= t_start < t_end <= duration")
            if ev.class_id < 0:
                raise SceneSpecError(f"{where}.class_id", "must be >= 0")
            if ev.trajectory.kind not in ("stationary", "linear-arc"):
                raise SceneSpecError(f"{where}.trajectory.kind", f"unknown generator {ev.trajectory.kind!r}")
        for a in range(len(self.events)):
            for b in range(a + 1, len(self.events)):
                ea, eb = self.events[a], self.events[b]
                same = ea.class_id == eb.class_id and ea.track_id == eb.track_id
                if same and max(ea.t_start, eb.t_start) < min(ea.t_end, eb.t_end):
                    raise SceneSpecError(
                        f"events[{b}]",
                        f"overlaps events[{a}] with the same class and track",
                    )


# --------------------------------------------------------------------------
# Frame and direction helpers
# --------------------------------------------------------------------------

def frames_spanned(t_start: float, t_end: float, frame_duration: float) -> int:
    return int(math.ceil((t_end - t_start) / frame_duration - 1e-9))


def time_to_frame(t: float, frame_duration: float) -> int:
    return int(math.floor(t / frame_duration + 1e-9))


def azel_to_unit(azimuth, elevation) -> np.ndarray:
    """Degrees to Cartesian unit vectors (last axis = xyz)."""
    az = np.radians(np.asarray(azimuth, dtype=np.float64))
    el = np.radians(np.asarray(elevation, dtype=np.float64))
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


def unit_to_azel(vectors) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(vectors, dtype=np.float64)
    az = np.degrees(np.arctan2(v[..., 1], v[..., 0]))
    az = np.where(az >= 180.0, az - 360.0, az)
    el = np.degrees(np.arcsin(np.clip(v[..., 2], -1.0, 1.0)))
    return az, el


# --------------------------------------------------------------------------
# WAV
# --------------------------------------------------------------------------

def _inspect_header(path: Path) -> tuple[int, int]:
    """Return (format tag, bits per sample), raising on malformed headers."""
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
            raise WavFormatError(f"{path}: not a RIFF/WAVE file")
        while True:
            chunk = fh.read(8)
            if len(chunk) < 8:
                raise WavFormatError(f"{path}: missing fmt chunk")
            cid, size = struct.unpack("<4sI", chunk)
            if cid == b"fmt ":
                body = fh.read(size)
                if len(body) < 16:
                    raise WavFormatError(f"{path}: truncated fmt chunk")
                tag, _, _, _, _, bits = struct.unpack("<HHIIHH", body[:16])
                if tag == _EXTENSIBLE:
                    if len(body) < 26:
                        raise WavFormatError(f"{path}: truncated extensible fmt chunk")
                    tag = struct.unpack("<H", body[24:26])[0]
                return tag, bits
            fh.seek(size + (size & 1), 1)


def read_wav(path) -> MultichannelWaveform:
    """Read a 16- or 32-bit integer PCM WAV and scale it to [-1, 1]."""
    path = Path(path)
    tag, bits = _inspect_header(path)
    if tag != _PCM:
        raise UnsupportedEncodingError(f"{path}: format tag 0x{tag:04x} is not linear PCM")
    if bits not in _SCALE:
        raise UnsupportedEncodingError(f"{path}: {bits}-bit PCM unsupported (16 or 32 only)")
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    data = np.atleast_2d(data.T) if data.ndim == 2 else data[np.newaxis, :]
    if data.shape[1] == 0:
        raise EmptyWaveformError(f"{path}: empty waveform")
    return MultichannelWaveform(data.astype(np.float64) / _SCALE[bits], rate)


def quantize(samples, bits: int = 16) -> np.ndarray:
    scale = _SCALE[bits]
    q = np.round(np.asarray(samples, dtype=np.float64) * scale)
    return np.clip(q, -scale, scale - 1).astype(_DTYPE[bits])


def write_wav(path, waveform: MultichannelWaveform, bits: int = 16) -> None:
    if bits not in _SCALE:
        raise ValidationError(f"bits must be 16 or 32, got {bits}")
    wavfile.write(Path(path), waveform.sample_rate, quantize(waveform.samples, bits).T)


# --------------------------------------------------------------------------
# Metadata CSV
# --------------------------------------------------------------------------

def read_metadata(path, frame_duration: float = FRAME_DURATION, num_frames: int | None = None,
                  max_overlap: int | None = None) -> FramewiseLabels:
    """Parse ``frame_index,class_id,track_id,azimuth_deg,elevation_deg`` rows."""
    frames: dict[int, list[LabelEntry]] = {}
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 5:
                raise MetadataError(f"{path}:{lineno}: expected 5 columns, got {len(row)}")
            try:
                frame, cls, track = int(row[0]), int(row[1]), int(row[2])
                az, el = float(row[3]), float(row[4])
            except ValueError as exc:
                raise MetadataError(f"{path}:{lineno}: {exc}") from exc
            if frame < 0 or cls < 0:
                raise MetadataError(f"{path}:{lineno}: negative frame or class index")
            if not -180.0 <= az < 180.0:
                raise MetadataError(f"{path}:{lineno}: azimuth {az} outside [-180, 180)")
            if not -90.0 <= el <= 90.0:
                raise MetadataError(f"{path}:{lineno}: elevation {el} outside [-90, 90]")
            key = (frame, cls, track)
            if key in seen:
                raise MetadataError(f"{path}:{lineno}: duplicate row for frame {frame}, class {cls}, track {track}")
            seen.add(key)
            frames.setdefault(frame, []).append(LabelEntry(cls, track, az, el))
    extent = max(frames) + 1 if frames else 0
    if num_frames is None:
        num_frames = extent
    elif num_frames < extent:
        raise MetadataError(f"{path}: frame {extent - 1} beyond num_frames={num_frames}")
    labels = FramewiseLabels(frame_duration, frames, num_frames)
    if max_overlap is not None and labels.max_overlap() > max_overlap:
        raise MetadataError(f"{path}: more than {max_overlap} simultaneous events in a frame")
    return labels


def write_metadata(path, labels: FramewiseLabels) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for frame in sorted(labels.frames):
            for e in sorted(labels.frames[frame]):
                writer.writerow([frame, e.class_id, e.track_id, repr(float(e.azimuth)), repr(float(e.elevation))])


# --------------------------------------------------------------------------
# Labels <-> events
# --------------------------------------------------------------------------

def labels_to_events(labels: FramewiseLabels) -> list[SoundEvent]:
    """Group maximal runs of frames sharing (class, track) into events."""
    runs: dict[tuple[int, int], list[tuple[int, LabelEntry]]] = {}
    for frame in sorted(labels.frames):
        for entry in labels.frames[frame]:
            runs.setdefault((entry.class_id, entry.track_id), []).append((frame, entry))
    dt = labels.frame_duration
    events = []
    for (cls, track), items in runs.items():
        start = 0
        for k in range(1, len(items) + 1):
            if k == len(items) or items[k][0] != items[k - 1][0] + 1:
                chunk = items[start:k]
                traj = azel_to_unit([e.azimuth for _, e in chunk], [e.elevation for _, e in chunk])
                events.append(SoundEvent(chunk[0][0] * dt, (chunk[-1][0] + 1) * dt, cls, traj, track))
                start = k
    events.sort(key=lambda e: (e.t_start, e.class_id, e.track_id))
    return events


def events_to_labels(events: Sequence[SoundEvent], frame_duration: float = FRAME_DURATION,
                     num_frames: int | None = None) -> FramewiseLabels:
    frames: dict[int, list[LabelEntry]] = {}
    extent = 0
    for ev in events:
        first = time_to_frame(ev.t_start, frame_duration)
        az, el = unit_to_azel(ev.trajectory)
        for k in range(len(ev.trajectory)):
            frames.setdefault(first + k, []).append(LabelEntry(ev.class_id, ev.track_id, float(az[k]), float(el[k])))
        extent = max(extent, first + len(ev.trajectory))
    return FramewiseLabels(frame_duration, frames, extent if num_frames is None else num_frames)


def class_tracks(events: Sequence[SoundEvent], num_frames: int, num_classes: int,
                 frame_duration: float = FRAME_DURATION) -> np.ndarray:
    """Per-frame per-class DoA array (frames, classes, 3); inactive entries are 0."""
    out = np.zeros((num_frames, num_classes, 3))
    for ev in events:
        first = time_to_frame(ev.t_start, frame_duration)
        n = min(len(ev.trajectory), num_frames - first)
        if n > 0:
            out[first:first + n, ev.class_id] = ev.trajectory[:n]
    return out


# --------------------------------------------------------------------------
# Scene synthesis
# --------------------------------------------------------------------------

def _delay_kernel(frac: float) -> np.ndarray:
    """64-tap Blackman-windowed sinc for a fractional delay in [0, 1)."""
    half = DELAY_TAPS // 2
    arg = np.arange(-half + 1, half + 1) - frac
    window = 0.42 + 0.5 * np.cos(np.pi * arg / half) + 0.08 * np.cos(2 * np.pi * arg / half)
    return np.sinc(arg) * window


def fractional_delay(signal: np.ndarray, delay: float) -> np.ndarray:
    """Delay ``signal`` by ``delay`` samples: ``y[m] ~ s[m - delay]``.

    Samples shifted in from outside the input are zero.  Integer delays are
    exact shifts.
    """
    whole = int(math.floor(delay))
    frac = delay - whole
    n = len(signal)
    if frac == 0.0:
        out = np.zeros(n)
        src = np.arange(n) - whole
        ok = (src >= 0) & (src < n)
        out[ok] = signal[src[ok]]
        return out
    half = DELAY_TAPS // 2
    full = np.convolve(signal, _delay_kernel(frac))
    # full[p] = sum_v h[v] s[p - v]; h index v <-> tap v - half + 1
    idx = np.arange(n) - whole + half - 1
    out = np.zeros(n)
    ok = (idx >= 0) & (idx < len(full))
    out[ok] = full[idx[ok]]
    return out


def _trajectory(spec: TrajectorySpec, count: int) -> np.ndarray:
    if spec.kind == "stationary" or spec.end is None or count == 1:
        az = np.full(count, spec.start[0])
        el = np.full(count, spec.start[1])
    else:
        frac = np.arange(count) / (count - 1)
        az = spec.start[0] + frac * (spec.end[0] - spec.start[0])
        el = spec.start[1] + frac * (spec.end[1] - spec.start[1])
    return azel_to_unit(az, el)


def _band_noise(rng: np.random.Generator, n: int, band: tuple[float, float]) -> np.ndarray:
    white = rng.standard_normal(n)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n)
    spectrum[(freqs < band[0]) | (freqs > band[1])] = 0.0
    out = np.fft.irfft(spectrum, n)
    rms = np.sqrt(np.mean(out ** 2))
    return out / rms if rms > 0 else out


def synth_scene(spec: SceneSpec) -> tuple[MultichannelWaveform, list[SoundEvent]]:
    """Render a scene: white noise floor plus delayed band-limited noise events."""
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    sr = spec.sample_rate
    total = int(round(spec.duration * sr))
    x = spec.noise_floor * rng.standard_normal((spec.channels, total))
    margin = int(MAX_DELAY) + DELAY_TAPS
    events = []
    for ev in spec.events:
        start = int(round(ev.t_start * sr))
        end = int(round(ev.t_end * sr))
        n = end - start
        source = ev.amplitude * _band_noise(rng, n + 2 * margin, ev.band)
        for c, delay in enumerate(ev.delays):
            x[c, start:end] += fractional_delay(source, float(delay))[margin:margin + n]
        count = frames_spanned(ev.t_start, ev.t_end, spec.frame_duration)
        events.append(SoundEvent(ev.t_start, ev.t_end, ev.class_id, _trajectory(ev.trajectory, count), ev.track_id))
    np.clip(x, -1.0, 1.0, out=x)
    return MultichannelWaveform(x, sr), events


# --------------------------------------------------------------------------
# Scene spec files
# --------------------------------------------------------------------------

def scene_spec_from_dict(raw: dict) -> SceneSpec:
    """Build a SceneSpec from a parsed JSON object.

    Keys: ``duration`` (required), ``sample_rate``, ``channels``,
    ``noise_floor``, ``frame_duration``, ``seed`` and ``events``; each event
    has ``class_id``, ``t_start``, ``t_end``, ``band``, ``delays`` and
    optionally ``amplitude``, ``track_id`` and ``trajectory`` =
    ``{"kind": "stationary"|"linear-arc", "start": [az, el], "end": [az, el]}``.
    """
    if not isinstance(raw, dict):
        raise SceneSpecError("<root>", "scene spec must be a JSON object")
    if "duration" not in raw:
        raise SceneSpecError("duration", "missing required field")
    events = []
    for k, ev in enumerate(raw.get("events", [])):
        for key in ("class_id", "t_start", "t_end", "band", "delays"):
            if key not in ev:
                raise SceneSpecError(f"events[{k}].{key}", "missing required field")
        if len(ev["band"]) != 2:
            raise SceneSpecError(f"events[{k}].band", "must be [f_lo, f_hi]")
        traj = ev.get("trajectory", {})
        end = traj.get("end")
        events.append(EventSpec(
            class_id=int(ev["class_id"]),
            t_start=float(ev["t_start"]),
            t_end=float(ev["t_end"]),
            band=(float(ev["band"][0]), float(ev["band"][1])),
            delays=tuple(float(d) for d in ev["delays"]),
            trajectory=TrajectorySpec(
                kind=traj.get("kind", "stationary"),
                start=tuple(float(v) for v in traj.get("start", (0.0, 0.0))),
                end=None if end is None else tuple(float(v) for v in end),
            ),
            amplitude=float(ev.get("amplitude", 0.3)),
            track_id=int(ev.get("track_id", 0)),
        ))
    spec = SceneSpec(
        duration=float(raw["duration"]),
        events=events,
        noise_floor=float(raw.get("noise_floor", 0.01)),
        sample_rate=int(raw.get("sample_rate", 24000)),
        channels=int(raw.get("channels", 4)),
        frame_duration=float(raw.get("frame_duration", FRAME_DURATION)),
        rng_seed=int(raw.get("seed", 0)),
    )
    spec.validate()
    return spec


def scene_spec_to_dict(spec: SceneSpec) -> dict:
    raw = asdict(spec)
    raw["seed"] = raw.pop("rng_seed")
    for ev in raw["events"]:
        ev["band"] = list(ev["band"])
        ev["delays"] = list(ev["delays"])
        ev["trajectory"]["start"] = list(ev["trajectory"]["start"])
        if ev["trajectory"]["end"] is not None:
            ev["trajectory"]["end"] = list(ev["trajectory"]["end"])
        else:
            del ev["trajectory"]["end"]
    return raw


def load_scene_spec(path) -> SceneSpec:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SceneSpecError("<file>", f"invalid JSON: {exc}") from exc
    return scene_spec_from_dict(raw)
