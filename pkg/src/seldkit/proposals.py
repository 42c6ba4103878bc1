"""Dense proposal grid and its score maps.

Cell ``(i, j)`` (duration ``i`` in ``1..H``, start ``j`` in ``0..W-1``) is the
frame interval ``[j*g, (j+i)*g)``.  Arrays are indexed ``[i - 1, j]``; cells
running past the recording are invalid and hold ``INVALID``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from seldkit import _backend
from seldkit.errors import DomainError, ShapeError, ValidationError
from seldkit.waveform import FRAME_DURATION, SoundEvent

INVALID = -1.0
GRID_UNIT = 10
GRID_SIZE = 60
DECAY_WEIGHT = 2.0

POSITIVE, NEGATIVE_KEPT, NEGATIVE_DROPPED = 1, 0, -1


@dataclass(frozen=True)
class ProposalGrid:
    H: int
    W: int
    unit: int
    num_frames: int
    frame_duration: float = FRAME_DURATION

    @property
    def shape(self) -> tuple[int, int]:
        return (self.H, self.W)

    @property
    def valid(self) -> np.ndarray:
        i = np.arange(1, self.H + 1)[:, np.newaxis]
        j = np.arange(self.W)[np.newaxis, :]
        return (j + i) * self.unit <= self.num_frames

    @property
    def num_valid(self) -> int:
        return int(self.valid.sum())

    def is_valid(self, i: int, j: int) -> bool:
        return 1 <= i <= self.H and 0 <= j < self.W and (j + i) * self.unit <= self.num_frames

    def cell_to_interval(self, i: int, j: int) -> tuple[int, int]:
        """Frame interval ``[start, end)`` of cell (i, j)."""
        if not self.is_valid(i, j):
            raise DomainError(f"cell ({i}, {j}) is not valid on this grid")
        return j * self.unit, (j + i) * self.unit

    def interval_to_cell(self, start: int, end: int) -> tuple[int, int]:
        if start % self.unit or end % self.unit or end <= start:
            raise DomainError(f"interval [{start}, {end}) is not aligned to unit {self.unit}")
        i, j = (end - start) // self.unit, start // self.unit
        if not self.is_valid(i, j):
            raise DomainError(f"interval [{start}, {end}) has no cell on this grid")
        return i, j

    def cell_seconds(self, i: int, j: int) -> tuple[float, float]:
        start, end = self.cell_to_interval(i, j)
        return start * self.frame_duration, end * self.frame_duration

    def cell_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Start and end frame of every cell as (H, W) arrays (invalid cells included)."""
        i = np.arange(1, self.H + 1)[:, np.newaxis]
        j = np.arange(self.W)[np.newaxis, :]
        start = np.broadcast_to(j * self.unit, (self.H, self.W))
        return start, start + i * self.unit

    def valid_cells(self):
        for i in range(1, self.H + 1):
            for j in range(self.W):
                if (j + i) * self.unit <= self.num_frames:
                    yield i, j


@dataclass
class OverlapMap:
    grid: ProposalGrid
    values: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.grid.valid


@dataclass
class SmoothnessMap:
    """Max squared step displacement per cell; ``values`` is (H, W) or (classes, H, W)."""

    grid: ProposalGrid
    values: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.grid.valid

    @property
    def per_class(self) -> bool:
        return self.values.ndim == 3


@dataclass
class ProposalFeatures:
    grid: ProposalGrid
    cells: list[tuple[int, int]]
    features: np.ndarray

    def __getitem__(self, cell):
        return self.features[self.cells.index(tuple(cell))]


@dataclass
class BalanceMask:
    grid: ProposalGrid
    labels: np.ndarray
    t_d: float
    p_d: float
    seed: int

    @property
    def positives(self) -> int:
        return int(np.sum(self.labels == POSITIVE))

    @property
    def kept_negatives(self) -> int:
        return int(np.sum(self.labels == NEGATIVE_KEPT))

    @property
    def ratio(self) -> float:
        """Achieved positive : kept-negative ratio (inf with no kept negatives)."""
        kept = self.kept_negatives
        return self.positives / kept if kept else math.inf


def build_grid(num_frames: int, H: int = GRID_SIZE, W: int = GRID_SIZE, unit: int = GRID_UNIT,
               frame_duration: float = FRAME_DURATION) -> ProposalGrid:
    if H < 1 or W < 1 or unit < 1:
        raise ShapeError(f"H, W and unit must be >= 1, got H={H}, W={W}, unit={unit}")
    if H * unit > num_frames:
        raise ShapeError(f"longest duration H*unit={H * unit} exceeds num_frames={num_frames}")
    return ProposalGrid(H, W, unit, num_frames, frame_duration)


def tiou(a: Sequence[float], b: Sequence[float]) -> float:
    """Temporal IoU of two ``(start, end)`` intervals."""
    s1, e1 = a
    s2, e2 = b
    if not (s1 < e1 and s2 < e2):
        raise DomainError(f"intervals must have start < end, got {tuple(a)} and {tuple(b)}")
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    return inter / (max(e1, e2) - min(s1, s2))


def tiou_bs(t, w: float = DECAY_WEIGHT):
    """Boundary-sensitive tIoU: ``t * exp(-w * (1 - t))``."""
    t = np.asarray(t, dtype=np.float64)
    out = t * np.exp(-w * (1.0 - t))
    return float(out) if out.ndim == 0 else out


def _tiou_cells(start, end, s, e):
    inter = np.maximum(0.0, np.minimum(end, e) - np.maximum(start, s))
    return inter / (np.maximum(end, e) - np.minimum(start, s))


def ground_truth_overlap_map(grid: ProposalGrid, events: Sequence[SoundEvent],
                             w: float = DECAY_WEIGHT) -> OverlapMap:
    """Class-agnostic target: max over events of ``tiou_bs(tiou(cell, event))``."""
    start, end = grid.cell_bounds()
    start = start * grid.frame_duration
    end = end * grid.frame_duration
    values = np.zeros(grid.shape)
    for ev in events:
        values = np.maximum(values, tiou_bs(_tiou_cells(start, end, ev.t_start, ev.t_end), w))
    values[~grid.valid] = INVALID
    return OverlapMap(grid, values)


def step_displacements(locations) -> np.ndarray:
    """Squared Euclidean distance between consecutive frames, shape (frames-1, ...)."""
    loc = np.asarray(locations, dtype=np.float64)
    return np.sum((loc[1:] - loc[:-1]) ** 2, axis=-1)


def motion_smoothness_map(grid: ProposalGrid, locations) -> SmoothnessMap:
    """Per-cell max squared step displacement of a framewise trajectory.

    ``locations`` is (frames, 3) for one track or (frames, classes, 3) for
    per-class tracks; the latter yields a (classes, H, W) map.
    """
    loc = np.asarray(locations, dtype=np.float64)
    if loc.shape[0] < grid.num_frames:
        raise ShapeError(f"locations cover {loc.shape[0]} frames, grid needs {grid.num_frames}")
    steps = step_displacements(loc[:grid.num_frames])
    if loc.ndim == 2:
        values = _backend.interval_max(np.ascontiguousarray(steps), grid.H, grid.W, grid.unit, grid.num_frames)
    elif loc.ndim == 3:
        values = np.stack([
            _backend.interval_max(np.ascontiguousarray(steps[:, c]), grid.H, grid.W, grid.unit, grid.num_frames)
            for c in range(loc.shape[1])
        ])
    else:
        raise ShapeError(f"locations must be (frames, 3) or (frames, classes, 3), got {loc.shape}")
    return SmoothnessMap(grid, values)


def combine_class_smoothness(smooth: SmoothnessMap, class_scores: np.ndarray) -> SmoothnessMap:
    """Class-agnostic view: per cell, min over classes with positive score.

    Cells with no positive class fall back to the min over all classes.
    """
    if not smooth.per_class:
        return smooth
    per_class = np.moveaxis(smooth.values, 0, -1)
    active = np.asarray(class_scores) > 0
    masked = np.where(active, per_class, np.inf)
    values = np.where(active.any(axis=-1), masked.min(axis=-1), per_class.min(axis=-1))
    values[~smooth.grid.valid] = INVALID
    return SmoothnessMap(smooth.grid, values)


def proposal_features(framewise, grid: ProposalGrid) -> ProposalFeatures:
    """Mean of per-step features over each valid cell's steps ``[j, j+i)``.

    ``framewise`` holds one feature row per grid step (label frames already
    pooled by ``grid.unit``).
    """
    feats = np.asarray(framewise, dtype=np.float64)
    if feats.ndim != 2:
        raise ShapeError(f"features must be (steps, dim), got shape {feats.shape}")
    steps = grid.num_frames // grid.unit
    if feats.shape[0] < steps:
        raise ShapeError(f"need {steps} step features, got {feats.shape[0]}")
    csum = np.vstack([np.zeros(feats.shape[1]), np.cumsum(feats, axis=0)])
    cells = list(grid.valid_cells())
    out = np.empty((len(cells), feats.shape[1]))
    for k, (i, j) in enumerate(cells):
        out[k] = (csum[j + i] - csum[j]) / i
    return ProposalFeatures(grid, cells, out)


def pool_frames(framewise, unit: int) -> np.ndarray:
    """Average label-frame features into grid steps of ``unit`` frames."""
    feats = np.asarray(framewise, dtype=np.float64)
    steps = feats.shape[0] // unit
    return feats[:steps * unit].reshape(steps, unit, -1).mean(axis=1)


def balance_labels(overlap: OverlapMap, t_d: float, p_d: float, seed: int = 0) -> BalanceMask:
    """Mark cells >= t_d positive and drop each negative with probability p_d."""
    if not 0 < t_d <= 1:
        raise ValidationError(f"t_d must be in (0, 1], got {t_d}")
    if not 0 <= p_d <= 1:
        raise ValidationError(f"p_d must be in [0, 1], got {p_d}")
    valid = overlap.grid.valid
    rng = np.random.default_rng(seed)
    positive = valid & (overlap.values >= t_d)
    negative = valid & ~positive
    drop = rng.random(overlap.grid.shape) < p_d
    labels = np.zeros(overlap.grid.shape, dtype=np.int8)
    labels[positive] = POSITIVE
    labels[negative & drop] = NEGATIVE_DROPPED
    labels[~valid] = NEGATIVE_DROPPED
    mask = BalanceMask(overlap.grid, labels, t_d, p_d, seed)
    if mask.positives == 0 and p_d == 1:
        warnings.warn("no positive cells and p_d = 1: the balanced training set is empty", RuntimeWarning)
    return mask


def seconds_to_frames(t: float, frame_duration: float) -> int:
    return int(round(t / frame_duration))


# --------------------------------------------------------------------------
# Map dumps
# --------------------------------------------------------------------------

def save_map_csv(path, grid: ProposalGrid, values: np.ndarray) -> None:
    """Write ``# H,W,g`` then one CSV row per duration index (invalid cells = -1)."""
    values = np.asarray(values, dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# H={grid.H},W={grid.W},g={grid.unit},num_frames={grid.num_frames},frame_duration={grid.frame_duration!r}\n")
        for row in values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_map_csv(path) -> tuple[ProposalGrid, np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValidationError(f"{path}: missing '# H=..,W=..,g=..' header")
    meta = dict(item.split("=", 1) for item in lines[0][1:].strip().split(","))
    grid = ProposalGrid(int(meta["H"]), int(meta["W"]), int(meta["g"]), int(meta["num_frames"]),
                        float(meta.get("frame_duration", FRAME_DURATION)))
    values = np.array([[float(v) for v in line.split(",")] for line in lines[1:] if line.strip()])
    if values.shape != grid.shape:
        raise ShapeError(f"{path}: matrix {values.shape} does not match header {grid.shape}")
    return grid, values
