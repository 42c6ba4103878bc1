"""Parametric sinc band-pass kernels and the multichannel MaxCorr filter bank.

A band-pass kernel is the difference of two ideal low-pass responses,

    k[n] = 2 f2 sinc(2 pi f2 n) - 2 f1 sinc(2 pi f1 n),   sinc(x) = sin(x)/x,

with frequencies in cycles/sample.  A MaxCorr filter replicates the kernel
on every channel, evaluated at the shifted abscissa ``n + t_i``; shifts are
real-valued and evaluated exactly, with ``t_1`` pinned to 0.  With the
cross-correlation used by :func:`apply_filterbank`, a channel that lags the
reference by ``d`` samples is aligned by the shift ``t = -d``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from seldkit import _backend
from seldkit.errors import ConstraintError, ShapeError, TrainingError, ValidationError
from seldkit.waveform import MultichannelWaveform, SoundEvent

KERNEL_LENGTH = 251
LONG_KERNEL_LENGTH = 481
STRIDE = 75
TAU_MAX = 8.0
WINDOW = "hamming"
WINDOWS = ("hamming", "none")

_SERIES_CUTOFF = 1e-2


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SincParams:
    """Unconstrained band parameters; ``f1 = |theta1|``, ``f2 = f1 + |theta2|``.

    Both frequencies are clamped to Nyquist (0.5 cycles/sample).
    """

    theta1: float
    theta2: float

    @classmethod
    def from_band(cls, f1: float, f2: float) -> "SincParams":
        if not 0.0 <= f1 <= f2 <= 0.5:
            raise ConstraintError(f"band must satisfy 0 <= f1 <= f2 <= 0.5, got ({f1}, {f2})")
        return cls(float(f1), float(f2 - f1))

    @property
    def f1(self) -> float:
        return min(abs(self.theta1), 0.5)

    @property
    def f2(self) -> float:
        return min(self.f1 + abs(self.theta2), 0.5)

    def jacobian(self) -> np.ndarray:
        """d(f1, f2)/d(theta1, theta2) as a 2x2 matrix (rows f, cols theta)."""
        s1 = 1.0 if self.theta1 >= 0 else -1.0
        s2 = 1.0 if self.theta2 >= 0 else -1.0
        d_f1 = s1 if abs(self.theta1) < 0.5 else 0.0
        free = abs(self.theta1) + abs(self.theta2) < 0.5 and abs(self.theta1) < 0.5
        return np.array([[d_f1, 0.0], [d_f1 if free else 0.0, s2 if free else 0.0]])


@dataclass
class MaxCorrFilter:
    sinc: SincParams
    shifts: np.ndarray
    tau_max: float = TAU_MAX

    def __post_init__(self):
        shifts = np.asarray(self.shifts, dtype=np.float64).ravel()
        if shifts.size < 1:
            raise ShapeError("a MaxCorr filter needs at least one channel")
        if shifts[0] != 0.0:
            raise ConstraintError(f"reference shift t_1 must be exactly 0, got {shifts[0]}")
        if np.any(np.abs(shifts) > self.tau_max):
            raise ConstraintError(f"shifts {shifts.tolist()} exceed tau_max={self.tau_max}")
        self.shifts = shifts

    @classmethod
    def from_band(cls, f1, f2, shifts=None, channels=4, tau_max=TAU_MAX) -> "MaxCorrFilter":
        if shifts is None:
            shifts = np.zeros(channels)
        return cls(SincParams.from_band(f1, f2), np.asarray(shifts, dtype=np.float64), tau_max)

    @property
    def channels(self) -> int:
        return self.shifts.size

    @property
    def stored_parameters(self) -> int:
        return 2 + self.channels

    @property
    def free_parameters(self) -> int:
        return 2 + self.channels - 1

    def free_vector(self) -> np.ndarray:
        return np.concatenate(([self.sinc.theta1, self.sinc.theta2], self.shifts[1:]))

    def with_free_vector(self, vec) -> "MaxCorrFilter":
        vec = np.asarray(vec, dtype=np.float64)
        shifts = np.concatenate(([0.0], np.clip(vec[2:], -self.tau_max, self.tau_max)))
        return MaxCorrFilter(SincParams(float(vec[0]), float(vec[1])), shifts, self.tau_max)


@dataclass
class FilterBank:
    filters: list[MaxCorrFilter]
    kernel_length: int = KERNEL_LENGTH
    stride: int = STRIDE
    window: str = WINDOW

    def __post_init__(self):
        if self.kernel_length < 1 or self.kernel_length % 2 == 0:
            raise ShapeError(f"kernel_length must be odd and positive, got {self.kernel_length}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.window not in WINDOWS:
            raise ValidationError(f"window must be one of {WINDOWS}, got {self.window!r}")
        if len({f.channels for f in self.filters}) > 1:
            raise ShapeError("all filters in a bank must have the same channel count")

    @property
    def channels(self) -> int:
        return self.filters[0].channels if self.filters else 0

    def kernels(self) -> np.ndarray:
        """Stacked kernels, shape (filters, channels, kernel_length)."""
        return np.stack([maxcorr_kernel(f, self.kernel_length, self.window) for f in self.filters])


@dataclass
class KernelGradients:
    """Partial derivatives of a (C, L) MaxCorr kernel.

    ``d_shifts[i]`` is the derivative of row ``i`` with respect to ``t_i``
    (other rows do not depend on it).
    """

    d_f1: np.ndarray
    d_f2: np.ndarray
    d_shifts: np.ndarray
    d_theta1: np.ndarray
    d_theta2: np.ndarray


# --------------------------------------------------------------------------
# Kernel evaluation
# --------------------------------------------------------------------------

def taps(length: int) -> np.ndarray:
    if length < 1 or length % 2 == 0:
        raise ShapeError(f"kernel length must be odd, got {length}")
    half = (length - 1) // 2
    return np.arange(-half, half + 1, dtype=np.float64)


def window_values(length: int, window: str | None) -> np.ndarray:
    if window in (None, "none"):
        return np.ones(length)
    if window == "hamming":
        return np.hamming(length)
    raise ValidationError(f"unknown window {window!r}")


def _lowpass(f, m):
    # 2 f sinc(2 pi f m) with the normalized numpy sinc
    return 2.0 * f * np.sinc(2.0 * f * m)


def _lowpass_df(f, m):
    return 2.0 * np.cos(2.0 * np.pi * f * m)


def _lowpass_dm(f, m):
    m = np.asarray(m, dtype=np.float64)
    x = 2.0 * np.pi * f * m
    out = np.empty_like(m)
    small = np.abs(x) < _SERIES_CUTOFF
    xs = x[small]
    # d/dx sin(x)/x = -x/3 + x^3/30 - x^5/840 + ...
    out[small] = 4.0 * np.pi * f * f * (-xs / 3.0 + xs ** 3 / 30.0 - xs ** 5 / 840.0)
    xl, ml = x[~small], m[~small]
    out[~small] = (xl * np.cos(xl) - np.sin(xl)) / (np.pi * ml * ml)
    return out


def _band(params) -> tuple[float, float]:
    if isinstance(params, SincParams):
        return params.f1, params.f2
    f1, f2 = params
    return float(f1), float(f2)


def sinc_kernel(params, length: int = KERNEL_LENGTH, window: str | None = WINDOW) -> np.ndarray:
    """Band-pass kernel sampled at integer taps ``-(L-1)/2 .. (L-1)/2``.

    ``params`` is a :class:`SincParams` or an ``(f1, f2)`` pair.
    """
    f1, f2 = _band(params)
    if f1 > f2:
        raise ConstraintError(f"need f1 <= f2, got ({f1}, {f2})")
    n = taps(length)
    return (_lowpass(f2, n) - _lowpass(f1, n)) * window_values(length, window)


def maxcorr_kernel(filt: MaxCorrFilter, length: int = KERNEL_LENGTH,
                   window: str | None = WINDOW) -> np.ndarray:
    if np.any(np.abs(filt.shifts) > filt.tau_max):
        raise ConstraintError(f"shifts exceed tau_max={filt.tau_max}")
    f1, f2 = filt.sinc.f1, filt.sinc.f2
    m = taps(length)[np.newaxis, :] + filt.shifts[:, np.newaxis]
    return (_lowpass(f2, m) - _lowpass(f1, m)) * window_values(length, window)


def kernel_gradients(filt: MaxCorrFilter, length: int = KERNEL_LENGTH,
                     window: str | None = WINDOW) -> KernelGradients:
    f1, f2 = filt.sinc.f1, filt.sinc.f2
    m = taps(length)[np.newaxis, :] + filt.shifts[:, np.newaxis]
    w = window_values(length, window)
    d_f1 = -_lowpass_df(f1, m) * w
    d_f2 = _lowpass_df(f2, m) * w
    d_shifts = (_lowpass_dm(f2, m) - _lowpass_dm(f1, m)) * w
    jac = filt.sinc.jacobian()
    d_theta1 = d_f1 * jac[0, 0] + d_f2 * jac[1, 0]
    d_theta2 = d_f2 * jac[1, 1]
    return KernelGradients(d_f1, d_f2, d_shifts, d_theta1, d_theta2)


def soft_round(x, beta: float):
    """Differentiable rounding: ``floor(x) + sigmoid(beta * (frac(x) - 0.5))``."""
    if beta <= 0:
        raise ValidationError(f"beta must be positive, got {beta}")
    x = np.asarray(x, dtype=np.float64)
    base = np.floor(x)
    out = base + expit(beta * (x - base - 0.5))
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# Application
# --------------------------------------------------------------------------

def num_frames(num_samples: int, length: int, stride: int) -> int:
    return (num_samples - length) // stride + 1


def apply_filterbank(waveform, bank: FilterBank) -> np.ndarray:
    """Channel-summed strided cross-correlation, shape (frames, filters).

    ``out[m, f] = sum_i sum_n x[i, m*stride + n] * kernel_f[i, n]``.
    """
    samples = waveform.samples if isinstance(waveform, MultichannelWaveform) else np.atleast_2d(waveform)
    if samples.shape[0] != bank.channels:
        raise ShapeError(f"waveform has {samples.shape[0]} channels, bank expects {bank.channels}")
    if samples.shape[1] < bank.kernel_length:
        raise ShapeError(f"waveform shorter ({samples.shape[1]}) than kernel ({bank.kernel_length})")
    return _backend.correlate_bank(
        np.ascontiguousarray(samples, dtype=np.float64), bank.kernels(), bank.stride
    )


# --------------------------------------------------------------------------
# Toy fitting
# --------------------------------------------------------------------------

@dataclass
class FitConfig:
    learning_rate: float = 0.005
    shift_learning_rate: float = 0.05
    iterations: int = 400
    loss: str = "contrastive-energy"
    silence_weight: float = 10.0
    init_band: tuple[float, float] = (0.05, 0.45)
    init_shifts: Sequence[float] | None = None
    kernel_length: int = KERNEL_LENGTH
    window: str = WINDOW
    tau_max: float = TAU_MAX
    frame_stride: int = 4
    max_frames: int = 4000
    seed: int = 0


@dataclass
class FitResult:
    bank: FilterBank
    trace: list[dict] = field(default_factory=list)


def _segment_frames(samples, events, sr, length, stride, margin):
    """Window starts fully inside an event vs fully clear of every event."""
    total = samples.shape[1]
    spans = [(int(round(e.t_start * sr)), int(round(e.t_end * sr))) for e in events]
    starts = np.arange(0, total - length + 1, stride)
    ends = starts + length
    inside = np.zeros(len(starts), dtype=bool)
    clear = np.ones(len(starts), dtype=bool)
    for a, b in spans:
        inside |= (starts >= a) & (ends <= b)
        clear &= (ends <= a - margin) | (starts >= b + margin)
    return starts[inside], starts[clear]


def _frame_matrix(samples, starts, length):
    idx = starts[:, np.newaxis] + np.arange(length)[np.newaxis, :]
    return samples[:, idx].transpose(1, 0, 2).reshape(len(starts), -1)


def contrastive_energy(filt: MaxCorrFilter, x_event, x_silence, silence_weight, length, window,
                       scale=1.0, with_grad=True):
    """Objective ``(E_event - silence_weight * E_silence) / scale`` and its gradient.

    ``x_event`` / ``x_silence`` are frame matrices (frames, C*L); an empty
    matrix drops its term.  The gradient is with respect to the free vector
    ``(theta1, theta2, t_2..t_C)``.
    """
    kern = maxcorr_kernel(filt, length, window).ravel()
    value = 0.0
    d_kern = np.zeros_like(kern)
    for x, weight in ((x_event, 1.0), (x_silence, -silence_weight)):
        if not len(x):
            continue
        y = x @ kern
        value += weight * float(np.mean(y * y)) / scale
        if with_grad:
            d_kern += (weight * 2.0 / (len(y) * scale)) * (x.T @ y)
    if not with_grad:
        return value, None
    d_kern = d_kern.reshape(filt.channels, length)
    g = kernel_gradients(filt, length, window)
    grad = np.empty(filt.free_parameters)
    grad[0] = np.sum(d_kern * g.d_theta1)
    grad[1] = np.sum(d_kern * g.d_theta2)
    grad[2:] = np.sum(d_kern * g.d_shifts, axis=1)[1:]
    return value, grad


def fit_filters(waveform: MultichannelWaveform, events: Sequence[SoundEvent],
                config: FitConfig | None = None) -> FitResult:
    """Fit one MaxCorr filter to a scene by gradient ascent on contrastive band energy.

    Adam updates with separate step sizes for the band parameters and the
    shifts; shifts are projected back into ``[-tau_max, tau_max]``.
    """
    cfg = config or FitConfig()
    if cfg.loss != "contrastive-energy":
        raise ValidationError(f"unknown loss {cfg.loss!r}")
    for name in ("learning_rate", "shift_learning_rate"):
        rate = getattr(cfg, name)
        if not (math.isfinite(rate) and rate > 0):
            raise ValidationError(f"{name} must be finite and positive, got {rate}")
    samples = waveform.samples
    channels = samples.shape[0]
    init_shifts = np.zeros(channels) if cfg.init_shifts is None else np.asarray(cfg.init_shifts, float)
    filt = MaxCorrFilter.from_band(*cfg.init_band, shifts=init_shifts, tau_max=cfg.tau_max)
    bank_of = lambda f: FilterBank([f], cfg.kernel_length, STRIDE, cfg.window)

    trace = [_trace_row(0, float("nan"), filt)]
    if cfg.iterations == 0:
        return FitResult(bank_of(filt), trace)

    rng = np.random.default_rng(cfg.seed)
    ev_starts, si_starts = _segment_frames(
        samples, events, waveform.sample_rate, cfg.kernel_length, cfg.frame_stride, int(math.ceil(cfg.tau_max))
    )
    if len(ev_starts) > cfg.max_frames:
        ev_starts = np.sort(rng.choice(ev_starts, cfg.max_frames, replace=False))
    if len(si_starts) > cfg.max_frames:
        si_starts = np.sort(rng.choice(si_starts, cfg.max_frames, replace=False))
    x_ev = _frame_matrix(samples, ev_starts, cfg.kernel_length)
    x_si = _frame_matrix(samples, si_starts, cfg.kernel_length)
    scale = float(np.mean(samples ** 2)) * channels or 1.0

    lr = np.full(filt.free_parameters, cfg.shift_learning_rate)
    lr[:2] = cfg.learning_rate
    m = np.zeros(filt.free_parameters)
    v = np.zeros(filt.free_parameters)
    b1, b2, eps = 0.9, 0.999, 1e-12
    params = filt.free_vector()
    # Row k holds the parameters after k updates and the loss evaluated there.
    for it in range(cfg.iterations + 1):
        value, grad = contrastive_energy(filt, x_ev, x_si, cfg.silence_weight, cfg.kernel_length,
                                         cfg.window, scale, with_grad=it < cfg.iterations)
        loss = -value
        trace[-1]["loss"] = loss
        if not (np.isfinite(loss) and (grad is None or np.all(np.isfinite(grad)))):
            raise TrainingError(f"non-finite loss at iteration {it}", trace)
        if it == cfg.iterations:
            break
        g = -grad
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        t = it + 1
        step = lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        params = params - step
        filt = filt.with_free_vector(params)
        params = filt.free_vector()
        trace.append(_trace_row(t, float("nan"), filt))
    return FitResult(bank_of(filt), trace)


def _trace_row(it, loss, filt):
    row = {"iteration": it, "loss": loss, "f1": filt.sinc.f1, "f2": filt.sinc.f2}
    for i, t in enumerate(filt.shifts[1:], start=2):
        row[f"t{i}"] = float(t)
    return row


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path, bank: FilterBank) -> None:
    """Write a flat ``key = value`` text checkpoint (floats via repr, exact round trip)."""
    lines = [
        "# seldkit filter bank checkpoint",
        f"kernel_length = {bank.kernel_length}",
        f"stride = {bank.stride}",
        f"window = {bank.window}",
        f"channels = {bank.channels}",
        f"filters = {len(bank.filters)}",
    ]
    for k, f in enumerate(bank.filters):
        lines.append(f"filter.{k}.tau_max = {f.tau_max!r}")
        lines.append(f"filter.{k}.theta1 = {f.sinc.theta1!r}")
        lines.append(f"filter.{k}.theta2 = {f.sinc.theta2!r}")
        for i in range(1, f.channels):
            lines.append(f"filter.{k}.t{i + 1} = {float(f.shifts[i])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> FilterBank:
    kv = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        kv[key] = value
    try:
        channels = int(kv["channels"])
        filters = []
        for k in range(int(kv["filters"])):
            shifts = [0.0] + [float(kv[f"filter.{k}.t{i + 1}"]) for i in range(1, channels)]
            filters.append(MaxCorrFilter(
                SincParams(float(kv[f"filter.{k}.theta1"]), float(kv[f"filter.{k}.theta2"])),
                np.array(shifts),
                float(kv.get(f"filter.{k}.tau_max", TAU_MAX)),
            ))
        return FilterBank(filters, int(kv["kernel_length"]), int(kv["stride"]), kv["window"])
    except KeyError as exc:
        raise ValidationError(f"{path}: missing key {exc.args[0]}") from exc
