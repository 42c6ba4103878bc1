"""NumPy implementations of the compiled kernels in ``_core.pyx``.

Same signatures and semantics; summation order differs, so results agree
with the compiled path to rounding (well inside 1e-9 relative).
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_CHUNK = 4096


def correlate_bank(x, kernels, stride):
    x = np.ascontiguousarray(x, dtype=np.float64)
    kernels = np.ascontiguousarray(kernels, dtype=np.float64)
    n_filt, n_ch, length = kernels.shape
    n_frames = (x.shape[1] - length) // stride + 1
    windows = sliding_window_view(x, length, axis=1)[:, ::stride, :]
    flat_k = kernels.reshape(n_filt, n_ch * length).T
    out = np.empty((n_frames, n_filt), dtype=np.float64)
    for lo in range(0, n_frames, _CHUNK):
        hi = min(lo + _CHUNK, n_frames)
        block = windows[:, lo:hi, :].transpose(1, 0, 2).reshape(hi - lo, n_ch * length)
        out[lo:hi] = block @ flat_k
    return out


def interval_max(steps, n_rows, n_cols, unit, num_frames):
    steps = np.asarray(steps, dtype=np.float64)
    out = np.full((n_rows, n_cols), -1.0)
    for j in range(n_cols):
        a = j * unit
        rows = np.arange(n_rows)
        ends = (j + rows + 1) * unit
        valid = ends <= num_frames
        if not valid.any():
            continue
        # running max of steps[a:], prefixed with 0 for cells with < 2 frames
        run = np.concatenate(([0.0], np.maximum.accumulate(np.maximum(steps[a:], 0.0))))
        # cell ending at frame b covers steps[a .. b-2] -> run index b-1-a
        idx = ends[valid] - 1 - a
        out[rows[valid], j] = run[idx]
    return out
