# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops."""
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport dgemm

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef Py_ssize_t _BLOCK = 2048


def correlate_bank(const double[:, ::1] x, const double[:, :, ::1] kernels, Py_ssize_t stride):
    """Channel-summed strided cross-correlation.

    out[m, f] = sum_c sum_n x[c, m*stride + n] * kernels[f, c, n]

    Frames are gathered block by block into a contiguous buffer and reduced
    against all kernels with one dgemm per block.
    """
    cdef Py_ssize_t n_ch = x.shape[0]
    cdef Py_ssize_t n_samp = x.shape[1]
    cdef Py_ssize_t n_filt = kernels.shape[0]
    cdef Py_ssize_t length = kernels.shape[2]
    cdef Py_ssize_t n_frames = (n_samp - length) // stride + 1
    cdef Py_ssize_t lo, hi, m, c
    cdef int k_dim = <int>(n_ch * length)
    cdef int f_dim = <int>n_filt
    cdef int b_dim
    cdef double one = 1.0, zero = 0.0
    cdef char trans_t = b'T', trans_n = b'N'

    out = np.empty((max(n_frames, 0), n_filt), dtype=np.float64)
    if n_frames <= 0 or n_filt == 0:
        return out
    cdef double[:, ::1] o = out
    cdef double[:, ::1] block = np.empty((min(_BLOCK, n_frames), k_dim), dtype=np.float64)
    cdef double* kp = <double*>&kernels[0, 0, 0]
    for lo in range(0, n_frames, _BLOCK):
        hi = min(lo + _BLOCK, n_frames)
        for m in range(lo, hi):
            for c in range(n_ch):
                memcpy(&block[m - lo, c * length], &x[c, m * stride], length * sizeof(double))
        b_dim = <int>(hi - lo)
        # column-major view: out_block^T (F x B) = kernels (K x F)^T . block^T (K x B)
        dgemm(&trans_t, &trans_n, &f_dim, &b_dim, &k_dim, &one, kp, &k_dim,
              &block[0, 0], &k_dim, &zero, &o[lo, 0], &f_dim)
    return out


def interval_max(const double[::1] steps, Py_ssize_t n_rows, Py_ssize_t n_cols, Py_ssize_t unit,
                 Py_ssize_t num_frames):
    """Max of per-step values over every grid cell.

    Cell (row r, col j) spans frames [j*unit, (j+r+1)*unit) and reduces
    ``steps[a .. b-2]``; cells with fewer than two frames are 0 and cells
    running past ``num_frames`` are -1.
    """
    cdef Py_ssize_t r, j, a, b, k, k_next
    cdef double run

    out = np.full((n_rows, n_cols), -1.0, dtype=np.float64)
    cdef double[:, ::1] o = out
    for j in range(n_cols):
        a = j * unit
        run = 0.0
        k_next = a
        for r in range(n_rows):
            b = (j + r + 1) * unit
            if b > num_frames:
                break
            # steps k with k + 1 < b
            for k in range(k_next, b - 1):
                if steps[k] > run:
                    run = steps[k]
            if b - 1 > k_next:
                k_next = b - 1
            o[r, j] = run
    return out
