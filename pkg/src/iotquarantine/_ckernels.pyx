# cython: language_level=3
"""Compiled versions of the hot loops in ``_pykernels``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def tally_rounds(classes, unit_phase, whole, frac, frame_bits, expected_bits, Py_ssize_t nclasses):
    cdef const cnp.int64_t[:, ::1] cls = np.ascontiguousarray(classes, dtype=np.int64)
    cdef const double[:, ::1] u = np.ascontiguousarray(unit_phase, dtype=np.float64)
    cdef const cnp.int64_t[::1] w = np.ascontiguousarray(whole, dtype=np.int64)
    cdef const double[::1] fr = np.ascontiguousarray(frac, dtype=np.float64)
    cdef const double[::1] bits = np.ascontiguousarray(frame_bits, dtype=np.float64)
    cdef const double[::1] exp_bits = np.ascontiguousarray(expected_bits, dtype=np.float64)
    cdef Py_ssize_t rounds = cls.shape[0]
    cdef Py_ssize_t n = cls.shape[1]
    measured_arr = np.zeros(rounds, dtype=np.float64)
    expected_arr = np.zeros(rounds, dtype=np.float64)
    counts_arr = np.zeros((rounds, nclasses), dtype=np.int64)
    cdef double[::1] measured = measured_arr
    cdef double[::1] expected = expected_arr
    cdef cnp.int64_t[:, ::1] counts = counts_arr
    cdef Py_ssize_t r, j
    cdef cnp.int64_t c, frames
    cdef double m, e
    with nogil:
        for r in range(rounds):
            m = 0.0
            e = 0.0
            for j in range(n):
                c = cls[r, j]
                frames = w[c]
                if u[r, j] < fr[c]:
                    frames += 1
                m += frames * bits[c]
                e += exp_bits[c]
                counts[r, c] += 1
            measured[r] = m
            expected[r] = e
    return measured_arr, expected_arr, counts_arr


def shift_convolve(mass, offsets, weights, double stay_weight):
    cdef const double[::1] src = np.ascontiguousarray(mass, dtype=np.float64)
    cdef const cnp.int64_t[::1] off = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef const double[::1] wt = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t size = src.shape[0]
    cdef Py_ssize_t nk = off.shape[0]
    cdef Py_ssize_t span = 0
    cdef Py_ssize_t i, j, o
    cdef double v, wj
    for j in range(nk):
        if off[j] > span:
            span = off[j]
    out_arr = np.zeros(size + span, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        if stay_weight != 0.0:
            for i in range(size):
                out[i] += stay_weight * src[i]
        # one pass per offset keeps the summation order identical to the numpy path
        for j in range(nk):
            wj = wt[j]
            if wj == 0.0:
                continue
            o = off[j]
            for i in range(size):
                out[o + i] += wj * src[i]
    return out_arr
