# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled twin of ``_kernels_py``.

Every function here must produce values equal (under ``==``) to the NumPy
reference for identical inputs.  The accumulation order is therefore written
out in the exact sequence the reference uses, and the build disables FMA
contraction.  Keep the two files in lockstep.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fmax, fmin
from libc.stdint cimport int32_t, uint32_t, uint64_t

IMPL = "cython"

cdef uint64_t _M0 = 0xD2511F53u
cdef uint64_t _M1 = 0xCD9E8D57u
cdef uint32_t _KEY_BUMP_0 = 0x9E3779B9u
cdef uint32_t _KEY_BUMP_1 = 0xBB67AE85u

DEF ROUNDS = 10


def philox_u64_block(seed, stream, idx0, n0, n1, n2):
    """See ``_kernels_py.philox_u64_block``; identical contract and output."""
    if idx0 < 0 or idx0 + n0 > 0xFFFFFFFF:
        raise ValueError("first-index range must fit in 32 bits")
    if not (0 <= stream <= 0xFFFFFFFF and 0 <= n1 <= 0xFFFFFFFF and 0 <= n2 <= 0xFFFFFFFF):
        raise ValueError("indices must fit in 32 bits")

    cdef uint64_t seed64 = <uint64_t> (int(seed) & 0xFFFFFFFFFFFFFFFF)
    cdef uint32_t k0s[ROUNDS]
    cdef uint32_t k1s[ROUNDS]
    cdef uint32_t kk0 = <uint32_t> (seed64 & 0xFFFFFFFFu)
    cdef uint32_t kk1 = <uint32_t> (seed64 >> 32)
    cdef int r
    for r in range(ROUNDS):
        k0s[r] = kk0
        k1s[r] = kk1
        kk0 = kk0 + _KEY_BUMP_0
        kk1 = kk1 + _KEY_BUMP_1

    out_arr = np.empty((n0, n1, n2), dtype=np.uint64)
    cdef uint64_t[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, c
    cdef Py_ssize_t nn0 = n0, nn1 = n1, nn2 = n2
    cdef uint32_t base0 = <uint32_t> idx0
    cdef uint32_t tag = <uint32_t> stream
    cdef uint32_t x0, x1, x2, x3, t0, t1, t2, t3
    cdef uint64_t p0, p1

    with nogil:
        for i in range(nn0):
            for j in range(nn1):
                for c in range(nn2):
                    x0 = base0 + <uint32_t> i
                    x1 = <uint32_t> j
                    x2 = <uint32_t> c
                    x3 = tag
                    for r in range(ROUNDS):
                        p0 = _M0 * <uint64_t> x0
                        p1 = _M1 * <uint64_t> x2
                        t0 = (<uint32_t> (p1 >> 32)) ^ x1 ^ k0s[r]
                        t1 = <uint32_t> p1
                        t2 = (<uint32_t> (p0 >> 32)) ^ x3 ^ k1s[r]
                        t3 = <uint32_t> p0
                        x0 = t0
                        x1 = t1
                        x2 = t2
                        x3 = t3
                    out[i, j, c] = ((<uint64_t> x0) << 32) | (<uint64_t> x1)
    return out_arr


def hjb_step_1(double[::1] u, double[:, ::1] a, double[:, ::1] b, double[:, ::1] f,
               double h, double dt, double[::1] unew, int32_t[::1] amin):
    """See ``_kernels_py.hjb_step_1``."""
    cdef Py_ssize_t n = u.shape[0]
    cdef Py_ssize_t nv = a.shape[0]
    cdef double inv_h = 1.0 / h
    cdef double inv_h2 = inv_h * inv_h

    scratch = np.zeros((3, n), dtype=np.float64)
    cdef double[:, ::1] s = scratch
    cdef Py_ssize_t i, v
    cdef double acc, cand, diff

    for i in range(1, n - 1):
        s[0, i] = (u[i - 1] - 2.0 * u[i] + u[i + 1]) * inv_h2
    for i in range(n - 1):
        diff = (u[i + 1] - u[i]) * inv_h
        s[1, i] = diff
        s[2, i + 1] = diff

    with nogil:
        for v in range(nv):
            for i in range(n):
                acc = 0.5 * a[v, i] * s[0, i]
                acc += fmax(b[v, i], 0.0) * s[1, i]
                acc += fmin(b[v, i], 0.0) * s[2, i]
                acc += f[v, i]
                cand = u[i] + dt * acc
                if v == 0 or cand < unew[i]:
                    unew[i] = cand
                    amin[i] = <int32_t> v


def hjb_step_2(double[:, ::1] u, double[:, :, ::1] a1, double[:, :, ::1] a2,
               double[:, :, ::1] c12, double[:, :, ::1] b1, double[:, :, ::1] b2,
               double[:, :, ::1] f, double h1, double h2, double dt,
               double[:, ::1] unew, int32_t[:, ::1] amin):
    """See ``_kernels_py.hjb_step_2``."""
    cdef Py_ssize_t n1 = u.shape[0]
    cdef Py_ssize_t n2 = u.shape[1]
    cdef Py_ssize_t nv = a1.shape[0]
    cdef double inv_h1 = 1.0 / h1
    cdef double inv_h2 = 1.0 / h2
    cdef double inv_h1sq = inv_h1 * inv_h1
    cdef double inv_h2sq = inv_h2 * inv_h2
    cdef double inv_cross = 1.0 / (2.0 * h1 * h2)

    scratch = np.zeros((8, n1, n2), dtype=np.float64)
    cdef double[:, :, ::1] s = scratch
    cdef Py_ssize_t i, j, v
    cdef double acc, cand, diff

    with nogil:
        for i in range(1, n1 - 1):
            for j in range(n2):
                s[0, i, j] = (u[i - 1, j] - 2.0 * u[i, j] + u[i + 1, j]) * inv_h1sq
        for i in range(n1):
            for j in range(1, n2 - 1):
                s[1, i, j] = (u[i, j - 1] - 2.0 * u[i, j] + u[i, j + 1]) * inv_h2sq
        for i in range(n1 - 1):
            for j in range(n2):
                diff = (u[i + 1, j] - u[i, j]) * inv_h1
                s[2, i, j] = diff
                s[3, i + 1, j] = diff
        for i in range(n1):
            for j in range(n2 - 1):
                diff = (u[i, j + 1] - u[i, j]) * inv_h2
                s[4, i, j] = diff
                s[5, i, j + 1] = diff
        for i in range(1, n1 - 1):
            for j in range(1, n2 - 1):
                s[6, i, j] = (2.0 * u[i, j] + u[i + 1, j + 1] + u[i - 1, j - 1]
                              - u[i + 1, j] - u[i - 1, j] - u[i, j + 1] - u[i, j - 1]) * inv_cross
                s[7, i, j] = (2.0 * u[i, j] + u[i + 1, j - 1] + u[i - 1, j + 1]
                              - u[i + 1, j] - u[i - 1, j] - u[i, j + 1] - u[i, j - 1]) * inv_cross

        for v in range(nv):
            for i in range(n1):
                for j in range(n2):
                    acc = 0.5 * a1[v, i, j] * s[0, i, j]
                    acc += 0.5 * a2[v, i, j] * s[1, i, j]
                    acc += fmax(c12[v, i, j], 0.0) * s[6, i, j]
                    acc += fmax(-c12[v, i, j], 0.0) * s[7, i, j]
                    acc += fmax(b1[v, i, j], 0.0) * s[2, i, j]
                    acc += fmin(b1[v, i, j], 0.0) * s[3, i, j]
                    acc += fmax(b2[v, i, j], 0.0) * s[4, i, j]
                    acc += fmin(b2[v, i, j], 0.0) * s[5, i, j]
                    acc += f[v, i, j]
                    cand = u[i, j] + dt * acc
                    if v == 0 or cand < unew[i, j]:
                        unew[i, j] = cand
                        amin[i, j] = <int32_t> v
