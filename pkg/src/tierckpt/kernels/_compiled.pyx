# cython: language_level=3
"""Compiled inner loops for replay and sparse compaction.

Every routine here has a numpy twin in ``_fallback`` and must agree with it
bit for bit: float32 arithmetic, same operation order, no contraction.
"""
from libc.math cimport fabsf, sqrtf
from libc.stdint cimport int32_t, uint16_t, uint32_t
from libc.string cimport memcpy

import numpy as np


cdef inline uint16_t _float_to_half(float value) noexcept nogil:
    # round-to-nearest-even, mirrors numpy's float32 -> float16 cast
    cdef uint32_t f
    memcpy(&f, &value, 4)
    cdef uint32_t f_exp, f_sig
    cdef uint16_t h_sgn, h_exp, h_sig
    h_sgn = <uint16_t>((f & 0x80000000u) >> 16)
    f_exp = f & 0x7f800000u
    if f_exp >= 0x47800000u:
        if f_exp == 0x7f800000u:
            f_sig = f & 0x007fffffu
            if f_sig != 0:
                h_sig = <uint16_t>(0x7c00u + (f_sig >> 13))
                if h_sig == 0x7c00u:
                    h_sig += 1
                return h_sgn + h_sig
        return <uint16_t>(h_sgn + 0x7c00u)
    if f_exp <= 0x38000000u:
        if f_exp < 0x33000000u:
            return h_sgn
        f_exp >>= 23
        f_sig = 0x00800000u + (f & 0x007fffffu)
        f_sig >>= (113 - f_exp)
        if ((f_sig & 0x00003fffu) != 0x00001000u) or (f & 0x000007ffu):
            f_sig += 0x00001000u
        h_sig = <uint16_t>(f_sig >> 13)
        return <uint16_t>(h_sgn + h_sig)
    h_exp = <uint16_t>((f_exp - 0x38000000u) >> 13)
    f_sig = f & 0x007fffffu
    if (f_sig & 0x00003fffu) != 0x00001000u:
        f_sig += 0x00001000u
    h_sig = <uint16_t>(f_sig >> 13)
    return <uint16_t>(h_sgn + h_exp + h_sig)


def float_to_half_bits(const float[::1] x, uint16_t[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    with nogil:
        for i in range(n):
            out[i] = _float_to_half(x[i])


def fused_adam(float[::1] master, float[::1] m, float[::1] v,
               const float[:, ::1] grads, const float[:, ::1] coef):
    """Apply ``grads.shape[0]`` Adam steps, one pass over the state per block of elements."""
    cdef Py_ssize_t n = master.shape[0]
    cdef Py_ssize_t steps = grads.shape[0]
    cdef Py_ssize_t i, j
    cdef float mi, vi, g, mhat, vhat
    if steps == 0:
        return
    if grads.shape[1] != n or m.shape[0] != n or v.shape[0] != n:
        raise ValueError("fused_adam: length mismatch")
    if coef.shape[0] != steps or coef.shape[1] != 8:
        raise ValueError("fused_adam: coefficient table must be (steps, 8)")
    cdef float* pw = &master[0]
    cdef float* pm = &m[0]
    cdef float* pv = &v[0]
    cdef const float* pg
    cdef float b1, omb1, b2, omb2, bc1, bc2, lr, eps
    cdef Py_ssize_t lo, hi
    with nogil:
        # element blocks stay in L1 across the steps; the inner loop is contiguous so it
        # vectorizes, and each element still sees the same operation sequence
        lo = 0
        while lo < n:
            hi = lo + 1024 if lo + 1024 < n else n
            for j in range(steps):
                b1 = coef[j, 0]
                omb1 = coef[j, 1]
                b2 = coef[j, 2]
                omb2 = coef[j, 3]
                bc1 = coef[j, 4]
                bc2 = coef[j, 5]
                lr = coef[j, 6]
                eps = coef[j, 7]
                pg = &grads[j, 0]
                for i in range(lo, hi):
                    g = pg[i]
                    mi = b1 * pm[i] + omb1 * g
                    vi = b2 * pv[i] + omb2 * (g * g)
                    mhat = mi / bc1
                    vhat = vi / bc2
                    pw[i] = pw[i] - (lr * mhat) / (sqrtf(vhat) + eps)
                    pm[i] = mi
                    pv[i] = vi
            lo = hi


def threshold_compact(const float[::1] x, float threshold,
                      uint16_t[::1] out_values, int32_t[::1] out_indices):
    """Single pass: keep nonzero entries with magnitude >= threshold.

    Writes half-precision bit patterns and local int32 indices, returns the count.
    """
    cdef Py_ssize_t i, n = x.shape[0]
    cdef Py_ssize_t count = 0
    cdef float a, xi
    if out_values.shape[0] < n or out_indices.shape[0] < n:
        raise ValueError("threshold_compact: output buffers too small")
    if n > 2147483647:
        raise ValueError("threshold_compact: chunk exceeds int32 index range")
    with nogil:
        for i in range(n):
            xi = x[i]
            a = fabsf(xi)
            if a >= threshold and a > 0:
                out_values[count] = _float_to_half(xi)
                out_indices[count] = <int32_t>i
                count += 1
    return count
