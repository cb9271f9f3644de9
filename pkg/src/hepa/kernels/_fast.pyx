# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled elementwise and row-wise kernels.

Every function here has a pure-numpy twin in ``_reference.py`` with the same
signature; ``hepa.kernels`` picks one at import time.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport sqrt, exp, tanh

cnp.import_array()

cdef double GELU_C = 0.7978845608028654  # sqrt(2 / pi)
cdef double GELU_A = 0.044715


cdef inline float _tanhf(float x) noexcept nogil:
    # odd rational minimax approximation, float32-accurate on the clamped range
    cdef float x2, p, q
    cdef float lim = 7.90531110763549805
    x = x if x < lim else lim
    x = x if x > -lim else -lim
    x2 = x * x
    p = x2 * <float>-2.76076847742355e-16 + <float>2.00018790482477e-13
    p = x2 * p + <float>-8.60467152213735e-11
    p = x2 * p + <float>5.12229709037114e-08
    p = x2 * p + <float>1.48572235717979e-05
    p = x2 * p + <float>6.37261928875436e-04
    p = x2 * p + <float>4.89352455891786e-03
    p = x * p
    q = x2 * <float>1.19825839466702e-06 + <float>1.18534705686654e-04
    q = x2 * q + <float>2.26843463243900e-03
    q = x2 * q + <float>4.89352518554385e-03
    return p / q


def gelu_fwd(floating[::1] x, floating[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef float vf
    cdef float cf = <float>GELU_C, af = <float>GELU_A, half = 0.5, one = 1.0
    cdef double vd
    if floating is float:
        with nogil:
            for i in range(n):
                vf = x[i]
                out[i] = half * vf * (one + _tanhf(cf * (vf + af * vf * vf * vf)))
    else:
        with nogil:
            for i in range(n):
                vd = x[i]
                out[i] = 0.5 * vd * (1.0 + tanh(GELU_C * (vd + GELU_A * vd * vd * vd)))


def gelu_bwd(floating[::1] x, floating[::1] gy, floating[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef float vf, tf
    cdef float cf = <float>GELU_C, af = <float>GELU_A, af3 = <float>(3.0 * GELU_A)
    cdef float half = 0.5, one = 1.0
    cdef double vd, td
    if floating is float:
        with nogil:
            for i in range(n):
                vf = x[i]
                tf = _tanhf(cf * (vf + af * vf * vf * vf))
                out[i] = gy[i] * (half * (one + tf) + half * vf * (one - tf * tf)
                                  * cf * (one + af3 * vf * vf))
    else:
        with nogil:
            for i in range(n):
                vd = x[i]
                td = tanh(GELU_C * (vd + GELU_A * vd * vd * vd))
                out[i] = gy[i] * (0.5 * (1.0 + td) + 0.5 * vd * (1.0 - td * td)
                                  * GELU_C * (1.0 + 3.0 * GELU_A * vd * vd))


def layernorm_fwd(floating[:, ::1] x, floating[::1] gain, floating[::1] bias, double eps,
                  floating[:, ::1] y, floating[:, ::1] xhat, floating[::1] rstd):
    cdef Py_ssize_t r, j, rows = x.shape[0], d = x.shape[1]
    cdef double mean, var, diff, inv
    with nogil:
        for r in range(rows):
            mean = 0.0
            for j in range(d):
                mean += x[r, j]
            mean /= d
            var = 0.0
            for j in range(d):
                diff = x[r, j] - mean
                var += diff * diff
            var /= d
            inv = 1.0 / sqrt(var + eps)
            rstd[r] = <floating>inv
            for j in range(d):
                xhat[r, j] = <floating>((x[r, j] - mean) * inv)
                y[r, j] = xhat[r, j] * gain[j] + bias[j]


def layernorm_bwd(floating[:, ::1] gy, floating[:, ::1] xhat, floating[::1] rstd,
                  floating[::1] gain, floating[:, ::1] gx, double[::1] ggain, double[::1] gbias):
    cdef Py_ssize_t r, j, rows = gy.shape[0], d = gy.shape[1]
    cdef double s1, s2, g
    with nogil:
        for r in range(rows):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                g = gy[r, j] * gain[j]
                s1 += g
                s2 += g * xhat[r, j]
                ggain[j] += gy[r, j] * xhat[r, j]
                gbias[j] += gy[r, j]
            s1 /= d
            s2 /= d
            for j in range(d):
                g = gy[r, j] * gain[j]
                gx[r, j] = <floating>(rstd[r] * (g - s1 - xhat[r, j] * s2))


def softmax_fwd(floating[:, ::1] x, floating[:, ::1] y):
    cdef Py_ssize_t r, j, rows = x.shape[0], d = x.shape[1]
    cdef double m, s, e
    with nogil:
        for r in range(rows):
            m = x[r, 0]
            for j in range(1, d):
                if x[r, j] > m:
                    m = x[r, j]
            s = 0.0
            for j in range(d):
                e = exp(x[r, j] - m)
                y[r, j] = <floating>e
                s += e
            s = 1.0 / s
            for j in range(d):
                y[r, j] = <floating>(y[r, j] * s)


def softmax_bwd(floating[:, ::1] y, floating[:, ::1] gy, floating[:, ::1] gx):
    cdef Py_ssize_t r, j, rows = y.shape[0], d = y.shape[1]
    cdef double dot
    with nogil:
        for r in range(rows):
            dot = 0.0
            for j in range(d):
                dot += y[r, j] * gy[r, j]
            for j in range(d):
                gx[r, j] = <floating>(y[r, j] * (gy[r, j] - dot))


def adamw_update(floating[::1] p, floating[::1] g, floating[::1] m, floating[::1] v,
                 double lr, double wd, double b1, double b2, double eps,
                 double bc1, double bc2):
    # arithmetic in the array dtype so the loop vectorises
    cdef Py_ssize_t i, n = p.shape[0]
    cdef floating decay = <floating>(1.0 - lr * wd)
    cdef floating fb1 = <floating>b1, fb2 = <floating>b2
    cdef floating cb1 = <floating>(1.0 - b1), cb2 = <floating>(1.0 - b2)
    cdef floating step = <floating>(lr / bc1), rbc2 = <floating>(1.0 / bc2), feps = <floating>eps
    cdef floating gi, mi, vi
    with nogil:
        for i in range(n):
            gi = g[i]
            mi = fb1 * m[i] + cb1 * gi
            vi = fb2 * v[i] + cb2 * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] = p[i] * decay - step * mi / (sqrt(vi * rbc2) + feps)
