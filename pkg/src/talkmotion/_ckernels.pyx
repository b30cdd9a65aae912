# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_pykernels``.

Reductions run in a fixed sequential order so results do not depend on
threading. Signatures and return conventions match the numpy fallback.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, tanh, atan2, cos, sin, hypot

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def layer_norm_forward(double[:, ::1] x, double[::1] gain, double[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out = np.empty((n, d))
    xhat_a = np.empty((n, d))
    rstd_a = np.empty(n)
    cdef double[:, ::1] y = out
    cdef double[:, ::1] xh = xhat_a
    cdef double[::1] rs = rstd_a
    cdef double mean, var, r, c
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(d):
                mean += x[i, j]
            mean /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mean
                var += c * c
            var /= d
            r = 1.0 / sqrt(var + eps)
            rs[i] = r
            for j in range(d):
                c = (x[i, j] - mean) * r
                xh[i, j] = c
                y[i, j] = c * gain[j] + bias[j]
    return out, xhat_a, rstd_a


def layer_norm_backward(double[:, ::1] dy, double[:, ::1] xhat, double[::1] rstd, double[::1] gain):
    cdef Py_ssize_t n = dy.shape[0], d = dy.shape[1], i, j
    dx_a = np.empty((n, d))
    dg_a = np.zeros(d)
    db_a = np.zeros(d)
    cdef double[:, ::1] dx = dx_a
    cdef double[::1] dg = dg_a
    cdef double[::1] db = db_a
    cdef double s1, s2, g
    with nogil:
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                g = dy[i, j] * gain[j]
                s1 += g
                s2 += g * xhat[i, j]
                dg[j] += dy[i, j] * xhat[i, j]
                db[j] += dy[i, j]
            s1 /= d
            s2 /= d
            for j in range(d):
                g = dy[i, j] * gain[j]
                dx[i, j] = (g - s1 - xhat[i, j] * s2) * rstd[i]
    return dx_a, dg_a, db_a


def softmax_rows(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out = np.empty((n, d))
    cdef double[:, ::1] y = out
    cdef double m, s
    with nogil:
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(d):
                y[i, j] = exp(x[i, j] - m)
                s += y[i, j]
            for j in range(d):
                y[i, j] /= s
    return out


def softmax_rows_backward(double[:, ::1] y, double[:, ::1] dy):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1], i, j
    out = np.empty((n, d))
    cdef double[:, ::1] dx = out
    cdef double s
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += dy[i, j] * y[i, j]
            for j in range(d):
                dx[i, j] = y[i, j] * (dy[i, j] - s)
    return out


def gelu_forward(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out = np.empty((n, d))
    cdef double[:, ::1] y = out
    cdef double v
    with nogil:
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                y[i, j] = 0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v)))
    return out


def gelu_backward(double[:, ::1] x, double[:, ::1] dy):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out = np.empty((n, d))
    cdef double[:, ::1] dx = out
    cdef double v, th, du
    with nogil:
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                th = tanh(GELU_C * (v + GELU_A * v * v * v))
                du = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
                dx[i, j] = dy[i, j] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
    return out


def umeyama2d_batch(double[:, :, ::1] src, double[:, :, ::1] dst):
    cdef Py_ssize_t f = src.shape[0], npts = src.shape[1], i, k
    scale_a = np.empty(f)
    angle_a = np.empty(f)
    trans_a = np.empty((f, 2))
    resid_a = np.empty(f)
    cdef double[::1] sc = scale_a
    cdef double[::1] an = angle_a
    cdef double[:, ::1] tr = trans_a
    cdef double[::1] rs = resid_a
    cdef double msx, msy, mdx, mdy, px, py, qx, qy, a, b, sp, sq, nrm, s, c, sn
    with nogil:
        for i in range(f):
            msx = 0.0; msy = 0.0; mdx = 0.0; mdy = 0.0
            for k in range(npts):
                msx += src[i, k, 0]; msy += src[i, k, 1]
                mdx += dst[i, k, 0]; mdy += dst[i, k, 1]
            msx /= npts; msy /= npts; mdx /= npts; mdy /= npts
            a = 0.0; b = 0.0; sp = 0.0; sq = 0.0
            for k in range(npts):
                px = src[i, k, 0] - msx; py = src[i, k, 1] - msy
                qx = dst[i, k, 0] - mdx; qy = dst[i, k, 1] - mdy
                a += px * qx + py * qy
                b += px * qy - py * qx
                sp += px * px + py * py
                sq += qx * qx + qy * qy
            an[i] = atan2(b, a)
            nrm = hypot(a, b)
            if sp > 0.0:
                s = nrm / sp
                rs[i] = sq - nrm * s
                if rs[i] < 0.0:
                    rs[i] = 0.0
            else:
                s = 0.0
                rs[i] = sq
            sc[i] = s
            c = cos(an[i]); sn = sin(an[i])
            tr[i, 0] = mdx - s * (c * msx - sn * msy)
            tr[i, 1] = mdy - s * (sn * msx + c * msy)
    return scale_a, angle_a, trans_a, resid_a
