# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels.

Same functions and signatures as :mod:`gatnerf._kernels_py`; inputs must be
C-contiguous float32 or float64 arrays.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, sqrt

cnp.import_array()

PDF_PADDING = 1e-5
cdef double PDF_PADDING_C = PDF_PADDING


def layernorm_forward(const floating[:, ::1] x, const floating[::1] gain, const floating[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if floating is float else np.float64
    out_a = np.empty((n, d), dtype=dtype)
    xhat_a = np.empty((n, d), dtype=dtype)
    rstd_a = np.empty((n, 1), dtype=dtype)
    cdef floating[:, ::1] out = out_a
    cdef floating[:, ::1] xhat = xhat_a
    cdef floating[:, ::1] rstd = rstd_a
    cdef double mu, var, r, c
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mu
                var += c * c
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i, 0] = <floating>r
            for j in range(d):
                c = (x[i, j] - mu) * r
                xhat[i, j] = <floating>c
                out[i, j] = <floating>(c * gain[j] + bias[j])
    return out_a, xhat_a, rstd_a


def layernorm_backward(const floating[:, ::1] grad, const floating[:, ::1] xhat, const floating[:, ::1] rstd,
                       const floating[::1] gain):
    cdef Py_ssize_t n = grad.shape[0], d = grad.shape[1], i, j
    dtype = np.float32 if floating is float else np.float64
    dx_a = np.empty((n, d), dtype=dtype)
    acc_g = np.zeros(d, dtype=np.float64)
    acc_b = np.zeros(d, dtype=np.float64)
    cdef floating[:, ::1] dx = dx_a
    cdef double[::1] dgain = acc_g
    cdef double[::1] dbias = acc_b
    cdef double m1, m2, gx, g
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                g = grad[i, j]
                dbias[j] += g
                dgain[j] += g * xhat[i, j]
                gx = g * gain[j]
                m1 += gx
                m2 += gx * xhat[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                dx[i, j] = <floating>((grad[i, j] * gain[j] - m1 - xhat[i, j] * m2) * rstd[i, 0])
    return dx_a, acc_g.astype(dtype), acc_b.astype(dtype)


def composite_forward(const floating[:, ::1] sigma, const floating[:, :, ::1] rgb, const floating[:, ::1] t,
                      const floating[::1] background, const floating[::1] last_delta):
    cdef Py_ssize_t r = sigma.shape[0], n = sigma.shape[1], i, k, c
    dtype = np.float32 if floating is float else np.float64
    color_a = np.empty((r, 3), dtype=dtype)
    weights_a = np.empty((r, n), dtype=dtype)
    trans_a = np.empty((r, n), dtype=dtype)
    cdef floating[:, ::1] color = color_a
    cdef floating[:, ::1] weights = weights_a
    cdef floating[:, ::1] trans = trans_a
    cdef double tr, keep, delta, w, acc, c0, c1, c2
    with nogil:
        for i in range(r):
            tr = 1.0
            acc = 0.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            for k in range(n):
                delta = t[i, k + 1] - t[i, k] if k + 1 < n else last_delta[i]
                keep = exp(-sigma[i, k] * delta)
                # round to working precision at the same points as the numpy path
                trans[i, k] = <floating>tr
                w = <floating>(<floating>tr * <floating>(1.0 - <floating>keep))
                weights[i, k] = <floating>w
                acc += w
                c0 += w * rgb[i, k, 0]
                c1 += w * rgb[i, k, 1]
                c2 += w * rgb[i, k, 2]
                tr = <floating>(tr * <floating>keep)
            color[i, 0] = <floating>(c0 + (1.0 - acc) * background[0])
            color[i, 1] = <floating>(c1 + (1.0 - acc) * background[1])
            color[i, 2] = <floating>(c2 + (1.0 - acc) * background[2])
    return color_a, weights_a, trans_a


def composite_backward(const floating[:, ::1] grad_color, const floating[:, ::1] sigma, const floating[:, :, ::1] rgb,
                       const floating[:, ::1] t, const floating[::1] background, const floating[:, ::1] weights,
                       const floating[:, ::1] trans, const floating[::1] last_delta):
    cdef Py_ssize_t r = sigma.shape[0], n = sigma.shape[1], i, k
    dtype = np.float32 if floating is float else np.float64
    dsigma_a = np.empty((r, n), dtype=dtype)
    drgb_a = np.empty((r, n, 3), dtype=dtype)
    cdef floating[:, ::1] dsigma = dsigma_a
    cdef floating[:, :, ::1] drgb = drgb_a
    cdef double g0, g1, g2, gb, s, behind, w, delta
    with nogil:
        for i in range(r):
            g0 = grad_color[i, 0]
            g1 = grad_color[i, 1]
            g2 = grad_color[i, 2]
            gb = g0 * background[0] + g1 * background[1] + g2 * background[2]
            behind = 0.0
            for k in range(n - 1, -1, -1):
                w = weights[i, k]
                s = g0 * rgb[i, k, 0] + g1 * rgb[i, k, 1] + g2 * rgb[i, k, 2] - gb
                delta = t[i, k + 1] - t[i, k] if k + 1 < n else last_delta[i]
                dsigma[i, k] = <floating>(delta * ((trans[i, k] - w) * s - behind))
                behind += w * s
                drgb[i, k, 0] = <floating>(w * g0)
                drgb[i, k, 1] = <floating>(w * g1)
                drgb[i, k, 2] = <floating>(w * g2)
    return dsigma_a, drgb_a


def sample_pdf(const floating[:, ::1] edges, const floating[:, ::1] weights, const floating[:, ::1] u):
    cdef Py_ssize_t rows = weights.shape[0], m = weights.shape[1], s = u.shape[1]
    cdef Py_ssize_t i, j, lo, hi, mid
    dtype = np.float32 if floating is float else np.float64
    out_a = np.empty((rows, s), dtype=dtype)
    cdf_a = np.empty(m + 1, dtype=np.float64)
    cdef floating[:, ::1] out = out_a
    cdef double[::1] cdf = cdf_a
    cdef double total, uu, span, frac
    cdef floating[::1] pdf_row
    pdf_a = np.empty(m, dtype=dtype)
    pdf_row = pdf_a
    with nogil:
        for i in range(rows):
            total = 0.0
            for j in range(m):
                pdf_row[j] = <floating>(weights[i, j] + <floating>PDF_PADDING_C)
                total += pdf_row[j]
            cdf[0] = 0.0
            for j in range(m):
                cdf[j + 1] = cdf[j] + <floating>(pdf_row[j] / <floating>total)
            cdf[m] = 1.0
            for j in range(s):
                uu = u[i, j]
                # last index with cdf[idx] <= uu
                lo = 0
                hi = m + 1
                while lo < hi:
                    mid = (lo + hi) // 2
                    if cdf[mid] <= uu:
                        lo = mid + 1
                    else:
                        hi = mid
                lo -= 1
                if lo < 0:
                    lo = 0
                elif lo > m - 1:
                    lo = m - 1
                span = cdf[lo + 1] - cdf[lo]
                if span <= 0:
                    span = 1.0
                frac = (uu - cdf[lo]) / span
                if frac < 0:
                    frac = 0.0
                elif frac > 1:
                    frac = 1.0
                out[i, j] = <floating>(edges[i, lo] + frac * (edges[i, lo + 1] - edges[i, lo]))
    return out_a

