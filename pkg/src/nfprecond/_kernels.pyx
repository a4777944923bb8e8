# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled elementwise kernels.

Same signatures as :mod:`nfprecond._kernels_py`; arrays must be C-contiguous
float64 and are flattened before the loops run.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, exp, log1p, fabs, sqrt, fmax

cnp.import_array()

DEF RELU = 0
DEF SINE = 1
DEF GAUSSIAN = 2
DEF WAVELET = 3
DEF SINC = 4
DEF SOFTPLUS = 5

DEF SINC_SERIES = 1e-2

BACKEND = "cython"


cdef inline void _eval(int code, double p1, double p2, double x,
                       double* f, double* d1, double* d2) noexcept nogil:
    cdef double u, s, c, e, de, dde, inv, sg
    if code == RELU:
        if x > 0.0:
            f[0] = x
            d1[0] = 1.0
        else:
            f[0] = 0.0
            d1[0] = 0.0
        d2[0] = 0.0
    elif code == SINE:
        u = p1 * x
        s = sin(u)
        f[0] = s
        d1[0] = p1 * cos(u)
        d2[0] = -p1 * p1 * s
    elif code == GAUSSIAN:
        inv = 1.0 / (p1 * p1)
        e = exp(-0.5 * x * x * inv)
        f[0] = e
        d1[0] = -x * inv * e
        d2[0] = (x * x * inv - 1.0) * inv * e
    elif code == WAVELET:
        inv = 1.0 / (p2 * p2)
        e = exp(-0.5 * x * x * inv)
        de = -x * inv * e
        dde = (x * x * inv - 1.0) * inv * e
        u = p1 * x
        s = sin(u)
        c = cos(u)
        f[0] = c * e
        d1[0] = -p1 * s * e + c * de
        d2[0] = -p1 * p1 * c * e - 2.0 * p1 * s * de + c * dde
    elif code == SINC:
        u = p1 * x
        if fabs(u) < SINC_SERIES:
            s = u * u
            f[0] = 1.0 - s / 6.0 + s * s / 120.0
            d1[0] = p1 * (-u / 3.0 + u * s / 30.0)
            d2[0] = p1 * p1 * (-1.0 / 3.0 + s / 10.0 - s * s / 168.0)
        else:
            s = sin(u)
            c = cos(u)
            f[0] = s / u
            d1[0] = p1 * (u * c - s) / (u * u)
            d2[0] = p1 * p1 * ((2.0 - u * u) * s - 2.0 * u * c) / (u * u * u)
    else:
        # softplus; f' is the logistic sigmoid
        f[0] = fmax(x, 0.0) + log1p(exp(-fabs(x)))
        if x >= 0.0:
            sg = 1.0 / (1.0 + exp(-x))
        else:
            e = exp(x)
            sg = e / (1.0 + e)
        d1[0] = sg
        d2[0] = sg * (1.0 - sg)


def activation(int code, double p1, double p2, x, int order):
    """Value and the first ``order`` derivatives in a single pass."""
    cdef cnp.ndarray xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray fa = np.empty_like(xa)
    cdef cnp.ndarray d1a = np.empty_like(xa)
    cdef cnp.ndarray d2a
    cdef double[::1] xv = xa.reshape(-1)
    cdef double[::1] fv = fa.reshape(-1)
    cdef double[::1] d1v = d1a.reshape(-1)
    cdef double[::1] d2v
    cdef double junk
    cdef Py_ssize_t i, n = xv.shape[0]
    if order >= 2:
        d2a = np.empty_like(xa)
        d2v = d2a.reshape(-1)
        with nogil:
            for i in range(n):
                _eval(code, p1, p2, xv[i], &fv[i], &d1v[i], &d2v[i])
        return fa, d1a, d2a
    with nogil:
        for i in range(n):
            _eval(code, p1, p2, xv[i], &fv[i], &d1v[i], &junk)
    return fa, d1a, None


def moment_step(double[::1] theta, double[::1] m, double[::1] v,
                double[::1] g, double[::1] d, double lr, double beta1,
                double beta2, double bc1, double bc2, double eps):
    """In place: m, v EMAs of g and d, then bias-corrected adaptive step."""
    cdef Py_ssize_t i, n = theta.shape[0]
    cdef double mh, vh
    with nogil:
        for i in range(n):
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * d[i]
            mh = m[i] / bc1
            vh = v[i] / bc2
            theta[i] = theta[i] - lr * (mh / (sqrt(vh) + eps))


def ema_square(double[::1] acc, double[::1] h, double beta):
    cdef Py_ssize_t i, n = acc.shape[0]
    with nogil:
        for i in range(n):
            acc[i] = beta * acc[i] + (1.0 - beta) * (h[i] * h[i])


def max_square(double[::1] u, double[::1] h, double beta):
    cdef Py_ssize_t i, n = u.shape[0]
    with nogil:
        for i in range(n):
            u[i] = fmax(beta * u[i], h[i] * h[i])


def diag_step(double[::1] theta, double[::1] g, double[::1] d, double lr,
              double bc, double eps):
    """In place: theta -= lr * g / (sqrt(d / bc) + eps)."""
    cdef Py_ssize_t i, n = theta.shape[0]
    with nogil:
        for i in range(n):
            theta[i] = theta[i] - lr * (g[i] / (sqrt(d[i] / bc) + eps))


def count_small(double[::1] x, double thresh):
    cdef Py_ssize_t i, n = x.shape[0], k = 0
    with nogil:
        for i in range(n):
            if fabs(x[i]) <= thresh:
                k += 1
    return k
