"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np

RELU, SINE, GAUSSIAN, WAVELET, SINC, SOFTPLUS = range(6)
SINC_SERIES = 1e-2

BACKEND = "numpy"


def _gauss(x, width):
    inv = 1.0 / (width * width)
    e = np.exp(-0.5 * x * x * inv)
    return e, -x * inv * e, (x * x * inv - 1.0) * inv * e


def _sinc(x, a):
    u = a * x
    small = np.abs(u) < SINC_SERIES
    us = np.where(small, 1.0, u)
    s, c = np.sin(us), np.cos(us)
    f = s / us
    d1 = (us * c - s) / (us * us)
    d2 = ((2.0 - us * us) * s - 2.0 * us * c) / (us * us * us)
    if small.any():
        q = u[small] ** 2
        uu = u[small]
        f[small] = 1.0 - q / 6.0 + q * q / 120.0
        d1[small] = -uu / 3.0 + uu * q / 30.0
        d2[small] = -1.0 / 3.0 + q / 10.0 - q * q / 168.0
    return f, a * d1, a * a * d2


def activation(code, p1, p2, x, order):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if code == RELU:
        pos = x > 0.0
        f = np.where(pos, x, 0.0)
        d1 = pos.astype(np.float64)
        d2 = np.zeros_like(x)
    elif code == SINE:
        u = p1 * x
        s = np.sin(u)
        f, d1, d2 = s, p1 * np.cos(u), -p1 * p1 * s
    elif code == GAUSSIAN:
        f, d1, d2 = _gauss(x, p1)
    elif code == WAVELET:
        e, de, dde = _gauss(x, p2)
        u = p1 * x
        s, c = np.sin(u), np.cos(u)
        f = c * e
        d1 = -p1 * s * e + c * de
        d2 = -p1 * p1 * c * e - 2.0 * p1 * s * de + c * dde
    elif code == SINC:
        f, d1, d2 = _sinc(x, p1)
    else:
        f = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        e = np.exp(-np.abs(x))
        d1 = np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
        d2 = d1 * (1.0 - d1)
    return f, d1, (d2 if order >= 2 else None)


def moment_step(theta, m, v, g, d, lr, beta1, beta2, bc1, bc2, eps):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * d
    theta -= lr * ((m / bc1) / (np.sqrt(v / bc2) + eps))


def ema_square(acc, h, beta):
    acc *= beta
    acc += (1.0 - beta) * (h * h)


def max_square(u, h, beta):
    np.maximum(beta * u, h * h, out=u)


def diag_step(theta, g, d, lr, bc, eps):
    theta -= lr * (g / (np.sqrt(d / bc) + eps))


def count_small(x, thresh):
    return int(np.count_nonzero(np.abs(x) <= thresh))
