"""Elementwise hot loops, compiled when available.

The Cython extension ``nfprecond._kernels`` is preferred. If it was not
built, or ``NFPRECOND_PURE_PYTHON=1`` is set, the numpy implementation in
``_kernels_py`` is used instead. Both expose the same functions.
"""
import os

from . import _kernels_py as py_backend

RELU = py_backend.RELU
SINE = py_backend.SINE
GAUSSIAN = py_backend.GAUSSIAN
WAVELET = py_backend.WAVELET
SINC = py_backend.SINC
SOFTPLUS = py_backend.SOFTPLUS

compiled_backend = None
if os.environ.get("NFPRECOND_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled_backend
    except ImportError:
        compiled_backend = None

backend = compiled_backend if compiled_backend is not None else py_backend
BACKEND = backend.BACKEND

activation = backend.activation
moment_step = backend.moment_step
ema_square = backend.ema_square
max_square = backend.max_square
diag_step = backend.diag_step
count_small = backend.count_small
