"""Stochastic diagonal preconditioner estimates built from HVPs.

``hvp_fn(params, v)`` must return H(params) v. Probes are Rademacher.
"""
import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels

EQUILIBRATED = "equilibrated"
JACOBI = "jacobi"


def rademacher(rng, n):
    return rng.integers(0, 2, size=n).astype(np.float64) * 2.0 - 1.0


def sign_vectors(n):
    """All 2^n Rademacher vectors, as rows."""
    return np.array(list(itertools.product((1.0, -1.0), repeat=n)), dtype=np.float64).reshape(-1, n)


def _probes(rng, n, n_probes):
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    return (rademacher(rng, n) for _ in range(n_probes))


def equilibrated_from_probes(hvp_fn, params, probes):
    """sqrt of the mean of (Hv)^2 over the given probes."""
    acc, k = 0.0, 0
    for v in probes:
        hv = hvp_fn(params, v)
        acc = acc + hv * hv
        k += 1
    return np.sqrt(acc / k)


def jacobi_from_probes(hvp_fn, params, probes):
    """|mean of v * Hv| over the given probes."""
    acc, k = 0.0, 0
    for v in probes:
        acc = acc + v * hvp_fn(params, v)
        k += 1
    return np.abs(acc / k)


def estimate_equilibrated(hvp_fn, params, n_probes, rng):
    """Row 2-norms of H, estimated from ``n_probes`` Rademacher probes."""
    n = np.size(getattr(params, "flat", params))
    return equilibrated_from_probes(hvp_fn, params, _probes(rng, n, n_probes))


def estimate_jacobi(hvp_fn, params, n_probes, rng):
    """|diag(H)| by Hutchinson's estimator."""
    n = np.size(getattr(params, "flat", params))
    return jacobi_from_probes(hvp_fn, params, _probes(rng, n, n_probes))


def gauss_newton_diag(g):
    """Diag(J^T J) for a scalar residual with Jacobian g: g * g."""
    g = np.asarray(g, dtype=np.float64)
    return g * g


def apply_diag(d, g, damping):
    """g / (sqrt(d) + damping), elementwise."""
    return np.asarray(g, dtype=np.float64) / (np.sqrt(np.asarray(d, dtype=np.float64)) + damping)


@dataclass
class PreconditionerState:
    """Running diagonal estimate.

    ``acc`` holds the mean (or EMA) of (Hv)^2 for the equilibrated kind and
    of v*Hv for the Jacobi kind; :attr:`d` applies sqrt / abs at read time.
    With ``ema_beta`` set the accumulator is an EMA with Adam-style bias
    correction, otherwise a plain running mean.
    """

    size: int
    kind: str = EQUILIBRATED
    refresh_every: int = 100
    damping: float = 1e-4
    ema_beta: Optional[float] = None
    acc: np.ndarray = field(default=None)
    n_samples: int = 0

    def __post_init__(self):
        if self.kind not in (EQUILIBRATED, JACOBI):
            raise ValueError(f"unknown preconditioner kind {self.kind!r}")
        if self.refresh_every < 1:
            raise ValueError("refresh_every must be >= 1")
        if self.acc is None:
            self.acc = np.zeros(self.size)

    def due(self, t):
        return t % self.refresh_every == 0

    def absorb(self, v, hv):
        stat = hv if self.kind == EQUILIBRATED else v * hv
        if self.ema_beta is not None:
            if self.kind == EQUILIBRATED:
                kernels.ema_square(self.acc, np.ascontiguousarray(hv), self.ema_beta)
            else:
                self.acc *= self.ema_beta
                self.acc += (1.0 - self.ema_beta) * stat
        else:
            if self.kind == EQUILIBRATED:
                stat = hv * hv
            self.acc += (stat - self.acc) / (self.n_samples + 1)
        self.n_samples += 1

    def refresh(self, hvp_fn, params, rng, n_probes=1):
        n = self.size
        for v in _probes(rng, n, n_probes):
            self.absorb(v, hvp_fn(params, v))

    @property
    def bias_correction(self):
        if self.ema_beta is None:
            return 1.0
        return 1.0 - self.ema_beta ** self.n_samples

    @property
    def d(self):
        if self.n_samples < 1:
            raise RuntimeError("preconditioner read before any probe was absorbed")
        stat = self.acc / self.bias_correction
        return np.sqrt(stat) if self.kind == EQUILIBRATED else np.abs(stat)
