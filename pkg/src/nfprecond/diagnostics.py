"""Hessian spectra, condition numbers and HVP sparsity."""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import DegenerateSpectrum, RefusalError

HESSIAN_LIMIT = 3000
DEFAULT_CUTOFF = 1e-8
DEFAULT_TAU = 1e-6


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray  # sorted by descending |lambda|
    kappa: float
    n_dropped: int
    n_params: int
    cutoff: float

    @property
    def lambda_max(self):
        return float(abs(self.eigenvalues[0]))

    @property
    def lambda_min_kept(self):
        return float(abs(self.eigenvalues[len(self.eigenvalues) - self.n_dropped - 1]))


@dataclass
class SparsityRecord:
    iteration: Optional[int]
    per_layer: dict
    global_fraction: float
    tau: float
    degenerate: bool = False


def full_hessian(loss_fn, params, limit=HESSIAN_LIMIT, return_asymmetry=False):
    """Dense Hessian from P exact HVPs against the unit vectors, symmetrized."""
    flat = np.asarray(getattr(params, "flat", params), dtype=np.float64)
    P = flat.size
    if P > limit:
        raise RefusalError(f"full Hessian needs {P} HVPs; limit is {limit} parameters", limit=limit)
    H = np.empty((P, P))
    e = np.zeros(P)
    for i in range(P):
        e[i] = 1.0
        H[:, i] = ad.hvp(loss_fn, flat, e)
        e[i] = 0.0
    asym = float(np.abs(H - H.T).max()) if P else 0.0
    H = 0.5 * (H + H.T)
    if return_asymmetry:
        return H, asym
    return H


def condition_number(H, cutoff=DEFAULT_CUTOFF, rank=None) -> SpectrumReport:
    """max|lambda| over the smallest |lambda| not below cutoff * max|lambda|.

    With ``rank`` given, the ``rank`` largest nonzero |lambda| are kept
    instead of applying the relative cutoff.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.size == 0:
        raise DegenerateSpectrum("empty matrix has no spectrum")
    if not np.isfinite(H).all():
        raise DegenerateSpectrum("matrix has non-finite entries")
    w = np.linalg.eigvalsh(0.5 * (H + H.T))
    w = w[np.argsort(-np.abs(w), kind="stable")]
    top = abs(w[0])
    if top == 0.0:
        raise DegenerateSpectrum("all eigenvalues are zero")
    if rank is None:
        kept = np.abs(w) >= cutoff * top
    else:
        kept = np.arange(len(w)) < rank
    kept &= np.abs(w) > 0.0
    n_kept = int(kept.sum())
    return SpectrumReport(w, float(top / np.abs(w[kept]).min()), len(w) - n_kept, H.shape[0], cutoff)


def scaling(d, damping=0.0):
    """Diagonal of D^{-1/2} with damping; coordinates with zero scale get 0."""
    root = np.sqrt(np.asarray(d, dtype=np.float64)) + damping
    out = np.zeros_like(root)
    np.divide(1.0, root, out=out, where=root > 0)
    return out


def preconditioned_hessian(H, d, damping=0.0):
    s = scaling(d, damping)
    return s[:, None] * np.asarray(H) * s[None, :]


def preconditioned_condition_number(H, d, damping=0.0, cutoff=DEFAULT_CUTOFF, rank=None):
    if np.any(np.asarray(d) < 0):
        raise ValueError("preconditioner diagonal must be non-negative")
    return condition_number(preconditioned_hessian(H, d, damping), cutoff, rank)


def equilibrated_exact(H):
    return np.linalg.norm(H, axis=1)


def jacobi_exact(H):
    return np.abs(np.diag(H))


def kappa_triplet(H, cutoff=DEFAULT_CUTOFF, damping=0.0):
    """Condition numbers of H and of its Jacobi / equilibrated rescalings.

    The cutoff sets the numerical rank of H. A congruence S H S with positive
    S has the same rank, so the rescaled spectra keep that many eigenvalues;
    a separate relative cutoff would land inside the continuum of tiny
    eigenvalues and make every kappa read about 1/cutoff.
    """
    raw = condition_number(H, cutoff)
    rank = raw.n_params - raw.n_dropped
    return {
        "raw": raw,
        "jacobi": preconditioned_condition_number(H, jacobi_exact(H), damping, cutoff, rank),
        "equilibrated": preconditioned_condition_number(H, equilibrated_exact(H), damping, cutoff, rank),
    }


def hvp_sparsity(hv, layout=None, tau=DEFAULT_TAU, iteration=None) -> SparsityRecord:
    """Fraction of entries with |Hv_i| <= tau * max|Hv|, per layer and overall."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    hv = np.ascontiguousarray(hv, dtype=np.float64)
    top = float(np.abs(hv).max()) if hv.size else 0.0
    degenerate = top == 0.0
    thresh = tau * top
    groups = {}
    if layout is not None:
        for e in layout:
            groups.setdefault(e.layer, []).append(e.slice)
    else:
        groups[0] = [slice(0, hv.size)]
    per_layer, small_total = {}, 0
    for layer, slices in groups.items():
        small = sum(kernels.count_small(np.ascontiguousarray(hv[s]), thresh) for s in slices)
        n = sum(s.stop - s.start for s in slices)
        per_layer[layer] = 1.0 if degenerate else small / n
        small_total += small
    glob = 1.0 if degenerate else small_total / hv.size
    return SparsityRecord(iteration, per_layer, glob, tau, degenerate)


# ---------------------------------------------------------------------------
# training-time tracking

CSV_FIELDS = ("iteration", "epoch", "loss", "metric_name", "metric_value", "wall_ms",
              "sparsity_global", "kappa_raw", "kappa_jacobi", "kappa_equilibrated")


@dataclass
class MetricsRecord:
    iteration: int
    epoch: int
    loss: float
    metric_name: str
    metric_value: float
    wall_ms: Optional[float] = None
    sparsity_global: Optional[float] = None
    kappa_raw: Optional[float] = None
    kappa_jacobi: Optional[float] = None
    kappa_equilibrated: Optional[float] = None
    sparsity_layers: dict = field(default_factory=dict)

    def row(self):
        def fmt(x):
            if x is None:
                return ""
            if isinstance(x, float):
                return repr(x)
            return str(x)
        return [fmt(getattr(self, k)) for k in CSV_FIELDS]


@dataclass
class DiagConfig:
    sparsity: bool = True
    kappa: bool = False
    tau: float = DEFAULT_TAU
    kappa_cutoff: float = DEFAULT_CUTOFF
    kappa_damping: float = 0.0
    kappa_limit: int = HESSIAN_LIMIT


class Tracker:
    """Decides when to emit a record and fills in the optional diagnostics.

    ``hvp_fn(iteration) -> (Hv, layout)`` and ``hessian_fn() -> H`` are only
    called when the corresponding diagnostic is enabled.
    """

    def __init__(self, config: DiagConfig, n_params: int, interval: int = 10):
        if interval < 1:
            raise ValueError("record interval must be >= 1")
        if config.kappa and n_params > config.kappa_limit:
            raise RefusalError(
                f"condition-number tracking needs the full Hessian; {n_params} parameters "
                f"exceeds the limit of {config.kappa_limit}", limit=config.kappa_limit)
        self.config = config
        self.interval = interval
        self.records: list[MetricsRecord] = []

    def due(self, iteration, total):
        return iteration % self.interval == 0 or iteration == total

    def record(self, iteration, epoch, loss, metric_name, metric_value, wall_ms=None,
               hvp_fn=None, hessian_fn=None):
        rec = MetricsRecord(iteration, epoch, loss, metric_name, metric_value, wall_ms)
        try:
            if self.config.sparsity and hvp_fn is not None:
                hv, layout = hvp_fn(iteration)
                sp = hvp_sparsity(hv, layout, self.config.tau, iteration)
                rec.sparsity_global = sp.global_fraction
                rec.sparsity_layers = sp.per_layer
            if self.config.kappa and hessian_fn is not None:
                ks = kappa_triplet(hessian_fn(), self.config.kappa_cutoff, self.config.kappa_damping)
                rec.kappa_raw = ks["raw"].kappa
                rec.kappa_jacobi = ks["jacobi"].kappa
                rec.kappa_equilibrated = ks["equilibrated"].kappa
        except Exception as exc:
            exc.args = (f"at iteration {iteration}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
            raise
        self.records.append(rec)
        return rec


def mean_sparsity(records):
    vals = [r.sparsity_global for r in records if r.sparsity_global is not None]
    return float(np.mean(vals)) if vals else float("nan")
