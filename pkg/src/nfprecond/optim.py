"""Optimizer step rules over flat parameter vectors.

Every ``*_step`` function takes an :class:`OptimizerState`, the
:class:`OptimizerConfig`, current parameters and gradient, and returns new
parameters; the state is updated in place. Curvature-based rules also take
``hvp_fn(v) -> H v`` at the current parameters and a numpy ``Generator``
for the Rademacher probes.
"""
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import kernels
from .autodiff import ParamVector
from .errors import ConfigError, NumericFailure
from .precond import EQUILIBRATED, PreconditionerState, rademacher

ALGORITHMS = ("sgd", "precond_sgd", "adam", "esgd", "esgd_max",
              "adahessian_e", "adahessian_j", "shampoo")
HVP_ALGORITHMS = ("esgd", "esgd_max", "adahessian_e", "adahessian_j")


@dataclass
class OptimizerConfig:
    algorithm: str = "adam"
    eta: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    damping: Optional[float] = None
    refresh_every: int = 100
    refresh_warmup: int = 0
    momentum: float = 0.0
    probes: int = 1
    shampoo_update_every: int = 20
    shampoo_eps: float = 1e-4
    shampoo_exponent: float = 0.25

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown optimizer {self.algorithm!r}; expected one of {ALGORITHMS}")
        if not self.eta > 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 < self.beta1 < self.beta2 < 1.0:
            raise ConfigError("need 0 < beta1 < beta2 < 1")
        if self.refresh_every < 1 or self.probes < 1 or self.shampoo_update_every < 1:
            raise ConfigError("refresh interval, probe count and shampoo interval must be >= 1")
        if self.refresh_warmup < 0:
            raise ConfigError("refresh_warmup must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.damping is not None and self.damping < 0:
            raise ConfigError("damping must be >= 0")
        if not self.shampoo_eps > 0:
            raise ConfigError("shampoo epsilon must be positive")

    @property
    def lam(self):
        """Damping, with per-algorithm defaults."""
        if self.damping is not None:
            return self.damping
        return 1e-8 if self.algorithm == "adam" else 1e-4

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class ShampooFactors:
    left: np.ndarray
    right: np.ndarray
    left_root: Optional[np.ndarray] = None
    right_root: Optional[np.ndarray] = None


@dataclass
class OptimizerState:
    size: int
    t: int = 0
    m: np.ndarray = None
    v: np.ndarray = None
    u: np.ndarray = None
    precond: Optional[PreconditionerState] = None
    shampoo: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("m", "v", "u"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.size))

    def arrays(self):
        """Named state arrays, for checkpointing."""
        out = {"m": self.m, "v": self.v, "u": self.u}
        if self.precond is not None:
            out["precond.acc"] = self.precond.acc
        for k, f in sorted(self.shampoo.items()):
            out[f"shampoo.{k}.left"] = f.left
            out[f"shampoo.{k}.right"] = f.right
            if f.left_root is not None:
                out[f"shampoo.{k}.left_root"] = f.left_root
                out[f"shampoo.{k}.right_root"] = f.right_root
        return out

    def scalars(self):
        out = {"t": self.t}
        if self.precond is not None:
            out["precond.n_samples"] = self.precond.n_samples
        return out

    def restore(self, arrays, scalars):
        self.t = int(scalars["t"])
        self.m, self.v, self.u = (np.array(arrays[k]) for k in ("m", "v", "u"))
        if self.precond is not None:
            self.precond.acc = np.array(arrays["precond.acc"])
            self.precond.n_samples = int(scalars["precond.n_samples"])
        self.shampoo = {}
        for name, arr in arrays.items():
            if not name.startswith("shampoo."):
                continue
            _, k, part = name.split(".")
            f = self.shampoo.setdefault(int(k), ShampooFactors(None, None))
            setattr(f, part, np.array(arr))


def init_state(config: OptimizerConfig, size: int) -> OptimizerState:
    state = OptimizerState(size)
    if config.algorithm == "esgd":
        state.precond = PreconditionerState(size, EQUILIBRATED, config.refresh_every,
                                            config.lam, ema_beta=config.beta2)
    return state


def _flat(params):
    return params.flat if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)


def _wrap(params, flat):
    return params.with_flat(flat) if isinstance(params, ParamVector) else flat


def _check(g, what="gradient"):
    g = np.ascontiguousarray(g, dtype=np.float64)
    if not np.isfinite(g).all():
        raise NumericFailure(f"non-finite {what} passed to optimizer")
    return g


def needs_probes(config: OptimizerConfig, state: OptimizerState) -> bool:
    """Whether the next step consumes Hessian-vector products."""
    a = config.algorithm
    if a in ("esgd", "esgd_max"):
        return state.t % config.refresh_every == 0 or state.t < config.refresh_warmup
    return a in ("adahessian_e", "adahessian_j")


def draw_probes(config: OptimizerConfig, state: OptimizerState, rng):
    if not needs_probes(config, state):
        return []
    return [rademacher(rng, state.size) for _ in range(config.probes)]


def _pairs(config, state, hvp_fn, rng):
    return [(v, _check(hvp_fn(v), "Hessian-vector product")) for v in draw_probes(config, state, rng)]


# ---------------------------------------------------------------------------
# first-order rules


def sgd_step(state, config, params, g):
    g = _check(g)
    new = _flat(params) - config.eta * g
    state.t += 1
    return _wrap(params, new)


def precond_sgd_step(state, config, params, g, D):
    """theta - eta * g / (sqrt(D) + damping)."""
    g = _check(g)
    D = np.ascontiguousarray(D, dtype=np.float64)
    if np.any(D < 0):
        raise ValueError("diagonal preconditioner must be non-negative")
    theta = _flat(params).copy()
    kernels.diag_step(theta, g, D, config.eta, 1.0, config.lam)
    state.t += 1
    return _wrap(params, theta)


def _moment_update(state, config, params, g, second):
    theta = _flat(params).copy()
    state.t += 1
    bc1 = 1.0 - config.beta1 ** state.t
    bc2 = 1.0 - config.beta2 ** state.t
    kernels.moment_step(theta, state.m, state.v, g, np.ascontiguousarray(second),
                        config.eta, config.beta1, config.beta2, bc1, bc2, config.lam)
    return _wrap(params, theta)


def adam_step(state, config, params, g):
    g = _check(g)
    return _moment_update(state, config, params, g, g * g)


# ---------------------------------------------------------------------------
# curvature-aware rules


def _direction(state, config, g):
    """The gradient, or its bias-corrected EMA when ``config.momentum`` > 0."""
    mu = config.momentum
    if mu == 0.0:
        return g
    state.m *= mu
    state.m += (1.0 - mu) * g
    return state.m / (1.0 - mu ** (state.t + 1))


def esgd_apply(state, config, params, g, pairs):
    """ESGD given this step's (probe, Hv) pairs (empty between refreshes)."""
    g = _check(g)
    pc = state.precond
    if pc is None:
        raise RuntimeError("ESGD state has no preconditioner; use init_state")
    for v, hv in pairs:
        pc.absorb(v, hv)
    theta = _flat(params).copy()
    kernels.diag_step(theta, _direction(state, config, g), pc.acc, config.eta, pc.bias_correction, config.lam)
    state.t += 1
    return _wrap(params, theta)


def esgd_step(state, config, params, g, hvp_fn, rng):
    return esgd_apply(state, config, params, g, _pairs(config, state, hvp_fn, rng))


def esgd_max_apply(state, config, params, g, pairs):
    """Infinity-norm accumulator u = max(beta2 u, (Hv)^2); no bias correction."""
    g = _check(g)
    for _, hv in pairs:
        kernels.max_square(state.u, np.ascontiguousarray(hv), config.beta2)
    theta = _flat(params).copy()
    kernels.diag_step(theta, _direction(state, config, g), state.u, config.eta, 1.0, config.lam)
    state.t += 1
    return _wrap(params, theta)


def esgd_max_step(state, config, params, g, hvp_fn, rng):
    return esgd_max_apply(state, config, params, g, _pairs(config, state, hvp_fn, rng))


def adahessian_diag(v, hv, variant):
    """Single-probe second-moment input: (Hv)^2 for E, (v * Hv)^2 for J."""
    return adahessian_input([(v, hv)], variant)


def adahessian_input(pairs, variant):
    """Second-moment input from several probes.

    E averages (Hv)^2 over probes. J first averages the Hutchinson diagonal
    estimate v * Hv over probes and then squares it. With one Rademacher
    probe the two coincide, since v * v = 1.
    """
    if variant == "E":
        return sum(hv * hv for _, hv in pairs) / len(pairs)
    if variant == "J":
        d = sum(v * hv for v, hv in pairs) / len(pairs)
        return d * d
    raise ValueError(f"unknown AdaHessian variant {variant!r}")


def adahessian_apply(state, config, params, g, pairs, variant, diag_fn=None):
    g = _check(g)
    if not pairs and diag_fn is None:
        raise ValueError("AdaHessian needs at least one probe per step")
    if diag_fn is not None:
        second = diag_fn(g, pairs)
    else:
        second = adahessian_input(pairs, variant)
    return _moment_update(state, config, params, g, second)


def adahessian_step(state, config, params, g, hvp_fn, rng, variant="E", diag_fn=None):
    """Adam-style moments with a Hessian-based second-moment input.

    ``diag_fn(g, pairs)`` overrides the curvature input; with
    ``lambda g, _: g * g`` this reduces to Adam.
    """
    pairs = _pairs(config, state, hvp_fn, rng) if diag_fn is None else []
    return adahessian_apply(state, config, params, g, pairs, variant, diag_fn)


# ---------------------------------------------------------------------------
# shampoo


def matrix_inverse_root(A, exponent, eps):
    """(A + eps I)^(-exponent) for symmetric A; eigenvalues clamped at eps."""
    A = np.asarray(A, dtype=np.float64)
    if not np.isfinite(A).all():
        raise NumericFailure("non-finite Shampoo factor")
    try:
        w, Q = np.linalg.eigh(A + eps * np.eye(A.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise NumericFailure(f"eigendecomposition failed: {exc}") from exc
    w = np.maximum(w, eps)
    return (Q * w ** (-exponent)) @ Q.T


def shampoo_precondition(G, L, R, eps, exponent=0.25):
    return matrix_inverse_root(L, exponent, eps) @ G @ matrix_inverse_root(R, exponent, eps)


def _blocks(layout, size):
    if layout is None:
        return None
    out = []
    for e in layout:
        shape = e.shape if len(e.shape) == 2 else (1, e.size)
        out.append((e.slice, shape))
    return out


def shampoo_step(state, config, params, g, layout=None):
    """Per-layer two-factor Shampoo; without a layout every entry is a 1x1 block."""
    g = _check(g)
    theta = _flat(params).copy()
    eps, p = config.shampoo_eps, config.shampoo_exponent
    refresh = state.t % config.shampoo_update_every == 0
    blocks = _blocks(layout, theta.size)
    if blocks is None:
        f = state.shampoo.get(0)
        if f is None:
            f = state.shampoo[0] = ShampooFactors(np.zeros(theta.size), np.zeros(theta.size))
        f.left += g * g
        f.right += g * g
        if refresh or f.left_root is None:
            f.left_root = np.maximum(f.left + eps, eps) ** (-p)
            f.right_root = np.maximum(f.right + eps, eps) ** (-p)
        theta -= config.eta * (f.left_root * g * f.right_root)
    else:
        for k, (sl, shape) in enumerate(blocks):
            G = g[sl].reshape(shape)
            f = state.shampoo.get(k)
            if f is None:
                f = state.shampoo[k] = ShampooFactors(np.zeros((shape[0],) * 2), np.zeros((shape[1],) * 2))
            f.left += G @ G.T
            f.right += G.T @ G
            if refresh or f.left_root is None:
                f.left_root = matrix_inverse_root(f.left, p, eps)
                f.right_root = matrix_inverse_root(f.right, p, eps)
            theta[sl] -= config.eta * (f.left_root @ G @ f.right_root).reshape(-1)
    state.t += 1
    return _wrap(params, theta)


# ---------------------------------------------------------------------------
# dispatch


def apply_step(config, state, params, g, pairs=(), layout=None, D=None):
    """One step of ``config.algorithm`` given precomputed (probe, Hv) pairs."""
    a = config.algorithm
    if a == "sgd":
        return sgd_step(state, config, params, g)
    if a == "precond_sgd":
        return precond_sgd_step(state, config, params, g, np.ones(state.size) if D is None else D)
    if a == "adam":
        return adam_step(state, config, params, g)
    if a == "esgd":
        return esgd_apply(state, config, params, g, list(pairs))
    if a == "esgd_max":
        return esgd_max_apply(state, config, params, g, list(pairs))
    if a in ("adahessian_e", "adahessian_j"):
        return adahessian_apply(state, config, params, g, list(pairs), a[-1].upper())
    return shampoo_step(state, config, params, g, layout)


def step(config, state, params, g, hvp_fn=None, rng=None, layout=None, D=None):
    pairs = _pairs(config, state, hvp_fn, rng) if needs_probes(config, state) else []
    return apply_step(config, state, params, g, pairs, layout, D)
